//! Uniform traversal of learnable tensors.
//!
//! Gradients are stored in the same structs as the parameters they belong to,
//! so one visitor serves the optimizer, checkpointing and finite differences.

use crate::tensor::{LinearWeights, Matrix, NormParams};

pub trait ParamSet {
    /// Visit every tensor as `(name, extents, values)` in a fixed order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, _, v| v.fill(0.0));
        z
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    /// All values concatenated in visiting order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    /// Overwrite all values from a flat slice produced by [`flatten`](Self::flatten).
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        self.visit_mut("", &mut |_, _, v| {
            v.copy_from_slice(&flat[at..at + v.len()]);
            at += v.len();
        });
        assert_eq!(at, flat.len(), "flat parameter vector length mismatch");
    }

    /// `self += scale * other`, elementwise over matching structures.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let flat = other.flatten();
        let mut at = 0;
        self.visit_mut("", &mut |_, _, v| {
            for x in v.iter_mut() {
                *x += scale * flat[at];
                at += 1;
            }
        });
    }

    fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        self.visit("", &mut |_, _, v| {
            for x in v {
                m = m.max(x.abs());
            }
        });
        m
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl ParamSet for Matrix {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(prefix, &[self.rows(), self.cols()], self.as_slice());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = [self.rows(), self.cols()];
        f(prefix, &shape, self.as_mut_slice());
    }
}

impl ParamSet for LinearWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.weight.visit(&join(prefix, "weight"), f);
        f(&join(prefix, "bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.weight.visit_mut(&join(prefix, "weight"), f);
        let n = self.bias.len();
        f(&join(prefix, "bias"), &[n], &mut self.bias);
    }
}

impl ParamSet for NormParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "gain"), &[self.gain.len()], &self.gain);
        f(&join(prefix, "bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let n = self.gain.len();
        f(&join(prefix, "gain"), &[n], &mut self.gain);
        f(&join(prefix, "bias"), &[n], &mut self.bias);
    }
}
