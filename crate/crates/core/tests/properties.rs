use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use atlas_msa::bench::{analytic_block_pairs, traverse_block};
use atlas_msa::block::CommunicationMode;
use atlas_msa::checkpoint::{decode, encode};
use atlas_msa::layout::{window_merge, window_partition, LayoutSpec};
use atlas_msa::model::{AtlasConfig, AtlasModel};
use atlas_msa::oracle::{check_equivalence, BlockFixture};
use atlas_msa::summarize::{summarize, summarize_bwd};
use atlas_msa::tensor::{softmax_rows, Matrix, TensorMap};

/// `(grid, k, s)` with `k` a multiple of `s` and `grid = k * s^j`.
fn layout_params() -> impl Strategy<Value = (usize, usize, usize)> {
    (2usize..=4, 1usize..=3, 0u32..=2).prop_map(|(s, m, j)| (s * m * s.pow(j), s * m, s))
}

fn mode() -> impl Strategy<Value = CommunicationMode> {
    prop::sample::select(CommunicationMode::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn windows_partition_every_scale((grid, k, s) in layout_params()) {
        let layout = LayoutSpec::build(grid, k, s).unwrap();
        prop_assert!(layout.grid_side(layout.levels() - 1) <= k);
        for l in 0..layout.levels() {
            let side = layout.grid_side(l);
            let mut seen = vec![0u8; side * side];
            for w in 0..layout.num_windows(l) {
                for &t in layout.window_tokens(l, w) {
                    seen[t] += 1;
                    prop_assert_eq!(layout.window_of(l, t / side, t % side), w);
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn ancestors_contain_the_pooled_region((grid, k, s) in layout_params()) {
        let layout = LayoutSpec::build(grid, k, s).unwrap();
        for l in 0..layout.levels() {
            let side = layout.grid_side(l);
            for t in 0..side * side {
                let w = layout.window_of(l, t / side, t % side);
                let mut f = 1;
                for m in l + 1..layout.levels() {
                    f *= s;
                    let expect = layout.window_of(m, t / side / f, t % side / f);
                    prop_assert_eq!(layout.ancestor_window(l, w, m), expect);
                }
            }
        }
    }

    #[test]
    fn groups_are_pooled_parent_windows((grid, k, s) in layout_params()) {
        let layout = LayoutSpec::build(grid, k, s).unwrap();
        for l in 1..layout.levels() {
            prop_assert_eq!(layout.num_groups(l), layout.num_windows(l - 1));
            let (fine, coarse) = (layout.grid_side(l - 1), layout.grid_side(l));
            for g in 0..layout.num_groups(l) {
                let parent = layout.window_tokens(l - 1, layout.parent_window(l, g));
                let mut pooled: Vec<usize> = parent.iter().map(|&t| (t / fine / s) * coarse + t % fine / s).collect();
                pooled.sort_unstable();
                pooled.dedup();
                let mut group = layout.group_tokens(l, g).to_vec();
                group.sort_unstable();
                prop_assert_eq!(pooled, group);
            }
        }
    }

    #[test]
    fn partition_merge_round_trip(b in 1usize..3, wps in 1usize..4, k in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
        let side = wps * k;
        let x = TensorMap::random_normal([b, side, side, c], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let parts = window_partition(&x, k).unwrap();
        prop_assert_eq!(parts.len(), b * wps * wps);
        prop_assert_eq!(window_merge(&parts, x.shape(), k).unwrap(), x);
    }

    #[test]
    fn max_pool_dominates_and_routes_gradient_mass(s in 2usize..4, out in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = TensorMap::random_normal([1, s * out, s * out, c], 1.0, &mut rng);
        let (y, ctx) = summarize(&x, s).unwrap();
        for oy in 0..out {
            for ox in 0..out {
                for ch in 0..c {
                    let patch_max = (0..s * s)
                        .map(|p| x.token(0, oy * s + p / s, ox * s + p % s)[ch])
                        .fold(f64::NEG_INFINITY, f64::max);
                    prop_assert_eq!(y.token(0, oy, ox)[ch], patch_max);
                }
            }
        }
        let up = TensorMap::random_normal(y.shape(), 1.0, &mut rng);
        let dx = summarize_bwd(&up, &ctx).unwrap();
        let nonzero = dx.as_slice().iter().filter(|v| **v != 0.0).count();
        prop_assert_eq!(nonzero, up.as_slice().iter().filter(|v| **v != 0.0).count());
        let (a, b): (f64, f64) = (dx.as_slice().iter().sum(), up.as_slice().iter().sum());
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let x = Matrix::random_normal(rows, cols, 3.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let y = softmax_rows(&x);
        let shifted = Matrix::from_vec(rows, cols, x.as_slice().iter().map(|v| v + shift).collect()).unwrap();
        let z = softmax_rows(&shifted);
        for r in 0..rows {
            prop_assert!(y.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in y.row(r).iter().zip(z.row(r)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pair_counts_match_the_walk((grid, k, s) in layout_params(), mode in mode(), first_raw in 0usize..3) {
        let layout = LayoutSpec::build(grid, k, s).unwrap();
        let first = first_raw % layout.levels();
        let walk = traverse_block(&layout, first, mode, 4, 1);
        prop_assert_eq!(walk.attention_pairs(), analytic_block_pairs(&layout, first, mode));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_fixtures_match_the_oracle(
        (grid, window) in prop::sample::select(vec![(4usize, 2usize), (8, 4), (8, 2), (16, 4), (8, 8)]),
        heads in 1usize..3,
        batch in 1usize..3,
        first_raw in 0usize..2,
        seed in any::<u64>(),
        mode in mode(),
    ) {
        let levels = LayoutSpec::build(grid, window, 2).unwrap().levels();
        let f = BlockFixture { grid, window, stride: 2, channels: 4, heads, batch, first: first_raw % levels, seed };
        let case = check_equivalence(&f, mode, false).unwrap();
        prop_assert!(case.passed(), "{:?}", case);
    }

    #[test]
    fn checkpoint_round_trip(classes in 2usize..5, depth in 1usize..3, seed in any::<u64>()) {
        let config = AtlasConfig {
            image_side: 8,
            patch: 2,
            in_channels: 1,
            window: 2,
            stride: 2,
            channels: 4,
            heads: 2,
            depths: vec![depth, 1],
            classes,
            seed,
            ..AtlasConfig::default()
        };
        let model = AtlasModel::new(config).unwrap();
        let back = decode(&encode(&model)).unwrap();
        prop_assert_eq!(back.config, model.config);
        prop_assert_eq!(back.params, model.params);
    }
}
