//! Multi-scale attention over a hierarchy of token grids, the Atlas image
//! classifier built from it, and the tooling to check both: a naive
//! reference implementation, manual gradients with finite-difference checks,
//! operation counting and a toy training task.

pub mod attention;
pub mod bench;
pub mod block;
pub mod checkpoint;
pub mod cache;
pub mod counter;
pub mod error;
pub mod gradcheck;
pub mod layout;
pub mod model;
pub mod oracle;
pub mod params;
pub mod summarize;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
