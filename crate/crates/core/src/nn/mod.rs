//! Tensor kernels with hand-written backward passes.

pub mod cell;
pub mod conv;
pub mod fmap;
pub mod norm;
pub mod params;
pub mod pool;

pub use cell::{convlstm_cell_step, CellStep};
pub use fmap::Fmap;
pub use norm::NormMode;
pub use params::{ParamId, ParamSpec, ParamStore};
