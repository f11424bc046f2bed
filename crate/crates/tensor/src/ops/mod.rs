pub(crate) mod conv;
pub(crate) mod elementwise;
pub(crate) mod linalg;
pub(crate) mod norm;
pub(crate) mod shape;

pub use conv::{conv2d_output_size, conv_transpose2d_output_size};
pub use norm::{BatchNormMode, RunningStats};
