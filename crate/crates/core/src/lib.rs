//! Spatio-temporal activation reprojection (STAR) networks for pose-based
//! action recognition.

pub mod eval;
pub mod net;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod tensor;
pub mod train;
