pub mod autodiff;
pub mod checkpoint;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod feature;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod visual;
pub mod wav;

pub use error::{Error, Result};
