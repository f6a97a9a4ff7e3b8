pub mod calibrate;
pub mod elbo;
pub mod extract;
pub mod synth;
pub mod train;
pub mod train_ubm;

pub(crate) mod common;
