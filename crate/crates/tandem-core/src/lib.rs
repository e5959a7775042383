//! Tandem decoding at desk scale: a small autoregressive model attends to a
//! large model's block-wise representations, optionally wrapped in a
//! draft-and-verify loop with an adaptive block-length router.

pub mod deeptandem;
pub mod error;
pub mod nncore;
pub mod router;
pub mod speed;
pub mod tandem;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};

// placeholder until the CLI lands
pub fn run_cli() -> i32 { 0 }
