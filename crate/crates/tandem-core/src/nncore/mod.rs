//! Minimal numeric core: tensors, layer forward/backward passes and Adam,
//! enough to train every model in this crate on a CPU.

pub mod adam;
pub mod layers;
pub mod ops;
pub mod param;
pub mod rng;
pub mod tensor;

pub use adam::{Adam, AdamParams, AdamState};
pub use layers::{ffn_forward, AttnProj, Ffn, Linear, RmsNorm, RMS_EPS};
pub use ops::{argmax_first, gelu, gelu_grad, masked_attention, softmax, KeySpan};
pub use param::{ParamId, Parameter, ParameterStore};
pub use rng::CounterRng;
pub use tensor::{Scalar, Tensor};
