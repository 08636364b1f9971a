//! Minimal CPU neural-network toolkit: tensors, a parameter arena, layers
//! with hand-written backward passes, losses and optimizers.

pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tensor;

pub use layers::{relu, relu_backward, sigmoid, Conv2d, ConvTranspose2d, Linear};
pub use optim::{Adam, Sgd};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tensor::Tensor;
