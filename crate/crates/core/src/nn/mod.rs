//! Minimal deterministic neural-network engine.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;

pub use gradcheck::{gradient_check, Differentiable, GradCheckReport};
pub use layers::{conv2d_forward, relu, Conv2d, Dense, Layer, Sequential};
pub use loss::{cross_entropy, softmax};
pub use optim::Adam;
pub use tensor::{NnError, Tensor};
