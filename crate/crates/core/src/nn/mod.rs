//! Minimal CPU neural-network engine: NCHW tensors, a U-Net with hand-written
//! backward pass, and SGD.

pub mod layers;
pub mod optim;
pub mod tensor;
pub mod unet;

pub use optim::{poly_lr, Sgd};
pub use tensor::Tensor;
pub use unet::{sigmoid, Gradients, Tape, UNet, UNetConfig};
