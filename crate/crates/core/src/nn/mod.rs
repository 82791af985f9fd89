//! Minimal differentiable building blocks: kernels, a reverse-mode tape,
//! parameter storage and the layers built on them.

pub mod kernels;
pub mod layers;
pub mod params;
pub mod tape;

pub use kernels::Window;
pub use layers::{Conv, Dense, ParamBuilder, SeparableConv};
pub use params::{Gradients, Initializer, ParamId, ParamStore};
pub use tape::{Tape, Var};
