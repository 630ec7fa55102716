pub mod kernels;
pub mod tape;

pub use kernels::{Conv1dAttrs, Padding};
pub use tape::{Gradients, Graph, Var};
