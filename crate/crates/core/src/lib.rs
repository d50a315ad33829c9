pub mod augment;
pub mod autodiff;
pub mod classifier;
pub mod cli;
pub mod data;
pub mod error;
mod kernels;
pub mod nn;
pub mod style;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub struct Autodiff;
    #[doc = include_str!("../../../book/src/augment.md")]
    pub struct Augment;
    #[doc = include_str!("../../../book/src/style.md")]
    pub struct Style;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
