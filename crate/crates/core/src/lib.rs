//! Recurrent 3D dense U-Net for volumetric tumor segmentation.

pub mod autograd;
mod binio;
pub mod convlstm;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
