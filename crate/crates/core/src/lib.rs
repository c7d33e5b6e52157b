//! Recurrent spiking visuomotor policy with mixture-model action refinement
//! and a geometric skill selector, plus a synthetic benchmark to exercise it.

pub mod autograd;
pub mod error;
pub mod gmm;
pub mod harness;
pub mod io;
pub mod layers;
pub mod lgss;
pub mod model;
pub mod sdfe;
pub mod spatial;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
