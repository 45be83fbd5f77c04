//! Neighborhood non-local denoising for CT-like images.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod kernels;
pub mod nonlocal;
pub mod params;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, OpTag, Var};
pub use params::{Binder, Params};
pub use tensor::element::Element;
pub use tensor::Tensor;
