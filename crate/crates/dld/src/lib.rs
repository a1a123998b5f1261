//! Cost-efficient sequence recognition on a synthetic text-spotting corpus:
//! a high-resolution teacher distilled into a low-resolution student whose
//! input scale is chosen per image by a Gumbel-Softmax-trained selector.

pub mod artifacts;
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod params;
pub mod rng;
pub mod selector;
pub mod recognizer;
pub mod synthtext;
pub mod trainer;
pub mod tensor;
pub mod verification;

pub use error::{Error, Result};
pub use tensor::{Array, Tensor};
