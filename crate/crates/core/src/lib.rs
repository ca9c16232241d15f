//! Change detection on co-registered image pairs with a Siamese multi-scale
//! encoder and a hybrid difference module that mixes convolutional local
//! features with retention-based (distance-decayed attention) global features.
//!
//! Everything runs on a small deterministic kernel set with hand-derived
//! backward passes, validated by a central finite-difference harness. The
//! `parallel` feature (default) fans data-parallel loops over rayon; without
//! it the same loops run sequentially with identical results.

pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod par;
pub mod params;
pub mod retention;
pub mod scalar;
pub mod tensor;

pub use error::{CoreError, Result};
pub use params::{GradStore, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
