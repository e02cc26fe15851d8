//! Cascaded convolutional color constancy.
//!
//! A cascade of small convolutional estimators refines an illuminant guess
//! stage by stage: every stage sees the image corrected by the estimate of the
//! stage before it, and the running product of the stage estimates is the
//! cascade's hypothesis at that depth.
//!
//! ```text
//! X_1 = X,   e_l = f_l(X_l),   X_{l+1} = X_l / e_l,   c_l = e_1 ⊙ … ⊙ e_l
//! loss = Σ_l w_l · angle(c_l, y)
//! ```
//!
//! The crate is `no_std` (it needs `alloc`) and contains everything that is
//! pure computation: color types and von Kries correction, the Minkowski
//! family of learning-free estimators, a define-by-run reverse-mode autodiff
//! tape, the cascade model and its losses, augmentation, training, synthetic
//! Mondrian scenes and the evaluation protocol. File formats, reports and the
//! command-line driver live in the `c4` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
pub mod autodiff;
pub mod cascade;
pub mod color;
pub mod data;
pub mod error;
pub mod eval;
pub mod optim;
pub mod statics;
pub mod train;

pub use color::{angular_error, gamma_decode, gamma_encode, normalize_illuminant, von_kries_correct};
pub use color::{AngularError, Illuminant, LinearImage};
pub use error::{Error, Result};
