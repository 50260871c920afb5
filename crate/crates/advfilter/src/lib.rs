//! Pixel-denoising defenses against L∞ adversarial attacks.
//!
//! The crate implements and evaluates three families of denoising defenses
//! in front of an image classifier:
//!
//! * **additive** denoisers that predict the inverse perturbation,
//! * **pixel-wise filtering** denoisers that predict an exclusive kernel per
//!   pixel (kernel prediction), and
//! * **predictive perturbation-aware filtering** (PA-Filt): a dual-decoder
//!   Y-Net whose two filter branches specialize by perturbation strength,
//!   blended by an uncertainty-aware fusion network.
//!
//! Around the denoisers sits a full experiment pipeline: L∞ PGD attack
//! generation over a grid of strengths, multi-domain training protocols,
//! adversarial training of the classifier, and an evaluation harness that
//! produces accuracy/quality tables, plots and figure strips.
//!
//! Start with the runnable examples (`cargo run --release --example ...`)
//! or the `advfilter` binary (`advfilter reproduce smoke`).

pub mod attack;
pub mod backbone;
pub mod classifier;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod filtering;
pub mod imaging;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
pub use imaging::{ImageTensor, LabeledImage, QualityReport};
