//! Domain-aware multimodal retrieval with adaptive context truncation, and
//! retrieval-aware preference fine-tuning on small models.
//!
//! The pipeline runs in stages:
//!
//! 1. [`router`] assigns each image to a domain.
//! 2. [`retriever`] trains one image–text encoder pair per domain with a
//!    symmetric contrastive loss.
//! 3. [`index`] stores encoded reports, retrieves the top `k` for an image
//!    and cuts the list at the first sharp drop in score.
//! 4. [`noise`] builds an unrelated, diffusion-noised image for each sample.
//! 5. [`preference`] queries an answer model four ways and sorts samples into
//!    cross-modal and overall-alignment preference pairs.
//! 6. [`dpo`] fine-tunes a [`policy::Policy`] on those pairs.
//!
//! [`eval`] scores predictions, [`theory`] estimates input weights and the
//! constants of the sufficient conditions for their movement, and [`synth`]
//! generates planted data for all of the above.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dpo;
pub mod error;
pub mod eval;
pub mod index;
pub mod noise;
pub mod policy;
pub mod preference;
pub mod retriever;
pub mod router;
pub mod synth;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use tensor::{Embedding, FeatureVector, Matrix, SeededRng, SimilarityMatrix};
