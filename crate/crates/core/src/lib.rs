//! Risk-aware multimodal trajectory planning.
//!
//! The crate covers the whole offline pipeline: synthetic long-tail scenarios
//! ([`scenario`]), structured teacher annotations ([`annotation`]), text
//! embeddings of those annotations ([`embedding`]), the tri-modal student
//! network ([`model`]), its training loop ([`training`]) and trajectory
//! metrics ([`evaluation`]).

pub mod scenario;
pub mod annotation;
pub mod embedding;
pub mod model;
pub mod training;
pub mod evaluation;
