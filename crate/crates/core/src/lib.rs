//! Valuation and selection of pairwise preference data.
//!
//! The crate scores `(prompt, chosen, rejected)` training pairs for
//! preference alignment (DPO and SLiC) on small autoregressive policies:
//!
//! - exact influence scores (gradient dot products against a validation
//!   set, identity Hessian) together with their closed-form DPO/SLiC
//!   instantiations and a brute-force leave-one-out oracle,
//! - the truncated influence band (keep medium-influence pairs only),
//! - the forward-only proxies LossDiff and implicit reward margin (IRM) and
//!   the combined LossDiff-IRM selector,
//! - synthetic data with a planted reward, training loops, and the
//!   end-to-end experiment recipes that tie everything together.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod influence;
pub mod objective;
pub mod policy;
pub mod proxy;
pub mod rng;
pub mod selection;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
pub use objective::{Objective, ObjectiveKind};
pub use policy::{Arch, GradientVector, ModelConfig, PolicyModel, TokenSeq};
pub use data::PreferencePair;
