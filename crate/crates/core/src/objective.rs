//! Per-pair DPO and SLiC losses.
//!
//! Both objectives are functions of the reward difference
//!
//! ```text
//! Δθ = β·[log πθ(y_w|x) − log π_ref(y_w|x)] − β·[log πθ(y_l|x) − log π_ref(y_l|x)]
//! ```
//!
//! DPO: `softplus(−Δθ)`; SLiC: `max(0, 1 − Δθ)`. The reference model is frozen
//! and never contributes to a gradient.

use serde::{Deserialize, Serialize};

use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::policy::{seq_logprob, GradientVector, LogProbTable, PolicyModel};

pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Dpo,
    Slic,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dpo" => Ok(Self::Dpo),
            "slic" => Ok(Self::Slic),
            other => Err(Error::InvalidArgument(format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveKind {
    pub kind: Objective,
    pub beta: f64,
}

impl ObjectiveKind {
    pub fn new(kind: Objective, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        Ok(Self { kind, beta })
    }

    pub fn dpo(beta: f64) -> Self {
        Self::new(Objective::Dpo, beta).expect("positive beta")
    }

    pub fn slic(beta: f64) -> Self {
        Self::new(Objective::Slic, beta).expect("positive beta")
    }

    pub fn loss_from_delta(&self, delta: f64) -> f64 {
        match self.kind {
            Objective::Dpo => softplus(-delta),
            Objective::Slic => (1.0 - delta).max(0.0),
        }
    }

    /// `d loss / d Δθ`. The SLiC kink at `Δθ = 1` takes the inactive branch.
    pub fn dloss_ddelta(&self, delta: f64) -> f64 {
        match self.kind {
            Objective::Dpo => -sigmoid(-delta),
            Objective::Slic => {
                if 1.0 - delta > 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl Default for ObjectiveKind {
    fn default() -> Self {
        Self::dpo(DEFAULT_BETA)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sequence log-likelihoods of a pair's two responses under one model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairLogProbs {
    pub chosen: f64,
    pub rejected: f64,
}

impl PairLogProbs {
    pub fn of(model: &PolicyModel, pair: &PreferencePair) -> Result<Self> {
        Ok(Self {
            chosen: seq_logprob(model, &pair.prompt, &pair.chosen)?,
            rejected: seq_logprob(model, &pair.prompt, &pair.rejected)?,
        })
    }

    pub fn from_table(table: &LogProbTable, pair: &PreferencePair) -> Result<Self> {
        Ok(Self {
            chosen: table.seq_logprob(&pair.prompt, &pair.chosen)?,
            rejected: table.seq_logprob(&pair.prompt, &pair.rejected)?,
        })
    }

    pub fn delta(&self, reference: &PairLogProbs, beta: f64) -> f64 {
        beta * (self.chosen - reference.chosen) - beta * (self.rejected - reference.rejected)
    }
}

/// Reward difference Δθ (the implicit reward margin).
pub fn delta_theta(
    model: &PolicyModel,
    reference: &PolicyModel,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64> {
    model.ensure_same_shape(reference)?;
    let policy = PairLogProbs::of(model, pair)?;
    let anchor = PairLogProbs::of(reference, pair)?;
    Ok(policy.delta(&anchor, beta))
}

pub fn pair_loss(
    obj: &ObjectiveKind,
    model: &PolicyModel,
    reference: &PolicyModel,
    pair: &PreferencePair,
) -> Result<f64> {
    Ok(obj.loss_from_delta(delta_theta(model, reference, pair, obj.beta)?))
}

/// `g_w − g_l`, the gradient of `log π(y_w|x) − log π(y_l|x)`.
pub fn preference_direction(model: &PolicyModel, pair: &PreferencePair) -> Result<GradientVector> {
    let mut grad = GradientVector::zeros_like(model);
    model.add_seq_logprob_grad(&pair.prompt, &pair.chosen, 1.0, grad.values_mut())?;
    model.add_seq_logprob_grad(&pair.prompt, &pair.rejected, -1.0, grad.values_mut())?;
    Ok(grad)
}

/// Accumulates `weight * ∇θ loss` into `out` and returns the pair's loss.
/// `anchor` holds the reference log-likelihoods for the pair.
pub(crate) fn add_pair_loss_grad(
    obj: &ObjectiveKind,
    model: &PolicyModel,
    anchor: &PairLogProbs,
    pair: &PreferencePair,
    weight: f64,
    out: &mut [f64],
) -> Result<f64> {
    let policy = PairLogProbs::of(model, pair)?;
    let delta = policy.delta(anchor, obj.beta);
    let coeff = weight * obj.beta * obj.dloss_ddelta(delta);
    if coeff != 0.0 {
        model.add_seq_logprob_grad(&pair.prompt, &pair.chosen, coeff, out)?;
        model.add_seq_logprob_grad(&pair.prompt, &pair.rejected, -coeff, out)?;
    }
    Ok(obj.loss_from_delta(delta))
}

/// Exact gradient of [`pair_loss`] with respect to the policy parameters.
pub fn pair_loss_grad(
    obj: &ObjectiveKind,
    model: &PolicyModel,
    reference: &PolicyModel,
    pair: &PreferencePair,
) -> Result<GradientVector> {
    model.ensure_same_shape(reference)?;
    let anchor = PairLogProbs::of(reference, pair)?;
    let mut grad = GradientVector::zeros_like(model);
    add_pair_loss_grad(obj, model, &anchor, pair, 1.0, grad.values_mut())?;
    Ok(grad)
}
