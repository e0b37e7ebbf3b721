//! Forward-only proxies for influence.
//!
//! LossDiff compares a pair's loss under the current model and under an
//! auxiliary model aligned on the validation set; the implicit reward margin
//! (IRM) is the pair's Δθ itself and needs no validation data.

use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::influence::val_gradient;
use crate::objective::{delta_theta, pair_loss, ObjectiveKind, PairLogProbs};
use crate::policy::{LogProbTable, PolicyModel};
use crate::trainer::{align_train, TrainOpts};

/// One training stage on the validation pairs starting from `init`.
pub fn train_aux_val_model(
    init: &PolicyModel,
    reference: &PolicyModel,
    val_pairs: &[PreferencePair],
    obj: &ObjectiveKind,
    opts: &TrainOpts,
) -> Result<PolicyModel> {
    if val_pairs.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let opts = TrainOpts {
        checkpoint_every_epoch: false,
        ..opts.clone()
    };
    Ok(align_train(init, reference, val_pairs, obj, &opts)?.0)
}

/// `θ − η ∇L_val(θ)`: the single-step auxiliary model.
pub fn one_step_val_model(
    model: &PolicyModel,
    reference: &PolicyModel,
    val_pairs: &[PreferencePair],
    obj: &ObjectiveKind,
    eta: f64,
) -> Result<PolicyModel> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("step size must be non-negative, got {eta}")));
    }
    let val = val_gradient(obj, model, reference, val_pairs)?;
    model.stepped(-eta, &val.mean_grad)
}

/// `ℓ(θ; d) − ℓ(θ_val; d)`.
pub fn lossdiff(
    pair: &PreferencePair,
    obj: &ObjectiveKind,
    model: &PolicyModel,
    aux_val_model: &PolicyModel,
    reference: &PolicyModel,
) -> Result<f64> {
    model.ensure_same_shape(aux_val_model)?;
    Ok(pair_loss(obj, model, reference, pair)? - pair_loss(obj, aux_val_model, reference, pair)?)
}

/// Implicit reward margin Δθ of the current model.
pub fn irm_score(pair: &PreferencePair, model: &PolicyModel, reference: &PolicyModel, beta: f64) -> Result<f64> {
    delta_theta(model, reference, pair, beta)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProxyScore {
    pub lossdiff: f64,
    pub irm: f64,
}

/// Scores many pairs with forward passes only: each model's next-token
/// distribution is tabulated once, then every pair is a sum of lookups.
pub struct ProxyScorer {
    obj: ObjectiveKind,
    policy: LogProbTable,
    aux: LogProbTable,
    anchor: LogProbTable,
}

impl ProxyScorer {
    pub fn new(
        obj: &ObjectiveKind,
        model: &PolicyModel,
        aux_val_model: &PolicyModel,
        reference: &PolicyModel,
    ) -> Result<Self> {
        model.ensure_same_shape(aux_val_model)?;
        model.ensure_same_shape(reference)?;
        Ok(Self {
            obj: *obj,
            policy: model.log_prob_table(),
            aux: aux_val_model.log_prob_table(),
            anchor: reference.log_prob_table(),
        })
    }

    pub fn score(&self, pair: &PreferencePair) -> Result<ProxyScore> {
        let anchor = PairLogProbs::from_table(&self.anchor, pair)?;
        let irm = PairLogProbs::from_table(&self.policy, pair)?.delta(&anchor, self.obj.beta);
        let aux_delta = PairLogProbs::from_table(&self.aux, pair)?.delta(&anchor, self.obj.beta);
        Ok(ProxyScore {
            lossdiff: self.obj.loss_from_delta(irm) - self.obj.loss_from_delta(aux_delta),
            irm,
        })
    }

    pub fn score_all(&self, pairs: &[PreferencePair]) -> Result<Vec<ProxyScore>> {
        pairs.iter().map(|p| self.score(p)).collect()
    }
}
