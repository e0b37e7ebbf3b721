//! Influence of training pairs on validation loss.
//!
//! With the Hessian taken as the identity, the influence of a training pair
//! `d` is the dot product of its loss gradient with the mean validation loss
//! gradient. Positive influence means a descent step on `d` also descends the
//! validation loss. The module also provides the closed-form DPO/SLiC
//! instantiations, a per-layer split, percentile truncation, and an exact
//! leave-one-out retraining oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::objective::{
    add_pair_loss_grad, pair_loss_grad, sigmoid, ObjectiveKind, Objective, PairLogProbs,
};
use crate::policy::{GradientVector, PolicyModel};
use crate::stats::{band_mask, check_band};
use crate::trainer::{align_train_with, reference_log_probs, AlignHooks, HoldoutWeighting, TrainOpts};

/// Mean validation loss gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ValGradient {
    pub mean_grad: GradientVector,
    pub n_val: usize,
    pub objective: ObjectiveKind,
}

/// Running mean of the validation pairs' loss gradients, one pass.
pub fn val_gradient(
    obj: &ObjectiveKind,
    model: &PolicyModel,
    reference: &PolicyModel,
    val_pairs: &[PreferencePair],
) -> Result<ValGradient> {
    if val_pairs.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    model.ensure_same_shape(reference)?;
    let anchors = reference_log_probs(reference, val_pairs)?;
    let mut mean = GradientVector::zeros_like(model);
    let mut grad = vec![0.0; model.num_params()];
    for (k, (pair, anchor)) in val_pairs.iter().zip(&anchors).enumerate() {
        grad.iter_mut().for_each(|g| *g = 0.0);
        add_pair_loss_grad(obj, model, anchor, pair, 1.0, &mut grad)?;
        let inv = 1.0 / (k + 1) as f64;
        for (m, g) in mean.values_mut().iter_mut().zip(&grad) {
            *m += (g - *m) * inv;
        }
    }
    Ok(ValGradient {
        mean_grad: mean,
        n_val: val_pairs.len(),
        objective: *obj,
    })
}

/// `⟨∇L_val, ∇ℓ(d)⟩`.
pub fn influence(
    val: &ValGradient,
    model: &PolicyModel,
    reference: &PolicyModel,
    pair: &PreferencePair,
) -> Result<f64> {
    let grad = pair_loss_grad(&val.objective, model, reference, pair)?;
    val.mean_grad.dot(&grad)
}

/// Influence of every pair in `pairs`, computing the validation gradient once.
pub fn influence_scores(
    obj: &ObjectiveKind,
    model: &PolicyModel,
    reference: &PolicyModel,
    val_pairs: &[PreferencePair],
    pairs: &[PreferencePair],
) -> Result<Vec<f64>> {
    let val = val_gradient(obj, model, reference, val_pairs)?;
    let anchors = reference_log_probs(reference, pairs)?;
    let mut grad = vec![0.0; model.num_params()];
    pairs
        .iter()
        .zip(&anchors)
        .map(|(pair, anchor)| {
            grad.iter_mut().for_each(|g| *g = 0.0);
            add_pair_loss_grad(obj, model, anchor, pair, 1.0, &mut grad)?;
            Ok(crate::policy::dot(val.mean_grad.values(), &grad))
        })
        .collect()
}

/// Per-pair scalar coefficient multiplying `g_w − g_l` in the closed forms:
/// `β(1 − σ(Δθ))` for DPO and `β·𝟙[1 − Δθ > 0]` for SLiC.
fn closed_form_coefficient(obj: &ObjectiveKind, delta: f64) -> f64 {
    match obj.kind {
        Objective::Dpo => obj.beta * (1.0 - sigmoid(delta)),
        Objective::Slic => {
            if 1.0 - delta > 0.0 {
                obj.beta
            } else {
                0.0
            }
        }
    }
}

fn coefficient_and_direction(
    obj: &ObjectiveKind,
    model: &PolicyModel,
    reference: &PolicyModel,
    pair: &PreferencePair,
) -> Result<(f64, GradientVector)> {
    let delta = PairLogProbs::of(model, pair)?.delta(&PairLogProbs::of(reference, pair)?, obj.beta);
    let direction = crate::objective::preference_direction(model, pair)?;
    Ok((closed_form_coefficient(obj, delta), direction))
}

/// The validation "preference generalisation direction" of the closed forms:
/// `(1/|D_val|) Σ_i c_i (g_w^(i) − g_l^(i))`.
pub fn closed_form_val_direction(
    obj: &ObjectiveKind,
    model: &PolicyModel,
    reference: &PolicyModel,
    val_pairs: &[PreferencePair],
) -> Result<GradientVector> {
    if val_pairs.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    model.ensure_same_shape(reference)?;
    let mut sum = GradientVector::zeros_like(model);
    for pair in val_pairs {
        let (c, dir) = coefficient_and_direction(obj, model, reference, pair)?;
        sum.axpy(c, &dir)?;
    }
    sum.scale(1.0 / val_pairs.len() as f64);
    Ok(sum)
}

/// Influence evaluated through the instantiated DPO/SLiC closed forms
/// (validation direction built from per-pair coefficients and `g_w − g_l`
/// rather than from loss gradients).
pub fn influence_closed(
    obj: &ObjectiveKind,
    model: &PolicyModel,
    reference: &PolicyModel,
    val_pairs: &[PreferencePair],
    pair: &PreferencePair,
) -> Result<f64> {
    let val_dir = closed_form_val_direction(obj, model, reference, val_pairs)?;
    influence_closed_with(obj, &val_dir, model, reference, pair)
}

pub fn influence_closed_with(
    obj: &ObjectiveKind,
    val_direction: &GradientVector,
    model: &PolicyModel,
    reference: &PolicyModel,
    pair: &PreferencePair,
) -> Result<f64> {
    let (c, dir) = coefficient_and_direction(obj, model, reference, pair)?;
    if c == 0.0 {
        return Ok(0.0);
    }
    Ok(c * val_direction.dot(&dir)?)
}

/// Influence split across the model's named layers; entries sum to the total.
pub fn layerwise_influence(
    val: &ValGradient,
    model: &PolicyModel,
    reference: &PolicyModel,
    pair: &PreferencePair,
) -> Result<Vec<(String, f64)>> {
    let grad = pair_loss_grad(&val.objective, model, reference, pair)?;
    layerwise_dot(&val.mean_grad, &grad)
}

/// Dot product restricted to each layer slice.
pub fn layerwise_dot(a: &GradientVector, b: &GradientVector) -> Result<Vec<(String, f64)>> {
    if a.layers() != b.layers() {
        return Err(Error::InvalidArgument("gradients have different layer maps".into()));
    }
    Ok(a.layers()
        .iter()
        .map(|layer| {
            let v = crate::policy::dot(a.layer_slice(layer), b.layer_slice(layer));
            (layer.name.clone(), v)
        })
        .collect())
}

/// Percentile thresholds of the truncated influence band.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TifBand {
    pub delta_small: f64,
    pub delta_large: f64,
}

impl TifBand {
    pub fn new(delta_small: f64, delta_large: f64) -> Result<Self> {
        check_band(delta_small, delta_large)?;
        Ok(Self {
            delta_small,
            delta_large,
        })
    }
}

/// `mask[i] = q(δ_small) < scores[i] < q(δ_large)`.
pub fn tif_mask(scores: &[f64], band: &TifBand) -> Result<Vec<bool>> {
    band_mask(scores, band.delta_small, band.delta_large)
}

pub const DEFAULT_ORACLE_CAP: usize = 64;

/// Shared state of leave-one-out retraining runs.
#[derive(Clone, Debug)]
pub struct LooSetup {
    /// Starting point of every retraining (typically the SFT model).
    pub init: PolicyModel,
    pub reference: PolicyModel,
    pub opts: TrainOpts,
    pub cap: usize,
    pub weighting: HoldoutWeighting,
}

impl LooSetup {
    pub fn new(init: PolicyModel, reference: PolicyModel, opts: TrainOpts) -> Self {
        Self {
            init,
            reference,
            opts,
            cap: DEFAULT_ORACLE_CAP,
            weighting: HoldoutWeighting::Fixed,
        }
    }

    fn check(&self, n_train: usize) -> Result<()> {
        if n_train > self.cap {
            return Err(Error::OracleCapExceeded {
                size: n_train,
                cap: self.cap,
            });
        }
        if n_train < 2 {
            return Err(Error::InvalidArgument(
                "leave-one-out needs at least two training pairs".into(),
            ));
        }
        Ok(())
    }

    fn train(
        &self,
        train: &[PreferencePair],
        obj: &ObjectiveKind,
        exclude: Option<usize>,
    ) -> Result<PolicyModel> {
        let hooks = AlignHooks {
            exclude,
            weighting: self.weighting,
            on_step: None,
        };
        let opts = TrainOpts {
            checkpoint_every_epoch: false,
            ..self.opts.clone()
        };
        Ok(align_train_with(&self.init, &self.reference, train, obj, &opts, hooks)?.0)
    }
}

/// Mean validation pair loss: the measurement `v` of the leave-one-out effect.
pub fn validation_value(
    obj: &ObjectiveKind,
    model: &PolicyModel,
    reference: &PolicyModel,
    val_pairs: &[PreferencePair],
) -> Result<f64> {
    if val_pairs.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let policy = model.log_prob_table();
    let anchors = reference_log_probs(reference, val_pairs)?;
    let mut total = 0.0;
    for (p, a) in val_pairs.iter().zip(&anchors) {
        total += obj.loss_from_delta(PairLogProbs::from_table(&policy, p)?.delta(a, obj.beta));
    }
    Ok(total / val_pairs.len() as f64)
}

/// Relative sign of the loss-based leave-one-out effect and influence: to
/// first order, including a pair with positive influence lowers the
/// validation loss, so `v(full) − v(minus)` moves opposite to influence.
pub const LOO_SIGN_VS_INFLUENCE: f64 = -1.0;

/// `v(θ_full) − v(θ_minus)` with `v` the mean validation loss.
pub fn loo_effect(
    pair_index: usize,
    train: &[PreferencePair],
    val_pairs: &[PreferencePair],
    obj: &ObjectiveKind,
    setup: &LooSetup,
) -> Result<f64> {
    if pair_index >= train.len() {
        return Err(Error::IndexOutOfRange {
            index: pair_index,
            len: train.len(),
        });
    }
    setup.check(train.len())?;
    let full = setup.train(train, obj, None)?;
    let minus = setup.train(train, obj, Some(pair_index))?;
    Ok(validation_value(obj, &full, &setup.reference, val_pairs)?
        - validation_value(obj, &minus, &setup.reference, val_pairs)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LooReport {
    pub full_value: f64,
    /// `v(θ_full) − v(θ_minus_i)` for each training pair.
    pub effects: Vec<f64>,
    /// See [`LOO_SIGN_VS_INFLUENCE`].
    pub sign_vs_influence: f64,
}

impl LooReport {
    /// Effects multiplied by the documented sign, so they share influence's
    /// orientation (positive = the pair helps validation).
    pub fn oriented(&self) -> Vec<f64> {
        self.effects.iter().map(|e| e * self.sign_vs_influence).collect()
    }
}

/// Exact leave-one-out effect of every training pair. Retrainings run in
/// parallel; each is sequential and deterministic.
pub fn loo_effects(
    train: &[PreferencePair],
    val_pairs: &[PreferencePair],
    obj: &ObjectiveKind,
    setup: &LooSetup,
) -> Result<LooReport> {
    setup.check(train.len())?;
    let full = setup.train(train, obj, None)?;
    let full_value = validation_value(obj, &full, &setup.reference, val_pairs)?;
    let effects = (0..train.len())
        .into_par_iter()
        .map(|i| {
            let minus = setup.train(train, obj, Some(i))?;
            Ok(full_value - validation_value(obj, &minus, &setup.reference, val_pairs)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LooReport {
        full_value,
        effects,
        sign_vs_influence: LOO_SIGN_VS_INFLUENCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};
    use crate::policy::{init_model, ModelConfig};

    fn fixture() -> (PolicyModel, PolicyModel, Vec<PreferencePair>) {
        let pairs = gen_synthetic(&SynthConfig::new(5, 2, 4, 12, 0.0, 2)).unwrap();
        let m = init_model(&ModelConfig::log_linear(5, 0.5, 1)).unwrap();
        let r = init_model(&ModelConfig::log_linear(5, 0.5, 2)).unwrap();
        (m, r, pairs)
    }

    #[test]
    fn single_and_duplicated_validation_sets() {
        let (m, r, pairs) = fixture();
        let obj = ObjectiveKind::dpo(0.1);
        let one = val_gradient(&obj, &m, &r, &pairs[..1]).unwrap();
        let direct = pair_loss_grad(&obj, &m, &r, &pairs[0]).unwrap();
        assert_eq!(one.mean_grad, direct);

        let base = val_gradient(&obj, &m, &r, &pairs[..6]).unwrap();
        let doubled: Vec<_> = pairs[..6].iter().chain(&pairs[..6]).cloned().collect();
        let dup = val_gradient(&obj, &m, &r, &doubled).unwrap();
        assert_eq!(dup.n_val, 12);
        for (a, b) in base.mean_grad.values().iter().zip(dup.mean_grad.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(val_gradient(&obj, &m, &r, &[]).is_err());
    }

    #[test]
    fn self_influence_is_squared_norm() {
        let (m, r, pairs) = fixture();
        let obj = ObjectiveKind::dpo(0.1);
        let val = val_gradient(&obj, &m, &r, &pairs[3..4]).unwrap();
        let g = pair_loss_grad(&obj, &m, &r, &pairs[3]).unwrap();
        let inf = influence(&val, &m, &r, &pairs[3]).unwrap();
        assert!((inf - g.norm().powi(2)).abs() < 1e-15);
        assert!(inf >= 0.0);
    }

    #[test]
    fn loglinear_has_single_layer_entry() {
        let (m, r, pairs) = fixture();
        let obj = ObjectiveKind::dpo(0.1);
        let val = val_gradient(&obj, &m, &r, &pairs[..4]).unwrap();
        let layers = layerwise_influence(&val, &m, &r, &pairs[5]).unwrap();
        assert_eq!(layers.len(), 1);
        assert_eq!(layers[0].1, influence(&val, &m, &r, &pairs[5]).unwrap());
    }

    #[test]
    fn slic_margin_satisfied_pair_has_zero_closed_form() {
        let (m, r, pairs) = fixture();
        let beta = 50.0;
        let obj = ObjectiveKind::slic(beta);
        let pair = pairs
            .iter()
            .map(|p| {
                let d = crate::objective::delta_theta(&m, &r, p, beta).unwrap();
                if d > 0.0 { p.clone() } else { p.swapped() }
            })
            .find(|p| crate::objective::delta_theta(&m, &r, p, beta).unwrap() > 1.0)
            .expect("some pair clears the margin");
        assert_eq!(influence_closed(&obj, &m, &r, &pairs, &pair).unwrap(), 0.0);
    }

    #[test]
    fn tif_examples() {
        let band = TifBand::new(33.4, 66.6).unwrap();
        assert_eq!(tif_mask(&[1.0, 2.0, 3.0], &band).unwrap(), [false, true, false]);
        let all = tif_mask(&[5.0, 1.0, 3.0, 2.0, 4.0], &TifBand::new(0.0, 100.0).unwrap()).unwrap();
        assert_eq!(all, [false, false, true, true, true]);
        assert!(tif_mask(&[], &band).is_err());
        assert!(TifBand::new(70.0, 20.0).is_err());
    }

    #[test]
    fn loo_preconditions() {
        let (m, r, pairs) = fixture();
        let obj = ObjectiveKind::dpo(0.1);
        let setup = LooSetup::new(m.clone(), r.clone(), TrainOpts::sgd(1, 4, 0.5, 0));
        assert!(loo_effect(0, &pairs[..1], &pairs, &obj, &setup).is_err());
        assert!(matches!(
            loo_effect(20, &pairs, &pairs, &obj, &setup),
            Err(Error::IndexOutOfRange { .. })
        ));
        let mut capped = setup.clone();
        capped.cap = 4;
        assert!(matches!(
            loo_effect(0, &pairs, &pairs, &obj, &capped),
            Err(Error::OracleCapExceeded { .. })
        ));
        let e = loo_effect(2, &pairs, &pairs, &obj, &setup).unwrap();
        let report = loo_effects(&pairs, &pairs, &obj, &setup).unwrap();
        assert_eq!(report.effects[2], e);
    }
}
