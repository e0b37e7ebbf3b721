//! Deterministic training loops: SFT-style likelihood pretraining and
//! preference alignment with per-epoch checkpoints.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::objective::{add_pair_loss_grad, ObjectiveKind, PairLogProbs};
use crate::policy::{ModelConfig, PolicyModel};
use crate::rng::derived_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub shuffle_seed: u64,
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 16,
            learning_rate: 0.05,
            optimizer: Optimizer::Adam,
            shuffle_seed: 0,
            checkpoint_every_epoch: false,
        }
    }
}

impl TrainOpts {
    pub fn sgd(epochs: usize, batch_size: usize, learning_rate: f64, shuffle_seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            learning_rate,
            optimizer: Optimizer::Sgd,
            shuffle_seed,
            checkpoint_every_epoch: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// How a mini-batch is normalised when one pair is held out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldoutWeighting {
    /// Every remaining pair keeps the weight `1 / |batch|` it had with the
    /// full data; the held-out pair's weight simply becomes zero.
    #[default]
    Fixed,
    /// The shrunken batch is re-averaged over its remaining members.
    Renormalized,
}

/// Per-epoch model snapshots, epochs strictly increasing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointStore {
    entries: Vec<(usize, PolicyModel)>,
}

impl CheckpointStore {
    pub fn push(&mut self, epoch: usize, model: PolicyModel) -> Result<()> {
        if let Some((last, _)) = self.entries.last() {
            if epoch <= *last {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint epoch {epoch} does not follow {last}"
                )));
            }
        }
        self.entries.push((epoch, model));
        Ok(())
    }

    pub fn get(&self, epoch: usize) -> Option<&PolicyModel> {
        self.entries.iter().find(|(e, _)| *e == epoch).map(|(_, m)| m)
    }

    pub fn epochs(&self) -> Vec<usize> {
        self.entries.iter().map(|(e, _)| *e).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &PolicyModel)> {
        self.entries.iter().map(|(e, m)| (*e, m))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes one `epoch_NNN.ckpt` file per snapshot.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.entries
            .iter()
            .map(|(epoch, model)| {
                let path = dir.join(checkpoint_file_name(*epoch));
                save_checkpoint(model, &path)?;
                Ok(path)
            })
            .collect()
    }
}

pub fn checkpoint_file_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

const CHECKPOINT_MAGIC: &str = "# prefval checkpoint v1";

/// Header line, JSON model config line, then one parameter per line in
/// shortest round-trip decimal form.
pub fn save_checkpoint(model: &PolicyModel, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    serde_json::to_writer(&mut out, model.config())?;
    writeln!(out)?;
    for p in model.params() {
        writeln!(out, "{p:?}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PolicyModel> {
    let path = path.as_ref();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(File::open(path)?).lines();
    match lines.next().transpose()? {
        Some(l) if l == CHECKPOINT_MAGIC => {}
        _ => return Err(parse_err(1, "missing checkpoint header".into())),
    }
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| parse_err(2, "missing model config".into()))?;
    let config: ModelConfig = serde_json::from_str(&header).map_err(|e| parse_err(2, e.to_string()))?;
    let mut params = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let value = line
            .trim()
            .parse::<f64>()
            .map_err(|e| parse_err(i + 3, e.to_string()))?;
        params.push(value);
    }
    PolicyModel::with_params(config, params)
}

/// Summary of one optimizer step, handed to observers.
#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    pub epoch: usize,
    /// 1-based count of optimizer steps taken so far.
    pub step: usize,
    /// Weighted mean loss of the batch before the update.
    pub batch_loss: f64,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn apply_update(model: &mut PolicyModel, grad: &[f64], opts: &TrainOpts, adam: &mut Option<AdamState>) {
    let lr = opts.learning_rate;
    match opts.optimizer {
        Optimizer::Sgd => {
            for (p, g) in model.params_mut().iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        Optimizer::Adam => {
            let n = grad.len();
            let state = adam.get_or_insert_with(|| AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            state.t += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(state.t);
            let c2 = 1.0 - ADAM_BETA2.powi(state.t);
            for (i, p) in model.params_mut().iter_mut().enumerate() {
                let g = grad[i];
                state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
                state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = state.m[i] / c1;
                let v_hat = state.v[i] / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Shared mini-batch loop. `grad_fn(model, index, weight, out)` accumulates
/// the weighted gradient of example `index` and returns its loss.
#[allow(clippy::too_many_arguments)]
fn descend<G>(
    model: &mut PolicyModel,
    n: usize,
    opts: &TrainOpts,
    exclude: Option<usize>,
    weighting: HoldoutWeighting,
    mut grad_fn: G,
    mut on_step: Option<&mut dyn FnMut(StepInfo, &PolicyModel)>,
    mut checkpoints: Option<&mut CheckpointStore>,
) -> Result<()>
where
    G: FnMut(&PolicyModel, usize, f64, &mut [f64]) -> Result<f64>,
{
    opts.validate()?;
    let mut grad = vec![0.0; model.num_params()];
    let mut adam = None;
    let mut step = 0;
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derived_rng(opts.shuffle_seed, &format!("shuffle/epoch{epoch}")));
        for chunk in order.chunks(opts.batch_size) {
            let members: Vec<usize> = chunk.iter().copied().filter(|&i| Some(i) != exclude).collect();
            if members.is_empty() {
                continue;
            }
            let weight = match weighting {
                HoldoutWeighting::Fixed => 1.0 / chunk.len() as f64,
                HoldoutWeighting::Renormalized => 1.0 / members.len() as f64,
            };
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for &i in &members {
                batch_loss += weight * grad_fn(model, i, weight, &mut grad)?;
            }
            apply_update(model, &grad, opts, &mut adam);
            step += 1;
            if let Some(cb) = on_step.as_deref_mut() {
                cb(
                    StepInfo {
                        epoch,
                        step,
                        batch_loss,
                    },
                    model,
                );
            }
        }
        if let Some(store) = checkpoints.as_deref_mut() {
            store.push(epoch + 1, model.clone())?;
        }
    }
    Ok(())
}

/// Likelihood pretraining on the chosen responses (the reference-model stage).
pub fn sft_pretrain(model: &PolicyModel, pairs: &[PreferencePair], opts: &TrainOpts) -> Result<PolicyModel> {
    if pairs.is_empty() {
        return Err(Error::Empty("SFT corpus"));
    }
    let mut model = model.clone();
    descend(
        &mut model,
        pairs.len(),
        opts,
        None,
        HoldoutWeighting::Renormalized,
        |m, i, w, out| {
            let p = &pairs[i];
            m.add_seq_logprob_grad(&p.prompt, &p.chosen, -w, out)?;
            Ok(0.0)
        },
        None,
        None,
    )?;
    Ok(model)
}

/// Options for [`align_train_with`] beyond [`TrainOpts`].
#[derive(Default)]
pub struct AlignHooks<'a> {
    /// Training pair index whose weight is zeroed (leave-one-out runs).
    pub exclude: Option<usize>,
    pub weighting: HoldoutWeighting,
    pub on_step: Option<&'a mut dyn FnMut(StepInfo, &PolicyModel)>,
}

/// Mini-batch descent on the mean pair loss with a frozen reference.
pub fn align_train(
    model: &PolicyModel,
    reference: &PolicyModel,
    pairs: &[PreferencePair],
    obj: &ObjectiveKind,
    opts: &TrainOpts,
) -> Result<(PolicyModel, CheckpointStore)> {
    align_train_with(model, reference, pairs, obj, opts, AlignHooks::default())
}

pub fn align_train_with(
    model: &PolicyModel,
    reference: &PolicyModel,
    pairs: &[PreferencePair],
    obj: &ObjectiveKind,
    opts: &TrainOpts,
    hooks: AlignHooks<'_>,
) -> Result<(PolicyModel, CheckpointStore)> {
    if pairs.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(i) = hooks.exclude {
        if i >= pairs.len() {
            return Err(Error::IndexOutOfRange { index: i, len: pairs.len() });
        }
    }
    model.ensure_same_shape(reference)?;
    let anchors = reference_log_probs(reference, pairs)?;
    let mut trained = model.clone();
    let mut store = CheckpointStore::default();
    descend(
        &mut trained,
        pairs.len(),
        opts,
        hooks.exclude,
        hooks.weighting,
        |m, i, w, out| add_pair_loss_grad(obj, m, &anchors[i], &pairs[i], w, out),
        hooks.on_step,
        opts.checkpoint_every_epoch.then_some(&mut store),
    )?;
    Ok((trained, store))
}

pub(crate) fn reference_log_probs(reference: &PolicyModel, pairs: &[PreferencePair]) -> Result<Vec<PairLogProbs>> {
    let table = reference.log_prob_table();
    pairs.iter().map(|p| PairLogProbs::from_table(&table, p)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub eval_loss: f64,
    pub mean_margin: f64,
    /// Fraction of pairs whose margin has the ground-truth sign (strictly).
    pub rank_accuracy: f64,
}

pub fn eval_metrics(
    model: &PolicyModel,
    reference: &PolicyModel,
    test: &[PreferencePair],
    obj: &ObjectiveKind,
) -> Result<EvalMetrics> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    model.ensure_same_shape(reference)?;
    let policy = model.log_prob_table();
    let anchor = reference.log_prob_table();
    let (mut loss, mut margin, mut correct) = (0.0, 0.0, 0usize);
    for p in test {
        let delta = PairLogProbs::from_table(&policy, p)?.delta(&PairLogProbs::from_table(&anchor, p)?, obj.beta);
        loss += obj.loss_from_delta(delta);
        margin += delta;
        let right = if p.is_flipped() { delta < 0.0 } else { delta > 0.0 };
        correct += right as usize;
    }
    let n = test.len() as f64;
    Ok(EvalMetrics {
        eval_loss: loss / n,
        mean_margin: margin / n,
        rank_accuracy: correct as f64 / n,
    })
}
