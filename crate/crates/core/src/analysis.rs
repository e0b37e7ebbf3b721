//! Experiment recipes and their CSV outputs.
//!
//! - [`run_partition_dynamics`]: split the training pairs into influence
//!   tertiles at a checkpoint and continue training on each.
//! - [`run_lossdiff_irm_pipeline`]: warm up, align an auxiliary model on the
//!   validation pairs, score LossDiff and IRM, select, retrain, evaluate.
//! - [`run_noise_sweep`]: the pipeline under corrupted validation labels.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RetrainStart};
use crate::data::{flip_val_labels, DatasetSplits, PreferencePair};
use crate::error::{Error, Result};
use crate::influence::{influence_scores, tif_mask, TifBand};
use crate::objective::{ObjectiveKind, PairLogProbs};
use crate::policy::{init_model, PolicyModel};
use crate::proxy::{train_aux_val_model, ProxyScorer};
use crate::selection::{lossdiff_irm_select, SelectionMask};
use crate::trainer::{
    align_train, align_train_with, eval_metrics, reference_log_probs, sft_pretrain, AlignHooks,
    EvalMetrics, StepInfo, TrainOpts,
};

pub use crate::stats::{correlations, Correlations};

/// One row of per-pair valuation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub pair_id: String,
    pub epoch: usize,
    pub if_score: Option<f64>,
    pub lossdiff: Option<f64>,
    pub irm: Option<f64>,
    pub tif_selected: Option<bool>,
    pub combined_selected: Option<bool>,
}

pub const SCORE_HEADER: [&str; 7] = ["pair_id", "epoch", "if", "lossdiff", "irm", "tif", "combined"];

fn fmt_f64(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

fn fmt_bool(v: Option<bool>) -> String {
    v.map(|b| if b { "1" } else { "0" }.to_string()).unwrap_or_default()
}

/// Writes score records with 17 significant digits per float.
pub fn export_scores(records: &[ScoreRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SCORE_HEADER)?;
    for r in records {
        w.write_record([
            r.pair_id.clone(),
            r.epoch.to_string(),
            fmt_f64(r.if_score),
            fmt_f64(r.lossdiff),
            fmt_f64(r.irm),
            fmt_bool(r.tif_selected),
            fmt_bool(r.combined_selected),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().ne(SCORE_HEADER) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `{}`", SCORE_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message,
        };
        let float = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| err(format!("bad number `{s}`: {e}")))
            }
        };
        let flag = |s: &str| -> Result<Option<bool>> {
            match s {
                "" => Ok(None),
                "1" => Ok(Some(true)),
                "0" => Ok(Some(false)),
                other => Err(err(format!("bad flag `{other}`"))),
            }
        };
        if rec.len() != SCORE_HEADER.len() {
            return Err(err(format!("expected {} fields", SCORE_HEADER.len())));
        }
        out.push(ScoreRecord {
            pair_id: rec[0].to_string(),
            epoch: rec[1].parse().map_err(|e| err(format!("bad epoch: {e}")))?,
            if_score: float(&rec[2])?,
            lossdiff: float(&rec[3])?,
            irm: float(&rec[4])?,
            tif_selected: flag(&rec[5])?,
            combined_selected: flag(&rec[6])?,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subset {
    SmallIF,
    MediumIF,
    LargeIF,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::SmallIF, Subset::MediumIF, Subset::LargeIF];

    pub fn as_str(&self) -> &'static str {
        match self {
            Subset::SmallIF => "small",
            Subset::MediumIF => "medium",
            Subset::LargeIF => "large",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_margin: f64,
}

/// Monitored quantities while continuing training on one influence tertile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsTrace {
    pub subset: Subset,
    pub checkpoint: usize,
    pub points: Vec<TracePoint>,
}

impl DynamicsTrace {
    pub fn first(&self) -> &TracePoint {
        &self.points[0]
    }

    pub fn last(&self) -> &TracePoint {
        self.points.last().expect("trace has the starting point")
    }
}

pub fn export_trace(traces: &[DynamicsTrace], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["checkpoint", "subset", "step", "train_loss", "eval_loss", "eval_margin"])?;
    for t in traces {
        for p in &t.points {
            w.write_record([
                t.checkpoint.to_string(),
                t.subset.as_str().to_string(),
                p.step.to_string(),
                format!("{:.16e}", p.train_loss),
                format!("{:.16e}", p.eval_loss),
                format!("{:.16e}", p.eval_margin),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean pair loss over `pairs` with precomputed reference log-likelihoods.
fn mean_loss(obj: &ObjectiveKind, model: &PolicyModel, anchors: &[PairLogProbs], pairs: &[PreferencePair]) -> Result<f64> {
    let table = model.log_prob_table();
    let mut total = 0.0;
    for (p, a) in pairs.iter().zip(anchors) {
        total += obj.loss_from_delta(PairLogProbs::from_table(&table, p)?.delta(a, obj.beta));
    }
    Ok(total / pairs.len() as f64)
}

/// Indices of `scores` split into bottom, middle, and top thirds (sizes
/// differ by at most one).
pub fn tertiles(scores: &[f64]) -> [Vec<usize>; 3] {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let cut = |k: usize| k * n / 3;
    [
        order[cut(0)..cut(1)].to_vec(),
        order[cut(1)..cut(2)].to_vec(),
        order[cut(2)..cut(3)].to_vec(),
    ]
}

/// Influence tertiles at one checkpoint and their continuation traces.
#[derive(Clone, Debug)]
pub struct CheckpointDynamics {
    pub checkpoint: usize,
    pub if_scores: Vec<f64>,
    pub partition: BTreeMap<Subset, Vec<usize>>,
    pub traces: BTreeMap<Subset, DynamicsTrace>,
}

/// Continues alignment from `start` on `pairs`, recording training loss and
/// test metrics before the first step and after every optimizer step.
pub fn trace_continuation(
    start: &PolicyModel,
    reference: &PolicyModel,
    pairs: &[PreferencePair],
    test: &[PreferencePair],
    obj: &ObjectiveKind,
    opts: &TrainOpts,
) -> Result<Vec<TracePoint>> {
    let anchors = reference_log_probs(reference, pairs)?;
    let point = |step: usize, m: &PolicyModel| -> Result<TracePoint> {
        let e = eval_metrics(m, reference, test, obj)?;
        Ok(TracePoint {
            step,
            train_loss: mean_loss(obj, m, &anchors, pairs)?,
            eval_loss: e.eval_loss,
            eval_margin: e.mean_margin,
        })
    };
    let mut points = vec![point(0, start)?];
    let mut failure = None;
    let mut observer = |info: StepInfo, m: &PolicyModel| match point(info.step, m) {
        Ok(p) => points.push(p),
        Err(e) => {
            failure.get_or_insert(e);
        }
    };
    let hooks = AlignHooks {
        on_step: Some(&mut observer),
        ..AlignHooks::default()
    };
    align_train_with(start, reference, pairs, obj, opts, hooks)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(points),
    }
}

/// Aligns on the full training set with per-epoch checkpoints; at each
/// configured checkpoint, scores influence, forms tertiles, and continues
/// training each tertile from that checkpoint with a fresh optimizer.
pub fn run_partition_dynamics(
    splits: &DatasetSplits,
    obj: &ObjectiveKind,
    cfg: &ExperimentConfig,
) -> Result<Vec<CheckpointDynamics>> {
    if splits.train.len() < 3 {
        return Err(Error::InvalidArgument("partitioning needs at least 3 training pairs".into()));
    }
    let init = init_model(&cfg.model_config())?;
    let reference = sft_pretrain(&init, &splits.train, &cfg.stage_opts("sft")?)?;
    let mut opts = cfg.stage_opts("dynamics")?;
    opts.checkpoint_every_epoch = true;
    let (_, store) = align_train(&reference, &reference, &splits.train, obj, &opts)?;

    let continue_opts = TrainOpts {
        epochs: cfg.dynamics.continue_epochs,
        ..cfg.dynamics.opts.to_train_opts(cfg.experiment.seed, "dynamics/continue")
    };
    cfg.dynamics
        .checkpoints
        .iter()
        .map(|&epoch| {
            let model = store.get(epoch).ok_or_else(|| {
                Error::InvalidArgument(format!("no checkpoint for epoch {epoch} (trained {} epochs)", opts.epochs))
            })?;
            let if_scores = influence_scores(obj, model, &reference, &splits.val, &splits.train)?;
            let parts = tertiles(&if_scores);
            let mut partition = BTreeMap::new();
            let mut traces = BTreeMap::new();
            for (subset, idx) in Subset::ALL.into_iter().zip(parts) {
                let pairs: Vec<PreferencePair> = idx.iter().map(|&i| splits.train[i].clone()).collect();
                let points = trace_continuation(model, &reference, &pairs, &splits.test, obj, &continue_opts)?;
                traces.insert(
                    subset,
                    DynamicsTrace {
                        subset,
                        checkpoint: epoch,
                        points,
                    },
                );
                partition.insert(subset, idx);
            }
            Ok(CheckpointDynamics {
                checkpoint: epoch,
                if_scores,
                partition,
                traces,
            })
        })
        .collect()
}

/// Models and scores shared by the selection pipeline and its baselines.
#[derive(Clone, Debug)]
pub struct ScoredRun {
    pub reference: PolicyModel,
    pub warm: PolicyModel,
    pub aux: PolicyModel,
    pub lossdiffs: Vec<f64>,
    pub irms: Vec<f64>,
    pub if_scores: Option<Vec<f64>>,
    pub warmup_epochs: usize,
}

/// SFT reference, one warm-up stage on train, one auxiliary stage on val,
/// then LossDiff and IRM (and optionally exact influence) on train.
pub fn score_training_pairs(
    splits: &DatasetSplits,
    obj: &ObjectiveKind,
    cfg: &ExperimentConfig,
    with_influence: bool,
) -> Result<ScoredRun> {
    let init = init_model(&cfg.model_config())?;
    let reference = sft_pretrain(&init, &splits.train, &cfg.stage_opts("sft")?)?;
    let (warm, _) = align_train(&reference, &reference, &splits.train, obj, &cfg.stage_opts("warmup")?)?;
    let aux = train_aux_val_model(&warm, &reference, &splits.val, obj, &cfg.stage_opts("aux")?)?;
    let scores = ProxyScorer::new(obj, &warm, &aux, &reference)?.score_all(&splits.train)?;
    let if_scores = if with_influence {
        Some(influence_scores(obj, &warm, &reference, &splits.val, &splits.train)?)
    } else {
        None
    };
    Ok(ScoredRun {
        reference,
        warm,
        aux,
        lossdiffs: scores.iter().map(|s| s.lossdiff).collect(),
        irms: scores.iter().map(|s| s.irm).collect(),
        if_scores,
        warmup_epochs: cfg.warmup.epochs,
    })
}

impl ScoredRun {
    /// Retrains on `pairs` from the configured start and evaluates on `test`.
    pub fn retrain_and_eval(
        &self,
        pairs: &[PreferencePair],
        test: &[PreferencePair],
        obj: &ObjectiveKind,
        cfg: &ExperimentConfig,
    ) -> Result<(PolicyModel, EvalMetrics)> {
        if pairs.is_empty() {
            return Err(Error::Empty("selected training subset"));
        }
        let start = match cfg.retrain.start {
            RetrainStart::Sft => &self.reference,
            RetrainStart::Warmup => &self.warm,
        };
        let (model, _) = align_train(start, &self.reference, pairs, obj, &cfg.stage_opts("retrain")?)?;
        let metrics = eval_metrics(&model, &self.reference, test, obj)?;
        Ok((model, metrics))
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub mask: SelectionMask,
    pub model: PolicyModel,
    pub metrics: EvalMetrics,
    pub records: Vec<ScoreRecord>,
    pub scored: ScoredRun,
}

/// Warm-up, auxiliary model, LossDiff/IRM scoring, band intersection,
/// retraining on the selected pairs, and evaluation on the test split.
pub fn run_lossdiff_irm_pipeline(
    splits: &DatasetSplits,
    obj: &ObjectiveKind,
    cfg: &ExperimentConfig,
) -> Result<PipelineOutcome> {
    let scored = score_training_pairs(splits, obj, cfg, cfg.selection.score_if)?;
    let ids: Vec<String> = splits.train.iter().map(|p| p.id.clone()).collect();
    let mask = lossdiff_irm_select(&ids, &scored.lossdiffs, &scored.irms, &cfg.selection.xi, &cfg.selection.tau)?;
    if mask.count() == 0 {
        return Err(Error::Empty("selection (bands too narrow)"));
    }
    let tif = match &scored.if_scores {
        Some(s) => {
            let band = TifBand::new(cfg.selection.tif.lo, cfg.selection.tif.hi)?;
            Some(tif_mask(s, &band)?)
        }
        None => None,
    };
    let records = (0..ids.len())
        .map(|i| ScoreRecord {
            pair_id: ids[i].clone(),
            epoch: scored.warmup_epochs,
            if_score: scored.if_scores.as_ref().map(|s| s[i]),
            lossdiff: Some(scored.lossdiffs[i]),
            irm: Some(scored.irms[i]),
            tif_selected: tif.as_ref().map(|t| t[i]),
            combined_selected: Some(mask.selected[i]),
        })
        .collect();
    let selected = mask.pick(&splits.train, true);
    let (model, metrics) = scored.retrain_and_eval(&selected, &splits.test, obj, cfg)?;
    Ok(PipelineOutcome {
        mask,
        model,
        metrics,
        records,
        scored,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseSweepEntry {
    pub rate: f64,
    pub metrics: EvalMetrics,
    pub selected: usize,
}

/// Reruns the pipeline with the validation labels flipped at each rate.
/// The same flip stream is used for every rate, so corrupted sets are nested.
pub fn run_noise_sweep(
    splits: &DatasetSplits,
    obj: &ObjectiveKind,
    cfg: &ExperimentConfig,
    rates: &[f64],
) -> Result<Vec<NoiseSweepEntry>> {
    if let Some(r) = rates.iter().find(|r| !(0.0..0.5).contains(*r)) {
        return Err(Error::InvalidArgument(format!("noise rate {r} outside [0, 0.5)")));
    }
    rates
        .iter()
        .map(|&rate| {
            let noisy = DatasetSplits {
                train: splits.train.clone(),
                val: flip_val_labels(&splits.val, rate, cfg.seed("noise/val"))?,
                test: splits.test.clone(),
            };
            let out = run_lossdiff_irm_pipeline(&noisy, obj, cfg)?;
            Ok(NoiseSweepEntry {
                rate,
                metrics: out.metrics,
                selected: out.mask.count(),
            })
        })
        .collect()
}

pub fn export_noise_sweep(entries: &[NoiseSweepEntry], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rate", "eval_loss", "mean_margin", "rank_accuracy", "selected"])?;
    for e in entries {
        w.write_record([
            e.rate.to_string(),
            format!("{:.16e}", e.metrics.eval_loss),
            format!("{:.16e}", e.metrics.mean_margin),
            format!("{:.16e}", e.metrics.rank_accuracy),
            e.selected.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-layer influence of each pair: one column per named layer plus the total.
pub fn export_layer_heatmap(
    ids: &[String],
    layer_names: &[String],
    rows: &[Vec<f64>],
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "pair_id")?;
    for name in layer_names {
        write!(out, ",{name}")?;
    }
    writeln!(out, ",total")?;
    for (id, row) in ids.iter().zip(rows) {
        write!(out, "{id}")?;
        for v in row {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out, ",{:.16e}", row.iter().sum::<f64>())?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tertile_sizes() {
        for n in 3..20 {
            let s: Vec<f64> = (0..n).map(|i| ((i * 7) % n) as f64).collect();
            let t = tertiles(&s);
            let sizes: Vec<usize> = t.iter().map(|v| v.len()).collect();
            assert_eq!(sizes.iter().sum::<usize>(), n);
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let max_small = t[0].iter().map(|&i| s[i]).fold(f64::MIN, f64::max);
            let min_mid = t[1].iter().map(|&i| s[i]).fold(f64::MAX, f64::min);
            assert!(max_small <= min_mid);
        }
    }

    #[test]
    fn scores_csv_round_trip() {
        let records = vec![
            ScoreRecord {
                pair_id: "a".into(),
                epoch: 1,
                if_score: Some(1.0 / 3.0),
                lossdiff: Some(-2.5e-7),
                irm: Some(0.1),
                tif_selected: Some(true),
                combined_selected: Some(false),
            },
            ScoreRecord {
                pair_id: "b".into(),
                epoch: 1,
                if_score: None,
                lossdiff: Some(std::f64::consts::PI),
                irm: Some(-1.0),
                tif_selected: None,
                combined_selected: Some(true),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        export_scores(&records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "pair_id,epoch,if,lossdiff,irm,tif,combined");
        assert_eq!(text.lines().count(), 3);
        assert_eq!(import_scores(&path).unwrap(), records);
    }

    #[test]
    fn noise_sweep_rejects_bad_rates() {
        let cfg = ExperimentConfig::default();
        let splits = DatasetSplits {
            train: vec![],
            val: vec![],
            test: vec![],
        };
        assert!(run_noise_sweep(&splits, &ObjectiveKind::default(), &cfg, &[0.0, 0.5]).is_err());
    }
}
