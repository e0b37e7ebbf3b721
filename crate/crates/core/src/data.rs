//! Preference pairs: synthetic generation, splitting, label corruption, and
//! the line-oriented JSON dataset format.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{transitions, TokenSeq};
use crate::rng::{derive_seed, derived_rng, rng_from_seed};

/// One `(prompt, chosen, rejected)` triple.
///
/// `score_chosen`/`score_rejected` carry external annotator scores (used by the
/// score-margin baseline); `true_margin` and `flipped` record the synthetic
/// generator's ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: String,
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
    pub score_chosen: Option<f64>,
    pub score_rejected: Option<f64>,
    pub true_margin: Option<f64>,
    pub flipped: Option<bool>,
}

impl PreferencePair {
    pub fn new(id: impl Into<String>, prompt: TokenSeq, chosen: TokenSeq, rejected: TokenSeq) -> Self {
        Self {
            id: id.into(),
            prompt,
            chosen,
            rejected,
            score_chosen: None,
            score_rejected: None,
            true_margin: None,
            flipped: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chosen == self.rejected {
            return Err(Error::InvalidArgument(format!(
                "pair `{}` has identical chosen and rejected responses",
                self.id
            )));
        }
        let finite = |v: Option<f64>| v.is_none_or(f64::is_finite);
        if !(finite(self.score_chosen) && finite(self.score_rejected) && finite(self.true_margin)) {
            return Err(Error::InvalidArgument(format!(
                "pair `{}` has non-finite score fields",
                self.id
            )));
        }
        Ok(())
    }

    /// Chosen and rejected exchanged, scores travelling with their responses
    /// and the provenance flag toggled.
    pub fn swapped(&self) -> Self {
        Self {
            id: self.id.clone(),
            prompt: self.prompt.clone(),
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
            score_chosen: self.score_rejected,
            score_rejected: self.score_chosen,
            true_margin: self.true_margin,
            flipped: Some(!self.flipped.unwrap_or(false)),
        }
    }

    pub fn score_margin(&self) -> Option<f64> {
        Some(self.score_chosen? - self.score_rejected?)
    }

    /// Whether the stored label disagrees with the ground truth, when known.
    pub fn is_flipped(&self) -> bool {
        self.flipped.unwrap_or(false)
    }
}

fn default_prefix() -> String {
    "pair".into()
}

/// Parameters of the synthetic generator with a planted bigram reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vocab: usize,
    pub prompt_len: usize,
    pub response_len: usize,
    pub n_pairs: usize,
    /// Row-major `vocab x vocab` weights of `r*(x, y) = Σ_t w[y_{t-1}, y_t]`.
    pub reward_weights: Vec<f64>,
    pub label_flip_rate: f64,
    /// Standard deviation of the annotator noise added to the stored scores.
    pub score_noise: f64,
    pub seed: u64,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

const RESAMPLE_CAP: usize = 100;

impl SynthConfig {
    /// Config with standard-normal reward weights drawn from `seed`.
    pub fn new(
        vocab: usize,
        prompt_len: usize,
        response_len: usize,
        n_pairs: usize,
        label_flip_rate: f64,
        seed: u64,
    ) -> Self {
        Self {
            vocab,
            prompt_len,
            response_len,
            n_pairs,
            reward_weights: planted_weights(vocab, derive_seed(seed, "reward")),
            label_flip_rate,
            score_noise: 0.5,
            seed,
            id_prefix: default_prefix(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab < 2 {
            return bad(format!("vocab must be at least 2, got {}", self.vocab));
        }
        if self.prompt_len == 0 || self.response_len == 0 {
            return bad("prompt and response lengths must be positive".into());
        }
        if self.n_pairs < 4 {
            return bad(format!("n_pairs must be at least 4, got {}", self.n_pairs));
        }
        if self.reward_weights.len() != self.vocab * self.vocab {
            return bad(format!(
                "reward_weights must have {} entries, got {}",
                self.vocab * self.vocab,
                self.reward_weights.len()
            ));
        }
        if !(0.0..0.5).contains(&self.label_flip_rate) {
            return bad(format!(
                "label_flip_rate must be in [0, 0.5), got {}",
                self.label_flip_rate
            ));
        }
        if !(self.score_noise >= 0.0 && self.score_noise.is_finite()) {
            return bad("score_noise must be non-negative".into());
        }
        Ok(())
    }

    pub fn planted_reward(&self, prompt: &TokenSeq, response: &TokenSeq) -> f64 {
        transitions(prompt, response)
            .map(|(prev, next)| self.reward_weights[prev * self.vocab + next])
            .sum()
    }
}

pub fn planted_weights(vocab: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..vocab * vocab).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>()
}

/// Generates `cfg.n_pairs` pairs labelled by the planted reward, then flips
/// each label independently with probability `cfg.label_flip_rate`.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Vec<PreferencePair>> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let sample = |rng: &mut crate::rng::Rng, len: usize| {
        TokenSeq::new((0..len).map(|_| rng.gen_range(0..cfg.vocab)).collect()).expect("len > 0")
    };
    let digits = cfg.n_pairs.to_string().len();
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    for i in 0..cfg.n_pairs {
        let prompt = sample(&mut rng, cfg.prompt_len);
        let mut attempt = 0;
        let (a, b, ra, rb) = loop {
            if attempt == RESAMPLE_CAP {
                return Err(Error::Degenerate(RESAMPLE_CAP));
            }
            attempt += 1;
            let a = sample(&mut rng, cfg.response_len);
            let b = sample(&mut rng, cfg.response_len);
            let (ra, rb) = (cfg.planted_reward(&prompt, &a), cfg.planted_reward(&prompt, &b));
            if a != b && ra != rb {
                break (a, b, ra, rb);
            }
        };
        let (chosen, rejected, rc, rr) = if ra > rb { (a, b, ra, rb) } else { (b, a, rb, ra) };
        let (zc, zr): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
        let score_chosen = rc + cfg.score_noise * zc;
        let score_rejected = rr + cfg.score_noise * zr;
        let flip = rng.gen::<f64>() < cfg.label_flip_rate;
        let pair = PreferencePair {
            id: format!("{}-{:0digits$}", cfg.id_prefix, i),
            prompt,
            chosen,
            rejected,
            score_chosen: Some(score_chosen),
            score_rejected: Some(score_rejected),
            true_margin: Some(rc - rr),
            flipped: Some(false),
        };
        pairs.push(if flip { pair.swapped() } else { pair });
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratKey {
    ScoreMargin,
    TrueMargin,
}

impl std::str::FromStr for StratKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "score_margin" | "score-margin" => Ok(Self::ScoreMargin),
            "true_margin" | "true-margin" => Ok(Self::TrueMargin),
            other => Err(Error::InvalidArgument(format!("unknown stratification key `{other}`"))),
        }
    }
}

impl StratKey {
    fn value(&self, pair: &PreferencePair) -> Result<f64> {
        let missing = |field| Error::MissingField {
            id: pair.id.clone(),
            field,
        };
        match self {
            StratKey::ScoreMargin => pair.score_margin().ok_or_else(|| missing("score_chosen/score_rejected")),
            StratKey::TrueMargin => pair.true_margin.ok_or_else(|| missing("true_margin")),
        }
    }
}

pub const DEFAULT_STRAT_BUCKETS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainValSplit {
    pub train: Vec<PreferencePair>,
    pub val: Vec<PreferencePair>,
}

/// Sorts pairs into `buckets` quantile buckets of the stratification key and
/// draws `round(val_fraction * |bucket|)` validation pairs from each.
/// Both outputs keep the input order.
pub fn stratified_split(
    pairs: &[PreferencePair],
    val_fraction: f64,
    key: StratKey,
    buckets: usize,
    seed: u64,
) -> Result<TrainValSplit> {
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction must be in [0, 1], got {val_fraction}"
        )));
    }
    if buckets == 0 {
        return Err(Error::InvalidArgument("bucket count must be positive".into()));
    }
    let keys = pairs.iter().map(|p| key.value(p)).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));

    let n = pairs.len();
    let mut rng = rng_from_seed(seed);
    let mut in_val = vec![false; n];
    for b in 0..buckets {
        let bucket = &order[b * n / buckets..(b + 1) * n / buckets];
        let take = (val_fraction * bucket.len() as f64).round() as usize;
        let mut members = bucket.to_vec();
        members.shuffle(&mut rng);
        for &i in &members[..take] {
            in_val[i] = true;
        }
    }
    let (val, train): (Vec<_>, Vec<_>) = pairs
        .iter()
        .cloned()
        .zip(in_val)
        .partition(|(_, v)| *v);
    Ok(TrainValSplit {
        train: train.into_iter().map(|(p, _)| p).collect(),
        val: val.into_iter().map(|(p, _)| p).collect(),
    })
}

/// Swaps chosen and rejected of each pair with probability `rate`.
/// One uniform draw per pair, so reapplying with the same seed undoes it.
pub fn flip_val_labels(pairs: &[PreferencePair], rate: f64, seed: u64) -> Result<Vec<PreferencePair>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("flip rate must be in [0, 1], got {rate}")));
    }
    let mut rng = derived_rng(seed, "flip-val");
    Ok(pairs
        .iter()
        .map(|p| {
            if rng.gen::<f64>() < rate {
                p.swapped()
            } else {
                p.clone()
            }
        })
        .collect())
}

/// Train, validation, and test pairs with disjoint ids.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<PreferencePair>,
    pub val: Vec<PreferencePair>,
    pub test: Vec<PreferencePair>,
}

impl DatasetSplits {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::DuplicateId(p.id.clone()));
            }
        }
        Ok(())
    }
}

pub fn write_dataset<W: Write>(pairs: &[PreferencePair], mut out: W) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(pairs: &[PreferencePair], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(pairs, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Parses one pair per line. Blank lines are skipped; errors name the line.
pub fn read_dataset<R: BufRead>(input: R, path: &Path) -> Result<Vec<PreferencePair>> {
    let mut pairs = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let pair: PreferencePair = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        pair.validate().map_err(|e| parse_err(e.to_string()))?;
        if !ids.insert(pair.id.clone()) {
            return Err(Error::DuplicateId(pair.id));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<PreferencePair>> {
    let path = path.as_ref();
    read_dataset(BufReader::new(File::open(path)?), path)
}
