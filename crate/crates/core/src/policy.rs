//! Desk-scale autoregressive policies.
//!
//! Both architectures condition each response token on the single previous
//! token; the last prompt token seeds the first response token.
//!
//! - [`Arch::LogLinear`]: a learned `V x V` logit table indexed by the
//!   previous token.
//! - [`Arch::Mlp`]: previous-token embedding, one or more `tanh` hidden
//!   layers, and a linear output layer producing `V` logits.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// A non-empty sequence of vocabulary indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TokenSeq(Vec<usize>);

impl TokenSeq {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> usize {
        *self.0.last().expect("token sequences are non-empty")
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t >= vocab) {
            Some(&token) => Err(Error::TokenOutOfRange { token, vocab }),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<usize>> for TokenSeq {
    type Error = Error;

    fn try_from(tokens: Vec<usize>) -> Result<Self> {
        Self::new(tokens)
    }
}

impl From<TokenSeq> for Vec<usize> {
    fn from(seq: TokenSeq) -> Self {
        seq.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    LogLinear,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub vocab_size: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub init_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn log_linear(vocab_size: usize, init_scale: f64, seed: u64) -> Self {
        Self {
            arch: Arch::LogLinear,
            vocab_size,
            hidden_dims: Vec::new(),
            init_scale,
            seed,
        }
    }

    pub fn mlp(vocab_size: usize, hidden_dims: Vec<usize>, init_scale: f64, seed: u64) -> Self {
        Self {
            arch: Arch::Mlp,
            vocab_size,
            hidden_dims,
            init_scale,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "init_scale must be positive, got {}",
                self.init_scale
            )));
        }
        if self.arch == Arch::Mlp {
            if self.hidden_dims.is_empty() {
                return Err(Error::InvalidConfig(
                    "MLP needs at least one hidden layer".into(),
                ));
            }
            if self.hidden_dims.contains(&0) {
                return Err(Error::InvalidConfig("hidden widths must be positive".into()));
            }
        }
        Ok(())
    }

    /// Named parameter blocks in storage order.
    pub fn layer_layout(&self) -> Vec<Layer> {
        let v = self.vocab_size;
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize| {
            layers.push(Layer { name, offset, len });
            offset += len;
        };
        match self.arch {
            Arch::LogLinear => push("logits".into(), v * v),
            Arch::Mlp => {
                let dims = &self.hidden_dims;
                push("embed".into(), v * dims[0]);
                let mut fan_in = dims[0];
                for (k, &width) in dims.iter().enumerate() {
                    push(format!("hidden{k}"), width * fan_in + width);
                    fan_in = width;
                }
                push("output".into(), v * fan_in + v);
            }
        }
        layers
    }
}

/// A contiguous named slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Layer {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat gradient over all model parameters, sharing the model's layer map.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    layers: Arc<Vec<Layer>>,
}

impl GradientVector {
    pub fn zeros_like(model: &PolicyModel) -> Self {
        Self {
            values: vec![0.0; model.num_params()],
            layers: Arc::clone(&model.layers),
        }
    }

    pub fn from_values(model: &PolicyModel, values: Vec<f64>) -> Result<Self> {
        if values.len() != model.num_params() {
            return Err(Error::LengthMismatch {
                expected: model.num_params(),
                actual: values.len(),
            });
        }
        Ok(Self {
            values,
            layers: Arc::clone(&model.layers),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &GradientVector) -> Result<f64> {
        if self.values.len() != other.values.len() {
            return Err(Error::LengthMismatch {
                expected: self.values.len(),
                actual: other.values.len(),
            });
        }
        Ok(dot(&self.values, &other.values))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &GradientVector) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(Error::LengthMismatch {
                expected: self.values.len(),
                actual: other.values.len(),
            });
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn layer_slice(&self, layer: &Layer) -> &[f64] {
        &self.values[layer.range()]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Parameters plus architecture. Immutable outside the trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    config: ModelConfig,
    params: Vec<f64>,
    layers: Arc<Vec<Layer>>,
}

/// Draws parameters uniformly from `[-init_scale, init_scale]` using `config.seed`.
pub fn init_model(config: &ModelConfig) -> Result<PolicyModel> {
    config.validate()?;
    let layers = config.layer_layout();
    let n: usize = layers.iter().map(|l| l.len).sum();
    let mut rng = rng_from_seed(config.seed);
    let s = config.init_scale;
    let params = (0..n).map(|_| rng.gen_range(-s..=s)).collect();
    Ok(PolicyModel {
        config: config.clone(),
        params,
        layers: Arc::new(layers),
    })
}

impl PolicyModel {
    pub fn with_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layers = config.layer_layout();
        let n: usize = layers.iter().map(|l| l.len).sum();
        if params.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: params.len(),
            });
        }
        Ok(Self {
            config,
            params,
            layers: Arc::new(layers),
        })
    }

    /// All-zero parameters: the uniform next-token distribution for `LogLinear`.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let n = config.layer_layout().iter().map(|l| l.len).sum();
        Self::with_params(config, vec![0.0; n])
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// True when `other` has the same architecture and shape.
    pub fn same_shape(&self, other: &PolicyModel) -> bool {
        self.config.arch == other.config.arch
            && self.config.vocab_size == other.config.vocab_size
            && self.config.hidden_dims == other.config.hidden_dims
    }

    pub fn ensure_same_shape(&self, other: &PolicyModel) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ConfigMismatch)
        }
    }

    /// Returns a copy with parameters `self + alpha * direction`.
    pub fn stepped(&self, alpha: f64, direction: &GradientVector) -> Result<PolicyModel> {
        if direction.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                expected: self.params.len(),
                actual: direction.len(),
            });
        }
        let mut out = self.clone();
        for (p, d) in out.params.iter_mut().zip(direction.values()) {
            *p += alpha * d;
        }
        Ok(out)
    }

    /// Next-token logits given the previous token.
    pub fn logits(&self, prev: usize) -> Vec<f64> {
        match self.config.arch {
            Arch::LogLinear => {
                let v = self.vocab_size();
                self.params[prev * v..(prev + 1) * v].to_vec()
            }
            Arch::Mlp => {
                let acts = self.mlp_activations(prev);
                self.mlp_output(acts.last().expect("at least the embedding"))
            }
        }
    }

    /// Next-token log-probabilities given the previous token.
    pub fn log_probs(&self, prev: usize) -> Vec<f64> {
        log_softmax(&self.logits(prev))
    }

    /// Embedding row followed by each hidden layer's `tanh` activation.
    fn mlp_activations(&self, prev: usize) -> Vec<Vec<f64>> {
        let dims = &self.config.hidden_dims;
        let embed = &self.layers[0];
        let e = embed.offset + prev * dims[0];
        let mut acts = Vec::with_capacity(dims.len() + 1);
        acts.push(self.params[e..e + dims[0]].to_vec());
        for (k, &width) in dims.iter().enumerate() {
            let layer = &self.layers[1 + k];
            let input = &acts[k];
            let fan_in = input.len();
            let w = &self.params[layer.offset..layer.offset + width * fan_in];
            let b = &self.params[layer.offset + width * fan_in..layer.offset + layer.len];
            let out: Vec<f64> = (0..width)
                .map(|i| (dot(&w[i * fan_in..(i + 1) * fan_in], input) + b[i]).tanh())
                .collect();
            acts.push(out);
        }
        acts
    }

    fn mlp_output(&self, hidden: &[f64]) -> Vec<f64> {
        let v = self.vocab_size();
        let layer = self.layers.last().expect("output layer");
        let fan_in = hidden.len();
        let w = &self.params[layer.offset..layer.offset + v * fan_in];
        let b = &self.params[layer.offset + v * fan_in..layer.offset + layer.len];
        (0..v)
            .map(|i| dot(&w[i * fan_in..(i + 1) * fan_in], hidden) + b[i])
            .collect()
    }

    fn check_tokens(&self, prompt: &TokenSeq, response: &TokenSeq) -> Result<()> {
        prompt.check_vocab(self.vocab_size())?;
        response.check_vocab(self.vocab_size())
    }

    /// Accumulates `scale * d/dθ log π(response | prompt)` into `out`.
    pub(crate) fn add_seq_logprob_grad(
        &self,
        prompt: &TokenSeq,
        response: &TokenSeq,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_tokens(prompt, response)?;
        if out.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                expected: self.params.len(),
                actual: out.len(),
            });
        }
        let v = self.vocab_size();
        for (prev, next) in transitions(prompt, response) {
            match self.config.arch {
                Arch::LogLinear => {
                    let row = &self.params[prev * v..(prev + 1) * v];
                    let probs = softmax(row);
                    let g = &mut out[prev * v..(prev + 1) * v];
                    for (j, (gj, pj)) in g.iter_mut().zip(&probs).enumerate() {
                        let onehot = if j == next { 1.0 } else { 0.0 };
                        *gj += scale * (onehot - pj);
                    }
                }
                Arch::Mlp => self.mlp_backward(prev, next, scale, out),
            }
        }
        Ok(())
    }

    fn mlp_backward(&self, prev: usize, next: usize, scale: f64, out: &mut [f64]) {
        let v = self.vocab_size();
        let dims = &self.config.hidden_dims;
        let acts = self.mlp_activations(prev);
        let top = acts.last().expect("activations");
        let probs = softmax(&self.mlp_output(top));
        // d log p[next] / d logits
        let dlogits: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(j, p)| if j == next { 1.0 - p } else { -p })
            .collect();

        let out_layer = self.layers.last().expect("output layer");
        let fan_in = top.len();
        let w_out = out_layer.offset;
        let b_out = out_layer.offset + v * fan_in;
        let mut upstream = vec![0.0; fan_in];
        for i in 0..v {
            let d = dlogits[i];
            out[b_out + i] += scale * d;
            let row = w_out + i * fan_in;
            for j in 0..fan_in {
                out[row + j] += scale * d * top[j];
                upstream[j] += self.params[row + j] * d;
            }
        }

        for k in (0..dims.len()).rev() {
            let layer = &self.layers[1 + k];
            let width = dims[k];
            let act = &acts[k + 1];
            let input = &acts[k];
            let fan_in = input.len();
            let b = layer.offset + width * fan_in;
            let dz: Vec<f64> = upstream
                .iter()
                .zip(act)
                .map(|(u, a)| u * (1.0 - a * a))
                .collect();
            let mut next_up = vec![0.0; fan_in];
            for i in 0..width {
                out[b + i] += scale * dz[i];
                let row = layer.offset + i * fan_in;
                for j in 0..fan_in {
                    out[row + j] += scale * dz[i] * input[j];
                    next_up[j] += self.params[row + j] * dz[i];
                }
            }
            upstream = next_up;
        }

        let e = self.layers[0].offset + prev * dims[0];
        for (j, u) in upstream.iter().enumerate() {
            out[e + j] += scale * u;
        }
    }

    /// Log-probability table over all `(prev, next)` transitions.
    pub fn log_prob_table(&self) -> LogProbTable {
        let v = self.vocab_size();
        let mut rows = Vec::with_capacity(v * v);
        for prev in 0..v {
            rows.extend(self.log_probs(prev));
        }
        LogProbTable { vocab: v, rows }
    }
}

/// `(previous token, next token)` pairs scored when generating `response`.
pub fn transitions<'a>(
    prompt: &'a TokenSeq,
    response: &'a TokenSeq,
) -> impl Iterator<Item = (usize, usize)> + 'a {
    let first = prompt.last();
    std::iter::once(first)
        .chain(response.tokens().iter().copied())
        .zip(response.tokens().iter().copied())
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log π(response | prompt)`.
pub fn seq_logprob(model: &PolicyModel, prompt: &TokenSeq, response: &TokenSeq) -> Result<f64> {
    model.check_tokens(prompt, response)?;
    Ok(transitions(prompt, response)
        .map(|(prev, next)| model.log_probs(prev)[next])
        .sum())
}

/// Exact gradient of [`seq_logprob`] with respect to every parameter.
pub fn seq_logprob_grad(
    model: &PolicyModel,
    prompt: &TokenSeq,
    response: &TokenSeq,
) -> Result<GradientVector> {
    let mut grad = GradientVector::zeros_like(model);
    model.add_seq_logprob_grad(prompt, response, 1.0, grad.values_mut())?;
    Ok(grad)
}

/// Precomputed next-token log-probabilities for every context token.
///
/// With single-token contexts a whole forward pass over any number of
/// sequences reduces to table lookups once the `V` rows are evaluated.
#[derive(Clone, Debug)]
pub struct LogProbTable {
    vocab: usize,
    rows: Vec<f64>,
}

impl LogProbTable {
    pub fn get(&self, prev: usize, next: usize) -> f64 {
        self.rows[prev * self.vocab + next]
    }

    pub fn seq_logprob(&self, prompt: &TokenSeq, response: &TokenSeq) -> Result<f64> {
        prompt.check_vocab(self.vocab)?;
        response.check_vocab(self.vocab)?;
        Ok(transitions(prompt, response)
            .map(|(prev, next)| self.get(prev, next))
            .sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(t: &[usize]) -> TokenSeq {
        TokenSeq::new(t.to_vec()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::log_linear(4, 0.5, 7);
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.num_params(), 16);
    }

    #[test]
    fn mlp_layer_map_covers_params() {
        let cfg = ModelConfig::mlp(8, vec![16], 0.1, 1);
        let m = init_model(&cfg).unwrap();
        let names: Vec<_> = m.layers().iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, ["embed", "hidden0", "output"]);
        // embed 8*16, hidden 16*16+16, output 8*16+8
        assert_eq!(m.num_params(), 128 + 272 + 136);
        let mut offset = 0;
        for l in m.layers() {
            assert_eq!(l.offset, offset);
            offset += l.len;
        }
        assert_eq!(offset, m.num_params());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(init_model(&ModelConfig::log_linear(1, 0.1, 0)).is_err());
        assert!(init_model(&ModelConfig::mlp(4, vec![], 0.1, 0)).is_err());
        assert!(init_model(&ModelConfig::log_linear(4, 0.0, 0)).is_err());
    }

    #[test]
    fn uniform_logprob() {
        let m = PolicyModel::zeros(ModelConfig::log_linear(4, 0.1, 0)).unwrap();
        let lp = seq_logprob(&m, &seq(&[1, 2]), &seq(&[0, 3, 3])).unwrap();
        assert!((lp - 3.0 * (0.25f64).ln()).abs() < 1e-12);
        assert!((lp + 4.158883).abs() < 1e-6);
    }

    #[test]
    fn empty_response_rejected() {
        assert!(matches!(TokenSeq::new(vec![]), Err(Error::EmptySequence)));
        assert!(serde_json::from_str::<TokenSeq>("[]").is_err());
    }

    #[test]
    fn out_of_range_token() {
        let m = PolicyModel::zeros(ModelConfig::log_linear(4, 0.1, 0)).unwrap();
        let err = seq_logprob(&m, &seq(&[1]), &seq(&[4])).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { token: 4, vocab: 4 }));
        assert!(seq_logprob_grad(&m, &seq(&[9]), &seq(&[0])).is_err());
    }

    #[test]
    fn uniform_single_token_gradient() {
        let v = 4;
        let m = PolicyModel::zeros(ModelConfig::log_linear(v, 0.1, 0)).unwrap();
        let g = seq_logprob_grad(&m, &seq(&[0, 2]), &seq(&[1])).unwrap();
        assert_eq!(g.len(), m.num_params());
        for prev in 0..v {
            for next in 0..v {
                let got = g.values()[prev * v + next];
                let want = if prev == 2 {
                    (if next == 1 { 1.0 } else { 0.0 }) - 0.25
                } else {
                    0.0
                };
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn table_matches_direct() {
        let m = init_model(&ModelConfig::mlp(6, vec![5, 4], 0.7, 3)).unwrap();
        let t = m.log_prob_table();
        let (p, r) = (seq(&[0, 5]), seq(&[1, 2, 3, 3]));
        assert_eq!(t.seq_logprob(&p, &r).unwrap(), seq_logprob(&m, &p, &r).unwrap());
    }
}
