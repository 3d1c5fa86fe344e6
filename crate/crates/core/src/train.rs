//! Character-level toy model with LoRA adapters on every linear map,
//! scale-normalization layers, the structured-risk loss, channel pruning and
//! the three-phase fine-tuning schedule.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Category, CorpusError, Dataset, PhaseMap};
use crate::lora::{
    check_rank, init_adapter, merge_adapter, read_f32, read_matrix, read_u32, AdapterGrad, LoraAdapter, LoraError,
    WeightMatrix,
};
use crate::scalar::{softmax_in_place, Scalar};

pub const PAD: usize = 0;
pub const END: usize = 1;
pub const UNK: usize = 2;
const RESERVED: usize = 3;

pub const DEFAULT_CONTEXT: usize = 4;
pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_BLOCKS: usize = 2;
pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_PRUNE_TAU: f64 = 0.01;
pub const DEFAULT_LAMBDA: f64 = 0.002;
pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

const MAGIC: &[u8; 4] = b"TMD1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("channel mismatch: layer has {expected} channels, input has {got}")]
    Channels { expected: usize, got: usize },
    #[error("no examples (N = 0)")]
    NoExamples,
    #[error("phase {phase} has no data for categories {categories:?}")]
    EmptyPhase { phase: u8, categories: Vec<Category> },
    #[error("pruning would remove every channel of layer {layer}")]
    EmptyLayer { layer: usize },
    #[error("invalid phase plan: {0}")]
    Plan(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Character alphabet. Indices 0..3 are PAD, END and UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl Vocab {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars.into_iter().collect();
        let chars: Vec<char> = set.into_iter().collect();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + RESERVED)).collect();
        Self { chars, index }
    }

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_chars(texts.into_iter().flat_map(str::chars))
    }

    pub fn size(&self) -> usize {
        self.chars.len() + RESERVED
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn encode_char(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn decode(&self, token: usize) -> Option<char> {
        token.checked_sub(RESERVED).and_then(|i| self.chars.get(i).copied())
    }
}

/// Next-token prediction windows: `contexts` is `n × context` row-major.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Examples {
    pub context: usize,
    pub contexts: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Examples {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Every character of `text` plus a final END, each predicted from the
    /// preceding `context` tokens (PAD before the start).
    pub fn push_text(&mut self, vocab: &Vocab, text: &str) {
        let mut tokens = vec![PAD; self.context];
        tokens.extend(text.chars().map(|c| vocab.encode_char(c)));
        tokens.push(END);
        for t in self.context..tokens.len() {
            self.contexts.extend_from_slice(&tokens[t - self.context..t]);
            self.targets.push(tokens[t]);
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Examples {
        let mut out = Examples { context: self.context, ..Default::default() };
        for &i in idx {
            out.contexts.extend_from_slice(&self.contexts[i * self.context..(i + 1) * self.context]);
            out.targets.push(self.targets[i]);
        }
        out
    }
}

/// Frozen base weight plus its adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub base: WeightMatrix<T>,
    pub adapter: LoraAdapter<T>,
}

impl<T: Scalar> Linear<T> {
    fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        self.adapter.forward_batch(&self.base, x).expect("shapes chain")
    }

    /// `g · (W0 + s B A)` without forming the merged matrix.
    fn input_grad(&self, g: ArrayView2<T>) -> Array2<T> {
        let s = self.adapter.scale();
        g.dot(&self.base.weights) + g.dot(&self.adapter.b).dot(&self.adapter.a) * s
    }

    fn param_count(&self) -> usize {
        self.base.weights.len() + self.adapter.param_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics.
    Train,
    /// Running statistics.
    Infer,
}

/// Per-channel `γ (z − μ) / sqrt(δ² + ε) + β`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleNormLayer<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub mu: Array1<T>,
    pub var: Array1<T>,
    pub eps: T,
    pub momentum: T,
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub zhat: Array2<T>,
    pub inv_std: Array1<T>,
    pub batch_mean: Array1<T>,
    pub batch_var: Array1<T>,
}

impl<T: Scalar> ScaleNormLayer<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            mu: Array1::zeros(channels),
            var: Array1::ones(channels),
            eps: T::lit(DEFAULT_EPS),
            momentum: T::lit(DEFAULT_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Rows of `z` are examples, columns channels.
    pub fn forward(&self, z: ArrayView2<T>, mode: NormMode) -> Result<(Array2<T>, NormCache<T>), TrainError> {
        if z.ncols() != self.channels() {
            return Err(TrainError::Channels { expected: self.channels(), got: z.ncols() });
        }
        let (mean, var) = match mode {
            NormMode::Infer => (self.mu.clone(), self.var.clone()),
            NormMode::Train => {
                let n = T::from_usize(z.nrows().max(1)).unwrap();
                let mean = z.sum_axis(Axis(0)) / n;
                let centered = &z - &mean;
                let var = (&centered * &centered).sum_axis(Axis(0)) / n;
                (mean, var)
            }
        };
        let inv_std = var.mapv(|v| T::one() / (v + self.eps).sqrt());
        let zhat = (&z - &mean) * &inv_std;
        let out = &zhat * &self.gamma + &self.beta;
        Ok((out, NormCache { zhat, inv_std, batch_mean: mean, batch_var: var }))
    }

    fn update_running(&mut self, cache: &NormCache<T>) {
        let m = self.momentum;
        self.mu = &self.mu * (T::one() - m) + &cache.batch_mean * m;
        self.var = &self.var * (T::one() - m) + &cache.batch_var * m;
    }

    /// Backward through a training-mode forward. Returns `(dz, dγ, dβ)`.
    fn backward(&self, cache: &NormCache<T>, g: ArrayView2<T>) -> (Array2<T>, Array1<T>, Array1<T>) {
        let dgamma = (&g * &cache.zhat).sum_axis(Axis(0));
        let dbeta = g.sum_axis(Axis(0));
        let n = T::from_usize(g.nrows().max(1)).unwrap();
        let dzhat = &g * &self.gamma;
        let sum_d = dzhat.sum_axis(Axis(0));
        let sum_dz = (&dzhat * &cache.zhat).sum_axis(Axis(0));
        let dz = (&dzhat * n - &sum_d - &cache.zhat * &sum_dz) * &cache.inv_std / n;
        (dz, dgamma, dbeta)
    }

    fn keep(&mut self, keep: &[usize]) {
        self.gamma = self.gamma.select(Axis(0), keep);
        self.beta = self.beta.select(Axis(0), keep);
        self.mu = self.mu.select(Axis(0), keep);
        self.var = self.var.select(Axis(0), keep);
    }
}

/// Free-function form of the normalization forward pass.
pub fn scalenorm_forward<T: Scalar>(
    layer: &ScaleNormLayer<T>,
    z_in: ArrayView2<T>,
    mode: NormMode,
) -> Result<Array2<T>, TrainError> {
    Ok(layer.forward(z_in, mode)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub linear: Linear<T>,
    pub norm: ScaleNormLayer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel<T> {
    pub vocab: Vocab,
    pub context: usize,
    pub blocks: Vec<Block<T>>,
    pub head: Linear<T>,
    pub rank: usize,
    pub alpha: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub context: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context: DEFAULT_CONTEXT,
            hidden: DEFAULT_HIDDEN,
            blocks: DEFAULT_BLOCKS,
            rank: DEFAULT_RANK,
            alpha: DEFAULT_RANK as f64,
            seed: 0,
        }
    }
}

/// Gradients for every trainable parameter, blocks first then head.
#[derive(Debug, Clone)]
pub struct ModelGrad<T> {
    pub adapters: Vec<AdapterGrad<T>>,
    pub gamma: Vec<Array1<T>>,
    pub beta: Vec<Array1<T>>,
}

impl<T: Scalar> ModelGrad<T> {
    pub fn norm(&self) -> T {
        let adapters = self.adapters.iter().flat_map(|g| g.a.iter().chain(g.b.iter()));
        let norms = self.gamma.iter().chain(&self.beta).flat_map(|v| v.iter());
        adapters.chain(norms).map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`.
    pub fn clip(&mut self, max_norm: T) {
        let n = self.norm();
        if n > max_norm {
            let f = max_norm / n;
            for g in self.adapters.iter_mut() {
                g.a.mapv_inplace(|v| v * f);
                g.b.mapv_inplace(|v| v * f);
            }
            for v in self.gamma.iter_mut().chain(self.beta.iter_mut()) {
                v.mapv_inplace(|x| x * f);
            }
        }
    }
}

pub struct ForwardCache<T> {
    inputs: Vec<Array2<T>>,
    norms: Vec<NormCache<T>>,
    pre_relu: Vec<Array2<T>>,
    head_input: Array2<T>,
    pub logits: Array2<T>,
}

fn rank_for(d: usize, k: usize, r: usize) -> usize {
    r.min(d.min(k) / 2).max(1)
}

impl<T: Scalar> TinyModel<T> {
    pub fn new(vocab: Vocab, cfg: &ModelConfig) -> Result<Self, TrainError> {
        if cfg.context == 0 || cfg.hidden < 2 || cfg.blocks == 0 {
            return Err(TrainError::Config("context, hidden and blocks must be positive".into()));
        }
        check_rank(cfg.hidden, cfg.hidden, cfg.rank)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let v = vocab.size();
        let alpha = T::lit(cfg.alpha);
        let mut seed_ctr = cfg.seed.wrapping_mul(1000);
        let mut linear = |out: usize, inp: usize, std: f64, rng: &mut ChaCha8Rng| -> Result<Linear<T>, TrainError> {
            let normal = Normal::new(0.0, std).unwrap();
            let w = Array2::from_shape_fn((out, inp), |_| T::lit(normal.sample(rng)));
            seed_ctr += 1;
            let r = rank_for(out, inp, cfg.rank);
            Ok(Linear { base: WeightMatrix::new(w), adapter: init_adapter(out, inp, r, alpha, seed_ctr)? })
        };
        let mut blocks = Vec::new();
        let mut fan_in = cfg.context * v;
        for b in 0..cfg.blocks {
            // one-hot inputs have `context` active entries
            let std = if b == 0 { 1.0 / (cfg.context as f64).sqrt() } else { (2.0 / fan_in as f64).sqrt() };
            blocks.push(Block { linear: linear(cfg.hidden, fan_in, std, &mut rng)?, norm: ScaleNormLayer::identity(cfg.hidden) });
            fan_in = cfg.hidden;
        }
        let head = linear(v, cfg.hidden, (1.0 / cfg.hidden as f64).sqrt(), &mut rng)?;
        Ok(Self { vocab, context: cfg.context, blocks, head, rank: cfg.rank, alpha })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.norm.channels()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.linear.param_count() + 4 * b.norm.channels()).sum::<usize>()
            + self.head.param_count()
    }

    pub fn gamma_l1(&self) -> T {
        self.blocks.iter().map(|b| b.norm.gamma.iter().map(|g| g.abs()).sum::<T>()).sum()
    }

    pub fn is_finite(&self) -> bool {
        let lin = |l: &Linear<T>| l.base.is_finite() && l.adapter.is_finite();
        self.blocks.iter().all(|b| {
            lin(&b.linear)
                && [&b.norm.gamma, &b.norm.beta, &b.norm.mu, &b.norm.var].iter().all(|a| a.iter().all(|v| v.is_finite()))
        }) && lin(&self.head)
    }

    /// Checksums of every frozen base matrix, blocks first then head.
    pub fn base_checksums(&self) -> Vec<u64> {
        self.blocks.iter().map(|b| b.linear.base.checksum()).chain([self.head.base.checksum()]).collect()
    }

    pub fn examples_for(&self, texts: impl IntoIterator<Item = impl AsRef<str>>) -> Examples {
        let mut ex = Examples { context: self.context, ..Default::default() };
        for t in texts {
            ex.push_text(&self.vocab, t.as_ref());
        }
        ex
    }

    fn one_hot(&self, ex: &Examples) -> Array2<T> {
        let v = self.vocab_size();
        let mut x = Array2::zeros((ex.len(), self.context * v));
        for (i, ctx) in ex.contexts.chunks(self.context).enumerate() {
            for (j, &tok) in ctx.iter().enumerate() {
                x[[i, j * v + tok]] = T::one();
            }
        }
        x
    }

    pub fn forward(&self, ex: &Examples, mode: NormMode) -> Result<ForwardCache<T>, TrainError> {
        let mut h = self.one_hot(ex);
        let mut inputs = Vec::new();
        let mut norms = Vec::new();
        let mut pre_relu = Vec::new();
        for b in &self.blocks {
            let z = b.linear.forward(h.view());
            let (out, cache) = b.norm.forward(z.view(), mode)?;
            inputs.push(h);
            h = out.mapv(|v| if v > T::zero() { v } else { T::zero() });
            pre_relu.push(out);
            norms.push(cache);
        }
        let logits = self.head.forward(h.view());
        Ok(ForwardCache { inputs, norms, pre_relu, head_input: h, logits })
    }

    /// Logits for a batch, normalization in inference mode.
    pub fn logits(&self, ex: &Examples) -> Array2<T> {
        self.forward(ex, NormMode::Infer).expect("model shapes are consistent").logits
    }

    /// Structured-risk loss and gradient on one batch. In training mode the
    /// batch statistics are used; running statistics are not touched.
    pub fn loss_and_grad(&self, ex: &Examples, cfg: &SrmConfig) -> Result<(T, ModelGrad<T>, ForwardCache<T>), TrainError> {
        let cache = self.forward(ex, NormMode::Train)?;
        let loss = srm_loss(cache.logits.view(), &ex.targets, self, cfg)?;
        let n = T::from_usize(ex.len()).unwrap();
        let lambda = T::lit(cfg.lambda);
        let mut probs = cache.logits.clone();
        for mut row in probs.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("standard layout"));
        }
        let mut dlogits = probs.clone();
        for (i, &t) in ex.targets.iter().enumerate() {
            dlogits[[i, t]] -= T::one();
        }
        if cfg.complexity == Complexity::ExpectedOutputLength && cfg.lambda > 0.0 {
            // J = mean(1 − p_end); dJ/dz_k = −p_end (δ_k,end − p_k)
            for (mut drow, prow) in dlogits.rows_mut().into_iter().zip(probs.rows()) {
                let pe = prow[END];
                for (k, d) in drow.iter_mut().enumerate() {
                    let delta = if k == END { T::one() } else { T::zero() };
                    *d -= lambda * pe * (delta - prow[k]);
                }
            }
        }
        dlogits /= n;

        let mut adapters = Vec::with_capacity(self.blocks.len() + 1);
        let head_grad = self.head.adapter.backward_batch(cache.head_input.view(), dlogits.view());
        let mut g = self.head.input_grad(dlogits.view());
        let mut gammas = Vec::new();
        let mut betas = Vec::new();
        for (l, b) in self.blocks.iter().enumerate().rev() {
            let pre = &cache.pre_relu[l];
            g.zip_mut_with(pre, |gv, &p| {
                if p <= T::zero() {
                    *gv = T::zero();
                }
            });
            let (dz, mut dgamma, dbeta) = b.norm.backward(&cache.norms[l], g.view());
            if cfg.complexity == Complexity::GammaL1 && cfg.lambda > 0.0 {
                dgamma.zip_mut_with(&b.norm.gamma, |d, &gm| *d += lambda * sign(gm));
            }
            adapters.push(b.linear.adapter.backward_batch(cache.inputs[l].view(), dz.view()));
            gammas.push(dgamma);
            betas.push(dbeta);
            if l > 0 {
                g = b.linear.input_grad(dz.view());
            }
        }
        adapters.reverse();
        gammas.reverse();
        betas.reverse();
        adapters.push(head_grad);
        Ok((loss, ModelGrad { adapters, gamma: gammas, beta: betas }, cache))
    }

    /// Folds every adapter into its base weight and attaches fresh adapters.
    /// The model's function is unchanged.
    pub fn merge_adapters(&mut self, seed: u64) -> Result<(), TrainError> {
        let mut ctr = seed.wrapping_mul(7919);
        let rank = self.rank;
        let alpha = self.alpha;
        let mut remerge = |lin: &mut Linear<T>| -> Result<(), TrainError> {
            lin.base = merge_adapter(&lin.base, &lin.adapter)?;
            ctr += 1;
            let (d, k) = (lin.base.rows(), lin.base.cols());
            lin.adapter = init_adapter(d, k, rank_for(d, k, rank), alpha, ctr)?;
            Ok(())
        };
        for b in self.blocks.iter_mut() {
            remerge(&mut b.linear)?;
        }
        remerge(&mut self.head)
    }

    /// Mean log-probability per token of `continuation` (plus END) given
    /// `prefix`.
    pub fn mean_log_likelihood(&self, prefix: &str, continuation: &str) -> T {
        let mut tokens = vec![PAD; self.context];
        tokens.extend(prefix.chars().map(|c| self.vocab.encode_char(c)));
        let start = tokens.len();
        tokens.extend(continuation.chars().map(|c| self.vocab.encode_char(c)));
        tokens.push(END);
        let mut ex = Examples { context: self.context, ..Default::default() };
        for t in start..tokens.len() {
            ex.contexts.extend_from_slice(&tokens[t - self.context..t]);
            ex.targets.push(tokens[t]);
        }
        let mut logits = self.logits(&ex);
        let mut total = T::zero();
        for (mut row, &t) in logits.rows_mut().into_iter().zip(&ex.targets) {
            softmax_in_place(row.as_slice_mut().unwrap());
            total += row[t].max(T::min_positive_value()).ln();
        }
        total / T::from_usize(ex.len()).unwrap()
    }

    /// Top-1 next-character accuracy over the training texts of `data`.
    pub fn next_char_accuracy(&self, data: &Dataset) -> f64 {
        let ex = self.examples_for(data.iter().map(|r| r.training_text()));
        if ex.is_empty() {
            return 0.0;
        }
        let logits = self.logits(&ex);
        let hits = logits
            .rows()
            .into_iter()
            .zip(&ex.targets)
            .filter(|(row, &t)| argmax(row.iter().copied()) == t)
            .count();
        hits as f64 / ex.len() as f64
    }
}

fn argmax<T: Scalar>(xs: impl Iterator<Item = T>) -> usize {
    let mut best = (0, T::neg_infinity());
    for (i, x) in xs.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Complexity {
    /// `J = Σ |γ|` over all normalization channels.
    #[default]
    GammaL1,
    /// `J = mean (1 − p_END)`: the chance of continuing rather than stopping.
    ExpectedOutputLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SrmConfig {
    pub lambda: f64,
    pub complexity: Complexity,
}

impl SrmConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// `(1/N) Σ CE(y_i, f(x_i)) + λ J(f)`.
pub fn srm_loss<T: Scalar>(
    logits: ArrayView2<T>,
    targets: &[usize],
    model: &TinyModel<T>,
    cfg: &SrmConfig,
) -> Result<T, TrainError> {
    if targets.is_empty() || logits.nrows() != targets.len() {
        return Err(TrainError::NoExamples);
    }
    cfg.validate()?;
    let n = T::from_usize(targets.len()).unwrap();
    let mut ce = T::zero();
    let mut p_continue = T::zero();
    let mut row_buf = vec![T::zero(); logits.ncols()];
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        row_buf.iter_mut().zip(row.iter()).for_each(|(d, &s)| *d = s);
        let lse = softmax_in_place(&mut row_buf);
        ce += lse - row[t];
        p_continue += T::one() - row_buf[END];
    }
    let j = match cfg.complexity {
        Complexity::GammaL1 => model.gamma_l1(),
        Complexity::ExpectedOutputLength => p_continue / n,
    };
    Ok(ce / n + T::lit(cfg.lambda) * j)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrunedChannel {
    pub layer: usize,
    pub channel: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct PruneReport {
    pub tau: f64,
    pub pruned: Vec<PrunedChannel>,
    pub params_before: usize,
    pub params_after: usize,
}

/// Removes every channel whose `|γ| < tau`, with the matching row of the
/// producing linear map and column of the consuming one.
pub fn prune_channels<T: Scalar>(model: &TinyModel<T>, tau: f64) -> Result<(TinyModel<T>, PruneReport), TrainError> {
    let mut out = model.clone();
    let mut report = PruneReport { tau, params_before: model.param_count(), ..Default::default() };
    for l in 0..out.blocks.len() {
        let gamma = &out.blocks[l].norm.gamma;
        let keep: Vec<usize> = (0..gamma.len()).filter(|&c| gamma[c].abs().as_f64() >= tau).collect();
        if keep.is_empty() {
            return Err(TrainError::EmptyLayer { layer: l });
        }
        if keep.len() == gamma.len() {
            continue;
        }
        for c in (0..gamma.len()).filter(|c| !keep.contains(c)) {
            report.pruned.push(PrunedChannel { layer: l, channel: c, gamma: gamma[c].as_f64() });
        }
        let block = &mut out.blocks[l];
        block.linear.base.weights = block.linear.base.weights.select(Axis(0), &keep);
        block.linear.adapter.remove_outputs(&keep);
        block.norm.keep(&keep);
        let next = if l + 1 < out.blocks.len() { &mut out.blocks[l + 1].linear } else { &mut out.head };
        next.base.weights = next.base.weights.select(Axis(1), &keep);
        next.adapter.remove_inputs(&keep);
    }
    report.params_after = out.param_count();
    Ok((out, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    #[serde(default)]
    pub clip_norm: f64,
    pub srm: SrmConfig,
    pub seed: u64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 0.5, batch_size: 128, clip_norm: 1.0, srm: SrmConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseRun {
    pub epoch_losses: Vec<f64>,
    /// Record ids read by this phase, in first-access order.
    pub accessed_ids: Vec<String>,
    /// Set when the last epoch's loss exceeds the first epoch's.
    pub loss_increased: bool,
}

/// Trains adapters, γ and β by gradient descent on the structured-risk
/// loss. The γ L1 term is applied as a proximal (soft-threshold) step.
pub fn run_phase<T: Scalar>(model: &mut TinyModel<T>, data: &Dataset, cfg: &PhaseConfig) -> Result<PhaseRun, TrainError> {
    cfg.srm.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyPhase { phase: 0, categories: vec![] });
    }
    let accessed_ids: Vec<String> = data.iter().map(|r| r.id.clone()).collect();
    let ex = model.examples_for(data.iter().map(|r| r.training_text()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lr = T::lit(cfg.lr);
    let prox = T::lit(cfg.lr * cfg.srm.lambda);
    let mut order: Vec<usize> = (0..ex.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(2)) {
            let batch = ex.subset(chunk);
            let (loss, mut grad, cache) = model.loss_and_grad(&batch, &cfg.srm)?;
            total += loss.as_f64();
            batches += 1;
            let gamma_l1 = cfg.srm.complexity == Complexity::GammaL1 && cfg.srm.lambda > 0.0;
            if gamma_l1 {
                // the prox step below handles the penalty
                let lam = T::lit(cfg.srm.lambda);
                for (g, b) in grad.gamma.iter_mut().zip(&model.blocks) {
                    g.zip_mut_with(&b.norm.gamma, |d, &gm| *d -= lam * sign(gm));
                }
            }
            if cfg.clip_norm > 0.0 {
                grad.clip(T::lit(cfg.clip_norm));
            }
            for (l, b) in model.blocks.iter_mut().enumerate() {
                b.norm.update_running(&cache.norms[l]);
                b.norm.gamma.scaled_add(-lr, &grad.gamma[l]);
                b.norm.beta.scaled_add(-lr, &grad.beta[l]);
                if gamma_l1 {
                    b.norm.gamma.mapv_inplace(|g| sign(g) * (g.abs() - prox).max(T::zero()));
                }
                b.linear.adapter.apply_step(&grad.adapters[l], lr);
            }
            let last = grad.adapters.len() - 1;
            model.head.adapter.apply_step(&grad.adapters[last], lr);
        }
        epoch_losses.push(total / batches.max(1) as f64);
        if !model.is_finite() {
            return Err(TrainError::NonFinite("model parameters after an epoch".into()));
        }
    }
    let loss_increased = match (epoch_losses.first(), epoch_losses.last()) {
        (Some(a), Some(b)) => b > a,
        _ => false,
    };
    Ok(PhaseRun { epoch_losses, accessed_ids, loss_increased })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub phase: u8,
    pub categories: Vec<Category>,
    pub config: PhaseConfig,
}

/// Three ordered phases plus the regularization step run on phase-2 data
/// before pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phases: Vec<PhaseSpec>,
    pub regularization: PhaseConfig,
}

impl PhasePlan {
    /// Categories from `map`; the structured-risk penalty is on only for
    /// the regularization step and phase 3.
    pub fn from_map(map: &PhaseMap, base: PhaseConfig, srm: SrmConfig) -> Self {
        let phases = (1..=3u8)
            .map(|p| {
                let mut config = PhaseConfig { seed: base.seed.wrapping_add(p as u64), ..base };
                config.srm = if p == 3 { srm } else { SrmConfig { lambda: 0.0, ..srm } };
                PhaseSpec { phase: p, categories: map.categories_for(p), config }
            })
            .collect();
        let regularization = PhaseConfig { srm, seed: base.seed.wrapping_add(10), ..base };
        Self { phases, regularization }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.phases.len() != 3 {
            return Err(TrainError::Plan(format!("expected 3 phases, got {}", self.phases.len())));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.phase as usize != i + 1 {
                return Err(TrainError::Plan(format!("phase {} listed in position {}", p.phase, i + 1)));
            }
            p.config.srm.validate()?;
        }
        let covered: BTreeSet<Category> = self.phases.iter().flat_map(|p| p.categories.iter().copied()).collect();
        if covered.len() != Category::ALL.len() {
            return Err(TrainError::Plan("phases must cover every corpus category".into()));
        }
        self.regularization.srm.validate()
    }
}

impl Default for PhasePlan {
    fn default() -> Self {
        Self::from_map(&PhaseMap::default(), PhaseConfig::default(), SrmConfig { lambda: DEFAULT_LAMBDA, complexity: Complexity::GammaL1 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseSummary {
    pub name: String,
    pub categories: Vec<Category>,
    pub run: PhaseRun,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThreePhaseReport {
    pub phases: Vec<PhaseSummary>,
    pub regularization: PhaseSummary,
    pub prune: PruneReport,
}

impl ThreePhaseReport {
    /// Human-readable report: per-epoch losses, prune report, parameter counts.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let section = |p: &PhaseSummary, s: &mut String| {
            let cats: Vec<&str> = p.categories.iter().map(|c| c.as_str()).collect();
            s.push_str(&format!("[{}] categories={} records={} params={}\n", p.name, cats.join(","), p.run.accessed_ids.len(), p.params));
            for (i, l) in p.run.epoch_losses.iter().enumerate() {
                s.push_str(&format!("  epoch {:>3} loss {:.6}\n", i + 1, l));
            }
            if p.run.loss_increased {
                s.push_str("  warning: final epoch loss above first epoch\n");
            }
        };
        section(&self.phases[0], &mut s);
        section(&self.phases[1], &mut s);
        section(&self.regularization, &mut s);
        s.push_str(&format!(
            "[prune] tau={} pruned={} params {} -> {}\n",
            self.prune.tau,
            self.prune.pruned.len(),
            self.prune.params_before,
            self.prune.params_after
        ));
        for c in &self.prune.pruned {
            s.push_str(&format!("  layer {} channel {} gamma {:.6}\n", c.layer, c.channel, c.gamma));
        }
        section(&self.phases[2], &mut s);
        s
    }
}

/// Snapshots after each stage. `llm2` is taken after pruning, just before
/// phase 3.
#[derive(Debug, Clone)]
pub struct ThreePhaseOutcome<T> {
    pub llm1: TinyModel<T>,
    pub llm2: TinyModel<T>,
    pub llm3: TinyModel<T>,
    pub report: ThreePhaseReport,
}

pub fn run_three_phase<T: Scalar>(
    model: &TinyModel<T>,
    plan: &PhasePlan,
    corpus: &Dataset,
    prune_tau: f64,
) -> Result<ThreePhaseOutcome<T>, TrainError> {
    plan.validate()?;
    if !(prune_tau >= 0.0) {
        return Err(TrainError::Config(format!("tau must be >= 0, got {prune_tau}")));
    }
    let phase_data = |spec: &PhaseSpec| -> Result<Dataset, TrainError> {
        let d = corpus.filter_categories(&spec.categories);
        if d.is_empty() {
            return Err(TrainError::EmptyPhase { phase: spec.phase, categories: spec.categories.clone() });
        }
        Ok(d)
    };
    let data: Vec<Dataset> = plan.phases.iter().map(phase_data).collect::<Result<_, _>>()?;
    let mut m = model.clone();
    let mut summaries = Vec::new();
    let run = |m: &mut TinyModel<T>, name: &str, spec_cats: &[Category], d: &Dataset, cfg: &PhaseConfig| {
        let r = run_phase(m, d, cfg)?;
        m.merge_adapters(cfg.seed)?;
        Ok::<_, TrainError>(PhaseSummary { name: name.into(), categories: spec_cats.to_vec(), run: r, params: m.param_count() })
    };
    let p = &plan.phases;
    summaries.push(run(&mut m, "phase 1", &p[0].categories, &data[0], &p[0].config)?);
    let llm1 = m.clone();
    summaries.push(run(&mut m, "phase 2", &p[1].categories, &data[1], &p[1].config)?);
    let regularization = run(&mut m, "regularize", &p[1].categories, &data[1], &plan.regularization)?;
    let (mut pruned, prune) = prune_channels(&m, prune_tau)?;
    // fresh adapters sized for the pruned shapes
    pruned.merge_adapters(plan.regularization.seed.wrapping_add(1))?;
    let llm2 = pruned.clone();
    let mut m = pruned;
    summaries.push(run(&mut m, "phase 3", &p[2].categories, &data[2], &p[2].config)?);
    Ok(ThreePhaseOutcome { llm1, llm2, llm3: m, report: ThreePhaseReport { phases: summaries, regularization, prune } })
}

/// One phase over the whole corpus, with as many epochs as it takes to
/// match the number of records the staged plan would process.
pub fn run_single_phase<T: Scalar>(
    model: &TinyModel<T>,
    plan: &PhasePlan,
    corpus: &Dataset,
) -> Result<(TinyModel<T>, PhaseRun), TrainError> {
    plan.validate()?;
    let count = |cats: &[Category]| corpus.filter_categories(cats).len();
    let staged: usize = plan.phases.iter().map(|p| p.config.epochs * count(&p.categories)).sum::<usize>()
        + plan.regularization.epochs * count(&plan.phases[1].categories);
    let epochs = ((staged as f64 / corpus.len().max(1) as f64).round() as usize).max(1);
    let cfg = PhaseConfig { epochs, ..plan.phases[0].config };
    let mut m = model.clone();
    let run = run_phase(&mut m, corpus, &cfg)?;
    m.merge_adapters(cfg.seed)?;
    Ok((m, run))
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

fn write_f32s<'a, T: Scalar, W: Write>(w: &mut W, it: impl IntoIterator<Item = &'a T>) -> io::Result<()> {
    for v in it {
        w.write_all(&v.as_f32().to_le_bytes())?;
    }
    Ok(())
}

impl<T: Scalar> TinyModel<T> {
    /// Header `TMD1`, context, vocab chars, block widths, adapter ranks and
    /// alpha; then every tensor as little-endian f32.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TrainError> {
        w.write_all(MAGIC)?;
        write_u32(&mut w, self.context)?;
        write_u32(&mut w, self.rank)?;
        w.write_all(&self.alpha.as_f32().to_le_bytes())?;
        write_u32(&mut w, self.vocab.chars.len())?;
        for &c in &self.vocab.chars {
            write_u32(&mut w, c as usize)?;
        }
        write_u32(&mut w, self.blocks.len())?;
        for b in &self.blocks {
            write_u32(&mut w, b.norm.channels())?;
        }
        let lins = self.blocks.iter().map(|b| &b.linear).chain([&self.head]);
        for l in lins.clone() {
            write_u32(&mut w, l.adapter.rank())?;
        }
        for b in &self.blocks {
            w.write_all(&b.norm.eps.as_f32().to_le_bytes())?;
            w.write_all(&b.norm.momentum.as_f32().to_le_bytes())?;
        }
        for l in lins {
            write_f32s(&mut w, l.base.weights.iter())?;
            write_f32s(&mut w, l.adapter.a.iter())?;
            write_f32s(&mut w, l.adapter.b.iter())?;
        }
        for b in &self.blocks {
            let n = &b.norm;
            write_f32s(&mut w, n.gamma.iter().chain(&n.beta).chain(&n.mu).chain(&n.var))?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, TrainError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TrainError::Corrupt("bad magic".into()));
        }
        let context = read_u32(&mut r)? as usize;
        let rank = read_u32(&mut r)? as usize;
        let alpha = T::lit(read_f32(&mut r)? as f64);
        let n_chars = read_u32(&mut r)? as usize;
        if n_chars > 1 << 20 {
            return Err(TrainError::Corrupt(format!("vocab size {n_chars}")));
        }
        let mut chars = Vec::with_capacity(n_chars);
        for _ in 0..n_chars {
            let cp = read_u32(&mut r)?;
            chars.push(char::from_u32(cp).ok_or_else(|| TrainError::Corrupt(format!("code point {cp}")))?);
        }
        let vocab = Vocab::from_chars(chars);
        if vocab.chars.len() != n_chars {
            return Err(TrainError::Corrupt("duplicate vocab entries".into()));
        }
        let n_blocks = read_u32(&mut r)? as usize;
        if n_blocks == 0 || n_blocks > 64 || context == 0 {
            return Err(TrainError::Corrupt(format!("{n_blocks} blocks, context {context}")));
        }
        let widths: Vec<usize> = (0..n_blocks).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<_, _>>()?;
        let ranks: Vec<usize> = (0..=n_blocks).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<_, _>>()?;
        let mut norm_consts = Vec::new();
        for _ in 0..n_blocks {
            norm_consts.push((T::lit(read_f32(&mut r)? as f64), T::lit(read_f32(&mut r)? as f64)));
        }
        let mut dims = Vec::new();
        let mut fan_in = context * vocab.size();
        for &w in &widths {
            dims.push((w, fan_in));
            fan_in = w;
        }
        dims.push((vocab.size(), fan_in));
        let mut lins = Vec::new();
        for (&(d, k), &rk) in dims.iter().zip(&ranks) {
            if rk == 0 || rk > d.min(k) {
                return Err(TrainError::Corrupt(format!("rank {rk} for {d}x{k}")));
            }
            let base = WeightMatrix::new(read_matrix(&mut r, d, k)?);
            let a = read_matrix(&mut r, rk, k)?;
            let b = read_matrix(&mut r, d, rk)?;
            lins.push(Linear { base, adapter: LoraAdapter { a, b, alpha } });
        }
        let head = lins.pop().expect("head present");
        let mut blocks = Vec::new();
        for ((linear, &w), (eps, momentum)) in lins.into_iter().zip(&widths).zip(norm_consts) {
            let v = read_matrix::<T, _>(&mut r, 4, w)?;
            let norm = ScaleNormLayer {
                gamma: v.row(0).to_owned(),
                beta: v.row(1).to_owned(),
                mu: v.row(2).to_owned(),
                var: v.row(3).to_owned(),
                eps,
                momentum,
            };
            blocks.push(Block { linear, norm });
        }
        let m = Self { vocab, context, blocks, head, rank, alpha };
        if !m.is_finite() {
            return Err(TrainError::NonFinite("checkpoint".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let f = std::fs::File::create(path)?;
        self.write_to(io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(io::BufReader::new(f))
    }

    /// Copy with every tensor rounded through f32, as a checkpoint stores it.
    pub fn rounded(&self) -> Self {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        Self::read_from(buf.as_slice()).expect("own checkpoint parses")
    }
}
