//! Overlap estimation: a small convolutional regression network that scores
//! how strongly a sampled record overlaps the rest of the corpus, and the
//! threshold partition into a fine-tuning set and a local-knowledge set.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, CorpusRecord, Dataset};
use crate::embed::{cosine_similarity, matrix_to_csv, similarity_matrix, EmbedError, Embedder, Embedding};
use crate::scalar::{logistic, relu, Scalar};

pub const KERNEL: usize = 5;
pub const CONV_CHANNELS: [usize; 4] = [2, 8, 8, 4];
pub const HIDDEN: usize = 16;
pub const DEFAULT_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error)]
pub enum OverlapError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("network expects dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("training set is empty")]
    EmptyTraining,
    #[error("label {0} outside [0, 1]")]
    Label(f64),
    #[error("threshold {0} outside (0, 1]")]
    Threshold(f64),
    #[error("heat map needs at least one record per side (got {mft} and {local})")]
    HeatmapSides { mft: usize, local: usize },
}

/// Same-padded 1-D convolution, weights indexed `[out][in][tap]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv1d<T> {
    fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (in_ch * KERNEL) as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let weights = (0..out_ch * in_ch * KERNEL).map(|_| T::lit(normal.sample(rng))).collect();
        Self { in_ch, out_ch, weights, bias: vec![T::zero(); out_ch] }
    }

    #[inline]
    fn w(&self, o: usize, i: usize, t: usize) -> T {
        self.weights[(o * self.in_ch + i) * KERNEL + t]
    }

    /// `input` is `in_ch × len`, row-major.
    fn forward(&self, input: &[T], len: usize) -> Vec<T> {
        let half = KERNEL / 2;
        let mut out = vec![T::zero(); self.out_ch * len];
        for o in 0..self.out_ch {
            let row = &mut out[o * len..(o + 1) * len];
            row.fill(self.bias[o]);
            for i in 0..self.in_ch {
                let x = &input[i * len..(i + 1) * len];
                for t in 0..KERNEL {
                    let w = self.w(o, i, t);
                    // output[p] += w * x[p + t - half]
                    let lo = half.saturating_sub(t);
                    let hi = (len + half).saturating_sub(t).min(len);
                    for p in lo..hi {
                        row[p] += w * x[p + t - half];
                    }
                }
            }
        }
        out
    }

    /// Returns the gradient w.r.t. the input and accumulates parameter grads.
    fn backward(&self, input: &[T], len: usize, grad_out: &[T], gw: &mut [T], gb: &mut [T]) -> Vec<T> {
        let half = KERNEL / 2;
        let mut gin = vec![T::zero(); self.in_ch * len];
        for o in 0..self.out_ch {
            let go = &grad_out[o * len..(o + 1) * len];
            gb[o] += go.iter().copied().sum::<T>();
            for i in 0..self.in_ch {
                let x = &input[i * len..(i + 1) * len];
                let gi = &mut gin[i * len..(i + 1) * len];
                for t in 0..KERNEL {
                    let w = self.w(o, i, t);
                    let lo = half.saturating_sub(t);
                    let hi = (len + half).saturating_sub(t).min(len);
                    let mut acc = T::zero();
                    for p in lo..hi {
                        acc += go[p] * x[p + t - half];
                        gi[p + t - half] += go[p] * w;
                    }
                    gw[(o * self.in_ch + i) * KERNEL + t] += acc;
                }
            }
        }
        gin
    }
}

/// Fully connected layer, weights indexed `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    fn new(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / n_in as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let weights = (0..n_in * n_out).map(|_| T::lit(normal.sample(rng))).collect();
        Self { n_in, n_out, weights, bias: vec![T::zero(); n_out] }
    }

    fn forward(&self, x: &[T]) -> Vec<T> {
        (0..self.n_out)
            .map(|o| {
                let w = &self.weights[o * self.n_in..(o + 1) * self.n_in];
                self.bias[o] + w.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>()
            })
            .collect()
    }

    fn backward(&self, x: &[T], go: &[T], gw: &mut [T], gb: &mut [T]) -> Vec<T> {
        let mut gx = vec![T::zero(); self.n_in];
        for o in 0..self.n_out {
            gb[o] += go[o];
            let w = &self.weights[o * self.n_in..(o + 1) * self.n_in];
            let gwo = &mut gw[o * self.n_in..(o + 1) * self.n_in];
            for j in 0..self.n_in {
                gwo[j] += go[o] * x[j];
                gx[j] += go[o] * w[j];
            }
        }
        gx
    }
}

/// Three convolutions, two dense layers, logistic output.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapNet<T> {
    dim: usize,
    pub convs: [Conv1d<T>; 3],
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
}

/// Flat parameter gradients in the order of [`OverlapNet::params_mut`].
#[derive(Debug, Clone)]
pub struct NetGrad<T> {
    pub parts: Vec<Vec<T>>,
}

struct Trace<T> {
    input: Vec<T>,
    acts: [Vec<T>; 3],
    pre: [Vec<T>; 3],
    h1_pre: Vec<T>,
    h1: Vec<T>,
    out: T,
}

impl<T: Scalar> OverlapNet<T> {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = CONV_CHANNELS;
        let convs = [
            Conv1d::new(c[0], c[1], &mut rng),
            Conv1d::new(c[1], c[2], &mut rng),
            Conv1d::new(c[2], c[3], &mut rng),
        ];
        let fc1 = Dense::new(c[3] * dim, HIDDEN, &mut rng);
        let fc2 = Dense::new(HIDDEN, 1, &mut rng);
        Self { dim, convs, fc1, fc2 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Zeroes the final layer so every input scores exactly 0.5.
    pub fn zero_output_layer(&mut self) {
        self.fc2.weights.fill(T::zero());
        self.fc2.bias.fill(T::zero());
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&Vec<T>> {
        let mut v = Vec::new();
        for c in &self.convs {
            v.push(&c.weights);
            v.push(&c.bias);
        }
        v.extend([&self.fc1.weights, &self.fc1.bias, &self.fc2.weights, &self.fc2.bias]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = Vec::new();
        for c in self.convs.iter_mut() {
            v.push(&mut c.weights);
            v.push(&mut c.bias);
        }
        v.push(&mut self.fc1.weights);
        v.push(&mut self.fc1.bias);
        v.push(&mut self.fc2.weights);
        v.push(&mut self.fc2.bias);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn check(&self, v: &Embedding<T>) -> Result<(), OverlapError> {
        if v.dim() != self.dim {
            return Err(OverlapError::Dimension { expected: self.dim, got: v.dim() });
        }
        Ok(())
    }

    fn trace(&self, candidate: &Embedding<T>, reference: &Embedding<T>) -> Trace<T> {
        let len = self.dim;
        let mut input = Vec::with_capacity(2 * len);
        input.extend_from_slice(candidate.values());
        input.extend_from_slice(reference.values());
        let mut x = input.clone();
        let mut acts: [Vec<T>; 3] = Default::default();
        let mut pre: [Vec<T>; 3] = Default::default();
        for (l, conv) in self.convs.iter().enumerate() {
            let z = conv.forward(&x, len);
            x = z.iter().map(|&v| relu(v)).collect();
            pre[l] = z;
            acts[l] = x.clone();
        }
        let h1_pre = self.fc1.forward(&x);
        let h1: Vec<T> = h1_pre.iter().map(|&v| relu(v)).collect();
        let out = logistic(self.fc2.forward(&h1)[0]);
        Trace { input, acts, pre, h1_pre, h1, out }
    }

    /// Overlap score in `[0, 1]` for a (candidate, reference) pair.
    pub fn score(&self, candidate: &Embedding<T>, reference: &Embedding<T>) -> Result<T, OverlapError> {
        self.check(candidate)?;
        self.check(reference)?;
        Ok(self.trace(candidate, reference).out)
    }

    /// Squared-error loss `(score − label)²` and its parameter gradient.
    pub fn loss_and_grad(&self, candidate: &Embedding<T>, reference: &Embedding<T>, label: T) -> (T, NetGrad<T>) {
        let len = self.dim;
        let tr = self.trace(candidate, reference);
        let diff = tr.out - label;
        let loss = diff * diff;
        let mut parts: Vec<Vec<T>> = self.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
        // d loss / d logit
        let g_logit = T::lit(2.0) * diff * tr.out * (T::one() - tr.out);
        let (head, tail) = parts.split_at_mut(8);
        let (fc2w, fc2b) = tail.split_at_mut(1);
        let g_h1 = self.fc2.backward(&tr.h1, &[g_logit], &mut fc2w[0], &mut fc2b[0]);
        let g_h1_pre: Vec<T> = g_h1
            .iter()
            .zip(&tr.h1_pre)
            .map(|(&g, &z)| if z > T::zero() { g } else { T::zero() })
            .collect();
        let (convs, fc1) = head.split_at_mut(6);
        let (fc1w, fc1b) = fc1.split_at_mut(1);
        let mut g = self.fc1.backward(&tr.acts[2], &g_h1_pre, &mut fc1w[0], &mut fc1b[0]);
        for l in (0..3).rev() {
            for (gv, &z) in g.iter_mut().zip(&tr.pre[l]) {
                if z <= T::zero() {
                    *gv = T::zero();
                }
            }
            let input = if l == 0 { &tr.input } else { &tr.acts[l - 1] };
            let (gw, rest) = convs[2 * l..].split_at_mut(1);
            g = self.convs[l].backward(input, len, &g, &mut gw[0], &mut rest[0]);
        }
        (loss, NetGrad { parts })
    }

    pub fn mean_loss(&self, pairs: &[TrainingPair<T>]) -> T {
        let n = T::from_usize(pairs.len().max(1)).unwrap();
        pairs
            .iter()
            .map(|p| {
                let d = self.trace(&p.candidate, &p.reference).out - p.label;
                d * d
            })
            .sum::<T>()
            / n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair<T> {
    pub candidate: Embedding<T>,
    pub reference: Embedding<T>,
    pub label: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OverlapTrainConfig {
    fn default() -> Self {
        Self { epochs: 40, lr: 0.05, batch_size: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapTrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean training loss after each epoch.
    pub epoch_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// Mini-batch gradient descent on squared error. The returned network is
/// the best full-set snapshot seen, so its loss never exceeds the initial one.
pub fn train_overlap_net<T: Scalar>(
    pairs: &[TrainingPair<T>],
    cfg: &OverlapTrainConfig,
) -> Result<(OverlapNet<T>, OverlapTrainReport), OverlapError> {
    let first = pairs.first().ok_or(OverlapError::EmptyTraining)?;
    let dim = first.candidate.dim();
    for p in pairs {
        let l = p.label.as_f64();
        if !(0.0..=1.0).contains(&l) {
            return Err(OverlapError::Label(l));
        }
        for v in [&p.candidate, &p.reference] {
            if v.dim() != dim {
                return Err(OverlapError::Dimension { expected: dim, got: v.dim() });
            }
        }
    }
    let mut net = OverlapNet::new(dim, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let initial_loss = net.mean_loss(pairs).as_f64();
    let mut best = (initial_loss, net.clone(), 0usize);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let lr = T::lit(cfg.lr);
    let bs = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(bs) {
            let mut acc: Option<NetGrad<T>> = None;
            for &i in batch {
                let p = &pairs[i];
                let (_, g) = net.loss_and_grad(&p.candidate, &p.reference, p.label);
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => {
                        for (x, y) in a.parts.iter_mut().zip(&g.parts) {
                            for (u, &v) in x.iter_mut().zip(y) {
                                *u += v;
                            }
                        }
                    }
                }
            }
            let step = lr / T::from_usize(batch.len()).unwrap();
            let grad = acc.expect("non-empty batch");
            for (param, g) in net.params_mut().into_iter().zip(&grad.parts) {
                for (w, &d) in param.iter_mut().zip(g) {
                    *w -= step * d;
                }
            }
        }
        let loss = net.mean_loss(pairs).as_f64();
        epoch_losses.push(loss);
        if loss < best.0 && net.is_finite() {
            best = (loss, net.clone(), epoch);
        }
    }
    let (final_loss, net, best_epoch) = best;
    Ok((net, OverlapTrainReport { initial_loss, final_loss, epoch_losses, best_epoch }))
}

/// Perturbs a text by dropping one word and duplicating another, keeping
/// most n-grams intact.
fn perturb(text: &str, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<&str> = text.split_whitespace().collect();
    if words.len() > 3 {
        let drop = rng.random_range(0..words.len());
        words.remove(drop);
    }
    words.join(" ")
}

/// Self-supervised training pairs labelled by the cosine oracle: each
/// sampled record paired with itself, with a lightly perturbed copy, and
/// with a random other record.
pub fn synthesize_pairs<T: Scalar>(
    texts: &[String],
    embedder: &dyn Embedder<T>,
    n_records: usize,
    seed: u64,
) -> Result<Vec<TrainingPair<T>>, OverlapError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vecs: Vec<Embedding<T>> = texts.iter().map(|t| embedder.embed(t)).collect();
    let mut pairs = Vec::new();
    if vecs.is_empty() {
        return Ok(pairs);
    }
    let mut push = |a: Embedding<T>, b: Embedding<T>| -> Result<(), OverlapError> {
        let label = cosine_similarity(&a, &b)?.max(T::zero());
        pairs.push(TrainingPair { candidate: a, reference: b, label });
        Ok(())
    };
    for _ in 0..n_records {
        let i = rng.random_range(0..vecs.len());
        push(vecs[i].clone(), vecs[i].clone())?;
        let near = embedder.embed(&perturb(&texts[i], &mut rng));
        push(vecs[i].clone(), near)?;
        let mut j = rng.random_range(0..vecs.len());
        if vecs.len() > 1 {
            while j == i {
                j = rng.random_range(0..vecs.len());
            }
        }
        push(vecs[i].clone(), vecs[j].clone())?;
    }
    Ok(pairs)
}

/// `floor(n/2)` records drawn uniformly without replacement, in corpus order.
pub fn random_sample(data: &Dataset, seed: u64) -> Dataset {
    let idx = sample_indices(data.len(), seed);
    let recs = idx.into_iter().map(|i| data.records()[i].clone()).collect();
    Dataset::from_records(recs).expect("subset of a valid dataset")
}

fn sample_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, n / 2).into_vec();
    idx.sort_unstable();
    idx
}

/// How the complement set is summarized for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// The complement member most cosine-similar to the candidate.
    #[default]
    Nearest,
    /// Mean embedding of the complement.
    Centroid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetTag {
    Mft,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub set: SetTag,
    /// Present for sampled records only.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionResult {
    pub mft: Dataset,
    pub local: Dataset,
    pub threshold: f64,
    /// Overlap score per sampled record id.
    pub scores: BTreeMap<String, f64>,
    /// Ids drawn into the random sample, in corpus order.
    pub sampled: Vec<String>,
    /// Cosine between each sampled record and its reference vector.
    pub reference_cosines: BTreeMap<String, f64>,
}

impl PartitionResult {
    pub fn local_fraction(&self) -> f64 {
        let n = self.mft.len() + self.local.len();
        if n == 0 {
            0.0
        } else {
            self.local.len() as f64 / n as f64
        }
    }

    pub fn manifest(&self) -> BTreeMap<String, ManifestEntry> {
        let mut m = BTreeMap::new();
        for (ds, set) in [(&self.mft, SetTag::Mft), (&self.local, SetTag::Local)] {
            for r in ds.iter() {
                m.insert(r.id.clone(), ManifestEntry { set, score: self.scores.get(&r.id).copied() });
            }
        }
        m
    }

    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes")
    }
}

/// Scores each sampled record against its reference in the complement of
/// the sample; scores above `threshold` go to the local-knowledge set.
pub fn partition_corpus<T: Scalar>(
    data: &Dataset,
    net: &OverlapNet<T>,
    embedder: &dyn Embedder<T>,
    threshold: f64,
    seed: u64,
    mode: ReferenceMode,
) -> Result<PartitionResult, OverlapError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(OverlapError::Threshold(threshold));
    }
    let n = data.len();
    let sampled_idx = sample_indices(n, seed);
    let mut in_sample = vec![false; n];
    for &i in &sampled_idx {
        in_sample[i] = true;
    }
    let vecs: Vec<Embedding<T>> = data.iter().map(|r| embedder.embed(&r.embedding_text())).collect();
    let complement: Vec<usize> = (0..n).filter(|&i| !in_sample[i]).collect();
    let centroid = Embedding::centroid(complement.iter().map(|&i| &vecs[i]));

    let mut scores = BTreeMap::new();
    let mut reference_cosines = BTreeMap::new();
    let mut is_local = vec![false; n];
    for &i in &sampled_idx {
        let reference = match mode {
            ReferenceMode::Centroid => centroid.clone(),
            ReferenceMode::Nearest => nearest(&vecs[i], complement.iter().map(|&j| &vecs[j]))?,
        };
        let Some(reference) = reference else { continue };
        let s = net.score(&vecs[i], &reference)?.as_f64();
        let id = data.records()[i].id.clone();
        reference_cosines.insert(id.clone(), cosine_similarity(&vecs[i], &reference)?.as_f64());
        scores.insert(id, s);
        is_local[i] = s > threshold;
    }
    let (mut mft, mut local) = (Vec::new(), Vec::new());
    for (i, r) in data.iter().enumerate() {
        if is_local[i] {
            local.push(r.clone());
        } else {
            mft.push(r.clone());
        }
    }
    Ok(PartitionResult {
        mft: Dataset::from_records(mft)?,
        local: Dataset::from_records(local)?,
        threshold,
        scores,
        sampled: sampled_idx.iter().map(|&i| data.records()[i].id.clone()).collect(),
        reference_cosines,
    })
}

fn nearest<'a, T: Scalar>(
    v: &Embedding<T>,
    pool: impl Iterator<Item = &'a Embedding<T>>,
) -> Result<Option<Embedding<T>>, OverlapError> {
    let mut best: Option<(T, &Embedding<T>)> = None;
    for c in pool {
        let s = cosine_similarity(v, c)?;
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, c));
        }
    }
    Ok(best.map(|(_, c)| c.clone()))
}

/// Decision of the direct cosine rule: sampled records whose reference
/// cosine exceeds the threshold.
pub fn cosine_oracle_locals(result: &PartitionResult) -> Vec<String> {
    result
        .reference_cosines
        .iter()
        .filter(|(_, &c)| c > result.threshold)
        .map(|(id, _)| id.clone())
        .collect()
}

/// Labeled similarity matrix over an MFT sample and a local sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapReport {
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub intra_mft_max: f64,
    pub intra_local_max: f64,
    pub cross_min: f64,
    pub cross_max: f64,
    /// For each local row, its best MFT match; the minimum over rows.
    pub cross_best_match_min: f64,
}

impl HeatmapReport {
    pub fn csv(&self) -> String {
        matrix_to_csv(&self.labels, &self.matrix).expect("labels match matrix")
    }
}

/// Builds the `M1..Mm, L1..Ll` similarity matrix with summary statistics.
pub fn heatmap_report<T: Scalar>(
    mft_sample: &[CorpusRecord],
    local_sample: &[CorpusRecord],
    embedder: &dyn Embedder<T>,
) -> Result<HeatmapReport, OverlapError> {
    let (m, l) = (mft_sample.len(), local_sample.len());
    if m == 0 || l == 0 {
        return Err(OverlapError::HeatmapSides { mft: m, local: l });
    }
    let vecs: Vec<Embedding<T>> = mft_sample
        .iter()
        .chain(local_sample)
        .map(|r| embedder.embed(&r.embedding_text()))
        .collect();
    let matrix: Vec<Vec<f64>> = similarity_matrix(&vecs)?
        .into_iter()
        .map(|row| row.into_iter().map(|v| v.as_f64()).collect())
        .collect();
    let labels = (1..=m).map(|i| format!("M{i}")).chain((1..=l).map(|i| format!("L{i}"))).collect();
    let pairs = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, skip_diag: bool| {
        let mut out = Vec::new();
        for i in rows {
            for j in cols.clone() {
                if !(skip_diag && j <= i) {
                    out.push(matrix[i][j]);
                }
            }
        }
        out
    };
    let max = |v: Vec<f64>| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
    let min = |v: Vec<f64>| v.into_iter().fold(f64::INFINITY, f64::min);
    let cross_best_match_min = (m..m + l)
        .map(|j| (0..m).map(|i| matrix[i][j]).fold(f64::NEG_INFINITY, f64::max))
        .fold(f64::INFINITY, f64::min);
    Ok(HeatmapReport {
        intra_mft_max: max(pairs(0..m, 0..m, true)),
        intra_local_max: max(pairs(m..m + l, m..m + l, true)),
        cross_min: min(pairs(0..m, m..m + l, false)),
        cross_max: max(pairs(0..m, m..m + l, false)),
        cross_best_match_min,
        labels,
        matrix,
    })
}
