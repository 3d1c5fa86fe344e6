//! Synthetic corpora and vector sets with planted structure, shared by the
//! tests, the CLI and the evaluation harness.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::astseg::plan_for_source;
use crate::corpus::{guided_step_text, Category, CorpusRecord, Dataset, Turn, CONTINUE_PROMPT};
use crate::embed::Embedding;
use crate::scalar::Scalar;

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "ch"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Deterministic pseudo-word for an index; distinct indices give distinct words.
pub fn pseudo_word(mut k: usize) -> String {
    let mut w = String::new();
    for _ in 0..3 {
        w.push_str(ONSETS[k % ONSETS.len()]);
        k /= ONSETS.len();
        w.push_str(VOWELS[k % VOWELS.len()]);
        k /= VOWELS.len();
    }
    if k > 0 {
        w.push_str(&k.to_string());
    }
    w
}

/// Hands out words that no other caller of the same pool has seen.
struct WordPool {
    order: Vec<usize>,
    next: usize,
}

impl WordPool {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..6000).collect();
        order.shuffle(rng);
        Self { order, next: 0 }
    }

    fn take(&mut self) -> String {
        let k = self.order.get(self.next).copied().unwrap_or(self.next);
        self.next += 1;
        pseudo_word(k)
    }

    fn sentence(&mut self, words: usize) -> String {
        (0..words).map(|_| self.take()).collect::<Vec<_>>().join(" ")
    }
}

pub const WORDS_PER_RECORD: usize = 20;

/// Replaces one word of `text` with a fresh word.
fn near_duplicate(text: &str, pool: &mut WordPool, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    let i = rng.random_range(0..words.len());
    words[i] = pool.take();
    words.join(" ")
}

/// A corpus of `n_generic` records with disjoint vocabularies plus
/// `n_planted` records that near-duplicate distinct generic records.
#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub dataset: Dataset,
    /// `(generic id, planted id)` pairs.
    pub planted: Vec<(String, String)>,
}

pub fn planted_overlap_corpus(n_generic: usize, n_planted: usize, seed: u64) -> PlantedCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = WordPool::new(&mut rng);
    let mut recs: Vec<CorpusRecord> = (0..n_generic)
        .map(|i| {
            let cat = Category::ALL[i % 3];
            CorpusRecord::new(format!("g{i:03}"), pool.sentence(WORDS_PER_RECORD), cat)
        })
        .collect();
    let mut sources: Vec<usize> = (0..n_generic).collect();
    sources.shuffle(&mut rng);
    let mut planted = Vec::new();
    for (j, &src) in sources.iter().take(n_planted).enumerate() {
        let text = near_duplicate(&recs[src].text, &mut pool, &mut rng);
        let id = format!("p{j:03}");
        planted.push((recs[src].id.clone(), id.clone()));
        recs.push(CorpusRecord::new(id, text, recs[src].category));
    }
    PlantedCorpus { dataset: Dataset::from_records(recs).expect("fixture ids are unique"), planted }
}

/// `n` generic MFT records and `n` local records where `local[i]`
/// near-duplicates `mft[i]`.
pub fn heatmap_fixture(n: usize, seed: u64) -> (Vec<CorpusRecord>, Vec<CorpusRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = WordPool::new(&mut rng);
    let mft: Vec<CorpusRecord> = (0..n)
        .map(|i| CorpusRecord::new(format!("m{i:02}"), pool.sentence(WORDS_PER_RECORD), Category::Textbook))
        .collect();
    let local = mft
        .iter()
        .enumerate()
        .map(|(i, r)| CorpusRecord::new(format!("l{i:02}"), near_duplicate(&r.text, &mut pool, &mut rng), Category::Textbook))
        .collect();
    (mft, local)
}

/// `n_blobs` Gaussian blobs on the unit sphere; returns vectors and blob labels.
pub fn gaussian_blobs<T: Scalar>(
    n_blobs: usize,
    per_blob: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> (Vec<Embedding<T>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let noise = Normal::new(0.0, spread).unwrap();
    let centers: Vec<Vec<f64>> = (0..n_blobs)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let mut vecs = Vec::with_capacity(n_blobs * per_blob);
    let mut labels = Vec::with_capacity(n_blobs * per_blob);
    for (b, c) in centers.iter().enumerate() {
        for _ in 0..per_blob {
            let v = c.iter().map(|&x| T::lit(x + noise.sample(&mut rng))).collect();
            vecs.push(Embedding::new(v));
            labels.push(b);
        }
    }
    (vecs, labels)
}

/// Small tasks in the segmenter's grammar, used for guidance dialogues.
pub const TASKS: [(&str, &str); 4] = [
    ("bubble sort", crate::astseg::BUBBLE_SORT),
    (
        "sum of a list",
        "def total(xs):\n    s = 0\n    for x in xs:\n        s += x\n    return s\n",
    ),
    (
        "largest element",
        "def largest(xs):\n    best = xs[0]\n    for x in xs:\n        if x > best:\n            best = x\n    return best\n",
    ),
    (
        "count down",
        "def countdown(n):\n    while n > 0:\n        n -= 1\n    return n\n",
    ),
];

/// Synthetic three-phase curriculum: textbook and code prose, educational
/// explanations, and guidance dialogues in the tutor's hint format.
#[derive(Debug, Clone)]
pub struct Curriculum {
    pub dataset: Dataset,
    pub held_out_guidance: Dataset,
}

fn guidance_dialogue(id: String, rng: &mut ChaCha8Rng) -> CorpusRecord {
    let (name, source) = TASKS[rng.random_range(0..TASKS.len())];
    let plan = plan_for_source(source).expect("fixture tasks parse");
    let first = rng.random_range(0..plan.len());
    let steps = rng.random_range(1..=3usize).min(plan.len() - first);
    let mut turns = Vec::new();
    for (j, st) in plan.subtasks()[first..first + steps].iter().enumerate() {
        let ask = if j == 0 { format!("Can you help me write {name}?") } else { CONTINUE_PROMPT.to_string() };
        turns.push(Turn::user(ask));
        turns.push(Turn::assistant(guided_step_text(st.index, &st.description)));
    }
    let mut rec = CorpusRecord::new(id, "", Category::Guidance);
    rec.turns = turns;
    rec
}

pub fn guidance_curriculum(per_category: usize, seed: u64) -> Curriculum {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topics = ["list", "loop", "sum", "max", "sort", "count", "swap", "index"];
    let verbs = ["builds", "walks", "scans", "keeps", "checks", "moves"];
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| xs[rng.random_range(0..xs.len())];
    let mut recs = Vec::new();
    for i in 0..per_category {
        let (t, v) = (pick(&mut rng, &topics), pick(&mut rng, &verbs));
        recs.push(CorpusRecord::new(format!("tb{i:03}"), format!("a {t} {v} each item in order."), Category::Textbook));
        let (_, source) = TASKS[rng.random_range(0..TASKS.len())];
        recs.push(CorpusRecord::new(format!("cd{i:03}"), source, Category::Code));
        recs.push(CorpusRecord::new(
            format!("ed{i:03}"),
            format!("to solve a {t} task, first think about what it {v}."),
            Category::Education,
        ));
    }
    for i in 0..per_category {
        recs.push(guidance_dialogue(format!("gd{i:03}"), &mut rng));
    }
    let held: Vec<_> = (0..per_category.max(4) / 2).map(|i| guidance_dialogue(format!("hg{i:03}"), &mut rng)).collect();
    Curriculum {
        dataset: Dataset::from_records(recs).expect("unique ids"),
        held_out_guidance: Dataset::from_records(held).expect("unique ids"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{cosine_similarity, EmbedderConfig, embed_text};

    #[test]
    fn pseudo_words_are_distinct() {
        let words: std::collections::BTreeSet<_> = (0..6000).map(pseudo_word).collect();
        assert_eq!(words.len(), 6000);
    }

    #[test]
    fn planted_pairs_are_near_duplicates() {
        let pc = planted_overlap_corpus(98, 2, 7);
        assert_eq!(pc.dataset.len(), 100);
        let cfg = EmbedderConfig::default();
        for (g, p) in &pc.planted {
            let a = embed_text::<f64>(&pc.dataset.get(g).unwrap().text, &cfg);
            let b = embed_text::<f64>(&pc.dataset.get(p).unwrap().text, &cfg);
            assert!(cosine_similarity(&a, &b).unwrap() > 0.8);
        }
    }

    #[test]
    fn curriculum_covers_every_category() {
        let c = guidance_curriculum(10, 1);
        for cat in Category::ALL {
            assert!(c.dataset.iter().any(|r| r.category == cat));
        }
        assert!(!c.held_out_guidance.is_empty());
    }
}
