use std::sync::OnceLock;

use stepwise_core::corpus::Dataset;
use stepwise_core::embed::{cosine_similarity, Embedder, HashingEmbedder};
use stepwise_core::fixtures::{heatmap_fixture, planted_overlap_corpus, PlantedCorpus};
use stepwise_core::overlap::{
    cosine_oracle_locals, heatmap_report, partition_corpus, synthesize_pairs, train_overlap_net, OverlapNet,
    OverlapTrainConfig, ReferenceMode,
};

struct Trained {
    corpus: PlantedCorpus,
    net: OverlapNet<f64>,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let corpus = planted_overlap_corpus(98, 2, 11);
        let texts: Vec<String> = corpus.dataset.iter().map(|r| r.embedding_text()).collect();
        let pairs = synthesize_pairs::<f64>(&texts, &HashingEmbedder::default(), 100, 1).unwrap();
        let (net, report) = train_overlap_net(&pairs, &OverlapTrainConfig::default()).unwrap();
        assert!(report.final_loss <= report.initial_loss);
        Trained { corpus, net }
    })
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn trained_net_tracks_cosine_on_held_out_pairs() {
    let t = trained();
    let emb = HashingEmbedder::default();
    // fresh corpus, never seen in training
    let held = planted_overlap_corpus(60, 0, 99);
    let texts: Vec<String> = held.dataset.iter().map(|r| r.embedding_text()).collect();
    let pairs = synthesize_pairs::<f64>(&texts, &emb, 60, 5).unwrap();
    let preds: Vec<f64> = pairs.iter().map(|p| t.net.score(&p.candidate, &p.reference).unwrap()).collect();
    let labels: Vec<f64> = pairs.iter().map(|p| p.label).collect();
    let r = pearson(&preds, &labels);
    assert!(r >= 0.8, "pearson {r}");
}

#[test]
fn self_pairs_score_high_and_unrelated_pairs_low() {
    let t = trained();
    let emb = HashingEmbedder::default();
    let (a, b) = heatmap_fixture(8, 4);
    for r in a.iter().chain(&b) {
        let v = Embedder::<f64>::embed(&emb, &r.text);
        assert!(t.net.score(&v, &v).unwrap() >= 0.9);
    }
    for w in a.windows(2) {
        let (x, y) = (Embedder::<f64>::embed(&emb, &w[0].text), Embedder::<f64>::embed(&emb, &w[1].text));
        assert!(t.net.score(&x, &y).unwrap() <= 0.2);
    }
}

#[test]
fn planted_partition_agrees_with_oracle_for_every_seed() {
    let t = trained();
    let emb = HashingEmbedder::default();
    let n = t.corpus.dataset.len() as f64;
    for seed in 0..6 {
        let r = partition_corpus(&t.corpus.dataset, &t.net, &emb, 0.8, seed, ReferenceMode::Nearest).unwrap();
        let local: Vec<String> = r.local.iter().map(|x| x.id.clone()).collect();
        let oracle = cosine_oracle_locals(&r);
        let disagree = local.iter().filter(|id| !oracle.contains(id)).count()
            + oracle.iter().filter(|id| !local.contains(id)).count();
        assert!(1.0 - disagree as f64 / n >= 0.9);
        let frac = r.local_fraction();
        assert!((0.01..=0.05).contains(&frac), "seed {seed}: {frac}");
        // every local record belongs to a planted pair
        for id in &local {
            assert!(t.corpus.planted.iter().any(|(g, p)| g == id || p == id));
        }
    }
}

#[test]
fn partition_is_exact_monotone_and_deterministic() {
    let t = trained();
    let emb = HashingEmbedder::default();
    let data = &t.corpus.dataset;
    let run = |thr| partition_corpus(data, &t.net, &emb, thr, 2, ReferenceMode::Nearest).unwrap();
    let mut prev: Option<Dataset> = None;
    for thr in [0.95, 0.8, 0.5, 0.2, 0.05] {
        let r = run(thr);
        assert_eq!(r.mft.len() + r.local.len(), data.len());
        for rec in data.iter() {
            assert!(r.mft.get(&rec.id).is_some() ^ r.local.get(&rec.id).is_some());
        }
        for rec in r.local.iter() {
            assert!(r.scores[&rec.id] > thr);
        }
        if let Some(p) = &prev {
            assert!(p.iter().all(|x| r.local.get(&x.id).is_some()));
        }
        prev = Some(r.local.clone());
    }
    assert_eq!(run(0.8), run(0.8));
}

#[test]
fn centroid_reference_washes_out_near_duplicates() {
    let t = trained();
    let emb = HashingEmbedder::default();
    let r = partition_corpus(&t.corpus.dataset, &t.net, &emb, 0.8, 0, ReferenceMode::Centroid).unwrap();
    assert!(r.reference_cosines.values().all(|&c| c < 0.5));
}

#[test]
fn manifest_lists_every_record_once() {
    let t = trained();
    let r = partition_corpus(&t.corpus.dataset, &t.net, &HashingEmbedder::default(), 0.8, 0, ReferenceMode::Nearest)
        .unwrap();
    let m: serde_json::Value = serde_json::from_str(&r.manifest_json()).unwrap();
    let obj = m.as_object().unwrap();
    assert_eq!(obj.len(), t.corpus.dataset.len());
    let locals = obj.values().filter(|v| v["set"] == "local").count();
    assert_eq!(locals, r.local.len());
}

#[test]
fn heatmap_fixture_shows_planted_structure() {
    let (m, l) = heatmap_fixture(10, 3);
    let h = heatmap_report::<f64>(&m, &l, &HashingEmbedder::default()).unwrap();
    assert_eq!(h.labels.len(), 20);
    assert!(h.intra_mft_max < 0.3 && h.intra_local_max < 0.3);
    for i in 0..10 {
        assert!(h.matrix[i][10 + i] > 0.8);
    }
    assert!(h.csv().starts_with("label,M1,"));
    let emb = HashingEmbedder::default();
    let a = Embedder::<f64>::embed(&emb, &m[0].text);
    assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}
