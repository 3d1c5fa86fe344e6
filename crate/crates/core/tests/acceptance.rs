//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Oracles are computed here from first principles rather
//! than through the library paths they check.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stepwise_core::astseg::{parse_source, plan_coverage, plan_for_source, KnowledgeTag, BUBBLE_SORT};
use stepwise_core::corpus::{Dataset, PhaseMap};
use stepwise_core::embed::{Embedder, Embedding, HashingEmbedder};
use stepwise_core::eval::{run_eval, run_session, Artifacts, EvalConfig, UserScript, Variant};
use stepwise_core::fixtures::{gaussian_blobs, guidance_curriculum, heatmap_fixture, planted_overlap_corpus, Curriculum, TASKS};
use stepwise_core::lora::{init_adapter, lora_forward, merge_adapter, WeightMatrix};
use stepwise_core::overlap::{heatmap_report, partition_corpus, synthesize_pairs, train_overlap_net, OverlapTrainConfig, ReferenceMode};
use stepwise_core::train::{
    prune_channels, run_phase, run_single_phase, run_three_phase, Complexity, ModelConfig, PhaseConfig, PhasePlan,
    SrmConfig, ThreePhaseOutcome, Vocab, DEFAULT_LAMBDA, DEFAULT_PRUNE_TAU,
};
use stepwise_core::tutor::{AdversarialBackend, EntryKind, ScriptedBackend, TutorConfig, VerdictClass};
use stepwise_core::{Index, Model};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    check(t < limit, || format!("runtime {:.2?} over the {:?} limit", t, limit))
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn lora_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_merge, mut worst_grad) = (0.0f64, 0.0f64);
    for trial in 0..100 {
        let d = rng.random_range(2..=16);
        let k = rng.random_range(2..=16);
        let r = rng.random_range(1..=d.min(k) / 2);
        let alpha = rng.random_range(0.5..8.0);
        let mut ad = init_adapter::<f64>(d, k, r, alpha, trial).map_err(|e| e.to_string())?;
        check(ad.delta().iter().all(|&v| v == 0.0), || format!("trial {trial}: fresh delta not exactly zero"))?;
        ad.b = Array2::from_shape_fn((d, r), |_| rng.random_range(-1.0..1.0));
        let w0 = WeightMatrix::new(Array2::from_shape_fn((d, k), |_| rng.random_range(-1.0..1.0)));
        let x = Array1::from_shape_fn(k, |_| rng.random_range(-1.0..1.0));
        let y = lora_forward(&w0, &ad, x.view()).map_err(|e| e.to_string())?;
        // merged weights applied with a plain loop
        let merged = merge_adapter(&w0, &ad).map_err(|e| e.to_string())?;
        for i in 0..d {
            let yi: f64 = (0..k).map(|j| merged.weights[[i, j]] * x[j]).sum();
            worst_merge = worst_merge.max((yi - y[i]).abs());
        }

        // loss = sum(G * forward(X)); finite differences over every A and B entry
        let n = 3;
        let xb = Array2::from_shape_fn((n, k), |_| rng.random_range(-1.0..1.0));
        let g = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let loss = |ad: &stepwise_core::lora::LoraAdapter<f64>| -> f64 {
            let out = ad.forward_batch(&w0, xb.view()).unwrap();
            (&out * &g).sum()
        };
        let grad = ad.backward_batch(xb.view(), g.view());
        let h = 1e-6;
        for (which, shape) in [(0, ad.a.dim()), (1, ad.b.dim())] {
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let mut p = ad.clone();
                    let mut m = ad.clone();
                    if which == 0 {
                        p.a[[i, j]] += h;
                        m.a[[i, j]] -= h;
                    } else {
                        p.b[[i, j]] += h;
                        m.b[[i, j]] -= h;
                    }
                    let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                    let an = if which == 0 { grad.a[[i, j]] } else { grad.b[[i, j]] };
                    let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-8);
                    worst_grad = worst_grad.max(rel);
                }
            }
        }
    }
    check(worst_merge <= 1e-9, || format!("merge/forward deviation {worst_merge:e}"))?;
    check(worst_grad <= 1e-4, || format!("gradient rel. error {worst_grad:e}"))?;
    within(Duration::from_secs(5), start)?;
    Ok(format!("100 trials, merge dev {worst_merge:.1e}, grad rel err {worst_grad:.1e}, {:.2?}", start.elapsed()))
}

fn overlap_partition() -> Outcome {
    let start = Instant::now();
    let emb = HashingEmbedder::default();
    let corpus = planted_overlap_corpus(98, 2, 11);
    let texts: Vec<String> = corpus.dataset.iter().map(|r| r.embedding_text()).collect();
    let pairs = synthesize_pairs::<f64>(&texts, &emb, 100, 1).map_err(|e| e.to_string())?;
    let (net, _) = train_overlap_net(&pairs, &OverlapTrainConfig::default()).map_err(|e| e.to_string())?;
    let threshold = 0.8;
    let r = partition_corpus(&corpus.dataset, &net, &emb, threshold, 0, ReferenceMode::Nearest).map_err(|e| e.to_string())?;
    let frac = r.local_fraction();
    check((0.01..=0.05).contains(&frac), || format!("local fraction {frac}"))?;

    // oracle: nearest-neighbour cosine of each sampled record against the unsampled rest
    let vecs: Vec<(String, Vec<f64>)> = corpus
        .dataset
        .iter()
        .map(|rec| (rec.id.clone(), Embedder::<f64>::embed(&emb, &rec.embedding_text()).into_values()))
        .collect();
    let sampled: BTreeSet<&str> = r.sampled.iter().map(String::as_str).collect();
    let local: BTreeSet<&str> = r.local.iter().map(|x| x.id.as_str()).collect();
    let mut agree = 0;
    for (id, v) in vecs.iter().filter(|(id, _)| sampled.contains(id.as_str())) {
        let best = vecs
            .iter()
            .filter(|(o, _)| !sampled.contains(o.as_str()))
            .map(|(_, w)| cos(v, w))
            .fold(f64::NEG_INFINITY, f64::max);
        if (best > threshold) == local.contains(id.as_str()) {
            agree += 1;
        }
    }
    let agreement = agree as f64 / sampled.len() as f64;
    check(agreement >= 0.9, || format!("oracle agreement {agreement}"))?;

    let (m, l) = heatmap_fixture(10, 3);
    let h = heatmap_report::<f64>(&m, &l, &emb).map_err(|e| e.to_string())?;
    let mv: Vec<Vec<f64>> = m.iter().map(|r| Embedder::<f64>::embed(&emb, &r.text).into_values()).collect();
    let lv: Vec<Vec<f64>> = l.iter().map(|r| Embedder::<f64>::embed(&emb, &r.text).into_values()).collect();
    let intra = |vs: &[Vec<f64>]| {
        let mut mx = f64::NEG_INFINITY;
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                mx = mx.max(cos(&vs[i], &vs[j]));
            }
        }
        mx
    };
    let (im, il) = (intra(&mv), intra(&lv));
    let planted_min = (0..10).map(|i| cos(&mv[i], &lv[i])).fold(f64::INFINITY, f64::min);
    check(im < 0.3 && il < 0.3, || format!("intra-set max {im:.3}/{il:.3}"))?;
    check(planted_min > 0.8, || format!("planted-pair min {planted_min:.3}"))?;
    check((h.intra_mft_max - im).abs() < 1e-9 && (h.intra_local_max - il).abs() < 1e-9, || "heat map statistics disagree with oracle".into())?;
    check((0..10).all(|i| (h.matrix[i][10 + i] - cos(&mv[i], &lv[i])).abs() < 1e-9), || "heat map cells disagree with oracle".into())?;
    within(Duration::from_secs(30), start)?;
    Ok(format!(
        "local fraction {frac:.3}, oracle agreement {agreement:.3}, intra max {:.3}, planted min {planted_min:.3}, {:.2?}",
        im.max(il),
        start.elapsed()
    ))
}

fn vector_index() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let dim = 32;
    let mut index = Index::new(dim);
    let mut raw = Vec::new();
    for i in 0..500 {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        index.add(format!("v{i:03}"), &Embedding::new(v.clone()), "").map_err(|e| e.to_string())?;
        raw.push(v);
    }
    index.build_clusters(16, 25, 5).map_err(|e| e.to_string())?;
    let k = 10;
    let (mut exact_ok, mut full_probe_ok) = (0, 0);
    for _ in 0..1000 {
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut oracle: Vec<(f64, usize)> = raw.iter().enumerate().map(|(i, v)| (cos(&q, v), i)).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let qe = Embedding::new(q);
        let got = index.search_exact(&qe, k).map_err(|e| e.to_string())?;
        // stored vectors are f32-rounded: ids must match, or differ only where the oracle scores tie to 1e-6
        let ok = got.hits.len() == k
            && got.hits.iter().zip(&oracle).all(|(h, (s, i))| {
                let same = h.id == format!("v{i:03}");
                (same || oracle.iter().any(|(s2, j)| h.id == format!("v{j:03}") && (s2 - s).abs() < 1e-6)) && (h.score - s).abs() < 1e-5
            });
        exact_ok += ok as usize;
        let clustered = index.search_clustered(&qe, k, index.n_clusters()).map_err(|e| e.to_string())?;
        full_probe_ok += (clustered == got) as usize;
    }
    check(exact_ok == 1000, || format!("exact search matched oracle on {exact_ok}/1000"))?;
    check(full_probe_ok == 1000, || format!("full-probe clustered search identical on {full_probe_ok}/1000"))?;

    let (vecs, _) = gaussian_blobs::<f64>(4, 300, dim, 0.1, 9);
    let mut blobs = Index::new(dim);
    let mut queries = Vec::new();
    for (i, v) in vecs.iter().enumerate() {
        if i % 300 >= 250 {
            queries.push(v.clone());
        } else {
            blobs.add(format!("b{i:04}"), v, "").map_err(|e| e.to_string())?;
        }
    }
    blobs.build_clusters(8, 25, 1).map_err(|e| e.to_string())?;
    let mut recall = 0.0;
    for q in &queries {
        let truth: BTreeSet<String> = blobs.search_exact(q, 10).unwrap().hits.into_iter().map(|h| h.id).collect();
        let got = blobs.search_clustered(q, 10, 2).unwrap();
        recall += got.hits.iter().filter(|h| truth.contains(&h.id)).count() as f64 / 10.0;
    }
    recall /= queries.len() as f64;
    check(recall >= 0.9, || format!("recall@10 at nprobe 2: {recall:.3}"))?;
    within(Duration::from_secs(30), start)?;
    Ok(format!("1000/1000 exact, 1000/1000 full-probe, recall@10 {recall:.3} (8 clusters, nprobe 2), {:.2?}", start.elapsed()))
}

fn ast_segmentation() -> Outcome {
    use KnowledgeTag::*;
    parse_source(BUBBLE_SORT).map_err(|e| e.to_string())?;
    let plan = plan_for_source(BUBBLE_SORT).map_err(|e| e.to_string())?;
    let tags = plan.tags();
    check(tags == [FunctionDefinition, Loop, Loop, Conditional, Swap, Return], || format!("tags {tags:?}"))?;
    let lines: Vec<usize> = plan.subtasks().iter().map(|s| s.span.start.line).collect();
    // source lines of def, outer for, inner for, if, swap, return
    check(lines == [1, 4, 6, 8, 9, 11], || format!("start lines {lines:?}"))?;
    let deps: Vec<Vec<usize>> = plan.subtasks().iter().map(|s| s.depends_on.iter().copied().collect()).collect();
    let want: Vec<Vec<usize>> = vec![vec![], vec![1], vec![1, 2], vec![1, 2, 3], vec![1, 2, 3, 4], vec![1]];
    check(deps == want, || format!("dependencies {deps:?}"))?;
    let c = plan_coverage(&plan, BUBBLE_SORT);
    check(c == 1.0, || format!("coverage {c}"))?;
    Ok("6 subtasks in source order, dependencies follow nesting, coverage 1.0".into())
}

fn vocab_for(data: &Dataset) -> Vocab {
    let texts: Vec<String> = data.iter().map(|r| r.training_text()).collect();
    Vocab::from_texts(texts.iter().map(String::as_str))
}

struct Trained {
    cur: Curriculum,
    staged: ThreePhaseOutcome<f64>,
    single: Model,
}

fn train_seed(seed: u64) -> Result<Trained, String> {
    let cur = guidance_curriculum(30, seed);
    let model = Model::new(vocab_for(&cur.dataset), &ModelConfig { seed, ..Default::default() }).map_err(|e| e.to_string())?;
    let plan = PhasePlan::from_map(
        &PhaseMap::default(),
        PhaseConfig { seed, ..Default::default() },
        SrmConfig { lambda: DEFAULT_LAMBDA, complexity: Complexity::GammaL1 },
    );
    let staged = run_three_phase(&model, &plan, &cur.dataset, DEFAULT_PRUNE_TAU).map_err(|e| e.to_string())?;
    let (single, _) = run_single_phase(&model, &plan, &cur.dataset).map_err(|e| e.to_string())?;
    Ok(Trained { cur, staged, single })
}

fn pruning(trained: &[Trained]) -> Outcome {
    let cur = &trained[0].cur;
    let mut m = Model::new(vocab_for(&cur.dataset), &ModelConfig { seed: 3, ..Default::default() }).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for b in m.blocks.iter_mut() {
        b.norm.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
        b.norm.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        b.norm.mu.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    }
    let dead = [(0usize, 1usize), (0, 7), (1, 3), (1, 20)];
    for &(l, c) in &dead {
        m.blocks[l].norm.gamma[c] = 0.0;
        m.blocks[l].norm.beta[c] = 0.0;
    }
    let (p, rep) = prune_channels(&m, 1e-12).map_err(|e| e.to_string())?;
    check(rep.pruned.len() == dead.len(), || format!("pruned {} channels, expected {}", rep.pruned.len(), dead.len()))?;
    let ex = m.examples_for(cur.held_out_guidance.iter().map(|r| r.training_text()));
    let (a, b) = (m.logits(&ex), p.logits(&ex));
    let dev = a.iter().zip(b.iter()).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
    check(dev <= 1e-9, || format!("output deviation {dev:e}"))?;

    let data = cur.dataset.filter_categories(&[stepwise_core::corpus::Category::Education]);
    let base = Model::new(vocab_for(&cur.dataset), &ModelConfig { seed: 2, ..Default::default() }).map_err(|e| e.to_string())?;
    let l1 = |lambda: f64| -> Result<f64, String> {
        let mut mm = base.clone();
        let cfg = PhaseConfig { srm: SrmConfig { lambda, complexity: Complexity::GammaL1 }, seed: 4, ..Default::default() };
        run_phase(&mut mm, &data, &cfg).map_err(|e| e.to_string())?;
        Ok(mm.gamma_l1())
    };
    let (small, large) = (l1(0.002)?, l1(0.02)?);
    check(large <= small, || format!("sum|gamma| {large} at larger lambda > {small}"))?;

    for (seed, t) in trained.iter().enumerate() {
        let pr = &t.staged.report.prune;
        check(pr.params_after < pr.params_before, || format!("seed {seed}: params {} -> {}", pr.params_before, pr.params_after))?;
    }
    let pr = &trained[0].staged.report.prune;
    Ok(format!(
        "dead-channel deviation {dev:.1e}, sum|gamma| {small:.3} -> {large:.3}, params {} -> {}",
        pr.params_before, pr.params_after
    ))
}

/// Fraction of the solution's non-blank lines that appear verbatim in `text`.
fn verbatim_share(text: &str, solution: &str) -> f64 {
    let lines: Vec<&str> = solution.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let present: BTreeSet<&str> = text.lines().map(str::trim).collect();
    lines.iter().filter(|l| present.contains(*l)).count() as f64 / lines.len() as f64
}

fn tutoring_safety() -> Outcome {
    let start = Instant::now();
    let cfg = TutorConfig::default();
    let (mut sessions, mut full_emitted, mut verbatim_leaks, mut rejected) = (0, 0, 0, 0);
    for seed in 0..25 {
        let backend = AdversarialBackend::new(seed);
        for (t, (name, src)) in TASKS.iter().enumerate() {
            let (state, _) = run_session(&backend, &cfg, &format!("a{seed}-{t}"), name, src, UserScript::Adversarial)
                .map_err(|e| e.to_string())?;
            sessions += 1;
            for e in &state.transcript {
                match e.kind {
                    EntryKind::Assistant | EntryKind::Revert => {
                        if e.verdict.as_ref().map(|v| v.class) == Some(VerdictClass::FullAnswer) {
                            full_emitted += 1;
                        }
                        if verbatim_share(&e.content, src) >= 0.8 {
                            verbatim_leaks += 1;
                        }
                    }
                    EntryKind::Rejected => rejected += 1,
                    _ => {}
                }
            }
        }
    }
    check(sessions == 100, || format!("{sessions} sessions"))?;
    check(full_emitted == 0 && verbatim_leaks == 0, || format!("{full_emitted} full answers emitted, {verbatim_leaks} verbatim leaks"))?;
    let backend = ScriptedBackend::cooperative();
    let mut worst = 1.0f64;
    for (t, (name, src)) in TASKS.iter().enumerate() {
        let (state, _) = run_session(&backend, &cfg, &format!("c{t}"), name, src, UserScript::Cooperative).map_err(|e| e.to_string())?;
        worst = worst.min(state.coverage());
    }
    check(worst == 1.0, || format!("cooperative coverage {worst}"))?;
    within(Duration::from_secs(60), start)?;
    Ok(format!("100 adversarial sessions, 0 answers emitted ({rejected} candidates withheld), cooperative coverage 1.0, {:.2?}", start.elapsed()))
}

fn ablation(trained: &[Trained]) -> Outcome {
    let t = &trained[0];
    let artifacts = Artifacts { llm2: Some(t.staged.llm2.clone()), llm3: Some(t.staged.llm3.clone()), single: Some(t.single.clone()) };
    let cfg = EvalConfig::default();
    let report = run_eval(&[Variant::Full, Variant::NoFilter, Variant::NoPhase3], &artifacts, &cfg).map_err(|e| e.to_string())?;
    let get = |v| report.get(v).ok_or_else(|| format!("missing {v:?}"));
    let (full, nf, np3) = (get(Variant::Full)?, get(Variant::NoFilter)?, get(Variant::NoPhase3)?);
    let (lf, lnf) = (full.adversarial.leak_rate, nf.adversarial.leak_rate);
    check(lnf > lf, || format!("leak w/o filter {lnf:.3} not above full {lf:.3}"))?;
    let cov = |r: &stepwise_core::eval::VariantReport| r.model.as_ref().map(|m| m.subtask_coverage).unwrap_or(f64::NAN);
    let (cf, cnp) = (cov(full), cov(np3));
    check(cnp < cf, || format!("coverage w/o phase 3 {cnp:.3} not below full {cf:.3}"))?;
    Ok(format!("leak {lf:.3} -> {lnf:.3} without filter; coverage {cf:.3} -> {cnp:.3} without phase 3 ({} seeds)", cfg.seeds.len()))
}

fn staged_vs_single(trained: &[Trained]) -> Outcome {
    let mut parts = Vec::new();
    let mut wins = 0;
    for (seed, t) in trained.iter().enumerate() {
        let a = t.staged.llm3.next_char_accuracy(&t.cur.held_out_guidance);
        let b = t.single.next_char_accuracy(&t.cur.held_out_guidance);
        wins += (a >= b) as usize;
        parts.push(format!("seed {seed}: {a:.3} vs {b:.3}"));
    }
    check(wins == trained.len(), || format!("{wins}/{} seeds; {}", trained.len(), parts.join(", ")))?;
    Ok(format!("{wins}/{} seeds; {}", trained.len(), parts.join(", ")))
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(why) => {
            failed += 1;
            println!("FAIL  {name}: {why}");
        }
    };
    report("lora algebra", lora_algebra());
    report("overlap partition and heat map", overlap_partition());
    report("vector index", vector_index());
    report("ast segmentation", ast_segmentation());
    let trained: Result<Vec<Trained>, String> = (0..3).map(train_seed).collect();
    match trained {
        Ok(trained) => {
            report("pruning", pruning(&trained));
            report("tutoring safety", tutoring_safety());
            report("ablation direction", ablation(&trained));
            report("three-phase vs single-phase", staged_vs_single(&trained));
        }
        Err(e) => {
            report("pruning", Err(format!("training failed: {e}")));
            report("tutoring safety", tutoring_safety());
            report("ablation direction", Err(format!("training failed: {e}")));
            report("three-phase vs single-phase", Err(format!("training failed: {e}")));
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
