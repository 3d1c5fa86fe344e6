use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stepwise_core::corpus::{Category, CorpusRecord, Dataset, PhaseMap};
use stepwise_core::fixtures::guidance_curriculum;
use stepwise_core::train::*;

fn copy_task(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recs = (0..n)
        .map(|i| {
            let unit: String = (0..3).map(|_| (b'a' + rng.random_range(0..6u8)) as char).collect();
            CorpusRecord::new(format!("c{i}"), unit.repeat(4), Category::Code)
        })
        .collect();
    Dataset::from_records(recs).unwrap()
}

fn vocab_for(data: &Dataset) -> Vocab {
    let texts: Vec<String> = data.iter().map(|r| r.training_text()).collect();
    Vocab::from_texts(texts.iter().map(String::as_str))
}

fn curriculum_model(seed: u64) -> (stepwise_core::fixtures::Curriculum, TinyModel<f64>, PhasePlan) {
    let cur = guidance_curriculum(30, seed);
    let model = TinyModel::new(vocab_for(&cur.dataset), &ModelConfig { seed, ..Default::default() }).unwrap();
    let plan = PhasePlan::from_map(
        &PhaseMap::default(),
        PhaseConfig { seed, ..Default::default() },
        SrmConfig { lambda: DEFAULT_LAMBDA, complexity: Complexity::GammaL1 },
    );
    (cur, model, plan)
}

/// Plain-loop inference forward from the public fields, independent of the
/// batched ndarray path.
fn reference_logits(m: &TinyModel<f64>, context: &[usize]) -> Vec<f64> {
    let v = m.vocab_size();
    let mut h = vec![0.0; m.context * v];
    for (j, &t) in context.iter().enumerate() {
        h[j * v + t] = 1.0;
    }
    let apply = |lin: &Linear<f64>, x: &[f64]| -> Vec<f64> {
        let s = lin.adapter.alpha / lin.adapter.a.nrows() as f64;
        (0..lin.base.rows())
            .map(|i| {
                let mut acc = 0.0;
                for k in 0..x.len() {
                    let mut w = lin.base.weights[[i, k]];
                    for r in 0..lin.adapter.a.nrows() {
                        w += s * lin.adapter.b[[i, r]] * lin.adapter.a[[r, k]];
                    }
                    acc += w * x[k];
                }
                acc
            })
            .collect()
    };
    for b in &m.blocks {
        let z = apply(&b.linear, &h);
        h = z
            .iter()
            .enumerate()
            .map(|(c, &zc)| {
                let n = &b.norm;
                let y = n.gamma[c] * (zc - n.mu[c]) / (n.var[c] + n.eps).sqrt() + n.beta[c];
                y.max(0.0)
            })
            .collect();
    }
    apply(&m.head, &h)
}

fn perturbed_model(seed: u64) -> TinyModel<f64> {
    let vocab = Vocab::from_texts(["abcdefg h"]);
    let mut m = TinyModel::new(vocab, &ModelConfig { hidden: 8, rank: 2, alpha: 2.0, seed, ..Default::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for b in m.blocks.iter_mut() {
        b.linear.adapter.b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        b.norm.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5) * if rng.random_bool(0.2) { -1.0 } else { 1.0 });
        b.norm.beta.mapv_inplace(|_| rng.random_range(-0.2..0.2));
        b.norm.mu.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        b.norm.var.mapv_inplace(|_| rng.random_range(0.5..2.0));
    }
    m.head.adapter.b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    m
}

#[test]
fn srm_loss_matches_independent_recomputation() {
    let m = perturbed_model(1);
    let ex = m.examples_for(["bad cafe", "hg"]);
    for cfg in [
        SrmConfig { lambda: 0.0, complexity: Complexity::GammaL1 },
        SrmConfig { lambda: 0.25, complexity: Complexity::GammaL1 },
        SrmConfig { lambda: 0.25, complexity: Complexity::ExpectedOutputLength },
    ] {
        let got = srm_loss(m.logits(&ex).view(), &ex.targets, &m, &cfg).unwrap();
        let (mut ce, mut cont) = (0.0, 0.0);
        for (i, &t) in ex.targets.iter().enumerate() {
            let z = reference_logits(&m, &ex.contexts[i * m.context..(i + 1) * m.context]);
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - mx).exp()).sum();
            ce += -(z[t] - mx - sum.ln());
            cont += 1.0 - (z[END] - mx).exp() / sum;
        }
        let n = ex.len() as f64;
        let j = match cfg.complexity {
            Complexity::GammaL1 => m.blocks.iter().flat_map(|b| b.norm.gamma.iter()).map(|g| g.abs()).sum::<f64>(),
            Complexity::ExpectedOutputLength => cont / n,
        };
        let want = ce / n + cfg.lambda * j;
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

/// Visits the i-th trainable parameter in gradient order.
fn with_param(m: &mut TinyModel<f64>, mut i: usize, f: impl FnOnce(&mut f64)) {
    let TinyModel { blocks, head, .. } = m;
    let mut slots: Vec<&mut ndarray::Array2<f64>> = Vec::new();
    let mut vecs: Vec<&mut ndarray::Array1<f64>> = Vec::new();
    let mut gammas = Vec::new();
    let mut betas = Vec::new();
    for b in blocks.iter_mut() {
        slots.push(&mut b.linear.adapter.a);
        slots.push(&mut b.linear.adapter.b);
        gammas.push(&mut b.norm.gamma);
        betas.push(&mut b.norm.beta);
    }
    slots.push(&mut head.adapter.a);
    slots.push(&mut head.adapter.b);
    vecs.extend(gammas);
    vecs.extend(betas);
    for a in slots {
        if i < a.len() {
            return f(a.iter_mut().nth(i).unwrap());
        }
        i -= a.len();
    }
    for v in vecs {
        if i < v.len() {
            return f(&mut v[i]);
        }
        i -= v.len();
    }
    panic!("parameter index out of range");
}

fn flat_grad(g: &ModelGrad<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    let (blocks, head) = g.adapters.split_at(g.adapters.len() - 1);
    for a in blocks.iter().chain(head) {
        out.extend(a.a.iter());
        out.extend(a.b.iter());
    }
    for v in &g.gamma {
        out.extend(v.iter());
    }
    for v in &g.beta {
        out.extend(v.iter());
    }
    out
}

#[test]
fn every_trainable_parameter_passes_gradient_check() {
    let base = perturbed_model(3);
    // eight next-token examples
    let ex = base.examples_for(["abcdefg"]);
    assert_eq!(ex.len(), 8);
    for cfg in [
        SrmConfig { lambda: 0.1, complexity: Complexity::GammaL1 },
        SrmConfig { lambda: 0.3, complexity: Complexity::ExpectedOutputLength },
    ] {
        let (_, grad, _) = base.loss_and_grad(&ex, &cfg).unwrap();
        let analytic = flat_grad(&grad);
        let mut m = base.clone();
        let count = analytic.len();
        let loss_at = |m: &TinyModel<f64>| m.loss_and_grad(&ex, &cfg).unwrap().0;
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..count {
            let mut orig = 0.0;
            with_param(&mut m, i, |p| {
                orig = *p;
                *p += h;
            });
            let lp = loss_at(&m);
            with_param(&mut m, i, |p| *p = orig - h);
            let lm = loss_at(&m);
            with_param(&mut m, i, |p| *p = orig);
            let numeric = (lp - lm) / (2.0 * h);
            let err = (numeric - analytic[i]).abs();
            let rel = err / numeric.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max(if err < 1e-9 { 0.0 } else { rel });
        }
        assert!(worst <= 1e-4, "{cfg:?}: worst relative error {worst}");
    }
}

#[test]
fn copy_task_loss_halves_in_100_epochs() {
    let data = copy_task(50, 1);
    let mut m = TinyModel::<f64>::new(vocab_for(&data), &ModelConfig::default()).unwrap();
    let sums = m.base_checksums();
    let run = run_phase(&mut m, &data, &PhaseConfig { epochs: 100, batch_size: 64, ..Default::default() }).unwrap();
    let (first, last) = (run.epoch_losses[0], *run.epoch_losses.last().unwrap());
    assert!(last <= 0.5 * first, "{first} -> {last}");
    assert!(!run.loss_increased);
    assert_eq!(m.base_checksums(), sums);
}

#[test]
fn zero_learning_rate_leaves_adapters_and_norms() {
    let data = copy_task(5, 2);
    let mut m = TinyModel::<f64>::new(vocab_for(&data), &ModelConfig::default()).unwrap();
    let before = m.clone();
    run_phase(&mut m, &data, &PhaseConfig { epochs: 3, lr: 0.0, ..Default::default() }).unwrap();
    for (a, b) in m.blocks.iter().zip(&before.blocks) {
        assert_eq!(a.linear, b.linear);
        assert_eq!(a.norm.gamma, b.norm.gamma);
        assert_eq!(a.norm.beta, b.norm.beta);
    }
    assert_eq!(m.head, before.head);
}

#[test]
fn empty_phase_data_is_an_error() {
    let m0 = TinyModel::<f64>::new(Vocab::from_texts(["ab"]), &ModelConfig::default()).unwrap();
    let mut m = m0.clone();
    assert!(matches!(run_phase(&mut m, &Dataset::new(), &PhaseConfig::default()), Err(TrainError::EmptyPhase { .. })));
    let only_code = copy_task(3, 1);
    let plan = PhasePlan::default();
    assert!(matches!(run_three_phase(&m0, &plan, &only_code, 0.01), Err(TrainError::EmptyPhase { phase: 2, .. })));
}

#[test]
fn plan_validation() {
    let mut plan = PhasePlan::default();
    assert!(plan.validate().is_ok());
    plan.phases[2].categories.clear();
    assert!(plan.validate().is_err());
    let mut plan = PhasePlan::default();
    plan.phases.pop();
    assert!(plan.validate().is_err());
    let mut plan = PhasePlan::default();
    plan.phases[0].config.srm.lambda = -1.0;
    assert!(plan.validate().is_err());
}

#[test]
fn no_op_pipeline_preserves_the_model() {
    let (cur, model, _) = curriculum_model(0);
    let zero = PhaseConfig { epochs: 0, ..Default::default() };
    let plan = PhasePlan::from_map(&PhaseMap::default(), zero, SrmConfig::default());
    let out = run_three_phase(&model, &plan, &cur.dataset, 0.0).unwrap();
    let ex = model.examples_for(cur.held_out_guidance.iter().map(|r| r.training_text()));
    assert_eq!(model.logits(&ex), out.llm3.logits(&ex));
    assert_eq!(out.report.prune.params_before, out.report.prune.params_after);
}

#[test]
fn three_phase_isolates_phases_and_prunes() {
    let (cur, model, plan) = curriculum_model(1);
    let out = run_three_phase(&model, &plan, &cur.dataset, DEFAULT_PRUNE_TAU).unwrap();
    let r = &out.report;
    for (summary, spec) in r.phases.iter().zip(&plan.phases) {
        for id in &summary.run.accessed_ids {
            let rec = cur.dataset.get(id).unwrap();
            assert!(spec.categories.contains(&rec.category), "{id} leaked into {}", summary.name);
        }
        assert!(!summary.run.accessed_ids.is_empty());
    }
    assert!(r.prune.params_after < r.prune.params_before);
    assert_eq!(out.llm2.param_count(), r.prune.params_after);
    let text = r.render();
    let (p2, pr, p3) = (text.find("[phase 2]").unwrap(), text.find("[prune]").unwrap(), text.find("[phase 3]").unwrap());
    assert!(p2 < pr && pr < p3);
}

#[test]
fn larger_lambda_gives_sparser_gamma() {
    let (cur, model, _) = curriculum_model(2);
    let data = cur.dataset.filter_categories(&[Category::Education]);
    let mut prev = f64::INFINITY;
    for lambda in [0.0, 0.002, 0.01, 0.05] {
        let mut m = model.clone();
        let cfg = PhaseConfig { srm: SrmConfig { lambda, complexity: Complexity::GammaL1 }, seed: 4, ..Default::default() };
        run_phase(&mut m, &data, &cfg).unwrap();
        let l1 = m.gamma_l1();
        assert!(l1 <= prev, "lambda {lambda}: {l1} > {prev}");
        prev = l1;
    }
}

#[test]
fn staged_training_beats_single_phase_on_guidance_format() {
    for seed in 0..3 {
        let (cur, model, plan) = curriculum_model(seed);
        let staged = run_three_phase(&model, &plan, &cur.dataset, DEFAULT_PRUNE_TAU).unwrap();
        let (single, _) = run_single_phase(&model, &plan, &cur.dataset).unwrap();
        let (a, b) = (staged.llm3.next_char_accuracy(&cur.held_out_guidance), single.next_char_accuracy(&cur.held_out_guidance));
        assert!(a >= b, "seed {seed}: staged {a} < single {b}");
    }
}

#[test]
fn checkpoint_files_round_trip() {
    let (cur, model, _) = curriculum_model(5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model.rounded();
    m.save(&path).unwrap();
    let back = TinyModel::<f64>::load(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.next_char_accuracy(&cur.held_out_guidance), m.next_char_accuracy(&cur.held_out_guidance));
    assert!(TinyModel::<f64>::load(&dir.path().join("missing")).is_err());
}
