use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde_json::json;
use stepwise_core::corpus::{load_corpus_mixed, Dataset, PhaseMap};
use stepwise_core::embed::{Embedder, HashingEmbedder};
use stepwise_core::eval::{run_eval, Artifacts, EvalConfig, Variant};
use stepwise_core::fixtures::{guidance_curriculum, planted_overlap_corpus};
use stepwise_core::overlap::{
    heatmap_report, partition_corpus, synthesize_pairs, train_overlap_net, OverlapTrainConfig, ReferenceMode,
};
use stepwise_core::train::{
    run_single_phase, run_three_phase, Complexity, ModelConfig, PhaseConfig, PhasePlan, SrmConfig, Vocab,
};
use stepwise_core::tutor::{
    AdversarialBackend, ModelBackend, ScriptedBackend, SessionState, SystemPrompt, TinyModelBackend, Tutor,
    TutorConfig,
};
use stepwise_core::{Index, Model};
use stepwise_server::{AppState, RemoteBackend};

use crate::{
    BackendKind, Cli, Command, EvalArgs, FixtureArgs, FixtureKind, Format, IndexArgs, SegmentArgs, ServeArgs,
    SessionArgs, SplitArgs, TrainArgs, TutorArgs,
};

/// Records per side in the heat map.
const HEATMAP_SIDE: usize = 10;

pub fn run(cli: Cli) -> Result<()> {
    let f = cli.format;
    match cli.command {
        Command::SplitData(a) => split_data(a, f),
        Command::Train(a) => train(a, f),
        Command::Eval(a) => eval(a, f),
        Command::BuildIndex(a) => build_index(a, f),
        Command::Segment(a) => segment(a, f),
        Command::Session(a) => session(a, f),
        Command::Serve(a) => serve(a),
        Command::Fixture(a) => fixture(a),
    }
}

fn load(path: &Path) -> Result<Dataset> {
    load_corpus_mixed(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn emit(format: Format, text: String, value: serde_json::Value) {
    match format {
        Format::Text => print!("{text}"),
        Format::Structured => println!("{value}"),
    }
}

fn split_data(a: SplitArgs, format: Format) -> Result<()> {
    let data = load(&a.corpus)?;
    fs::create_dir_all(&a.out_dir)?;
    let emb = HashingEmbedder::default();
    let manifest_path = a.out_dir.join("manifest.json");
    if data.is_empty() {
        fs::write(&manifest_path, "{}\n")?;
        emit(format, "records 0\n".into(), json!({ "records": 0, "mft": 0, "local": 0, "local_fraction": 0.0 }));
        return Ok(());
    }
    let texts: Vec<String> = data.iter().map(|r| r.embedding_text()).collect();
    let pairs = synthesize_pairs::<f64>(&texts, &emb, texts.len().min(100), a.seed)?;
    let (net, _) = train_overlap_net(&pairs, &OverlapTrainConfig { seed: a.seed, ..Default::default() })?;
    let result = partition_corpus(&data, &net, &emb, a.threshold, a.seed, ReferenceMode::Nearest)?;
    fs::write(&manifest_path, result.manifest_json() + "\n")?;
    let heatmap = if result.local.is_empty() {
        None
    } else {
        let m: Vec<_> = result.mft.records().iter().take(HEATMAP_SIDE).cloned().collect();
        let l: Vec<_> = result.local.records().iter().take(HEATMAP_SIDE).cloned().collect();
        let report = heatmap_report::<f64>(&m, &l, &emb)?;
        let path = a.out_dir.join("heatmap.csv");
        fs::write(&path, report.csv())?;
        Some(path)
    };
    let text = format!(
        "records {}\nsampled {}\nmft {}\nlocal {}\nlocal fraction {:.4}\nmanifest {}\n{}",
        data.len(),
        result.sampled.len(),
        result.mft.len(),
        result.local.len(),
        result.local_fraction(),
        manifest_path.display(),
        heatmap.as_ref().map(|p| format!("heatmap {}\n", p.display())).unwrap_or_default()
    );
    let value = json!({
        "records": data.len(),
        "sampled": result.sampled.len(),
        "mft": result.mft.len(),
        "local": result.local.len(),
        "local_fraction": result.local_fraction(),
        "local_ids": result.local.iter().map(|r| r.id.clone()).collect::<Vec<_>>(),
        "manifest": manifest_path,
        "heatmap": heatmap,
    });
    emit(format, text, value);
    Ok(())
}

fn train(a: TrainArgs, format: Format) -> Result<()> {
    let data = load(&a.corpus)?;
    if data.is_empty() {
        bail!("corpus {} has no records", a.corpus.display());
    }
    let texts: Vec<String> = data.iter().map(|r| r.training_text()).collect();
    let model = Model::new(Vocab::from_texts(texts.iter().map(String::as_str)), &ModelConfig { seed: a.seed, ..Default::default() })?;
    let base = PhaseConfig { epochs: a.epochs, lr: a.lr, seed: a.seed, ..Default::default() };
    let plan = PhasePlan::from_map(&PhaseMap::default(), base, SrmConfig { lambda: a.lambda, complexity: Complexity::GammaL1 });
    fs::create_dir_all(&a.out_dir)?;
    model.save(&a.out_dir.join("init.ckpt"))?;
    if a.single_phase {
        let (m, run) = run_single_phase(&model, &plan, &data)?;
        let path = a.out_dir.join("single.ckpt");
        m.save(&path)?;
        let mut text = format!("[single phase] records={} params={}\n", run.accessed_ids.len(), m.param_count());
        for (i, l) in run.epoch_losses.iter().enumerate() {
            text.push_str(&format!("  epoch {:>3} loss {:.6}\n", i + 1, l));
        }
        text.push_str(&format!("checkpoint {}\n", path.display()));
        emit(format, text, json!({ "single_phase": run, "params": m.param_count(), "checkpoint": path }));
        return Ok(());
    }
    let out = run_three_phase(&model, &plan, &data, a.tau)?;
    for (name, m) in [("llm1", &out.llm1), ("llm2", &out.llm2), ("llm3", &out.llm3)] {
        m.save(&a.out_dir.join(format!("{name}.ckpt")))?;
    }
    let text = format!("{}checkpoints {}\n", out.report.render(), a.out_dir.display());
    emit(format, text, json!({ "report": out.report, "out_dir": a.out_dir }));
    Ok(())
}

fn eval(a: EvalArgs, format: Format) -> Result<()> {
    let variants = if a.variant.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variant.iter().map(|v| Variant::parse(v)).collect::<Result<_, _>>()?
    };
    let mut artifacts = Artifacts::default();
    if !a.mock_only {
        let load_opt = |name: &str| -> Result<Option<Model>> {
            let p = a.models.join(format!("{name}.ckpt"));
            if p.exists() {
                Ok(Some(Model::load(&p).with_context(|| format!("loading {}", p.display()))?))
            } else {
                Ok(None)
            }
        };
        artifacts.llm2 = load_opt("llm2")?;
        artifacts.llm3 = load_opt("llm3")?;
        artifacts.single = load_opt("single")?;
    }
    let cfg = EvalConfig { seeds: (a.seed..a.seed + a.seeds).collect(), with_models: !a.mock_only, ..Default::default() };
    let report = run_eval(&variants, &artifacts, &cfg)?;
    emit(format, report.render(), serde_json::to_value(&report)?);
    Ok(())
}

fn build_index(a: IndexArgs, format: Format) -> Result<()> {
    let data = load(&a.corpus)?;
    let emb = HashingEmbedder::default();
    let mut index = Index::new(Embedder::<f64>::dimension(&emb));
    for r in data.iter() {
        let text = r.embedding_text();
        index.add(r.id.clone(), &Embedder::<f64>::embed(&emb, &text), text)?;
    }
    let clusters = if a.clusters > 0 { Some(index.build_clusters(a.clusters, 25, a.seed)?) } else { None };
    let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    index.write_to(BufWriter::new(file))?;
    let text = format!("entries {}\nclusters {}\nindex {}\n", index.len(), index.n_clusters(), a.out.display());
    emit(format, text, json!({ "entries": index.len(), "clusters": clusters, "index": a.out }));
    Ok(())
}

fn read_source(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
        None => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s)?;
            Ok(s)
        }
    }
}

fn segment(a: SegmentArgs, format: Format) -> Result<()> {
    let src = read_source(a.file.as_deref())?;
    let plan = stepwise_core::astseg::plan_for_source(&src)?;
    let mut text = String::new();
    for st in plan.subtasks() {
        let deps: Vec<String> = st.depends_on.iter().map(|d| d.to_string()).collect();
        text.push_str(&format!(
            "{}. [{}] {} (lines {}-{}; after {})\n",
            st.index,
            serde_json::to_value(st.knowledge_tag)?.as_str().unwrap_or_default(),
            st.description,
            st.span.start.line,
            st.span.end.line,
            if deps.is_empty() { "-".to_string() } else { deps.join(",") }
        ));
    }
    emit(format, text, serde_json::to_value(&plan)?);
    Ok(())
}

fn make_backend(a: &TutorArgs) -> Result<Arc<dyn ModelBackend>> {
    if let Some(url) = &a.backend_url {
        return Ok(Arc::new(RemoteBackend::new(url.clone(), Duration::from_secs(30))));
    }
    Ok(match a.backend {
        BackendKind::Scripted => Arc::new(ScriptedBackend::cooperative()),
        BackendKind::Adversarial => Arc::new(AdversarialBackend::new(a.seed)),
        BackendKind::Model => {
            let path = a.model.as_ref().context("--backend model needs --model <checkpoint>")?;
            let m = Model::load(path).with_context(|| format!("loading {}", path.display()))?;
            Arc::new(TinyModelBackend::new(m, a.seed))
        }
        BackendKind::Remote => bail!("--backend remote needs --backend-url"),
    })
}

fn load_index(a: &TutorArgs) -> Result<Option<Arc<Index>>> {
    let Some(path) = &a.index else { return Ok(None) };
    let file = fs::File::open(path).with_context(|| format!("opening index {}", path.display()))?;
    Ok(Some(Arc::new(Index::read_from(BufReader::new(file))?)))
}

fn tutor_config(a: &TutorArgs) -> TutorConfig {
    TutorConfig { top_k: a.k, nprobe: a.nprobe, relevance_threshold: a.threshold, ..Default::default() }
}

fn session(a: SessionArgs, format: Format) -> Result<()> {
    let src = read_source(Some(&a.task))?;
    let backend = make_backend(&a.tutor)?;
    let index = load_index(&a.tutor)?;
    let tutor = Tutor::new(backend.as_ref(), index.as_deref(), tutor_config(&a.tutor))?;
    let mut state = SessionState::new("cli", &src, SystemPrompt::default())?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    if format == Format::Text {
        writeln!(out, "task has {} subtasks; type a message, or quit", state.plan.len())?;
    }
    for line in io::stdin().lock().lines() {
        let line = line?;
        let msg = line.trim();
        if msg.is_empty() {
            continue;
        }
        if msg == "quit" {
            break;
        }
        let turn = tutor.advance_turn(&mut state, msg)?;
        match format {
            Format::Text => writeln!(out, "tutor [{}/{}]: {}", turn.current_subtask, state.plan.len(), turn.reply)?,
            Format::Structured => writeln!(out, "{}", serde_json::to_string(&turn)?)?,
        }
        if state.finished {
            break;
        }
    }
    if format == Format::Text {
        writeln!(out, "coverage {:.3}", state.coverage())?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(io::stderr)
        .init();
    let backend = make_backend(&a.tutor)?;
    let index = load_index(&a.tutor)?;
    let app = Arc::new(AppState::new(backend, index, tutor_config(&a.tutor))?);
    let addr: std::net::SocketAddr = format!("{}:{}", a.host, a.port).parse().context("bad host/port")?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(stepwise_server::serve(app, addr))?;
    Ok(())
}

fn fixture(a: FixtureArgs) -> Result<()> {
    let data = match a.kind {
        FixtureKind::Planted => {
            let planted = ((a.size as f64) * 0.02).round().max(1.0) as usize;
            planted_overlap_corpus(a.size.saturating_sub(planted), planted, a.seed).dataset
        }
        FixtureKind::Curriculum => guidance_curriculum(a.size, a.seed).dataset,
    };
    data.write_jsonl(&a.out)?;
    println!("wrote {} records to {}", data.len(), a.out.display());
    Ok(())
}
