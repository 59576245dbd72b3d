use crate::config::RunConfig;
use crate::{BankFlags, CheckKind, Classify, Command, Common, Failure, Filter, FuseKind, TrainFlags};
use anyhow::{anyhow, Context};
use jam_core::checkpoint::{payload_bytes, Checkpoint};
use jam_core::data::{
    read_dataset, synth_corpus, tokenize_report, write_dataset, CorpusKind, DatasetHeader, GeneratorInfo,
    MixedSequence, SynthWorld, Vocabulary, detokenize_report,
};
use jam_core::fusion::{fuse, FusionKind, FusionSpec};
use jam_core::model::{
    cross_param_count, dense_param_count, CheckedModel, GradCheckSetup, JamCrossConfig, JamModel, LanguageModel,
    Trainable, Transformer,
};
use jam_core::retrieval::{MemoryBank, ToyEncoder};
use jam_core::sampler::generate_interleaved;
use jam_core::trainer::report::write_metrics;
use jam_core::trainer::{evaluate_ppl, train, Phase, SpanFilter, TrainConfig, TrainData, TrainError, TrainOutcome};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

type Out<T = ()> = Result<T, Failure>;

pub fn run(cmd: Command) -> Out {
    match cmd {
        Command::Synth { kind, size, world_seed, noise, out, common } => synth(&kind, size, world_seed, noise, &out, &common),
        Command::Init { zero, out, common } => init(zero, &out, &common),
        Command::TrainParent { init, out, train, common } => train_parent(init.as_deref(), &out, &train, &common),
        Command::Fuse { a, b, kind, every, cross_ffn, out, common } => fuse_cmd(&a, &b, kind, every, cross_ffn, &out, &common),
        Command::Align { model, out, train, common } => align(&model, &out, &train, &common),
        Command::Instruct { model, out_dir, epochs, train, common } => instruct(&model, &out_dir, epochs, &train, &common),
        Command::Sample {
            model,
            prompt,
            prompt_tokens,
            n,
            temperature,
            top_p,
            cfg,
            max_tokens,
            max_images,
            bank,
            common,
        } => {
            let mut cfg_ = RunConfig::load(common.config.as_deref()).usage()?;
            let s = &mut cfg_.sampler;
            s.temperature = temperature.unwrap_or(s.temperature);
            s.top_p = top_p.unwrap_or(s.top_p);
            s.cfg_alpha = cfg.unwrap_or(s.cfg_alpha);
            s.max_tokens = max_tokens.unwrap_or(s.max_tokens);
            s.max_images = max_images.unwrap_or(s.max_images);
            s.seed = common.seed.unwrap_or(s.seed);
            s.validate().usage()?;
            sample(&cfg_, &model, prompt.as_deref(), prompt_tokens.as_deref(), n, &bank)
        }
        Command::Eval { model, data, filter, common } => eval(&model, &data, filter, &common),
        Command::Ablate { out_dir, seeds, common } => ablate(&out_dir, seeds, &common),
        Command::Gradcheck { model, layers, d_model, tokens, init_std, threshold, common } => {
            gradcheck(model, layers, d_model, tokens, init_std, threshold, &common)
        }
        Command::BuildBank { data, out, common } => build_bank(&data, &out, &common),
    }
}

fn emit(v: Value) {
    println!("{v}");
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Refuses to write over any of the command's inputs.
fn guard_output(out: &Path, inputs: &[&Path]) -> Out {
    let canon = |p: &Path| std::fs::canonicalize(p).ok();
    if let Some(o) = canon(out) {
        if inputs.iter().any(|i| canon(i).as_ref() == Some(&o)) {
            return Err(Failure::Usage(anyhow!("output {} is also an input", out.display())));
        }
    }
    Ok(())
}

fn create(path: &Path) -> Out<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .runtime()?;
    }
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .runtime()
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Out<Value> {
    let bytes = ckpt.to_bytes();
    let mut w = create(path)?;
    w.write_all(&bytes).and_then(|_| w.flush()).runtime()?;
    Ok(json!({
        "path": path.display().to_string(),
        "sha256": sha256_hex(&bytes),
        "payload_sha256": sha256_hex(&payload_bytes(ckpt.model.params())),
        "params": ckpt.model.param_count(),
        "kind": ckpt.model.kind_name(),
    }))
}

fn load_checkpoint(path: &Path) -> Out<Checkpoint> {
    Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .runtime()
}

fn load_dense(path: &Path) -> Out<(Transformer, Vocabulary)> {
    let c = load_checkpoint(path)?;
    match c.model {
        JamModel::Dense(m) => Ok((m, c.vocab)),
        JamModel::Cross(_) => Err(Failure::Usage(anyhow!("{} holds a cross model; a dense parent is needed", path.display()))),
    }
}

/// `path` or `kind=path`; without a kind, the dataset header must name one.
fn read_data(spec: &str, vocab: &Vocabulary) -> Out<(CorpusKind, Vec<MixedSequence>)> {
    let (kind, path) = match spec.split_once('=') {
        Some((k, p)) => (Some(k.parse::<CorpusKind>().map_err(|e| Failure::Usage(anyhow!(e)))?), p),
        None => (None, spec),
    };
    let file = File::open(path).with_context(|| format!("opening dataset {path}")).runtime()?;
    let (header, seqs) = read_dataset(BufReader::new(file))
        .with_context(|| format!("reading dataset {path}"))
        .runtime()?;
    if header.vocab != *vocab {
        return Err(Failure::Runtime(anyhow!("dataset {path} uses a different vocabulary than the model")));
    }
    let kind = match (kind, header.generator) {
        (Some(k), _) => k,
        (None, Some(g)) => g.kind.parse::<CorpusKind>().map_err(|e| Failure::Runtime(anyhow!(e)))?,
        (None, None) => return Err(Failure::Usage(anyhow!("dataset {path} does not name its kind; pass kind=path"))),
    };
    Ok((kind, seqs))
}

fn load_bank(flags: &BankFlags, vocab: &Vocabulary) -> Out<Option<MemoryBank>> {
    if !flags.retrieval {
        return Ok(None);
    }
    let (Some(sidecar), Some(data)) = (&flags.bank, &flags.bank_data) else {
        return Err(Failure::Usage(anyhow!("--retrieval needs --bank and --bank-data")));
    };
    let (_, seqs) = read_data(&format!("caption_pairs={}", data.display()), vocab)?;
    let file = File::open(sidecar).with_context(|| format!("opening bank {}", sidecar.display())).runtime()?;
    let bank = MemoryBank::load(vocab, &seqs, BufReader::new(file))
        .with_context(|| format!("loading bank {}", sidecar.display()))
        .runtime()?;
    Ok(Some(bank))
}

/// Training config from the run config plus flag overrides, and the data it needs.
fn train_setup(cfg: &RunConfig, flags: &TrainFlags, common: &Common, vocab: &Vocabulary, phase: Phase) -> Out<(TrainConfig, TrainData)> {
    let mut tc = cfg.train.clone();
    tc.phase = phase;
    tc.seed = common.seed.unwrap_or(tc.seed);
    tc.lr = flags.lr.unwrap_or(tc.lr);
    tc.batch_tokens = flags.batch_tokens.unwrap_or(tc.batch_tokens);
    if let Some(steps) = flags.steps {
        tc.total_steps = steps;
        tc.warmup_steps = tc.warmup_steps.min(steps);
        tc.eval_interval = tc.eval_interval.min(steps.max(1));
    }
    let mut data = TrainData {
        retrieval: cfg.retrieval.config(),
        ..Default::default()
    };
    for spec in &flags.data {
        let (kind, seqs) = read_data(spec, vocab)?;
        data.train.entry(kind).or_default().extend(seqs);
    }
    for spec in &flags.val {
        data.val.extend(read_data(spec, vocab)?.1);
    }
    if !cfg.explicit_mixture {
        let w = 1.0 / data.train.len() as f64;
        tc.mixture_weights = data.train.keys().map(|k| (*k, w)).collect();
    }
    data.bank = load_bank(&flags.bank, vocab)?;
    tc.retrieval_enabled = data.bank.is_some();
    tc.validate(vocab).usage()?;
    Ok((tc, data))
}

fn run_training<M: Trainable + ?Sized>(model: &mut M, vocab: &Vocabulary, data: &TrainData, tc: &TrainConfig) -> Out<TrainOutcome> {
    train(model, vocab, data, tc).map_err(|e| match e {
        TrainError::Config(_) => Failure::Usage(e.into()),
        other => Failure::Runtime(other.into()),
    })
}

fn write_metrics_file(path: Option<&Path>, outcome: &TrainOutcome) -> Out {
    if let Some(p) = path {
        let mut w = create(p)?;
        write_metrics(&mut w, &outcome.metrics, true).and_then(|_| w.flush()).runtime()?;
    }
    Ok(())
}

fn last_loss(outcome: &TrainOutcome) -> Option<f64> {
    outcome.metrics.iter().rev().find_map(|m| m.train_loss)
}

fn inputs_of(flags: &TrainFlags) -> Vec<PathBuf> {
    flags
        .data
        .iter()
        .chain(&flags.val)
        .map(|s| PathBuf::from(s.split_once('=').map_or(s.as_str(), |(_, p)| p)))
        .chain(flags.bank.bank.clone())
        .chain(flags.bank.bank_data.clone())
        .collect()
}

fn synth(kind: &str, size: usize, world_seed: Option<u64>, noise: Option<f64>, out: &Path, common: &Common) -> Out {
    let cfg = RunConfig::load(common.config.as_deref()).usage()?;
    let kind: CorpusKind = kind.parse().map_err(|e: String| Failure::Usage(anyhow!(e)))?;
    let noise = noise.unwrap_or(cfg.data.image_noise);
    if !(0.0..=1.0).contains(&noise) {
        return Err(Failure::Usage(anyhow!("noise must be in [0, 1]")));
    }
    let world_seed = world_seed.unwrap_or(cfg.data.world_seed);
    let seed = common.seed.unwrap_or(0);
    let world = SynthWorld::new(cfg.vocab, world_seed, noise);
    let seqs = synth_corpus(&world, kind, size, seed);
    let header = DatasetHeader::new(
        cfg.vocab,
        Some(GeneratorInfo {
            kind: kind.name().into(),
            seed,
            world_seed,
            size,
        }),
    );
    let mut w = create(out)?;
    write_dataset(&mut w, &header, &seqs).runtime()?;
    emit(json!({ "command": "synth", "out": out.display().to_string(), "kind": kind.name(), "sequences": seqs.len() }));
    Ok(())
}

fn init(zero: bool, out: &Path, common: &Common) -> Out {
    let cfg = RunConfig::load(common.config.as_deref()).usage()?;
    let seed = common.seed.unwrap_or(cfg.init_seed);
    let mut m = Transformer::init(cfg.model_config(), seed).usage()?;
    if zero {
        for (_, t) in m.params_mut().iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let ckpt = Checkpoint::new(m, cfg.vocab)
        .with_meta("role", if zero { "zero" } else { "init" })
        .with_meta("seed", seed);
    let saved = save_checkpoint(&ckpt, out)?;
    emit(json!({ "command": "init", "checkpoint": saved }));
    Ok(())
}

fn train_parent(init: Option<&Path>, out: &Path, flags: &TrainFlags, common: &Common) -> Out {
    let cfg = RunConfig::load(common.config.as_deref()).usage()?;
    let mut inputs = inputs_of(flags);
    inputs.extend(init.map(Path::to_path_buf));
    guard_output(out, &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let (mut model, vocab) = match init {
        Some(p) => load_dense(p)?,
        None => (Transformer::init(cfg.model_config(), cfg.init_seed).usage()?, cfg.vocab),
    };
    let (tc, data) = train_setup(&cfg, flags, common, &vocab, Phase::Alignment)?;
    let outcome = run_training(&mut model, &vocab, &data, &tc)?;
    write_metrics_file(flags.metrics.as_deref(), &outcome)?;
    let step = outcome.selected.map(|i| outcome.records[i].step);
    let mut ckpt = Checkpoint::new(model, vocab).with_meta("role", "parent").with_meta("seed", tc.seed);
    if let Some(s) = step {
        ckpt = ckpt.with_meta("step", s);
    }
    let saved = save_checkpoint(&ckpt, out)?;
    emit(json!({ "command": "train-parent", "checkpoint": saved, "selected_step": step, "final_loss": last_loss(&outcome) }));
    Ok(())
}

fn fuse_cmd(a: &Path, b: &Path, kind: FuseKind, every: Option<usize>, cross_ffn: bool, out: &Path, common: &Common) -> Out {
    RunConfig::load(common.config.as_deref()).usage()?;
    guard_output(out, &[a, b])?;
    let kind = match kind {
        FuseKind::Uniform => FusionKind::Uniform,
        FuseKind::WidthCopy => FusionKind::WidthCopy,
        FuseKind::WidthAverage => FusionKind::WidthAverage,
        FuseKind::Cross => FusionKind::Cross,
    };
    let spec = FusionSpec {
        kind,
        insertion_every: every,
        seed: common.seed.unwrap_or(0),
        cross_ffn,
    };
    spec.validate().usage()?;
    let (ma, va) = load_dense(a)?;
    let (mb, vb) = load_dense(b)?;
    if va != vb {
        return Err(Failure::Runtime(anyhow!("parents use different vocabularies")));
    }
    let fused = fuse(&ma, &mb, &va, &spec).runtime()?;
    let closed_form = match kind {
        FusionKind::Uniform => dense_param_count(ma.config()),
        FusionKind::WidthCopy | FusionKind::WidthAverage => dense_param_count(&ma.config().widened()),
        FusionKind::Cross => cross_param_count(&JamCrossConfig {
            cross_ffn,
            ..JamCrossConfig::new(*ma.config(), every.unwrap_or(1))
        }),
    };
    let mut ckpt = Checkpoint::new(fused, va).with_meta("role", "fused");
    ckpt.fusion = Some(spec);
    let saved = save_checkpoint(&ckpt, out)?;
    let parents: Vec<String> = [&ma, &mb].iter().map(|m| sha256_hex(&payload_bytes(m.params()))).collect();
    emit(json!({
        "command": "fuse",
        "fusion": spec,
        "checkpoint": saved,
        "closed_form_params": closed_form,
        "params_match_closed_form": closed_form == ckpt.model.param_count(),
        "parent_payload_sha256": parents,
    }));
    Ok(())
}

fn align(model: &Path, out: &Path, flags: &TrainFlags, common: &Common) -> Out {
    let cfg = RunConfig::load(common.config.as_deref()).usage()?;
    let mut inputs = inputs_of(flags);
    inputs.push(model.to_path_buf());
    guard_output(out, &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let mut ckpt = load_checkpoint(model)?;
    let (tc, data) = train_setup(&cfg, flags, common, &ckpt.vocab, Phase::Alignment)?;
    let outcome = run_training(&mut ckpt.model, &ckpt.vocab, &data, &tc)?;
    write_metrics_file(flags.metrics.as_deref(), &outcome)?;
    let selected = outcome.selected.map(|i| &outcome.records[i]);
    ckpt = ckpt.with_meta("role", "aligned").with_meta("seed", tc.seed);
    if let Some(r) = selected {
        ckpt = ckpt.with_meta("step", r.step);
    }
    let saved = save_checkpoint(&ckpt, out)?;
    emit(json!({
        "command": "align",
        "checkpoint": saved,
        "selected_step": selected.map(|r| r.step),
        "selected_val": selected.map(|r| r.metrics),
        "final_loss": last_loss(&outcome),
    }));
    Ok(())
}

fn instruct(model: &Path, out_dir: &Path, epochs: usize, flags: &TrainFlags, common: &Common) -> Out {
    let cfg = RunConfig::load(common.config.as_deref()).usage()?;
    if epochs == 0 {
        return Err(Failure::Usage(anyhow!("--epochs must be at least 1")));
    }
    let base = load_checkpoint(model)?;
    let (mut tc, data) = train_setup(&cfg, flags, common, &base.vocab, Phase::Instruct)?;
    let n_tokens: usize = data.train[&CorpusKind::InterleavedInstruct].iter().map(|s| s.len() + 1).sum();
    let epoch = tc.steps_per_epoch(n_tokens);
    tc.total_steps = epoch * epochs;
    tc.eval_interval = epoch;
    tc.warmup_steps = tc.warmup_steps.min(tc.total_steps);
    let mut m = base.model.clone();
    let outcome = run_training(&mut m, &base.vocab, &data, &tc)?;
    write_metrics_file(flags.metrics.as_deref(), &outcome)?;
    let mut saved = Vec::new();
    for (i, r) in outcome.records.iter().enumerate() {
        let m = base.model.with_params(r.params.clone()).runtime()?;
        let mut ckpt = Checkpoint::new(m, base.vocab)
            .with_meta("role", "instruct")
            .with_meta("epoch", i + 1)
            .with_meta("step", r.step)
            .with_meta("seed", tc.seed);
        ckpt.fusion = base.fusion;
        let path = out_dir.join(format!("epoch_{:02}.ckpt", i + 1));
        guard_output(&path, &[model])?;
        let mut entry = save_checkpoint(&ckpt, &path)?;
        entry["val"] = json!(r.metrics);
        saved.push(entry);
    }
    emit(json!({ "command": "instruct", "steps_per_epoch": epoch, "epochs": saved }));
    Ok(())
}

fn sample(cfg: &RunConfig, model: &Path, prompt: Option<&str>, prompt_tokens: Option<&[usize]>, n: usize, bank: &BankFlags) -> Out {
    let ckpt = load_checkpoint(model)?;
    let v = ckpt.vocab;
    let prompt = match (prompt, prompt_tokens) {
        (Some(text), _) => tokenize_report(text, &v).usage()?,
        (None, Some(toks)) => MixedSequence::parse(&v, toks.to_vec(), 0).usage()?,
        (None, None) => return Err(Failure::Usage(anyhow!("give --prompt or --prompt-tokens"))),
    };
    let bank = load_bank(bank, &v)?;
    let rcfg = cfg.retrieval.config();
    for i in 0..n {
        let sc = jam_core::sampler::SamplerConfig {
            seed: cfg.sampler.seed + i as u64,
            ..cfg.sampler
        };
        let g = generate_interleaved(&ckpt.model, &v, &prompt, &sc, bank.as_ref().map(|b| (b, &rcfg))).runtime()?;
        emit(json!({
            "index": i,
            "seed": sc.seed,
            "tokens": g.sequence.tokens(),
            "prefix_len": g.sequence.prefix_len(),
            "generated": g.generated,
            "images": g.sequence.image_count(),
            "retrieved": g.retrieved.iter().map(|h| json!({ "doc_id": h.doc_id, "score": h.score })).collect::<Vec<_>>(),
            "text": detokenize_report(&g.sequence, &v),
        }));
    }
    Ok(())
}

fn eval(model: &Path, data: &[String], filter: Option<Filter>, common: &Common) -> Out {
    RunConfig::load(common.config.as_deref()).usage()?;
    let ckpt = load_checkpoint(model)?;
    let mut seqs = Vec::new();
    for spec in data {
        let path = spec.split_once('=').map_or(spec.as_str(), |(_, p)| p);
        let file = File::open(path).with_context(|| format!("opening dataset {path}")).runtime()?;
        let (header, s) = read_dataset(BufReader::new(file)).runtime()?;
        if header.vocab != ckpt.vocab {
            return Err(Failure::Runtime(anyhow!("dataset {path} uses a different vocabulary than the model")));
        }
        seqs.extend(s);
    }
    let filters: Vec<(&str, SpanFilter)> = match filter {
        Some(Filter::All) => vec![("all", SpanFilter::All)],
        Some(Filter::Text) => vec![("text", SpanFilter::Text)],
        Some(Filter::Image) => vec![("image", SpanFilter::Image)],
        None => vec![("all", SpanFilter::All), ("text", SpanFilter::Text), ("image", SpanFilter::Image)],
    };
    let mut ppl = BTreeMap::new();
    for (name, f) in filters {
        let value = match evaluate_ppl(&ckpt.model, &ckpt.vocab, &seqs, f) {
            Ok(p) => json!(p),
            Err(TrainError::EmptySelection) if filter.is_none() => Value::Null,
            Err(e) => return Err(Failure::Runtime(e.into())),
        };
        ppl.insert(name, value);
    }
    emit(json!({ "command": "eval", "sequences": seqs.len(), "vocab_size": ckpt.model.vocab_size(), "ppl": ppl }));
    Ok(())
}

fn ablate(out_dir: &Path, seeds: Option<Vec<u64>>, common: &Common) -> Out {
    let cfg = RunConfig::load(common.config.as_deref()).usage()?;
    let mut ac = cfg.ablation_config();
    if let Some(s) = seeds.or(common.seed.map(|s| vec![s])) {
        ac.seeds = s;
    }
    ac.validate().usage()?;
    let report = jam_core::trainer::ablation::run_ablation_suite(&ac, &mut |line| eprintln!("{line}")).runtime()?;
    let fusion = report.fusion_table();
    let inst = report.instruct_table();
    let summary = |(won, of): (usize, usize)| json!({ "won": won, "of": of });
    let checks = json!({
        "width_copy_beats_width_average": summary(report.copy_beats_average()),
        "cross_every_2_beats_uniform": summary(report.cross_beats_uniform()),
        "caption_mixing_preserves_captions": summary(report.mixing_preserves_captions()),
    });
    let write = |name: &str, text: &str| -> Out {
        let mut w = create(&out_dir.join(name))?;
        w.write_all(text.as_bytes()).and_then(|_| w.flush()).runtime()
    };
    write("fusion.csv", &fusion.to_csv())?;
    if !report.instruct.is_empty() {
        write("instruct.csv", &inst.to_csv())?;
    }
    let text = format!("{}\n{}", fusion.to_text(), if report.instruct.is_empty() { String::new() } else { inst.to_text() });
    write("report.txt", &text)?;
    print!("{text}");
    emit(json!({ "command": "ablate", "out_dir": out_dir.display().to_string(), "directional": checks }));
    Ok(())
}

fn gradcheck(kind: CheckKind, layers: usize, d_model: usize, tokens: usize, init_std: f64, threshold: f64, common: &Common) -> Out {
    let cfg = RunConfig::load(common.config.as_deref()).usage()?;
    let setup = GradCheckSetup {
        model: match kind {
            CheckKind::Dense => CheckedModel::Dense,
            CheckKind::Cross => CheckedModel::Cross,
        },
        n_layers: layers,
        d_model,
        n_heads: cfg.model.n_heads,
        vocab_size: cfg.vocab.size(),
        n_tokens: tokens,
        seed: common.seed.unwrap_or(0),
        init_std,
        ..Default::default()
    };
    setup.config().validate().usage()?;
    let t = std::time::Instant::now();
    let r = setup.run().runtime()?;
    let pass = r.max_relative_error < threshold;
    emit(json!({
        "command": "gradcheck",
        "model": setup.model,
        "max_relative_error": r.max_relative_error,
        "max_absolute_error": r.max_absolute_error,
        "checked": r.checked,
        "threshold": threshold,
        "pass": pass,
        "seconds": t.elapsed().as_secs_f64(),
    }));
    if !pass {
        return Err(Failure::Runtime(anyhow!(
            "max relative error {} is not below {threshold}",
            r.max_relative_error
        )));
    }
    Ok(())
}

fn build_bank(data: &Path, out: &Path, common: &Common) -> Out {
    let cfg = RunConfig::load(common.config.as_deref()).usage()?;
    guard_output(out, &[data])?;
    let file = File::open(data).with_context(|| format!("opening dataset {}", data.display())).runtime()?;
    let (header, seqs) = read_dataset(BufReader::new(file)).runtime()?;
    let seed = common.seed.unwrap_or(cfg.retrieval.encoder_seed);
    let enc = ToyEncoder::new(header.vocab, cfg.retrieval.encoder_dim, seed);
    let bank = MemoryBank::from_sequences(enc, &seqs).runtime()?;
    let mut w = create(out)?;
    bank.write_sidecar(&mut w).runtime()?;
    w.flush().runtime()?;
    emit(json!({ "command": "build-bank", "out": out.display().to_string(), "documents": bank.len() }));
    Ok(())
}
