use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use renet_core::config::KvConfig;
use renet_core::data::{
    add_inverse_relations, expand_time_spans, generate_synthetic, load_archive, parse_quadruples, parse_spans,
    parse_vocab, quads_to_tsv, save_archive, split_by_time, Dataset, Format, ParseOptions, SplitFractions,
    SyntheticSpec,
};
use renet_core::eval::{empirical_baseline, evaluate_split, EvalOutcome, SplitKind};
use renet_core::infer::{average_rank, FilterMode, InferMode, Inference};
use renet_core::model::{load_checkpoint, save_checkpoint, Model};
use renet_core::train::fit;
use renet_core::Error;
use serde_json::json;

use crate::settings::{self, Empirical, Overrides, INFER_KEYS, MODEL_KEYS, TRAIN_KEYS};
use crate::{
    AblateArgs, Cli, Command, EvalArgs, ForecastArgs, InferFlags, IngestArgs, ModelFlags, SynthArgs, TrainArgs,
    TrainFlags,
};

/// Queries naming entities or relations outside the vocabulary.
#[derive(Debug)]
pub struct UnknownIds(pub Vec<String>);

impl fmt::Display for UnknownIds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} queries skipped: {}", self.0.len(), self.0.join("; "))
    }
}

impl std::error::Error for UnknownIds {}

pub fn error_code(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return err.code();
        }
        if cause.downcast_ref::<UnknownIds>().is_some() {
            return "E_UNKNOWN_ID";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "E_IO";
        }
    }
    "E_CLI"
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()).into());
    }
    match &cli.command {
        Command::Ingest(a) => ingest(cli, a),
        Command::Synthesize(a) => synthesize(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Forecast(a) => forecast(cli, a),
        Command::Ablate(a) => ablate(cli, a),
    }
}

fn run_dir(cli: &Cli, default: &str) -> Result<PathBuf> {
    let dir = cli.out.join(cli.name.as_deref().unwrap_or(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn snapshot(dir: &Path, kv: &KvConfig) -> Result<()> {
    write(&dir.join("resolved.cfg"), &kv.to_text())
}

fn progress(cli: &Cli, msg: impl fmt::Display) {
    if !cli.quiet {
        eprintln!("{msg}");
    }
}

/// Archive with inverse relations added.
fn load_augmented(dir: &Path) -> Result<Dataset> {
    let ds = load_archive(dir)?;
    Ok(if ds.augmented { ds } else { add_inverse_relations(&ds)? })
}

fn ingest(cli: &Cli, a: &IngestArgs) -> Result<()> {
    let mut opts = ParseOptions {
        allow_extra_fields: a.allow_extra_fields,
        num_entities: a.num_entities,
        num_relations: a.num_relations,
        ..ParseOptions::default()
    };
    if a.labeled {
        let vocab = |p: &Option<PathBuf>| -> Result<Option<Vec<String>>> {
            p.as_ref()
                .map(|p| Ok(parse_vocab(&read(p)?, &p.display().to_string())?))
                .transpose()
        };
        opts.format = Format::Labeled {
            entities: vocab(&a.entity_vocab)?,
            relations: vocab(&a.relation_vocab)?,
        };
    }

    let mut snap = KvConfig::new();
    let ds = match (&a.splits, &a.events) {
        (Some(files), _) => {
            let texts: Vec<(String, String)> = files
                .iter()
                .map(|p| Ok((p.display().to_string(), read(p)?)))
                .collect::<Result<_>>()?;
            let sources: Vec<(&str, &str)> = texts.iter().map(|(n, t)| (n.as_str(), t.as_str())).collect();
            for p in files {
                snap.push("input", p.display().to_string());
            }
            parse_quadruples(&sources, &opts)?
        }
        (None, Some(p)) => {
            let name = p.display().to_string();
            let mut text = read(p)?;
            if a.spans {
                let facts = parse_spans(&text, &name)?;
                text = quads_to_tsv(&expand_time_spans(&facts, a.unit, a.cutoff)?);
                snap.set("unit", a.unit.to_string());
                snap.set("cutoff", a.cutoff.to_string());
            }
            snap.push("input", name.clone());
            let ds = parse_quadruples(&[(&name, &text)], &opts)?;
            let fractions = match a.fractions.as_deref() {
                Some(&[train, valid, test]) => SplitFractions { train, valid, test },
                _ => SplitFractions::default(),
            };
            snap.set(
                "fractions",
                format!("{} {} {}", fractions.train, fractions.valid, fractions.test),
            );
            split_by_time(&ds, fractions)?
        }
        (None, None) => bail!(Error::Config("give --splits TRAIN VALID TEST or --events FILE".into())),
    };
    snap.set("labeled", a.labeled.to_string());
    snap.set("allow_extra_fields", a.allow_extra_fields.to_string());

    let dir = run_dir(cli, "ingest")?;
    save_archive(&dir.join("dataset"), &ds)?;
    let stats = stats(&ds)?;
    write(&dir.join("stats.json"), &serde_json::to_string_pretty(&stats)?)?;
    snapshot(&dir, &snap)?;
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

/// Vocabulary sizes, events per split and the smallest gap between
/// consecutive raw timestamps.
fn stats(ds: &Dataset) -> Result<serde_json::Value> {
    let count = |s: &[renet_core::data::GraphSlice]| s.iter().map(|x| x.len()).sum::<usize>();
    let gap = ds.raw_times.windows(2).map(|w| w[1] - w[0]).min();
    Ok(json!({
        "entities": ds.num_entities,
        "relations": ds.base_relations,
        "timestamps": ds.num_slices(),
        "train": count(ds.train()?),
        "valid": count(ds.valid()?),
        "test": count(ds.test()?),
        "time_gap": gap,
    }))
}

fn synthesize(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let kv = KvConfig::parse(&read(&a.config)?, &a.config.display().to_string())?;
    let spec = SyntheticSpec::from_kv(&kv)?;
    let seed = match a.seed {
        Some(s) => s,
        None => kv.parse_or("seed", 0)?,
    };
    let data = generate_synthetic(&spec, seed)?;
    let ds = split_by_time(&data.dataset, SplitFractions::default())?;
    let mut clean = data.clean.clone();
    clean.split = ds.split;

    let dir = run_dir(cli, "synthesize")?;
    save_archive(&dir.join("dataset"), &ds)?;
    save_archive(&dir.join("clean"), &clean)?;
    write(&dir.join("stats.json"), &serde_json::to_string_pretty(&stats(&ds)?)?)?;
    snapshot(&dir, &spec.to_kv(seed))?;
    progress(
        cli,
        format_args!(
            "{} events ({} noise) over {} slices",
            ds.num_events(),
            data.noise_events,
            ds.num_slices()
        ),
    );
    Ok(())
}

fn model_overrides(o: &mut Overrides, f: &ModelFlags) {
    o.opt("d", &f.d)
        .opt("m", &f.m)
        .opt("aggregator", &f.aggregator)
        .opt("lambda1", &f.lambda1)
        .opt("lambda2", &f.lambda2)
        .opt("seed", &f.seed);
}

fn train_overrides(o: &mut Overrides, f: &TrainFlags) {
    o.opt("epochs", &f.epochs)
        .opt("lr", &f.lr)
        .opt("weight_decay", &f.weight_decay)
        .opt("pretrain_epochs", &f.pretrain_epochs)
        .opt("slices_per_step", &f.slices_per_step)
        .opt("bptt_window", &f.bptt_window)
        .opt("clip_norm", &f.clip_norm);
}

fn infer_overrides(o: &mut Overrides, f: &InferFlags) {
    o.opt("samples", &f.samples)
        .opt("top_k", &f.top_k)
        .opt("dt", &f.dt)
        .opt("dt_min", &f.dt_min)
        .opt("infer_seed", &f.infer_seed)
        .opt("repeats", &f.repeats);
    if f.multi {
        o.0.push(("multi_step", "true".into()));
    }
    if f.no_multi {
        o.0.push(("multi_step", "false".into()));
    }
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut o = Overrides::default();
    model_overrides(&mut o, &a.model);
    train_overrides(&mut o, &a.train);
    infer_overrides(&mut o, &a.infer);
    o.opt("checkpoint_every", &a.checkpoint_every).flag("timing", a.timing);
    if a.no_validate {
        o.0.push(("validate", "false".into()));
    }
    let kv = settings::load(a.config.as_deref(), o.take())?;
    settings::check(&kv, &[MODEL_KEYS, TRAIN_KEYS, INFER_KEYS])?;
    let mcfg = settings::model_config(&kv)?;
    let ts = settings::train_settings(&kv)?;
    let es = settings::eval_settings(&kv, cli.threads)?;
    let ds = load_augmented(&a.data)?;

    let dir = run_dir(cli, "train")?;
    let mut snap = KvConfig::new();
    snap.set("data", a.data.display().to_string());
    settings::resolve_model(&mut snap, &mcfg);
    settings::resolve_train(&mut snap, &ts);
    settings::resolve_eval(&mut snap, &es);
    snapshot(&dir, &snap)?;

    let mut model = Model::new(mcfg, ds.num_entities, ds.num_relations)?;
    let ckpt_dir = dir.join("checkpoints");
    let report = fit(&mut model, ds.train()?, &ts.train, |epoch, m| {
        if let Some(k) = ts.checkpoint_every {
            if epoch % k == 0 {
                fs::create_dir_all(&ckpt_dir).map_err(|e| Error::Checkpoint(format!("{}: {e}", ckpt_dir.display())))?;
                save_checkpoint(&ckpt_dir.join(format!("epoch_{epoch}.ckpt")), m)?;
            }
        }
        if !ts.validate {
            progress(cli, format_args!("epoch {epoch}"));
            return Ok(None);
        }
        let out = evaluate_split(m, &ds, SplitKind::Valid, &es.eval)?;
        let f = primary(&es.eval);
        let mrr = out.report(f, None)?.mrr;
        progress(cli, format_args!("epoch {epoch} valid {} MRR {mrr:.4}", f.name()));
        Ok(Some(mrr))
    })?;
    write(&dir.join("loss.csv"), &report.to_csv(ts.timing))?;
    save_checkpoint(&dir.join("model.ckpt"), &model)?;
    if let Some(best) = report.best_epoch {
        progress(cli, format_args!("kept epoch {best}"));
    }
    Ok(())
}

fn write_outcome(dir: &Path, label: &str, out: &EvalOutcome) -> Result<()> {
    write(&dir.join("metrics.csv"), &out.metrics_csv(label))?;
    let mut filters: Vec<FilterMode> = out.records.iter().map(|r| r.filter).collect();
    filters.sort();
    filters.dedup();
    for f in filters {
        write(
            &dir.join(format!("per_timestamp_{}.csv", f.name())),
            &out.per_timestamp_csv(f),
        )?;
    }
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let which = match a.split.as_str() {
        "valid" => SplitKind::Valid,
        "test" => SplitKind::Test,
        other => bail!(Error::Config(format!("unknown split `{other}` (valid or test)"))),
    };
    let mut o = Overrides::default();
    infer_overrides(&mut o, &a.infer);
    o.opt("filter", &a.filter).opt("empirical", &a.empirical);
    let kv = settings::load(a.config.as_deref(), o.take())?;
    settings::check(&kv, &[INFER_KEYS])?;
    let mut es = settings::eval_settings(&kv, cli.threads)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let ds = load_augmented(&a.data)?;
    let split = ds
        .split
        .ok_or_else(|| Error::Dataset("dataset has no split boundaries".into()))?;
    let history_end = match which {
        SplitKind::Valid => split.train_end,
        SplitKind::Test => split.valid_end,
    };
    if es.empirical != Empirical::None {
        let emp = empirical_baseline(&ds.slices[..history_end], ds.num_entities, ds.num_relations)?;
        es.eval.priors = emp.priors(true, es.empirical == Empirical::SubjectRelation);
    }

    let dir = run_dir(cli, "eval")?;
    let mut snap = KvConfig::new();
    snap.set("checkpoint", a.checkpoint.display().to_string());
    snap.set("data", a.data.display().to_string());
    snap.set("split", a.split.clone());
    settings::resolve_model(&mut snap, &model.config);
    settings::resolve_eval(&mut snap, &es);
    snapshot(&dir, &snap)?;

    let out = evaluate_split(&model, &ds, which, &es.eval)?;
    write_outcome(&dir, &a.split, &out)?;
    print!("{}", out.metrics_csv(&a.split));
    Ok(())
}

fn lookup(field: &str, labels: Option<&Vec<String>>, limit: usize) -> Option<usize> {
    match field.parse::<usize>() {
        Ok(id) => (id < limit).then_some(id),
        Err(_) => labels?.iter().position(|l| l == field),
    }
}

fn forecast(cli: &Cli, a: &ForecastArgs) -> Result<()> {
    if a.dt == 0 {
        bail!(Error::Config("--dt must be at least 1".into()));
    }
    let mut o = Overrides::default();
    o.opt("samples", &a.samples).opt("top_k", &a.top_k).opt("infer_seed", &a.infer_seed);
    if a.no_multi {
        o.0.push(("multi_step", "false".into()));
    }
    let kv = settings::load(a.config.as_deref(), o.take())?;
    settings::check(&kv, &[INFER_KEYS])?;
    let es = settings::eval_settings(&kv, cli.threads)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let ds = load_augmented(&a.data)?;
    if model.num_entities != ds.num_entities || model.num_relations != ds.num_relations {
        bail!(Error::Config(format!(
            "model vocabulary {}x{} does not match dataset {}x{}",
            model.num_entities, model.num_relations, ds.num_entities, ds.num_relations
        )));
    }

    let mut inf = Inference::new(&model, es.eval.infer.clone());
    inf.mirror = ds.augmented.then_some(ds.base_relations);
    let mut state = model.empty_state();
    for sl in &ds.slices {
        inf.encode(&mut state, sl)?;
    }
    let t0 = ds.num_slices() - 1;
    let horizon = inf.multi_step_infer(&state, a.dt)?;

    let dir = run_dir(cli, "forecast")?;
    let mut snap = KvConfig::new();
    snap.set("checkpoint", a.checkpoint.display().to_string());
    snap.set("data", a.data.display().to_string());
    snap.set("queries", a.queries.display().to_string());
    snap.set("horizon", a.dt.to_string());
    snap.set("top", a.top.to_string());
    settings::resolve_eval(&mut snap, &es);
    snapshot(&dir, &snap)?;

    let text = read(&a.queries)?;
    let mut unknown = Vec::new();
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let fields: Vec<&str> = raw.split('\t').map(str::trim).filter(|f| !f.is_empty()).collect();
        if fields.is_empty() {
            continue;
        }
        if !(2..=3).contains(&fields.len()) {
            unknown.push(format!("line {no}: expected `s r` or `s r o`"));
            continue;
        }
        let ents = ds.entity_labels.as_ref();
        let s = lookup(fields[0], ents, ds.num_entities);
        let r = lookup(fields[1], ds.relation_labels.as_ref(), ds.num_relations);
        let o = fields.get(2).map(|f| lookup(f, ents, ds.num_entities));
        let (Some(s), Some(r), None | Some(Some(_))) = (s, r, o) else {
            unknown.push(format!("line {no}: unknown id in `{}`", fields.join(" ")));
            continue;
        };
        let o = o.flatten();
        let dist = model.score_objects(s, r, &horizon)?;
        let candidates: Vec<serde_json::Value> = dist
            .ranked()
            .into_iter()
            .take(a.top)
            .map(|c| json!({"o": c, "p": dist.probs[c]}))
            .collect();
        let mut rec = json!({
            "line": no,
            "s": s,
            "r": r,
            "t": t0 + a.dt,
            "dt": a.dt,
            "candidates": candidates,
        });
        if let Some(o) = o {
            rec["o"] = json!(o);
            rec["rank"] = json!(average_rank(&dist.probs, o, |_| false));
        }
        lines.push(serde_json::to_string(&rec)?);
    }
    let path = dir.join("forecast.jsonl");
    let mut f = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    for l in &lines {
        writeln!(f, "{l}")?;
    }
    progress(cli, format_args!("{} forecasts written to {}", lines.len(), path.display()));
    if !unknown.is_empty() {
        for u in &unknown {
            eprintln!("skipped {u}");
        }
        return Err(UnknownIds(unknown).into());
    }
    Ok(())
}

/// Filtered when computed, else raw.
fn primary(cfg: &renet_core::eval::EvalConfig) -> FilterMode {
    if cfg.filters.contains(&FilterMode::Filtered) {
        FilterMode::Filtered
    } else {
        FilterMode::Raw
    }
}

fn ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let mut o = Overrides::default();
    model_overrides(&mut o, &a.model);
    train_overrides(&mut o, &a.train);
    infer_overrides(&mut o, &a.infer);
    let base = settings::load(a.config.as_deref(), o.take())?;
    settings::check(&base, &[MODEL_KEYS, TRAIN_KEYS, INFER_KEYS])?;
    let ts = settings::train_settings(&base)?;
    let es = settings::eval_settings(&base, cli.threads)?;
    let ds = load_augmented(&a.data)?;

    let dir = run_dir(cli, "ablate")?;
    let mut snap = base.clone();
    snap.set("data", a.data.display().to_string());
    snap.set("seeds", a.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    snap.set("aggregators", a.aggregators.join(","));
    settings::resolve_train(&mut snap, &ts);
    settings::resolve_eval(&mut snap, &es);
    snapshot(&dir, &snap)?;

    let mut csv = String::from("seed,aggregator,inference,MRR,H@1,H@3,H@10,n_queries\n");
    for &seed in &a.seeds {
        for agg in &a.aggregators {
            let mut kv = base.clone();
            kv.set("seed", seed.to_string());
            kv.set("aggregator", agg.clone());
            let mcfg = settings::model_config(&kv)?;
            let mut model = Model::new(mcfg, ds.num_entities, ds.num_relations)?;
            fit(&mut model, ds.train()?, &ts.train, |_, m| {
                if !ts.validate {
                    return Ok(None);
                }
                Ok(Some(
                    evaluate_split(m, &ds, SplitKind::Valid, &es.eval)?
                        .report(primary(&es.eval), None)?
                        .mrr,
                ))
            })?;
            for (mode, name) in [(InferMode::MultiStep, "multi"), (InferMode::NoMultiStep, "no_multi")] {
                let mut cfg = es.eval.clone();
                cfg.infer.mode = mode;
                let out = evaluate_split(&model, &ds, SplitKind::Test, &cfg)?;
                let m = out.report(primary(&es.eval), None)?;
                csv.push_str(&format!(
                    "{seed},{agg},{name},{},{},{},{},{}\n",
                    m.mrr, m.hits1, m.hits3, m.hits10, m.n
                ));
                progress(cli, format_args!("seed {seed} {agg} {name}: MRR {:.4}", m.mrr));
            }
        }
    }
    write(&dir.join("ablation.csv"), &csv)?;
    Ok(())
}
