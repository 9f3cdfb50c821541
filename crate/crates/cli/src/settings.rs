//! Typed settings resolved from a `key = value` file plus flag overrides.

use std::fmt::Display;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use renet_core::aggregate::{Activation, AggregatorKind};
use renet_core::config::KvConfig;
use renet_core::eval::EvalConfig;
use renet_core::infer::{FilterMode, Horizon, InferConfig, InferMode};
use renet_core::model::ModelConfig;
use renet_core::train::TrainConfig;
use renet_core::Error;

pub const MODEL_KEYS: &[&str] = &[
    "d",
    "m",
    "aggregator",
    "global_aggregator",
    "rgcn_layers",
    "rgcn_blocks",
    "activation",
    "lambda1",
    "lambda2",
    "seed",
];

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "lr",
    "weight_decay",
    "slices_per_step",
    "bptt_window",
    "pretrain_epochs",
    "clip_norm",
    "checkpoint_every",
    "timing",
    "validate",
];

pub const INFER_KEYS: &[&str] = &[
    "samples",
    "top_k",
    "multi_step",
    "dt",
    "dt_min",
    "infer_seed",
    "repeats",
    "filter",
    "empirical",
];

/// Loads `path` (if any) and applies `overrides` on top.
pub fn load(path: Option<&Path>, overrides: Vec<(&'static str, String)>) -> Result<KvConfig> {
    let mut kv = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            KvConfig::parse(&text, &p.display().to_string())?
        }
        None => KvConfig::new(),
    };
    for (k, v) in overrides {
        kv.set(k, v);
    }
    Ok(kv)
}

/// Collects `Some` flag values as `(key, text)` overrides.
#[derive(Default)]
pub struct Overrides(pub Vec<(&'static str, String)>);

impl Overrides {
    pub fn opt<T: Display>(&mut self, key: &'static str, v: &Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key, v.to_string()));
        }
        self
    }

    pub fn flag(&mut self, key: &'static str, on: bool) -> &mut Self {
        if on {
            self.0.push((key, "true".into()));
        }
        self
    }

    pub fn take(&mut self) -> Vec<(&'static str, String)> {
        std::mem::take(&mut self.0)
    }
}

pub fn check(kv: &KvConfig, groups: &[&[&str]]) -> Result<()> {
    let allowed: Vec<&str> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    kv.check_keys(&allowed)?;
    Ok(())
}

fn aggregator(kv: &KvConfig, key: &str, d: usize) -> Result<AggregatorKind> {
    let mut a = AggregatorKind::parse(kv.get(key).unwrap_or("rgcn"), d)?;
    if let AggregatorKind::Rgcn { layers, blocks } = &mut a {
        *layers = kv.parse_or("rgcn_layers", *layers)?;
        *blocks = kv.parse_or("rgcn_blocks", *blocks)?;
    }
    Ok(a)
}

pub fn model_config(kv: &KvConfig) -> Result<ModelConfig> {
    let base = ModelConfig::default();
    let d = kv.parse_or("d", base.d)?;
    let cfg = ModelConfig {
        d,
        m: kv.parse_or("m", base.m)?,
        aggregator: aggregator(kv, "aggregator", d)?,
        global_aggregator: aggregator(kv, "global_aggregator", d)?,
        activation: kv.parse_or::<Activation>("activation", base.activation)?,
        lambda1: kv.parse_or("lambda1", base.lambda1)?,
        lambda2: kv.parse_or("lambda2", base.lambda2)?,
        seed: kv.parse_or("seed", base.seed)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Training settings plus CLI-only knobs.
pub struct TrainSettings {
    pub train: TrainConfig,
    pub checkpoint_every: Option<usize>,
    pub timing: bool,
    pub validate: bool,
}

pub fn train_settings(kv: &KvConfig) -> Result<TrainSettings> {
    let base = TrainConfig::default();
    let train = TrainConfig {
        epochs: kv.parse_or("epochs", base.epochs)?,
        lr: kv.parse_or("lr", base.lr)?,
        weight_decay: kv.parse_or("weight_decay", base.weight_decay)?,
        slices_per_step: kv.parse_or("slices_per_step", base.slices_per_step)?,
        bptt_window: kv.parse_opt("bptt_window")?,
        pretrain_epochs: kv.parse_or("pretrain_epochs", base.pretrain_epochs)?,
        clip_norm: kv.parse_opt("clip_norm")?,
    };
    train.validate()?;
    let checkpoint_every = kv.parse_opt::<usize>("checkpoint_every")?;
    if checkpoint_every == Some(0) {
        return Err(Error::Config("checkpoint_every must be at least 1".into()).into());
    }
    Ok(TrainSettings {
        train,
        checkpoint_every,
        timing: kv.parse_or("timing", false)?,
        validate: kv.parse_or("validate", true)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Empirical {
    None,
    Subject,
    SubjectRelation,
}

pub struct EvalSettings {
    pub eval: EvalConfig,
    pub empirical: Empirical,
}

pub fn eval_settings(kv: &KvConfig, threads: usize) -> Result<EvalSettings> {
    let base = InferConfig::default();
    let horizon = match (kv.parse_opt::<usize>("dt")?, kv.parse_opt::<usize>("dt_min")?) {
        (Some(_), Some(_)) => return Err(Error::Config("set at most one of dt and dt_min".into()).into()),
        (Some(n), None) => Horizon::Exactly(n),
        (None, Some(n)) => Horizon::AtLeast(n),
        (None, None) => Horizon::All,
    };
    let infer = InferConfig {
        samples: kv.parse_or("samples", base.samples)?,
        top_k: kv.parse_or("top_k", base.top_k)?,
        horizon,
        mode: if kv.parse_or("multi_step", true)? {
            InferMode::MultiStep
        } else {
            InferMode::NoMultiStep
        },
        seed: kv.parse_or("infer_seed", base.seed)?,
        repeats: kv.parse_or("repeats", base.repeats)?,
    };
    infer.validate()?;
    let filters = match kv.get("filter").unwrap_or("both") {
        "raw" => vec![FilterMode::Raw],
        "filtered" => vec![FilterMode::Filtered],
        "both" => vec![FilterMode::Raw, FilterMode::Filtered],
        other => return Err(Error::Config(format!("unknown filter `{other}` (raw, filtered or both)")).into()),
    };
    let empirical = match kv.get("empirical").unwrap_or("none") {
        "none" => Empirical::None,
        "s" => Empirical::Subject,
        "sr" => Empirical::SubjectRelation,
        other => return Err(Error::Config(format!("unknown empirical mode `{other}` (none, s or sr)")).into()),
    };
    Ok(EvalSettings {
        eval: EvalConfig {
            infer,
            filters,
            threads,
            ..EvalConfig::default()
        },
        empirical,
    })
}

fn agg_text(a: &AggregatorKind) -> String {
    a.name().to_string()
}

pub fn resolve_model(out: &mut KvConfig, c: &ModelConfig) {
    out.set("d", c.d.to_string());
    out.set("m", c.m.to_string());
    out.set("aggregator", agg_text(&c.aggregator));
    out.set("global_aggregator", agg_text(&c.global_aggregator));
    for a in [c.aggregator, c.global_aggregator] {
        if let AggregatorKind::Rgcn { layers, blocks } = a {
            out.set("rgcn_layers", layers.to_string());
            out.set("rgcn_blocks", blocks.to_string());
        }
    }
    out.set("activation", c.activation.to_string());
    out.set("lambda1", c.lambda1.to_string());
    out.set("lambda2", c.lambda2.to_string());
    out.set("seed", c.seed.to_string());
}

pub fn resolve_train(out: &mut KvConfig, s: &TrainSettings) {
    let c = &s.train;
    out.set("epochs", c.epochs.to_string());
    out.set("lr", c.lr.to_string());
    out.set("weight_decay", c.weight_decay.to_string());
    out.set("slices_per_step", c.slices_per_step.to_string());
    if let Some(w) = c.bptt_window {
        out.set("bptt_window", w.to_string());
    }
    out.set("pretrain_epochs", c.pretrain_epochs.to_string());
    if let Some(n) = c.clip_norm {
        out.set("clip_norm", n.to_string());
    }
    if let Some(k) = s.checkpoint_every {
        out.set("checkpoint_every", k.to_string());
    }
    out.set("timing", s.timing.to_string());
    out.set("validate", s.validate.to_string());
}

pub fn resolve_eval(out: &mut KvConfig, s: &EvalSettings) {
    let c = &s.eval.infer;
    out.set("samples", c.samples.to_string());
    out.set("top_k", c.top_k.to_string());
    out.set("multi_step", (c.mode == InferMode::MultiStep).to_string());
    match c.horizon {
        Horizon::All => {}
        Horizon::Exactly(n) => out.set("dt", n.to_string()),
        Horizon::AtLeast(n) => out.set("dt_min", n.to_string()),
    }
    out.set("infer_seed", c.seed.to_string());
    out.set("repeats", c.repeats.to_string());
    let filter = match s.eval.filters.as_slice() {
        [FilterMode::Raw] => "raw",
        [FilterMode::Filtered] => "filtered",
        _ => "both",
    };
    out.set("filter", filter);
    out.set(
        "empirical",
        match s.empirical {
            Empirical::None => "none",
            Empirical::Subject => "s",
            Empirical::SubjectRelation => "sr",
        },
    );
}
