//! Teacher-forced training.
//!
//! Slices are visited in time order. The loss for a slice is computed from
//! the state built from ground-truth slices only; gradients flow back
//! through the last `window` encoding steps, which are replayed on a fresh
//! tape from a stored state snapshot. After the optimizer step the slice
//! itself is encoded with the updated weights.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{Event, GraphSlice};
use crate::error::{Error, Result};
use crate::model::{HistoryState, Model, Scope, TapeState};
use crate::numerics::{Adam, AdamConfig, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Consecutive slices per optimizer step.
    pub slices_per_step: usize,
    /// Encoding steps kept on the tape; defaults to the model's `m`.
    pub bptt_window: Option<usize>,
    pub pretrain_epochs: usize,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.001,
            weight_decay: 1e-5,
            slices_per_step: 1,
            bptt_window: None,
            pretrain_epochs: 1,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slices_per_step == 0 {
            return Err(Error::Config("slices_per_step must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Loss values of one forward pass, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub object: f64,
    /// Already multiplied by `lambda1`.
    pub relation: f64,
    /// Already multiplied by `lambda2`.
    pub subject: f64,
    pub events: usize,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.object += o.object;
        self.relation += o.relation;
        self.subject += o.subject;
        self.events += o.events;
    }

    /// Per-event averages.
    pub fn mean(&self) -> LossParts {
        let n = self.events.max(1) as f64;
        LossParts {
            total: self.total / n,
            object: self.object / n,
            relation: self.relation / n,
            subject: self.subject / n,
            events: self.events,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Per-event mean loss over the epoch.
    pub loss: LossParts,
    pub seconds: f64,
    pub param_norm: f64,
    pub valid_mrr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Per-event subject loss of each pretraining epoch.
    pub pretrain: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    /// `epoch,total,obj_term,rel_term,subj_term`, plus `seconds` when
    /// `timing` is set. Without timing the file depends only on the inputs.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = String::from("epoch,total,obj_term,rel_term,subj_term");
        if timing {
            out.push_str(",seconds");
        }
        out.push('\n');
        for r in &self.epochs {
            let l = &r.loss;
            let _ = write!(out, "{},{:e},{:e},{:e},{:e}", r.epoch, l.total, l.object, l.relation, l.subject);
            if timing {
                let _ = write!(out, ",{:.3}", r.seconds);
            }
            out.push('\n');
        }
        out
    }
}

/// Training loss `Σ −log p(o|s,r) + λ1 Σ −log p(r|s) + λ2 Σ −log p(s)` of
/// `events` on `tape`, given the state in `ts`.
pub fn compute_loss(
    model: &Model,
    tape: &Tape,
    store: &ParamStore,
    ts: &TapeState<'_>,
    events: &[Event],
) -> Result<(Var, LossParts)> {
    let l = model.head_losses(tape, store, ts, events)?;
    let rel = tape.scale(l.relation, model.config.lambda1);
    let subj = tape.scale(l.subject, model.config.lambda2);
    let total = tape.add(tape.add(l.object, rel)?, subj)?;
    let parts = LossParts {
        total: tape.value(total).item(),
        object: tape.value(l.object).item(),
        relation: tape.value(rel).item(),
        subject: tape.value(subj).item(),
        events: events.len(),
    };
    Ok((total, parts))
}

/// Loss of `events` from a finished history state, without gradients.
pub fn evaluate_loss(model: &Model, state: &HistoryState, events: &[Event]) -> Result<LossParts> {
    let tape = Tape::inference();
    let ts = TapeState::new(&tape, state);
    Ok(compute_loss(model, &tape, &model.store, &ts, events)?.1)
}

fn check_slices(slices: &[GraphSlice]) -> Result<()> {
    if slices.iter().all(GraphSlice::is_empty) {
        return Err(Error::Dataset("training split has no events".into()));
    }
    Ok(())
}

fn step(model: &mut Model, adam: &mut Adam, tape: &Tape, loss: Var, clip: Option<f64>) -> Result<()> {
    let mut grads = tape.backward(loss)?;
    if let Some(c) = clip {
        grads.clip_norm(c);
    }
    adam.step(&mut model.store, &grads)
}

/// One teacher-forced pass over `slices`, starting from an empty state.
pub fn train_epoch(model: &mut Model, adam: &mut Adam, slices: &[GraphSlice], cfg: &TrainConfig) -> Result<LossParts> {
    check_slices(slices)?;
    let window = cfg.bptt_window.unwrap_or(model.config.m);
    let k = cfg.slices_per_step;
    let mut total = LossParts::default();
    // snapshots[i] is the state before slices[first + i]
    let mut first = 0;
    let mut snapshots: VecDeque<HistoryState> = VecDeque::from([model.empty_state()]);

    let mut i = 0;
    while i < slices.len() {
        let group = &slices[i..(i + k).min(slices.len())];
        let events: Vec<Event> = group.iter().flat_map(|s| s.events().iter().copied()).collect();
        if !events.is_empty() {
            let start = i.saturating_sub(window).max(first);
            let base = &snapshots[start - first];
            let scope = Scope::for_events(&events);
            let tape = Tape::new();
            let mut ts = TapeState::new(&tape, base);
            for sl in &slices[start..i] {
                model.encode_on_tape(&tape, &model.store, sl, &mut ts, &scope)?;
            }
            let mut loss: Option<Var> = None;
            for (j, sl) in group.iter().enumerate() {
                if !sl.is_empty() {
                    let (l, parts) = compute_loss(model, &tape, &model.store, &ts, sl.events())?;
                    total.add(&parts);
                    loss = Some(match loss {
                        Some(acc) => tape.add(acc, l)?,
                        None => l,
                    });
                }
                if j + 1 < group.len() {
                    model.encode_on_tape(&tape, &model.store, sl, &mut ts, &scope)?;
                }
            }
            if !total.total.is_finite() {
                return Err(Error::NonFinite(format!("training loss at slice {}", group[0].t)));
            }
            step(model, adam, &tape, loss.expect("group has events"), cfg.clip_norm)?;
        }
        for sl in group {
            let mut next = snapshots.back().expect("never empty").clone();
            model.encode_slice(&mut next, sl)?;
            snapshots.push_back(next);
            while snapshots.len() > window + 1 {
                snapshots.pop_front();
                first += 1;
            }
        }
        i += group.len();
    }
    Ok(total.mean())
}

/// Trains only the subject head, the global recurrent unit and the global
/// aggregator on the unweighted subject loss. Other parameters are left
/// untouched. Returns the per-event subject loss of each epoch.
pub fn pretrain_global(model: &mut Model, slices: &[GraphSlice], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if cfg.pretrain_epochs == 0 {
        return Ok(Vec::new());
    }
    check_slices(slices)?;
    let ids = model.global_param_ids();
    let window = cfg.bptt_window.unwrap_or(model.config.m);
    let mut adam = Adam::new(cfg.adam());
    let mut out = Vec::new();
    for _ in 0..cfg.pretrain_epochs {
        let mut sum = 0.0;
        let mut events = 0;
        let mut first = 0;
        let mut snapshots: VecDeque<HistoryState> = VecDeque::from([model.empty_state()]);
        for (i, sl) in slices.iter().enumerate() {
            if !sl.is_empty() {
                let start = i.saturating_sub(window).max(first);
                let tape = Tape::with_trainable(ids.iter().copied());
                let mut ts = TapeState::new(&tape, &snapshots[start - first]);
                for prev in &slices[start..i] {
                    model.encode_on_tape(&tape, &model.store, prev, &mut ts, &Scope::Global)?;
                }
                let l = model.head_losses(&tape, &model.store, &ts, sl.events())?;
                sum += tape.value(l.subject).item();
                events += sl.len();
                step(model, &mut adam, &tape, l.subject, cfg.clip_norm)?;
            }
            let mut next = snapshots.back().expect("never empty").clone();
            model.encode_scoped(&mut next, sl, &Scope::Global)?;
            snapshots.push_back(next);
            while snapshots.len() > window + 1 {
                snapshots.pop_front();
                first += 1;
            }
        }
        out.push(sum / events.max(1) as f64);
    }
    Ok(out)
}

fn param_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .map(|(_, _, t)| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Pretraining followed by `cfg.epochs` epochs. After each epoch
/// `validate` may return a validation MRR; the weights of the best epoch
/// are kept (the last epoch when it never returns a score).
pub fn fit<F>(model: &mut Model, slices: &[GraphSlice], cfg: &TrainConfig, mut validate: F) -> Result<TrainReport>
where
    F: FnMut(usize, &Model) -> Result<Option<f64>>,
{
    cfg.validate()?;
    check_slices(slices)?;
    let mut report = TrainReport {
        pretrain: pretrain_global(model, slices, cfg)?,
        ..TrainReport::default()
    };
    let mut adam = Adam::new(cfg.adam());
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 1..=cfg.epochs {
        let clock = Instant::now();
        let loss = train_epoch(model, &mut adam, slices, cfg)?;
        let seconds = clock.elapsed().as_secs_f64();
        let valid_mrr = validate(epoch, model)?;
        if let Some(v) = valid_mrr {
            if best.as_ref().map_or(true, |(b, _, _)| v > *b) {
                best = Some((v, epoch, model.clone()));
            }
        }
        report.epochs.push(EpochRecord {
            epoch,
            loss,
            seconds,
            param_norm: param_norm(&model.store),
            valid_mrr,
        });
    }
    report.best_epoch = match best {
        Some((_, epoch, kept)) => {
            *model = kept;
            Some(epoch)
        }
        None => (cfg.epochs > 0).then_some(cfg.epochs),
    };
    Ok(report)
}
