//! Ranking metrics, split evaluation and frequency baselines.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{Dataset, Event, GraphSlice};
use crate::error::{Error, Result};
use crate::infer::{rank_candidates, FilterMode, InferConfig, Inference, LeakAudit, Priors};
use crate::model::{HistoryState, Model};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub n: usize,
}

/// MRR and Hits@{1,3,10} of (possibly fractional) ranks.
pub fn mrr_hits(ranks: &[f64]) -> Result<MetricReport> {
    if ranks.is_empty() {
        return Err(Error::Dataset("no ranks to summarize".into()));
    }
    if let Some(r) = ranks.iter().find(|r| !(**r >= 1.0)) {
        return Err(Error::Dataset(format!("rank {r} is below 1")));
    }
    let n = ranks.len() as f64;
    let hits = |c: f64| ranks.iter().filter(|&&r| r <= c).count() as f64 / n;
    Ok(MetricReport {
        mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
        hits1: hits(1.0),
        hits3: hits(3.0),
        hits10: hits(10.0),
        n: ranks.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    /// `(s, r, ?)` with an original relation.
    Object,
    /// `(o, r⁻¹, ?)`, the subject-side query through an inverse relation.
    Subject,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankRecord {
    pub t: usize,
    /// Distance from the last observed slice.
    pub dt: usize,
    pub direction: Direction,
    pub filter: FilterMode,
    pub rank: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub infer: InferConfig,
    pub filters: Vec<FilterMode>,
    pub priors: Priors,
    /// Worker threads for ranking the queries of one timestamp.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            infer: InferConfig::default(),
            filters: vec![FilterMode::Raw, FilterMode::Filtered],
            priors: Priors::default(),
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub records: Vec<RankRecord>,
    /// Observed slices at or after the evaluated split that were encoded.
    pub leaked_reads: usize,
}

impl EvalOutcome {
    fn select(&self, filter: FilterMode, direction: Option<Direction>) -> Vec<&RankRecord> {
        self.records
            .iter()
            .filter(|r| r.filter == filter && direction.map_or(true, |d| r.direction == d))
            .collect()
    }

    /// Metrics over both query directions, or one of them.
    pub fn report(&self, filter: FilterMode, direction: Option<Direction>) -> Result<MetricReport> {
        let ranks: Vec<f64> = self.select(filter, direction).iter().map(|r| r.rank).collect();
        mrr_hits(&ranks)
    }

    pub fn per_timestamp(&self, filter: FilterMode) -> Vec<(usize, MetricReport)> {
        per_timestamp_report(&self.select(filter, None).into_iter().copied().collect::<Vec<_>>())
    }

    /// `mode,MRR,H@1,H@3,H@10,n_queries` with one row per filter and
    /// direction set; `label` prefixes the mode column.
    pub fn metrics_csv(&self, label: &str) -> String {
        let mut out = String::from("mode,MRR,H@1,H@3,H@10,n_queries\n");
        let mut filters: Vec<FilterMode> = self.records.iter().map(|r| r.filter).collect();
        filters.sort();
        filters.dedup();
        for f in filters {
            for (dir, name) in [
                (None, "both"),
                (Some(Direction::Object), "object"),
                (Some(Direction::Subject), "subject"),
            ] {
                if let Ok(m) = self.report(f, dir) {
                    let mode = [label, f.name(), name].iter().filter(|s| !s.is_empty()).copied().collect::<Vec<_>>();
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        mode.join("/"),
                        m.mrr,
                        m.hits1,
                        m.hits3,
                        m.hits10,
                        m.n
                    );
                }
            }
        }
        out
    }

    /// `t,MRR,H@3,H@10,n` in time order.
    pub fn per_timestamp_csv(&self, filter: FilterMode) -> String {
        let mut out = String::from("t,MRR,H@3,H@10,n\n");
        for (t, m) in self.per_timestamp(filter) {
            let _ = writeln!(out, "{t},{},{},{},{}", m.mrr, m.hits3, m.hits10, m.n);
        }
        out
    }
}

/// Metrics grouped by timestamp, ascending.
pub fn per_timestamp_report(records: &[RankRecord]) -> Vec<(usize, MetricReport)> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(r.t).or_default().push(r.rank);
    }
    groups
        .into_iter()
        .map(|(t, ranks)| (t, mrr_hits(&ranks).expect("groups are non-empty")))
        .collect()
}

/// Encodes `ds.slices[..end]` from scratch.
pub fn observed_state(inf: &Inference<'_>, ds: &Dataset, end: usize) -> Result<HistoryState> {
    let mut state = inf.model.empty_state();
    for sl in &ds.slices[..end] {
        inf.encode(&mut state, sl)?;
    }
    Ok(state)
}

fn check_vocab(model: &Model, ds: &Dataset) -> Result<()> {
    if model.num_entities != ds.num_entities || model.num_relations != ds.num_relations {
        return Err(Error::Config(format!(
            "model vocabulary {}x{} does not match dataset {}x{}",
            model.num_entities, model.num_relations, ds.num_entities, ds.num_relations
        )));
    }
    Ok(())
}

/// Ranks every event of `queries` using only `ds.slices[..history_end]` as
/// observed history; later timestamps are reached by sampled graphs (or
/// not at all without multi-step inference).
pub fn evaluate_slices(
    model: &Model,
    ds: &Dataset,
    history_end: usize,
    queries: &[GraphSlice],
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    cfg.infer.validate()?;
    if cfg.threads == 0 {
        return Err(Error::Config("threads must be at least 1".into()));
    }
    check_vocab(model, ds)?;
    if history_end == 0 || history_end > ds.num_slices() {
        return Err(Error::Dataset(format!("history end {history_end} is out of range")));
    }
    if let Some(bad) = queries.iter().find(|q| q.t < history_end) {
        return Err(Error::Dataset(format!(
            "query timestamp {} overlaps the observed history (ends at {})",
            bad.t,
            history_end - 1
        )));
    }
    let audit = LeakAudit::new(history_end);
    let inf = Inference {
        model,
        config: cfg.infer.clone(),
        priors: cfg.priors.clone(),
        mirror: ds.augmented.then_some(ds.base_relations),
        audit: Some(&audit),
    };
    let state = observed_state(&inf, ds, history_end)?;
    let t0 = history_end - 1;
    let known = ds.known_triples();
    let by_t: BTreeMap<usize, &GraphSlice> = queries.iter().filter(|q| !q.is_empty()).map(|q| (q.t, q)).collect();
    let mut records = Vec::new();
    let Some(&last) = by_t.keys().next_back() else {
        return Ok(EvalOutcome {
            records,
            leaked_reads: audit.reads(),
        });
    };
    for rep in 0..cfg.infer.repeats {
        inf.walk(&state, last, cfg.infer.seed.wrapping_add(rep as u64), |t, st| {
            let dt = t - t0;
            let Some(q) = by_t.get(&t) else { return Ok(()) };
            if !cfg.infer.horizon.contains(dt) {
                return Ok(());
            }
            let rank_all = |events: &[Event]| -> Result<Vec<RankRecord>> {
                let mut out = Vec::with_capacity(events.len() * cfg.filters.len());
                for e in events {
                    let direction = if e.relation < ds.base_relations {
                        Direction::Object
                    } else {
                        Direction::Subject
                    };
                    for &filter in &cfg.filters {
                        out.push(RankRecord {
                            t,
                            dt,
                            direction,
                            filter,
                            rank: rank_candidates(model, st, e, filter, &known)?,
                        });
                    }
                }
                Ok(out)
            };
            let events = q.events();
            let threads = cfg.threads.clamp(1, events.len().max(1));
            if threads == 1 {
                records.extend(rank_all(events)?);
                return Ok(());
            }
            let chunk = events.len().div_ceil(threads);
            let parts: Vec<Result<Vec<RankRecord>>> = std::thread::scope(|sc| {
                let handles: Vec<_> = events.chunks(chunk).map(|c| sc.spawn(|| rank_all(c))).collect();
                handles.into_iter().map(|h| h.join().expect("ranking thread panicked")).collect()
            });
            for p in parts {
                records.extend(p?);
            }
            Ok(())
        })?;
    }
    Ok(EvalOutcome {
        records,
        leaked_reads: audit.reads(),
    })
}

/// Evaluates the validation split (history: train) or the test split
/// (history: train and validation).
pub fn evaluate_split(model: &Model, ds: &Dataset, which: SplitKind, cfg: &EvalConfig) -> Result<EvalOutcome> {
    let split = ds
        .split
        .ok_or_else(|| Error::Dataset("dataset has no split boundaries".into()))?;
    let (end, queries) = match which {
        SplitKind::Valid => (split.train_end, ds.valid()?),
        SplitKind::Test => (split.valid_end, ds.test()?),
    };
    evaluate_slices(model, ds, end, queries, cfg)
}

/// Frequency estimates from a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Empirical {
    /// Share of events with each entity as subject.
    pub subject: Vec<f64>,
    pub relation: Vec<f64>,
}

impl Empirical {
    /// `p_e(s, r) = p_e(s) p_e(r)`.
    pub fn pair(&self, s: usize, r: usize) -> f64 {
        self.subject[s] * self.relation[r]
    }

    pub fn priors(&self, subject: bool, relation: bool) -> Priors {
        Priors {
            subject: subject.then(|| self.subject.clone()),
            relation: relation.then(|| self.relation.clone()),
        }
    }
}

pub fn empirical_baseline(train: &[GraphSlice], num_entities: usize, num_relations: usize) -> Result<Empirical> {
    let events: Vec<&Event> = train.iter().flat_map(|s| s.events()).collect();
    if events.is_empty() {
        return Err(Error::Dataset("empirical baseline needs training events".into()));
    }
    let mut subject = vec![0.0; num_entities];
    let mut relation = vec![0.0; num_relations];
    for e in &events {
        crate::data::check_event(e, num_entities, num_relations)?;
        subject[e.subject] += 1.0;
        relation[e.relation] += 1.0;
    }
    let n = events.len() as f64;
    subject.iter_mut().chain(relation.iter_mut()).for_each(|c| *c /= n);
    Ok(Empirical { subject, relation })
}
