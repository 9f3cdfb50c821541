//! Multi-step extrapolation and candidate ranking.
//!
//! To predict `Δt` steps past the last observed slice, the model samples a
//! graph for each intermediate timestamp, encodes it into a private copy of
//! the state and scores the horizon from that copy. One sample path is drawn.

use std::cell::Cell;
use std::collections::{BTreeSet, HashSet};

use rand::distributions::{Distribution as _, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Event, GraphSlice, Provenance};
use crate::error::{Error, Result};
use crate::model::{HistoryState, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferMode {
    MultiStep,
    /// The state stays at the last observed slice.
    NoMultiStep,
}

/// Which test timestamps are scored, by distance from the last observed
/// slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Horizon {
    #[default]
    All,
    Exactly(usize),
    AtLeast(usize),
}

impl Horizon {
    pub fn contains(&self, dt: usize) -> bool {
        match *self {
            Horizon::All => true,
            Horizon::Exactly(h) => dt == h,
            Horizon::AtLeast(h) => dt >= h,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    /// Subjects drawn per generated graph (M).
    pub samples: usize,
    /// Triples kept per generated graph (k).
    pub top_k: usize,
    pub horizon: Horizon,
    pub mode: InferMode,
    pub seed: u64,
    /// Independent sample paths; each contributes its own rank records.
    pub repeats: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            samples: 1000,
            top_k: 1000,
            horizon: Horizon::All,
            mode: InferMode::MultiStep,
            seed: 0,
            repeats: 1,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("samples (M) must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if matches!(self.horizon, Horizon::Exactly(0) | Horizon::AtLeast(0)) {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        Ok(())
    }
}

/// Replacement subject and relation distributions for graph sampling.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Priors {
    pub subject: Option<Vec<f64>>,
    /// Used for every subject.
    pub relation: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredEvent {
    pub event: Event,
    pub prob: f64,
}

/// Top-k sampled triples for one timestamp, by descending probability.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedGraph {
    pub t: usize,
    pub events: Vec<ScoredEvent>,
}

/// Counts encodings of observed slices at or after `forbidden_from`.
#[derive(Debug, Default)]
pub struct LeakAudit {
    pub forbidden_from: usize,
    reads: Cell<usize>,
}

impl LeakAudit {
    pub fn new(forbidden_from: usize) -> Self {
        LeakAudit {
            forbidden_from,
            reads: Cell::new(0),
        }
    }

    pub fn reads(&self) -> usize {
        self.reads.get()
    }

    fn record(&self, slice: &GraphSlice) {
        if slice.provenance == Provenance::Observed && slice.t >= self.forbidden_from {
            self.reads.set(self.reads.get() + 1);
        }
    }
}

/// Model plus everything needed to walk forward from an observed state.
pub struct Inference<'a> {
    pub model: &'a Model,
    pub config: InferConfig,
    pub priors: Priors,
    /// Base relation count of an inverse-augmented vocabulary; generated
    /// events then also get their mirrored copy.
    pub mirror: Option<usize>,
    pub audit: Option<&'a LeakAudit>,
}

impl<'a> Inference<'a> {
    pub fn new(model: &'a Model, config: InferConfig) -> Self {
        Inference {
            model,
            config,
            priors: Priors::default(),
            mirror: None,
            audit: None,
        }
    }

    /// Encodes a slice, reporting it to the audit.
    pub fn encode(&self, state: &mut HistoryState, slice: &GraphSlice) -> Result<()> {
        if let Some(a) = self.audit {
            a.record(slice);
        }
        self.model.encode_slice(state, slice)
    }

    fn subject_probs(&self, state: &HistoryState) -> Result<Vec<f64>> {
        match &self.priors.subject {
            Some(p) if p.len() != self.model.num_entities => {
                Err(Error::Config("subject prior does not match the entity count".into()))
            }
            Some(p) => Ok(p.clone()),
            None => Ok(self.model.score_subjects(state).probs),
        }
    }

    fn relation_probs(&self, s: usize, state: &HistoryState) -> Result<Vec<f64>> {
        match &self.priors.relation {
            Some(p) if p.len() != self.model.num_relations => {
                Err(Error::Config("relation prior does not match the relation count".into()))
            }
            Some(p) => Ok(p.clone()),
            None => Ok(self.model.score_relations(s, state)?.probs),
        }
    }

    /// Draws `M` subjects, scores every `(r, o)` for each distinct one by
    /// joint probability and keeps the best `k` triples.
    pub fn sample_graph(&self, state: &HistoryState, t: usize, rng: &mut ChaCha8Rng) -> Result<GeneratedGraph> {
        let k = self.config.top_k;
        if k == 0 {
            return Ok(GeneratedGraph { t, events: Vec::new() });
        }
        let ps = self.subject_probs(state)?;
        let subjects = sample_subjects(&ps, self.config.samples, rng)?;
        let mut cands: Vec<(f64, Event)> = Vec::new();
        for &s in &subjects {
            let pr = self.relation_probs(s, state)?;
            for (r, &p_r) in pr.iter().enumerate() {
                let po = self.model.score_objects(s, r, state)?;
                for (o, &p_o) in po.probs.iter().enumerate() {
                    cands.push((ps[s] * p_r * p_o, Event::new(s, r, o, t)));
                }
            }
        }
        let order = |a: &(f64, Event), b: &(f64, Event)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if cands.len() > k {
            cands.select_nth_unstable_by(k - 1, order);
            cands.truncate(k);
        }
        cands.sort_by(order);
        Ok(GeneratedGraph {
            t,
            events: cands.into_iter().map(|(prob, event)| ScoredEvent { event, prob }).collect(),
        })
    }

    /// The slice encoded for a generated graph: its triples plus mirrored
    /// copies, without duplicates.
    pub fn materialize(&self, g: &GeneratedGraph) -> GraphSlice {
        let mut events: BTreeSet<Event> = BTreeSet::new();
        for se in &g.events {
            events.insert(se.event);
            if let Some(base) = self.mirror {
                events.insert(crate::data::mirror(&se.event, base));
            }
        }
        GraphSlice::generated(g.t, events.into_iter().collect())
    }

    /// Walks from `state` (last encoded slice `t0`) through `t0 + 1 ..= last`,
    /// calling `visit(t, state)` with the state that predicts `t`. Between
    /// visits the sampled graph for `t` is encoded. Never touches `state`.
    pub fn walk<F>(&self, state: &HistoryState, last: usize, seed: u64, mut visit: F) -> Result<()>
    where
        F: FnMut(usize, &HistoryState) -> Result<()>,
    {
        let t0 = state.last_t.ok_or_else(|| Error::Config("cannot extrapolate from an empty history".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cur = state.clone();
        for t in t0 + 1..=last {
            visit(t, &cur)?;
            if t == last || self.config.mode == InferMode::NoMultiStep {
                continue;
            }
            let g = self.sample_graph(&cur, t, &mut rng)?;
            if !g.events.is_empty() {
                self.encode(&mut cur, &self.materialize(&g))?;
            }
        }
        Ok(())
    }

    /// State predicting `t0 + dt`, where `t0` is the last slice in `state`.
    /// Graphs are generated for `t0 + 1 .. t0 + dt - 1` only.
    pub fn multi_step_infer(&self, state: &HistoryState, dt: usize) -> Result<HistoryState> {
        if dt == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        let t0 = state.last_t.ok_or_else(|| Error::Config("cannot extrapolate from an empty history".into()))?;
        let mut out = None;
        self.walk(state, t0 + dt, self.config.seed, |t, st| {
            if t == t0 + dt {
                out = Some(st.clone());
            }
            Ok(())
        })?;
        Ok(out.expect("horizon visited"))
    }
}

fn sample_subjects(ps: &[f64], m: usize, rng: &mut ChaCha8Rng) -> Result<BTreeSet<usize>> {
    let dist = WeightedIndex::new(ps).map_err(|e| Error::Config(format!("subject distribution: {e}")))?;
    Ok((0..m).map(|_| dist.sample(rng)).collect())
}

/// Whether ranking drops other known answers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterMode {
    Raw,
    Filtered,
}

impl FilterMode {
    pub fn name(&self) -> &'static str {
        match self {
            FilterMode::Raw => "raw",
            FilterMode::Filtered => "filtered",
        }
    }
}

/// Rank of `target` among `scores` with average ranks for ties. Candidates
/// for which `skip` holds are ignored; the target never is.
pub fn average_rank(scores: &[f64], target: usize, skip: impl Fn(usize) -> bool) -> f64 {
    let st = scores[target];
    let mut greater = 0usize;
    let mut equal = 0usize;
    for (o, &v) in scores.iter().enumerate() {
        if o == target || skip(o) {
            continue;
        }
        if v > st {
            greater += 1;
        } else if v == st {
            equal += 1;
        }
    }
    1.0 + greater as f64 + 0.5 * equal as f64
}

/// Rank of the true object of `query` under the object head.
pub fn rank_candidates(
    model: &Model,
    state: &HistoryState,
    query: &Event,
    mode: FilterMode,
    known: &HashSet<(usize, usize, usize)>,
) -> Result<f64> {
    if query.object >= model.num_entities {
        return Err(Error::IdOutOfRange {
            kind: "entity",
            id: query.object,
            limit: model.num_entities,
        });
    }
    let scores = model.object_logits(query.subject, query.relation, state)?;
    Ok(match mode {
        FilterMode::Raw => average_rank(&scores, query.object, |_| false),
        FilterMode::Filtered => average_rank(&scores, query.object, |o| {
            known.contains(&(query.subject, query.relation, o))
        }),
    })
}
