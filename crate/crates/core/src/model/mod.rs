//! Recurrent event encoder and the three softmax heads.
//!
//! A [`HistoryState`] holds the global state `H`, per-subject states and
//! per-(subject, relation) states after the last encoded slice. Heads always
//! read that state, so after encoding slice `t - 1` they give the
//! distribution of events at `t`.

mod checkpoint;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{Activation, Aggregator, AggregatorKind};
use crate::data::{Event, GraphSlice};
use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, ParamId, ParamStore, Tape, Tensor, Var};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    /// History length; also the truncation window for training.
    pub m: usize,
    pub aggregator: AggregatorKind,
    /// Aggregator feeding the global state.
    pub global_aggregator: AggregatorKind,
    pub activation: Activation,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 200,
            m: 10,
            aggregator: AggregatorKind::rgcn(200),
            global_aggregator: AggregatorKind::rgcn(200),
            activation: Activation::Relu,
            lambda1: 0.1,
            lambda2: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be positive".into()));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be non-negative".into()));
        }
        Ok(())
    }
}

/// One GRU's weights, each stored `[d, in]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GruWeights {
    pub wz: ParamId,
    pub uz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub wh: ParamId,
    pub uh: ParamId,
}

impl GruWeights {
    fn new(store: &mut ParamStore, name: &str, d: usize, input: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut add = |w: &str, cols: usize| store.add_xavier(format!("{name}.{w}"), d, cols, rng);
        GruWeights {
            wz: add("wz", input),
            uz: add("uz", d),
            wr: add("wr", input),
            ur: add("ur", d),
            wh: add("wh", input),
            uh: add("uh", d),
        }
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [self.wz, self.uz, self.wr, self.ur, self.wh, self.uh]
    }
}

/// Which recurrent unit: 1 global, 2 subject-relation, 3 subject.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GruKind {
    Global = 1,
    Pair = 2,
    Subject = 3,
}

/// A probability vector over a finite vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    pub probs: Vec<f64>,
}

impl Distribution {
    fn from_logits(mut logits: Vec<f64>) -> Self {
        softmax_in_place(&mut logits);
        Distribution { probs: logits }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Indices ordered by descending probability, ties by index.
    pub fn ranked(&self) -> Vec<usize> {
        let mut ix: Vec<usize> = (0..self.probs.len()).collect();
        ix.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        ix
    }
}

/// Hidden states after the last encoded slice. Absent keys are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryState {
    pub h_global: Vec<f64>,
    pub h_s: BTreeMap<usize, Vec<f64>>,
    pub h_sr: BTreeMap<(usize, usize), Vec<f64>>,
    pub last_t: Option<usize>,
    pub window: VecDeque<GraphSlice>,
    pub m: usize,
}

impl HistoryState {
    pub fn new(d: usize, m: usize) -> Self {
        HistoryState {
            h_global: vec![0.0; d],
            h_s: BTreeMap::new(),
            h_sr: BTreeMap::new(),
            last_t: None,
            window: VecDeque::new(),
            m,
        }
    }

    pub fn dim(&self) -> usize {
        self.h_global.len()
    }

    fn check_time(&self, t: usize) -> Result<()> {
        match self.last_t {
            Some(last) if t <= last => Err(Error::NonIncreasingTime { time: t, last }),
            _ => Ok(()),
        }
    }

    fn advance(&mut self, slice: &GraphSlice) {
        self.last_t = Some(slice.t);
        self.window.push_back(slice.clone());
        while self.window.len() > self.m {
            self.window.pop_front();
        }
    }
}

/// Which local states an encoding step must produce.
#[derive(Clone, Debug, Default)]
pub enum Scope {
    #[default]
    All,
    /// Only the global state.
    Global,
    Keys {
        subjects: BTreeSet<usize>,
        pairs: BTreeSet<(usize, usize)>,
    },
}

impl Scope {
    /// Keys read by the heads for `events`.
    pub fn for_events(events: &[Event]) -> Self {
        Scope::Keys {
            subjects: events.iter().map(|e| e.subject).collect(),
            pairs: events.iter().map(|e| (e.subject, e.relation)).collect(),
        }
    }

    fn wants_subject(&self, s: usize) -> bool {
        match self {
            Scope::All => true,
            Scope::Global => false,
            Scope::Keys { subjects, .. } => subjects.contains(&s),
        }
    }

    fn wants_pair(&self, p: (usize, usize)) -> bool {
        match self {
            Scope::All => true,
            Scope::Global => false,
            Scope::Keys { pairs, .. } => pairs.contains(&p),
        }
    }
}

/// History state lifted onto a tape. Keys not yet updated on the tape fall
/// back to constants from the base state.
pub struct TapeState<'a> {
    base: &'a HistoryState,
    pub h_global: Var,
    h_s: BTreeMap<usize, (Var, usize)>,
    h_sr: BTreeMap<(usize, usize), (Var, usize)>,
}

impl<'a> TapeState<'a> {
    pub fn new(tape: &Tape, base: &'a HistoryState) -> Self {
        TapeState {
            base,
            h_global: tape.constant(Tensor::row_vector(base.h_global.clone())),
            h_s: BTreeMap::new(),
            h_sr: BTreeMap::new(),
        }
    }

    fn rows<K: Ord + Copy>(
        tape: &Tape,
        d: usize,
        keys: &[K],
        live: &BTreeMap<K, (Var, usize)>,
        base: &BTreeMap<K, Vec<f64>>,
    ) -> Result<Var> {
        let mut missing = Vec::new();
        let mut missing_rows = 0;
        for k in keys {
            if !live.contains_key(k) {
                match base.get(k) {
                    Some(v) => missing.extend_from_slice(v),
                    None => missing.extend(std::iter::repeat(0.0).take(d)),
                }
                missing_rows += 1;
            }
        }
        if missing_rows == keys.len() {
            return Ok(tape.constant(Tensor::matrix(missing_rows, d, missing)));
        }
        let fallback = (missing_rows > 0).then(|| tape.constant(Tensor::matrix(missing_rows, d, missing)));
        let mut next = 0;
        let sources: Vec<(Var, usize)> = keys
            .iter()
            .map(|k| match live.get(k) {
                Some(&src) => src,
                None => {
                    next += 1;
                    (fallback.expect("counted above"), next - 1)
                }
            })
            .collect();
        tape.select_rows(&sources, d)
    }

    /// `[n, d]` subject states for `subjects`.
    pub fn subject_rows(&self, tape: &Tape, subjects: &[usize]) -> Result<Var> {
        Self::rows(tape, self.base.dim(), subjects, &self.h_s, &self.base.h_s)
    }

    /// `[n, d]` pair states for `pairs`.
    pub fn pair_rows(&self, tape: &Tape, pairs: &[(usize, usize)]) -> Result<Var> {
        Self::rows(tape, self.base.dim(), pairs, &self.h_sr, &self.base.h_sr)
    }

    /// Copies the tape values into a new history state.
    pub fn commit(&self, tape: &Tape) -> HistoryState {
        let mut out = self.base.clone();
        out.h_global = tape.value(self.h_global).data().to_vec();
        for (&k, &(v, i)) in &self.h_s {
            out.h_s.insert(k, tape.value(v).row(i).to_vec());
        }
        for (&k, &(v, i)) in &self.h_sr {
            out.h_sr.insert(k, tape.value(v).row(i).to_vec());
        }
        out
    }
}

/// Per-slice negative log-likelihood terms, each summed over events and
/// unweighted.
#[derive(Clone, Copy, Debug)]
pub struct HeadLosses {
    pub object: Var,
    pub relation: Var,
    pub subject: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub num_entities: usize,
    pub num_relations: usize,
    pub entity_emb: ParamId,
    pub relation_emb: ParamId,
    /// Entity embedding used only on the global path.
    pub global_entity_emb: ParamId,
    pub agg: Aggregator,
    pub global_agg: Aggregator,
    pub gru1: GruWeights,
    pub gru2: GruWeights,
    pub gru3: GruWeights,
    /// `[num_entities, 3d]`
    pub w_o: ParamId,
    /// `[num_relations, 2d]`
    pub w_r: ParamId,
    /// `[num_entities, d]`
    pub w_s: ParamId,
}

impl Model {
    /// Fresh Xavier-initialized model; parameters are drawn in a fixed order
    /// from a generator seeded with `config.seed`.
    pub fn new(config: ModelConfig, num_entities: usize, num_relations: usize) -> Result<Self> {
        config.validate()?;
        if num_entities == 0 || num_relations == 0 {
            return Err(Error::Config("model needs at least one entity and one relation".into()));
        }
        let d = config.d;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let entity_emb = store.add_xavier("entity_emb", num_entities, d, &mut rng);
        let relation_emb = store.add_xavier("relation_emb", num_relations, d, &mut rng);
        let global_entity_emb = store.add_xavier("global_entity_emb", num_entities, d, &mut rng);
        let mut agg = Aggregator::new(config.aggregator, d, num_relations, &mut store, "agg", &mut rng)?;
        agg.activation = config.activation;
        let mut global_agg = Aggregator::new(
            config.global_aggregator,
            d,
            num_relations,
            &mut store,
            "global_agg",
            &mut rng,
        )?;
        global_agg.activation = config.activation;
        let gru1 = GruWeights::new(&mut store, "gru1", d, d, &mut rng);
        let gru2 = GruWeights::new(&mut store, "gru2", d, 4 * d, &mut rng);
        let gru3 = GruWeights::new(&mut store, "gru3", d, 3 * d, &mut rng);
        let w_o = store.add_xavier("w_o", num_entities, 3 * d, &mut rng);
        let w_r = store.add_xavier("w_r", num_relations, 2 * d, &mut rng);
        let w_s = store.add_xavier("w_s", num_entities, d, &mut rng);
        Ok(Model {
            config,
            store,
            num_entities,
            num_relations,
            entity_emb,
            relation_emb,
            global_entity_emb,
            agg,
            global_agg,
            gru1,
            gru2,
            gru3,
            w_o,
            w_r,
            w_s,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.d
    }

    pub fn empty_state(&self) -> HistoryState {
        HistoryState::new(self.config.d, self.config.m)
    }

    /// Parameters behind the subject head and the global state.
    pub fn global_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_s, self.global_entity_emb];
        ids.extend(self.gru1.ids());
        ids.extend(self.global_agg.param_ids());
        ids.sort();
        ids
    }

    /// Named parameter groups, for reporting and gradient checks.
    pub fn param_groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        vec![
            ("embeddings", vec![self.entity_emb, self.relation_emb, self.global_entity_emb]),
            ("aggregator", self.agg.param_ids()),
            ("global_aggregator", self.global_agg.param_ids()),
            ("gru1", self.gru1.ids().to_vec()),
            ("gru2", self.gru2.ids().to_vec()),
            ("gru3", self.gru3.ids().to_vec()),
            ("heads", vec![self.w_o, self.w_r, self.w_s]),
        ]
    }

    fn gru(&self, kind: GruKind) -> &GruWeights {
        match kind {
            GruKind::Global => &self.gru1,
            GruKind::Pair => &self.gru2,
            GruKind::Subject => &self.gru3,
        }
    }

    fn check_entity(&self, id: usize) -> Result<()> {
        if id >= self.num_entities {
            return Err(Error::IdOutOfRange {
                kind: "entity",
                id,
                limit: self.num_entities,
            });
        }
        Ok(())
    }

    fn check_relation(&self, id: usize) -> Result<()> {
        if id >= self.num_relations {
            return Err(Error::IdOutOfRange {
                kind: "relation",
                id,
                limit: self.num_relations,
            });
        }
        Ok(())
    }

    fn check_events(&self, events: &[Event]) -> Result<()> {
        for e in events {
            self.check_entity(e.subject)?;
            self.check_relation(e.relation)?;
            self.check_entity(e.object)?;
        }
        Ok(())
    }

    /// Batched GRU update on a tape: `a` is `[n, in]`, `h` is `[n, d]`.
    pub fn gru_on_tape(&self, tape: &Tape, store: &ParamStore, kind: GruKind, a: Var, h: Var) -> Result<Var> {
        let w = self.gru(kind);
        let p = |id| tape.param(store, id);
        let gate = |wi, ui| -> Result<Var> {
            Ok(tape.sigmoid(tape.add(tape.matmul_t(a, p(wi))?, tape.matmul_t(h, p(ui))?)?))
        };
        let z = gate(w.wz, w.uz)?;
        let r = gate(w.wr, w.ur)?;
        let c = tape.tanh(tape.add(tape.matmul_t(a, p(w.wh))?, tape.matmul_t(tape.mul(r, h)?, p(w.uh))?)?);
        let keep = tape.affine(z, -1.0, 1.0);
        tape.add(tape.mul(keep, h)?, tape.mul(z, c)?)
    }

    /// One GRU update of a single vector.
    pub fn gru_step(&self, kind: GruKind, a: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.d;
        let input = match kind {
            GruKind::Global => d,
            GruKind::Pair => 4 * d,
            GruKind::Subject => 3 * d,
        };
        if a.len() != input || h_prev.len() != d {
            return Err(Error::Shape {
                op: "gru_step",
                left: vec![a.len(), h_prev.len()],
                right: vec![input, d],
            });
        }
        let tape = Tape::inference();
        let a = tape.constant(Tensor::row_vector(a.to_vec()));
        let h = tape.constant(Tensor::row_vector(h_prev.to_vec()));
        let out = self.gru_on_tape(&tape, &self.store, kind, a, h)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Records one encoding step of `slice` on `tape`, updating `ts`.
    pub fn encode_on_tape(
        &self,
        tape: &Tape,
        store: &ParamStore,
        slice: &GraphSlice,
        ts: &mut TapeState<'_>,
        scope: &Scope,
    ) -> Result<()> {
        self.check_events(slice.events())?;
        let ent = tape.param(store, self.entity_emb);
        let rel = tape.param(store, self.relation_emb);

        let gent = tape.param(store, self.global_entity_emb);
        let g = self.global_agg.global_pool(tape, store, slice, gent, rel)?;
        let h_global = self.gru_on_tape(tape, store, GruKind::Global, g, ts.h_global)?;
        ts.h_global = h_global;
        if slice.is_empty() || matches!(scope, Scope::Global) {
            return Ok(());
        }

        let msgs = self.agg.aggregate_slice(tape, store, slice, ent, rel)?;

        let rows: Vec<usize> = (0..msgs.subjects.len())
            .filter(|&i| scope.wants_subject(msgs.subjects[i]))
            .collect();
        if !rows.is_empty() {
            let subjects: Vec<usize> = rows.iter().map(|&i| msgs.subjects[i]).collect();
            let a = tape.concat_cols(&[
                tape.gather_rows(ent, &subjects)?,
                tape.gather_rows(msgs.subject_msgs, &rows)?,
                tape.gather_rows(h_global, &vec![0; rows.len()])?,
            ])?;
            let prev = ts.subject_rows(tape, &subjects)?;
            let next = self.gru_on_tape(tape, store, GruKind::Subject, a, prev)?;
            for (i, s) in subjects.into_iter().enumerate() {
                ts.h_s.insert(s, (next, i));
            }
        }

        let rows: Vec<usize> = (0..msgs.pairs.len())
            .filter(|&i| scope.wants_pair(msgs.pairs[i]))
            .collect();
        if !rows.is_empty() {
            let pairs: Vec<(usize, usize)> = rows.iter().map(|&i| msgs.pairs[i]).collect();
            let subjects: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let relations: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let a = tape.concat_cols(&[
                tape.gather_rows(ent, &subjects)?,
                tape.gather_rows(rel, &relations)?,
                tape.gather_rows(msgs.pair_msgs, &rows)?,
                tape.gather_rows(h_global, &vec![0; rows.len()])?,
            ])?;
            let prev = ts.pair_rows(tape, &pairs)?;
            let next = self.gru_on_tape(tape, store, GruKind::Pair, a, prev)?;
            for (i, p) in pairs.into_iter().enumerate() {
                ts.h_sr.insert(p, (next, i));
            }
        }
        Ok(())
    }

    /// Encodes `slice` into `state`: the global state always ticks, local
    /// states change only for subjects and pairs active in the slice.
    pub fn encode_slice(&self, state: &mut HistoryState, slice: &GraphSlice) -> Result<()> {
        self.encode_scoped(state, slice, &Scope::All)
    }

    /// [`Model::encode_slice`] restricted to the states in `scope`.
    pub fn encode_scoped(&self, state: &mut HistoryState, slice: &GraphSlice, scope: &Scope) -> Result<()> {
        state.check_time(slice.t)?;
        let next = {
            let tape = Tape::inference();
            let mut ts = TapeState::new(&tape, state);
            self.encode_on_tape(&tape, &self.store, slice, &mut ts, scope)?;
            ts.commit(&tape)
        };
        *state = next;
        state.advance(slice);
        Ok(())
    }

    /// Object, relation and subject cross-entropies of `events` given the
    /// state in `ts`.
    pub fn head_losses(
        &self,
        tape: &Tape,
        store: &ParamStore,
        ts: &TapeState<'_>,
        events: &[Event],
    ) -> Result<HeadLosses> {
        self.check_events(events)?;
        if events.is_empty() {
            let zero = tape.constant(Tensor::scalar(0.0));
            return Ok(HeadLosses {
                object: zero,
                relation: zero,
                subject: zero,
            });
        }
        let ent = tape.param(store, self.entity_emb);
        let rel = tape.param(store, self.relation_emb);
        let subjects: Vec<usize> = events.iter().map(|e| e.subject).collect();
        let relations: Vec<usize> = events.iter().map(|e| e.relation).collect();
        let objects: Vec<usize> = events.iter().map(|e| e.object).collect();
        let pairs: Vec<(usize, usize)> = events.iter().map(|e| (e.subject, e.relation)).collect();

        let e_s = tape.gather_rows(ent, &subjects)?;
        let e_r = tape.gather_rows(rel, &relations)?;
        let x_o = tape.concat_cols(&[e_s, e_r, ts.pair_rows(tape, &pairs)?])?;
        let obj_logits = tape.matmul_t(x_o, tape.param(store, self.w_o))?;
        let object = tape.sum(tape.softmax_cross_entropy(obj_logits, &objects)?);

        let x_r = tape.concat_cols(&[e_s, ts.subject_rows(tape, &subjects)?])?;
        let rel_logits = tape.matmul_t(x_r, tape.param(store, self.w_r))?;
        let relation = tape.sum(tape.softmax_cross_entropy(rel_logits, &relations)?);

        let subj_logits = tape.matmul_t(ts.h_global, tape.param(store, self.w_s))?;
        let subj_logits = tape.gather_rows(subj_logits, &vec![0; events.len()])?;
        let subject = tape.sum(tape.softmax_cross_entropy(subj_logits, &subjects)?);
        Ok(HeadLosses {
            object,
            relation,
            subject,
        })
    }

    // ── read-only scoring against a history state ───────────────────────

    fn local_or_zero<'s, K: Ord>(&self, map: &'s BTreeMap<K, Vec<f64>>, k: &K, zero: &'s [f64]) -> &'s [f64] {
        map.get(k).map(Vec::as_slice).unwrap_or(zero)
    }

    /// Unnormalized object scores for `(s, r, ?)`.
    pub fn object_logits(&self, s: usize, r: usize, state: &HistoryState) -> Result<Vec<f64>> {
        self.check_entity(s)?;
        self.check_relation(r)?;
        let zero = vec![0.0; self.config.d];
        let x: Vec<f64> = [
            self.store.get(self.entity_emb).row(s),
            self.store.get(self.relation_emb).row(r),
            self.local_or_zero(&state.h_sr, &(s, r), &zero),
        ]
        .concat();
        Ok(linear(self.store.get(self.w_o), &x))
    }

    pub fn score_objects(&self, s: usize, r: usize, state: &HistoryState) -> Result<Distribution> {
        Ok(Distribution::from_logits(self.object_logits(s, r, state)?))
    }

    pub fn score_relations(&self, s: usize, state: &HistoryState) -> Result<Distribution> {
        self.check_entity(s)?;
        let zero = vec![0.0; self.config.d];
        let x: Vec<f64> = [
            self.store.get(self.entity_emb).row(s),
            self.local_or_zero(&state.h_s, &s, &zero),
        ]
        .concat();
        Ok(Distribution::from_logits(linear(self.store.get(self.w_r), &x)))
    }

    pub fn score_subjects(&self, state: &HistoryState) -> Distribution {
        Distribution::from_logits(linear(self.store.get(self.w_s), &state.h_global))
    }

    /// `p(s) p(r | s) p(o | s, r)`.
    pub fn joint_event_probability(&self, s: usize, r: usize, o: usize, state: &HistoryState) -> Result<f64> {
        self.check_entity(o)?;
        let ps = self.score_subjects(state);
        self.check_entity(s)?;
        let pr = self.score_relations(s, state)?;
        let po = self.score_objects(s, r, state)?;
        Ok(ps.prob(s) * pr.prob(r) * po.prob(o))
    }
}

/// `w x` for `w` of shape `[n, len(x)]`.
fn linear(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

#[cfg(test)]
mod tests;
