//! Event quadruples, per-timestamp graph slices and datasets.

mod archive;
mod parse;
mod split;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

pub use archive::{load_archive, save_archive, DatasetMeta};
pub use parse::{
    expand_time_spans, parse_quadruples, parse_spans, parse_vocab, quads_to_tsv, Format, ParseOptions, SpanFact,
};
pub use split::{split_by_time, SplitFractions};
pub use synthetic::{generate_synthetic, Motif, SyntheticData, SyntheticSpec};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Event {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub time: usize,
}

impl Event {
    pub fn new(subject: usize, relation: usize, object: usize, time: usize) -> Self {
        Event {
            subject,
            relation,
            object,
            time,
        }
    }

    pub fn triple(&self) -> (usize, usize, usize) {
        (self.subject, self.relation, self.object)
    }
}

/// Whether a slice holds recorded facts or was produced by the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Provenance {
    #[default]
    Observed,
    Generated,
}

/// All events sharing one timestamp, with subject and (subject, relation)
/// neighbor indexes.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSlice {
    pub t: usize,
    events: Vec<Event>,
    index_s: BTreeMap<usize, Vec<usize>>,
    index_sr: BTreeMap<(usize, usize), Vec<usize>>,
    pub provenance: Provenance,
}

impl GraphSlice {
    /// Builds a slice; events are sorted and re-stamped with `t`.
    pub fn new(t: usize, mut events: Vec<Event>) -> Self {
        for e in &mut events {
            e.time = t;
        }
        events.sort_unstable();
        let mut index_s: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut index_sr: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, e) in events.iter().enumerate() {
            index_s.entry(e.subject).or_default().push(i);
            index_sr.entry((e.subject, e.relation)).or_default().push(e.object);
        }
        GraphSlice {
            t,
            events,
            index_s,
            index_sr,
            provenance: Provenance::Observed,
        }
    }

    pub fn generated(t: usize, events: Vec<Event>) -> Self {
        GraphSlice {
            provenance: Provenance::Generated,
            ..GraphSlice::new(t, events)
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Subjects active in this slice, ascending.
    pub fn subjects(&self) -> impl Iterator<Item = usize> + '_ {
        self.index_s.keys().copied()
    }

    /// Active (subject, relation) pairs, ascending.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.index_sr.keys().copied()
    }

    /// Events with subject `s` (N_t(s)).
    pub fn subject_events(&self, s: usize) -> Vec<Event> {
        self.index_s
            .get(&s)
            .map(|ix| ix.iter().map(|&i| self.events[i]).collect())
            .unwrap_or_default()
    }

    /// Objects of events (s, r, ·) (N_t(s, r)).
    pub fn objects(&self, s: usize, r: usize) -> &[usize] {
        self.index_sr.get(&(s, r)).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Relations incident to `s` as subject, ascending.
    pub fn relations_of(&self, s: usize) -> Vec<usize> {
        self.index_sr
            .range((s, 0)..=(s, usize::MAX))
            .map(|(&(_, r), _)| r)
            .collect()
    }

    pub fn has_subject(&self, s: usize) -> bool {
        self.index_s.contains_key(&s)
    }
}

/// Slice indices delimiting train `[0, train_end)`, valid
/// `[train_end, valid_end)` and test `[valid_end, T)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_end: usize,
    pub valid_end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// One slice per timestamp; `slices[i].t == i`.
    pub slices: Vec<GraphSlice>,
    pub num_entities: usize,
    pub num_relations: usize,
    /// Relation count before inverse augmentation.
    pub base_relations: usize,
    pub augmented: bool,
    pub entity_labels: Option<Vec<String>>,
    pub relation_labels: Option<Vec<String>>,
    /// Original timestamp value of each slice.
    pub raw_times: Vec<u64>,
    pub split: Option<Split>,
}

impl Dataset {
    /// Groups events by their (already dense) timestamps into `num_slices`
    /// slices. Ids are validated against the given sizes.
    pub fn from_events(events: Vec<Event>, num_entities: usize, num_relations: usize, num_slices: usize) -> Result<Self> {
        let mut buckets: Vec<Vec<Event>> = vec![Vec::new(); num_slices];
        for e in events {
            check_event(&e, num_entities, num_relations)?;
            if e.time >= num_slices {
                return Err(Error::IdOutOfRange {
                    kind: "timestamp",
                    id: e.time,
                    limit: num_slices,
                });
            }
            buckets[e.time].push(e);
        }
        Ok(Dataset {
            slices: buckets.into_iter().enumerate().map(|(t, ev)| GraphSlice::new(t, ev)).collect(),
            num_entities,
            num_relations,
            base_relations: num_relations,
            augmented: false,
            entity_labels: None,
            relation_labels: None,
            raw_times: (0..num_slices as u64).collect(),
            split: None,
        })
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn num_events(&self) -> usize {
        self.slices.iter().map(GraphSlice::len).sum()
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.slices.iter().flat_map(|s| s.events().iter())
    }

    fn split_or_err(&self) -> Result<Split> {
        self.split.ok_or_else(|| Error::Dataset("dataset has no split boundaries".into()))
    }

    pub fn train(&self) -> Result<&[GraphSlice]> {
        let s = self.split_or_err()?;
        Ok(&self.slices[..s.train_end])
    }

    pub fn valid(&self) -> Result<&[GraphSlice]> {
        let s = self.split_or_err()?;
        Ok(&self.slices[s.train_end..s.valid_end])
    }

    pub fn test(&self) -> Result<&[GraphSlice]> {
        let s = self.split_or_err()?;
        Ok(&self.slices[s.valid_end..])
    }

    /// Every (s, r, o) triple seen at any time; the filter set for ranking.
    pub fn known_triples(&self) -> HashSet<(usize, usize, usize)> {
        self.events().map(Event::triple).collect()
    }

    /// Mirror of relation `r` in an augmented dataset.
    pub fn inverse_of(&self, r: usize) -> usize {
        if r < self.base_relations {
            r + self.base_relations
        } else {
            r - self.base_relations
        }
    }
}

pub(crate) fn check_event(e: &Event, num_entities: usize, num_relations: usize) -> Result<()> {
    for (kind, id, limit) in [
        ("entity", e.subject, num_entities),
        ("relation", e.relation, num_relations),
        ("entity", e.object, num_entities),
    ] {
        if id >= limit {
            return Err(Error::IdOutOfRange { kind, id, limit });
        }
    }
    Ok(())
}

/// Adds `(o, r + R, s, t)` for every `(s, r, o, t)` and doubles the relation
/// vocabulary.
pub fn add_inverse_relations(dataset: &Dataset) -> Result<Dataset> {
    if dataset.augmented {
        return Err(Error::Dataset("inverse relations already added".into()));
    }
    let base = dataset.num_relations;
    let slices = dataset
        .slices
        .iter()
        .map(|sl| {
            let mut ev = sl.events().to_vec();
            ev.extend(sl.events().iter().map(|e| mirror(e, base)));
            GraphSlice {
                provenance: sl.provenance,
                ..GraphSlice::new(sl.t, ev)
            }
        })
        .collect();
    let relation_labels = dataset.relation_labels.as_ref().map(|labels| {
        let mut out = labels.clone();
        out.extend(labels.iter().map(|l| format!("{l}^-1")));
        out
    });
    Ok(Dataset {
        slices,
        num_relations: 2 * base,
        base_relations: base,
        augmented: true,
        relation_labels,
        ..dataset.clone()
    })
}

/// `(s, r, o, t) -> (o, r ± R, s, t)`; applying it twice is the identity.
pub fn mirror(e: &Event, base_relations: usize) -> Event {
    let r = if e.relation < base_relations {
        e.relation + base_relations
    } else {
        e.relation - base_relations
    };
    Event::new(e.object, r, e.subject, e.time)
}

/// Per-entity list of slice indices where the entity appears as subject.
#[derive(Clone, Debug, Default)]
pub struct SubjectTimeline {
    times: BTreeMap<usize, Vec<usize>>,
}

impl SubjectTimeline {
    pub fn new(slices: &[GraphSlice]) -> Self {
        let mut times: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, sl) in slices.iter().enumerate() {
            for s in sl.subjects() {
                times.entry(s).or_default().push(i);
            }
        }
        SubjectTimeline { times }
    }

    /// Indices of the latest `m` slices before position `before` where `s`
    /// is a subject, oldest first.
    pub fn window(&self, s: usize, before: usize, m: usize) -> &[usize] {
        let Some(ts) = self.times.get(&s) else {
            return &[];
        };
        let end = ts.partition_point(|&i| i < before);
        &ts[end.saturating_sub(m)..end]
    }
}

/// Neighborhood of `s` at one past timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    pub t: usize,
    pub events: Vec<Event>,
}

/// The latest `m` slices before `t` in which `s` is a subject, oldest first,
/// each reduced to the events of `s`.
pub fn history_window(dataset: &Dataset, s: usize, t: usize, m: usize) -> Result<Vec<HistoryEntry>> {
    if m == 0 {
        return Err(Error::Config("history length m must be at least 1".into()));
    }
    let timeline = SubjectTimeline::new(&dataset.slices);
    let before = dataset.slices.partition_point(|sl| sl.t < t);
    Ok(timeline
        .window(s, before, m)
        .iter()
        .map(|&i| HistoryEntry {
            t: dataset.slices[i].t,
            events: dataset.slices[i].subject_events(s),
        })
        .collect())
}

/// Distinct timestamps of a set of events.
pub fn distinct_times(events: &[Event]) -> BTreeSet<usize> {
    events.iter().map(|e| e.time).collect()
}
