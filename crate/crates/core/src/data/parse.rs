use std::collections::{BTreeSet, HashMap};

use super::{Dataset, Event, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub enum Format {
    /// Integer entity and relation ids.
    #[default]
    Ids,
    /// String labels; ids assigned in first-seen order unless a vocabulary
    /// is supplied.
    Labeled {
        entities: Option<Vec<String>>,
        relations: Option<Vec<String>>,
    },
}

#[derive(Clone, Debug, Default)]
pub struct ParseOptions {
    pub format: Format,
    /// Ignore columns after the fourth (some public dumps carry a fifth).
    pub allow_extra_fields: bool,
    /// Fixed vocabulary sizes for id input; inferred from the data if unset.
    pub num_entities: Option<usize>,
    pub num_relations: Option<usize>,
}

struct Record {
    fields: [String; 3],
    time: u64,
}

fn parse_err(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source.to_string(),
        line,
        message: message.into(),
    }
}

fn split_fields<'a>(line: &'a str, want: usize, allow_extra: bool, source: &str, no: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
    if fields.len() < want || (fields.len() > want && !allow_extra) {
        return Err(parse_err(
            source,
            no,
            format!("expected {want} tab-separated fields, found {}", fields.len()),
        ));
    }
    if let Some(i) = fields[..want].iter().position(|f| f.is_empty()) {
        return Err(parse_err(source, no, format!("field {} is empty", i + 1)));
    }
    Ok(fields)
}

fn parse_time(raw: &str, source: &str, no: usize) -> Result<u64> {
    raw.parse::<u64>()
        .map_err(|_| parse_err(source, no, format!("timestamp `{raw}` is not a non-negative integer")))
}

fn read_records(text: &str, source: &str, allow_extra: bool) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f = split_fields(line, 4, allow_extra, source, no)?;
        out.push(Record {
            fields: [f[0].to_string(), f[1].to_string(), f[2].to_string()],
            time: parse_time(f[3], source, no)?,
        });
    }
    Ok(out)
}

struct Vocab {
    index: HashMap<String, usize>,
    labels: Vec<String>,
    fixed: bool,
}

impl Vocab {
    fn new(given: Option<&Vec<String>>) -> Self {
        match given {
            Some(labels) => Vocab {
                index: labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect(),
                labels: labels.clone(),
                fixed: true,
            },
            None => Vocab {
                index: HashMap::new(),
                labels: Vec::new(),
                fixed: false,
            },
        }
    }

    fn id(&mut self, label: &str) -> Option<usize> {
        if let Some(&i) = self.index.get(label) {
            return Some(i);
        }
        if self.fixed {
            return None;
        }
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), self.labels.len() - 1);
        Some(self.labels.len() - 1)
    }
}

/// Parses one or more named quadruple sources into a single dataset.
///
/// With three sources they are taken as train, valid and test, and the
/// split boundaries follow the files.
pub fn parse_quadruples(sources: &[(&str, &str)], opts: &ParseOptions) -> Result<Dataset> {
    let mut per_source = Vec::with_capacity(sources.len());
    for (name, text) in sources {
        per_source.push((*name, read_records(text, name, opts.allow_extra_fields)?));
    }

    // map labels or ids
    let mut triples: Vec<(usize, usize, usize, u64, usize)> = Vec::new();
    let (mut ent_labels, mut rel_labels) = (None, None);
    match &opts.format {
        Format::Ids => {
            for (k, (name, recs)) in per_source.iter().enumerate() {
                for (line, rec) in recs.iter().enumerate() {
                    let mut ids = [0usize; 3];
                    for (j, f) in rec.fields.iter().enumerate() {
                        ids[j] = f.parse().map_err(|_| {
                            parse_err(name, source_line(&sources[k].1, line), format!("`{f}` is not a non-negative integer id"))
                        })?;
                    }
                    triples.push((ids[0], ids[1], ids[2], rec.time, k));
                }
            }
        }
        Format::Labeled { entities, relations } => {
            let mut ev = Vocab::new(entities.as_ref());
            let mut rv = Vocab::new(relations.as_ref());
            for (k, (name, recs)) in per_source.iter().enumerate() {
                for (line, rec) in recs.iter().enumerate() {
                    let unknown = |what: &str, l: &str| {
                        parse_err(name, source_line(&sources[k].1, line), format!("unknown {what} `{l}`"))
                    };
                    let s = ev.id(&rec.fields[0]).ok_or_else(|| unknown("entity", &rec.fields[0]))?;
                    let r = rv.id(&rec.fields[1]).ok_or_else(|| unknown("relation", &rec.fields[1]))?;
                    let o = ev.id(&rec.fields[2]).ok_or_else(|| unknown("entity", &rec.fields[2]))?;
                    triples.push((s, r, o, rec.time, k));
                }
            }
            ent_labels = Some(ev.labels);
            rel_labels = Some(rv.labels);
        }
    }

    let num_entities = match (&ent_labels, opts.num_entities) {
        (Some(l), _) => l.len(),
        (None, Some(n)) => n,
        (None, None) => triples.iter().map(|t| t.0.max(t.2) + 1).max().unwrap_or(0),
    };
    let num_relations = match (&rel_labels, opts.num_relations) {
        (Some(l), _) => l.len(),
        (None, Some(n)) => n,
        (None, None) => triples.iter().map(|t| t.1 + 1).max().unwrap_or(0),
    };

    let raw_times: Vec<u64> = triples.iter().map(|t| t.3).collect::<BTreeSet<_>>().into_iter().collect();
    let dense = |raw: u64| raw_times.binary_search(&raw).expect("time present");
    let events: Vec<Event> = triples.iter().map(|&(s, r, o, t, _)| Event::new(s, r, o, dense(t))).collect();

    let split = if sources.len() == 3 {
        let range = |k: usize| {
            let ts: Vec<usize> = triples.iter().filter(|t| t.4 == k).map(|t| dense(t.3)).collect();
            (ts.iter().min().copied(), ts.iter().max().copied())
        };
        let (tr, va, te) = (range(0), range(1), range(2));
        let (Some(tr_max), Some(va_min), Some(va_max), Some(te_min)) = (tr.1, va.0, va.1, te.0) else {
            return Err(Error::Dataset("train, valid and test files must all be non-empty".into()));
        };
        if !(tr_max < va_min && va_max < te_min) {
            return Err(Error::Dataset(
                "split files overlap in time: train must precede valid, valid must precede test".into(),
            ));
        }
        Some(Split {
            train_end: va_min,
            valid_end: te_min,
        })
    } else {
        None
    };

    let mut ds = Dataset::from_events(events, num_entities, num_relations, raw_times.len())?;
    ds.raw_times = raw_times;
    ds.entity_labels = ent_labels;
    ds.relation_labels = rel_labels;
    ds.split = split;
    Ok(ds)
}

/// 1-based line number of the `nth` non-empty line.
fn source_line(text: &str, nth: usize) -> usize {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .nth(nth)
        .map_or(0, |(i, _)| i + 1)
}

/// Reads a `label\tid` vocabulary file into an id-indexed label list.
pub fn parse_vocab(text: &str, source: &str) -> Result<Vec<String>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f = split_fields(line, 2, false, source, i + 1)?;
        let id: usize = f[1]
            .parse()
            .map_err(|_| parse_err(source, i + 1, format!("`{}` is not an id", f[1])))?;
        pairs.push((id, f[0].to_string(), i + 1));
    }
    pairs.sort();
    let mut out = Vec::with_capacity(pairs.len());
    for (expect, (id, label, line)) in pairs.into_iter().enumerate() {
        if id != expect {
            return Err(parse_err(source, line, format!("vocabulary ids must be 0..n without gaps; missing {expect}")));
        }
        out.push(label);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpanFact {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub start: u64,
    pub end: u64,
}

/// Parses `s\tr\to\tt_start\tt_end` lines with integer ids.
pub fn parse_spans(text: &str, source: &str) -> Result<Vec<SpanFact>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f = split_fields(line, 5, false, source, no)?;
        let id = |k: usize| -> Result<usize> {
            f[k].parse()
                .map_err(|_| parse_err(source, no, format!("`{}` is not a non-negative integer id", f[k])))
        };
        let fact = SpanFact {
            subject: id(0)?,
            relation: id(1)?,
            object: id(2)?,
            start: parse_time(f[3], source, no)?,
            end: parse_time(f[4], source, no)?,
        };
        if fact.start > fact.end {
            return Err(parse_err(source, no, format!("span start {} after end {}", fact.start, fact.end)));
        }
        out.push(fact);
    }
    Ok(out)
}

/// Expands each span into one event per `unit` step from start to end
/// inclusive, dropping events before `cutoff`. Times in the result are raw.
pub fn expand_time_spans(facts: &[SpanFact], unit: u64, cutoff: u64) -> Result<Vec<(usize, usize, usize, u64)>> {
    if unit == 0 {
        return Err(Error::Config("time unit must be positive".into()));
    }
    let mut out = Vec::new();
    for f in facts {
        if f.start > f.end {
            return Err(Error::InvalidSpan {
                start: f.start,
                end: f.end,
            });
        }
        let mut t = f.start;
        while t <= f.end {
            if t >= cutoff {
                out.push((f.subject, f.relation, f.object, t));
            }
            match t.checked_add(unit) {
                Some(n) => t = n,
                None => break,
            }
        }
    }
    Ok(out)
}

/// Renders raw-time quadruples as id TSV, one per line.
pub fn quads_to_tsv(quads: &[(usize, usize, usize, u64)]) -> String {
    let mut s = String::new();
    for (a, b, c, t) in quads {
        s.push_str(&format!("{a}\t{b}\t{c}\t{t}\n"));
    }
    s
}
