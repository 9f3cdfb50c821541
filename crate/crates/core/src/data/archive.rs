use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Event, Split};
use crate::error::{Error, Result};

const ARCHIVE_VERSION: u32 = 1;

/// `meta.json` of a dataset archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub num_entities: usize,
    pub num_relations: usize,
    pub base_relations: usize,
    pub augmented: bool,
    pub num_slices: usize,
    pub raw_times: Vec<u64>,
    pub split: Option<Split>,
    pub entity_labels: Option<Vec<String>>,
    pub relation_labels: Option<Vec<String>>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn tsv(slices: &[super::GraphSlice]) -> String {
    let mut s = String::new();
    for e in slices.iter().flat_map(|sl| sl.events()) {
        s.push_str(&format!("{}\t{}\t{}\t{}\n", e.subject, e.relation, e.object, e.time));
    }
    s
}

/// Writes `meta.json` plus `train.tsv`/`valid.tsv`/`test.tsv` (or
/// `events.tsv` for an unsplit dataset) with dense timestamps.
pub fn save_archive(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = DatasetMeta {
        version: ARCHIVE_VERSION,
        num_entities: ds.num_entities,
        num_relations: ds.num_relations,
        base_relations: ds.base_relations,
        augmented: ds.augmented,
        num_slices: ds.num_slices(),
        raw_times: ds.raw_times.clone(),
        split: ds.split,
        entity_labels: ds.entity_labels.clone(),
        relation_labels: ds.relation_labels.clone(),
    };
    write(&dir.join("meta.json"), &serde_json::to_string_pretty(&meta)?)?;
    match ds.split {
        Some(sp) => {
            write(&dir.join("train.tsv"), &tsv(&ds.slices[..sp.train_end]))?;
            write(&dir.join("valid.tsv"), &tsv(&ds.slices[sp.train_end..sp.valid_end]))?;
            write(&dir.join("test.tsv"), &tsv(&ds.slices[sp.valid_end..]))?;
        }
        None => write(&dir.join("events.tsv"), &tsv(&ds.slices))?,
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_events(path: &Path, out: &mut Vec<Event>) -> Result<()> {
    let text = read(path)?;
    let name = path.display().to_string();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let nums: Option<Vec<usize>> = if f.len() == 4 {
            f.iter().map(|x| x.trim().parse().ok()).collect()
        } else {
            None
        };
        let Some(n) = nums else {
            return Err(Error::Parse {
                source_name: name,
                line: i + 1,
                message: "expected 4 integer fields".into(),
            });
        };
        out.push(Event::new(n[0], n[1], n[2], n[3]));
    }
    Ok(())
}

pub fn load_archive(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_str(&read(&dir.join("meta.json"))?)?;
    if meta.version != ARCHIVE_VERSION {
        return Err(Error::Dataset(format!("unsupported archive version {}", meta.version)));
    }
    let mut events = Vec::new();
    if meta.split.is_some() {
        for f in ["train.tsv", "valid.tsv", "test.tsv"] {
            read_events(&dir.join(f), &mut events)?;
        }
    } else {
        read_events(&dir.join("events.tsv"), &mut events)?;
    }
    let mut ds = Dataset::from_events(events, meta.num_entities, meta.num_relations, meta.num_slices)?;
    if meta.raw_times.len() != meta.num_slices {
        return Err(Error::Dataset("raw_times length does not match slice count".into()));
    }
    ds.base_relations = meta.base_relations;
    ds.augmented = meta.augmented;
    ds.raw_times = meta.raw_times;
    ds.split = meta.split;
    ds.entity_labels = meta.entity_labels;
    ds.relation_labels = meta.relation_labels;
    Ok(ds)
}
