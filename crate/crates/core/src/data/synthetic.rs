use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Event};
use crate::config::{parse_params, KvConfig};
use crate::error::{Error, Result};

/// Temporal patterns the generator can plant.
#[derive(Clone, Debug, PartialEq)]
pub enum Motif {
    /// `count` pairs, each emitting `(s, rel, o)` every `period` steps.
    Periodic { rel: usize, period: usize, count: usize },
    /// `count` pairs cycling through `rels` one step at a time, so
    /// `(s, rels[i], o, t)` is followed by `(s, rels[i+1], o, t+1)`.
    Chain { rels: Vec<usize>, count: usize },
    /// `count` walkers stepping around a ring of `ring` entities, one hop
    /// per step, emitting `(w, rel, position)`. Each step a walker also
    /// emits `decoys` events to random members of a separate decoy pool.
    Walk {
        rel: usize,
        count: usize,
        ring: usize,
        decoys: usize,
        decoy_pool: usize,
    },
    /// `count` subjects; each step `s` points at a fresh relay `x` via
    /// `rel_a`, `x` points at a random target `y` via `rel_a`, and at the
    /// next step `s` emits `(s, rel_b, y)`.
    Relay {
        rel_a: usize,
        rel_b: usize,
        count: usize,
        targets: usize,
    },
}

impl Motif {
    fn relations(&self) -> Vec<usize> {
        match self {
            Motif::Periodic { rel, .. } | Motif::Walk { rel, .. } => vec![*rel],
            Motif::Chain { rels, .. } => rels.clone(),
            Motif::Relay { rel_a, rel_b, .. } => vec![*rel_a, *rel_b],
        }
    }

    fn entities_needed(&self) -> usize {
        match self {
            Motif::Periodic { count, .. } | Motif::Chain { count, .. } => 2 * count,
            Motif::Walk {
                count,
                ring,
                decoys,
                decoy_pool,
                ..
            } => count + ring + if *decoys > 0 { *decoy_pool } else { 0 },
            Motif::Relay { count, targets, .. } => 2 * count + targets,
        }
    }

    /// Parses `chain rels=0,1,2 count=10`, `periodic rel=0 period=3 count=5`,
    /// `walk rel=0 count=4 ring=20 decoys=2 decoy_pool=10` or
    /// `relay rel_a=1 rel_b=2 count=5 targets=10`.
    pub fn parse(text: &str) -> Result<Self> {
        let params = parse_params(text);
        let Some(&(kind, _)) = params.first() else {
            return Err(Error::Config("empty motif".into()));
        };
        let get = |key: &str| params[1..].iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
        let num = |key: &str, default: Option<usize>| -> Result<usize> {
            match get(key) {
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::Config(format!("motif `{kind}`: invalid {key} `{v}`"))),
                None => default.ok_or_else(|| Error::Config(format!("motif `{kind}`: missing {key}"))),
            }
        };
        for (k, _) in &params[1..] {
            let known: &[&str] = match kind {
                "periodic" => &["rel", "period", "count"],
                "chain" => &["rels", "count"],
                "walk" => &["rel", "count", "ring", "decoys", "decoy_pool"],
                "relay" => &["rel_a", "rel_b", "count", "targets"],
                _ => &[],
            };
            if !known.contains(k) {
                return Err(Error::Config(format!("motif `{kind}`: unknown parameter `{k}`")));
            }
        }
        let m = match kind {
            "periodic" => Motif::Periodic {
                rel: num("rel", None)?,
                period: num("period", None)?,
                count: num("count", None)?,
            },
            "chain" => {
                let rels = get("rels")
                    .ok_or_else(|| Error::Config("motif `chain`: missing rels".into()))?
                    .split(',')
                    .map(|r| {
                        r.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("motif `chain`: invalid relation `{r}`")))
                    })
                    .collect::<Result<Vec<usize>>>()?;
                Motif::Chain {
                    rels,
                    count: num("count", None)?,
                }
            }
            "walk" => Motif::Walk {
                rel: num("rel", None)?,
                count: num("count", None)?,
                ring: num("ring", Some(20))?,
                decoys: num("decoys", Some(0))?,
                decoy_pool: num("decoy_pool", Some(10))?,
            },
            "relay" => Motif::Relay {
                rel_a: num("rel_a", None)?,
                rel_b: num("rel_b", None)?,
                count: num("count", None)?,
                targets: num("targets", Some(10))?,
            },
            other => return Err(Error::Config(format!("unknown motif kind `{other}`"))),
        };
        m.validate_shape()?;
        Ok(m)
    }

    fn validate_shape(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match self {
            Motif::Periodic { period: 0, .. } => bad("periodic motif needs period >= 1"),
            Motif::Chain { rels, .. } if rels.len() < 2 => bad("chain motif needs at least two relations"),
            Motif::Walk { ring, .. } if *ring < 2 => bad("walk motif needs a ring of at least 2"),
            Motif::Walk {
                decoys, decoy_pool: 0, ..
            } if *decoys > 0 => bad("walk motif with decoys needs a decoy pool"),
            Motif::Relay { targets: 0, .. } => bad("relay motif needs at least one target"),
            _ => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        match self {
            Motif::Periodic { rel, period, count } => format!("periodic rel={rel} period={period} count={count}"),
            Motif::Chain { rels, count } => {
                let r: Vec<String> = rels.iter().map(ToString::to_string).collect();
                format!("chain rels={} count={count}", r.join(","))
            }
            Motif::Walk {
                rel,
                count,
                ring,
                decoys,
                decoy_pool,
            } => format!("walk rel={rel} count={count} ring={ring} decoys={decoys} decoy_pool={decoy_pool}"),
            Motif::Relay {
                rel_a,
                rel_b,
                count,
                targets,
            } => format!("relay rel_a={rel_a} rel_b={rel_b} count={count} targets={targets}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_entities: usize,
    pub num_relations: usize,
    pub num_slices: usize,
    /// Target fraction of random events among all events.
    pub noise: f64,
    pub motifs: Vec<Motif>,
}

impl SyntheticSpec {
    pub fn from_kv(cfg: &KvConfig) -> Result<Self> {
        cfg.check_keys(&["seed", "num_entities", "num_relations", "num_slices", "noise", "motif"])?;
        let spec = SyntheticSpec {
            num_entities: cfg.require("num_entities")?,
            num_relations: cfg.require("num_relations")?,
            num_slices: cfg.require("num_slices")?,
            noise: cfg.parse_or("noise", 0.0)?,
            motifs: cfg.get_all("motif").into_iter().map(Motif::parse).collect::<Result<_>>()?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self, seed: u64) -> KvConfig {
        let mut c = KvConfig::new();
        c.set("seed", seed.to_string());
        c.set("num_entities", self.num_entities.to_string());
        c.set("num_relations", self.num_relations.to_string());
        c.set("num_slices", self.num_slices.to_string());
        c.set("noise", self.noise.to_string());
        for m in &self.motifs {
            c.push("motif", m.to_text());
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise rate must be in [0, 1), got {}", self.noise)));
        }
        if self.num_slices == 0 || self.num_entities == 0 || self.num_relations == 0 {
            return Err(Error::Config("sizes must be positive".into()));
        }
        let mut needed = 0;
        for m in &self.motifs {
            m.validate_shape()?;
            if let Some(&r) = m.relations().iter().find(|&&r| r >= self.num_relations) {
                return Err(Error::Config(format!(
                    "motif `{}` references unknown relation {r} (num_relations = {})",
                    m.to_text(),
                    self.num_relations
                )));
            }
            needed += m.entities_needed();
        }
        if needed > self.num_entities {
            return Err(Error::Config(format!(
                "motifs need {needed} distinct entities but only {} exist",
                self.num_entities
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    /// Motif events plus noise.
    pub dataset: Dataset,
    /// Motif events only, same timestamps.
    pub clean: Dataset,
    pub noise_events: usize,
}

/// Plants the motifs of `spec` over `num_slices` steps and mixes in uniform
/// random events so that they make up about `noise` of the total.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..spec.num_entities).collect();
    pool.shuffle(&mut rng);
    let mut next = 0;
    let mut take = |n: usize| {
        let out = pool[next..next + n].to_vec();
        next += n;
        out
    };

    let t_max = spec.num_slices;
    let mut clean: Vec<Event> = Vec::new();
    for motif in &spec.motifs {
        match motif {
            Motif::Periodic { rel, period, count } => {
                let ents = take(2 * count);
                for i in 0..*count {
                    let phase = rng.gen_range(0..*period);
                    for t in (phase..t_max).step_by(*period) {
                        clean.push(Event::new(ents[2 * i], *rel, ents[2 * i + 1], t));
                    }
                }
            }
            Motif::Chain { rels, count } => {
                let ents = take(2 * count);
                for i in 0..*count {
                    let phase = rng.gen_range(0..rels.len());
                    for t in 0..t_max {
                        let r = rels[(t + phase) % rels.len()];
                        clean.push(Event::new(ents[2 * i], r, ents[2 * i + 1], t));
                    }
                }
            }
            Motif::Walk {
                rel,
                count,
                ring,
                decoys,
                decoy_pool,
            } => {
                let walkers = take(*count);
                let ring_ents = take(*ring);
                let pool_ents = if *decoys > 0 { take(*decoy_pool) } else { Vec::new() };
                let mut pos: Vec<usize> = (0..*count).map(|_| rng.gen_range(0..*ring)).collect();
                for t in 0..t_max {
                    for (w, p) in walkers.iter().zip(pos.iter_mut()) {
                        clean.push(Event::new(*w, *rel, ring_ents[*p], t));
                        for _ in 0..*decoys {
                            let d = pool_ents[rng.gen_range(0..pool_ents.len())];
                            clean.push(Event::new(*w, *rel, d, t));
                        }
                        *p = (*p + 1) % ring;
                    }
                }
            }
            Motif::Relay {
                rel_a,
                rel_b,
                count,
                targets,
            } => {
                let subjects = take(*count);
                let mut relays = take(*count);
                let target_ents = take(*targets);
                let mut prev: Vec<Option<usize>> = vec![None; *count];
                for t in 0..t_max {
                    relays.shuffle(&mut rng);
                    for i in 0..*count {
                        let y = target_ents[rng.gen_range(0..*targets)];
                        clean.push(Event::new(subjects[i], *rel_a, relays[i], t));
                        clean.push(Event::new(relays[i], *rel_a, y, t));
                        if let Some(py) = prev[i] {
                            clean.push(Event::new(subjects[i], *rel_b, py, t));
                        }
                        prev[i] = Some(y);
                    }
                }
            }
        }
    }

    let mut per_slice = vec![0usize; t_max];
    for e in &clean {
        per_slice[e.time] += 1;
    }
    let ratio = spec.noise / (1.0 - spec.noise);
    let mut noisy = clean.clone();
    let mut noise_events = 0;
    for (t, &n) in per_slice.iter().enumerate() {
        let want = ratio * n as f64;
        let mut k = want.floor() as usize;
        if rng.gen::<f64>() < want - want.floor() {
            k += 1;
        }
        for _ in 0..k {
            let s = rng.gen_range(0..spec.num_entities);
            let r = rng.gen_range(0..spec.num_relations);
            let o = rng.gen_range(0..spec.num_entities);
            noisy.push(Event::new(s, r, o, t));
        }
        noise_events += k;
    }

    Ok(SyntheticData {
        dataset: Dataset::from_events(noisy, spec.num_entities, spec.num_relations, t_max)?,
        clean: Dataset::from_events(clean, spec.num_entities, spec.num_relations, t_max)?,
        noise_events,
    })
}
