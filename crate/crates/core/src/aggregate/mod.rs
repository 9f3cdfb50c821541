//! Neighborhood aggregators over one graph slice.
//!
//! Every aggregator produces two things for a slice: a message per active
//! `(s, r)` pair and a message per active subject `s`. Mean and attentive
//! work on the objects of `(s, r)`; their subject message averages the pair
//! messages over the relations of `s`. The relational GCN runs message
//! passing over the whole slice and gives the same top-layer state of `s`
//! for both.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::GraphSlice;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    None,
    Mean,
    Attentive,
    /// `layers` rounds of message passing with `blocks` diagonal blocks per
    /// relation matrix.
    Rgcn { layers: usize, blocks: usize },
}

impl AggregatorKind {
    /// Two layers with 2x2 blocks.
    pub fn rgcn(d: usize) -> Self {
        AggregatorKind::Rgcn {
            layers: 2,
            blocks: (d / 2).max(1),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregatorKind::None => "none",
            AggregatorKind::Mean => "mean",
            AggregatorKind::Attentive => "attn",
            AggregatorKind::Rgcn { .. } => "rgcn",
        }
    }

    /// Parses `none`, `mean`, `attn` or `rgcn` with default settings for `d`.
    pub fn parse(name: &str, d: usize) -> Result<Self> {
        match name {
            "none" => Ok(AggregatorKind::None),
            "mean" => Ok(AggregatorKind::Mean),
            "attn" | "attentive" => Ok(AggregatorKind::Attentive),
            "rgcn" => Ok(AggregatorKind::rgcn(d)),
            other => Err(Error::Config(format!(
                "unknown aggregator `{other}` (expected none, mean, attn or rgcn)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            _ => Err(Error::Config(format!("unknown activation `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentiveWeights {
    /// `[d, 3d]`
    pub w: ParamId,
    /// `[1, d]`
    pub v: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RgcnLayer {
    /// `[num_relations, blocks * bo * bi]`
    pub rel: ParamId,
    /// `[d_out, d_in]`
    pub self_loop: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgcnWeights {
    pub layers: Vec<RgcnLayer>,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AggregatorWeights {
    None,
    Mean,
    Attentive(AttentiveWeights),
    Rgcn(RgcnWeights),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregator {
    pub kind: AggregatorKind,
    pub weights: AggregatorWeights,
    pub activation: Activation,
    pub dim: usize,
}

/// Per-slice aggregation results, rows aligned with `pairs` and `subjects`.
#[derive(Clone, Debug)]
pub struct SliceMessages {
    pub pairs: Vec<(usize, usize)>,
    pub pair_msgs: Var,
    pub subjects: Vec<usize>,
    pub subject_msgs: Var,
}

impl SliceMessages {
    pub fn pair_row(&self, s: usize, r: usize) -> Option<usize> {
        self.pairs.binary_search(&(s, r)).ok()
    }

    pub fn subject_row(&self, s: usize) -> Option<usize> {
        self.subjects.binary_search(&s).ok()
    }
}

impl Aggregator {
    /// Registers the weights of `kind` in `store` under `prefix`.
    pub fn new(
        kind: AggregatorKind,
        d: usize,
        num_relations: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weights = match kind {
            AggregatorKind::None => AggregatorWeights::None,
            AggregatorKind::Mean => AggregatorWeights::Mean,
            AggregatorKind::Attentive => AggregatorWeights::Attentive(AttentiveWeights {
                w: store.add_xavier(format!("{prefix}.attn.w"), d, 3 * d, rng),
                v: store.add_xavier(format!("{prefix}.attn.v"), 1, d, rng),
            }),
            AggregatorKind::Rgcn { layers, blocks } => {
                if blocks == 0 || d % blocks != 0 {
                    return Err(Error::Config(format!(
                        "rgcn: dimension {d} is not divisible by {blocks} blocks"
                    )));
                }
                if layers == 0 {
                    return Err(Error::Config("rgcn needs at least one layer".into()));
                }
                let b = d / blocks;
                let layers = (0..layers)
                    .map(|l| {
                        // each block is b x b; xavier over the full d x d map
                        let a = (6.0 / (2 * d) as f64).sqrt();
                        let n = num_relations * blocks * b * b;
                        let data = (0..n).map(|_| rng.gen_range(-a..=a)).collect();
                        RgcnLayer {
                            rel: store.add(
                                format!("{prefix}.rgcn.{l}.rel"),
                                Tensor::matrix(num_relations, blocks * b * b, data),
                            ),
                            self_loop: store.add_xavier(format!("{prefix}.rgcn.{l}.self"), d, d, rng),
                        }
                    })
                    .collect();
                AggregatorWeights::Rgcn(RgcnWeights { layers, blocks })
            }
        };
        Ok(Aggregator {
            kind,
            weights,
            activation: Activation::Relu,
            dim: d,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.weights {
            AggregatorWeights::None | AggregatorWeights::Mean => Vec::new(),
            AggregatorWeights::Attentive(a) => vec![a.w, a.v],
            AggregatorWeights::Rgcn(r) => r.layers.iter().flat_map(|l| [l.rel, l.self_loop]).collect(),
        }
    }

    /// Messages for every active pair and subject of `slice`.
    ///
    /// `ent` is the `[num_entities, d]` entity embedding and `rel` the
    /// `[num_relations, d]` relation embedding on the same tape.
    pub fn aggregate_slice(
        &self,
        tape: &Tape,
        store: &ParamStore,
        slice: &GraphSlice,
        ent: Var,
        rel: Var,
    ) -> Result<SliceMessages> {
        let d = self.dim;
        let pairs: Vec<(usize, usize)> = slice.pairs().collect();
        let subjects: Vec<usize> = slice.subjects().collect();
        let zeros = |n: usize| tape.constant(Tensor::zeros(n, d));

        match &self.weights {
            AggregatorWeights::None => Ok(SliceMessages {
                pair_msgs: zeros(pairs.len()),
                subject_msgs: zeros(subjects.len()),
                pairs,
                subjects,
            }),
            AggregatorWeights::Mean | AggregatorWeights::Attentive(_) => {
                // edges grouped by pair; events are sorted by (s, r, o)
                let mut edge_pair = Vec::new();
                let mut objs = Vec::new();
                for (p, &(s, r)) in pairs.iter().enumerate() {
                    for &o in slice.objects(s, r) {
                        edge_pair.push(p);
                        objs.push(o);
                    }
                }
                let e_o = tape.gather_rows(ent, &objs)?;
                let pair_msgs = match &self.weights {
                    AggregatorWeights::Attentive(aw) => {
                        let subj_of_edge: Vec<usize> = edge_pair.iter().map(|&p| pairs[p].0).collect();
                        let rel_of_edge: Vec<usize> = edge_pair.iter().map(|&p| pairs[p].1).collect();
                        let e_s = tape.gather_rows(ent, &subj_of_edge)?;
                        let e_r = tape.gather_rows(rel, &rel_of_edge)?;
                        let alpha = attention(tape, store, aw, e_s, e_r, e_o, &edge_pair, pairs.len())?;
                        tape.segment_sum(tape.row_scale(e_o, alpha)?, &edge_pair, pairs.len())?
                    }
                    _ => {
                        let sum = tape.segment_sum(e_o, &edge_pair, pairs.len())?;
                        let inv: Vec<f64> = pairs
                            .iter()
                            .map(|&(s, r)| 1.0 / slice.objects(s, r).len() as f64)
                            .collect();
                        tape.row_scale(sum, tape.constant(Tensor::column(inv)))?
                    }
                };
                let subject_msgs = average_over_relations(tape, pair_msgs, &pairs, &subjects)?;
                Ok(SliceMessages {
                    pairs,
                    pair_msgs,
                    subjects,
                    subject_msgs,
                })
            }
            AggregatorWeights::Rgcn(rw) => {
                let states = self.rgcn_states(tape, store, rw, slice, ent)?;
                let subject_msgs = tape.gather_rows(states.h, &states.local(&subjects))?;
                let pair_subject: Vec<usize> = pairs.iter().map(|&(s, _)| states.index[&s]).collect();
                let pair_msgs = tape.gather_rows(states.h, &pair_subject)?;
                Ok(SliceMessages {
                    pairs,
                    pair_msgs,
                    subjects,
                    subject_msgs,
                })
            }
        }
    }

    /// Top-layer relational GCN state of every node touched by `slice`.
    fn rgcn_states(
        &self,
        tape: &Tape,
        store: &ParamStore,
        rw: &RgcnWeights,
        slice: &GraphSlice,
        ent: Var,
    ) -> Result<NodeStates> {
        let d = self.dim;
        let mut nodes: Vec<usize> = Vec::new();
        for e in slice.events() {
            nodes.push(e.subject);
            nodes.push(e.object);
        }
        nodes.sort_unstable();
        nodes.dedup();
        let index: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();

        let events = slice.events();
        let src: Vec<usize> = events.iter().map(|e| index[&e.object]).collect();
        let dst: Vec<usize> = events.iter().map(|e| index[&e.subject]).collect();
        let rels: Vec<usize> = events.iter().map(|e| e.relation).collect();
        let norm: Vec<f64> = events
            .iter()
            .map(|e| 1.0 / slice.objects(e.subject, e.relation).len() as f64)
            .collect();
        let norm = tape.constant(Tensor::column(norm));

        let mut h = tape.gather_rows(ent, &nodes)?;
        for layer in &rw.layers {
            let w_rel = tape.param(store, layer.rel);
            let w_self = tape.param(store, layer.self_loop);
            let msg = tape.block_diag(tape.gather_rows(h, &src)?, w_rel, &rels, rw.blocks, d)?;
            let agg = tape.segment_sum(tape.row_scale(msg, norm)?, &dst, nodes.len())?;
            let pre = tape.add(agg, tape.matmul_t(h, w_self)?)?;
            h = match self.activation {
                Activation::Relu => tape.relu(pre),
                Activation::Identity => pre,
            };
        }
        Ok(NodeStates { h, index })
    }

    /// Element-wise max of the subject messages of `slice`; zeros when the
    /// slice is empty.
    pub fn global_pool(&self, tape: &Tape, store: &ParamStore, slice: &GraphSlice, ent: Var, rel: Var) -> Result<Var> {
        if slice.is_empty() {
            return Ok(tape.constant(Tensor::zeros(1, self.dim)));
        }
        let msgs = self.aggregate_slice(tape, store, slice, ent, rel)?;
        tape.max_pool(msgs.subject_msgs)
    }
}

struct NodeStates {
    h: Var,
    index: BTreeMap<usize, usize>,
}

impl NodeStates {
    fn local(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|i| self.index[i]).collect()
    }
}

fn attention(
    tape: &Tape,
    store: &ParamStore,
    aw: &AttentiveWeights,
    e_s: Var,
    e_r: Var,
    e_o: Var,
    groups: &[usize],
    num_groups: usize,
) -> Result<Var> {
    let w = tape.param(store, aw.w);
    let v = tape.param(store, aw.v);
    let x = tape.concat_cols(&[e_s, e_r, e_o])?;
    let score = tape.matmul_t(tape.tanh(tape.matmul_t(x, w)?), v)?;
    tape.segment_softmax(score, groups, num_groups)
}

fn average_over_relations(tape: &Tape, pair_msgs: Var, pairs: &[(usize, usize)], subjects: &[usize]) -> Result<Var> {
    let seg: Vec<usize> = pairs
        .iter()
        .map(|(s, _)| subjects.binary_search(s).expect("pair subject is active"))
        .collect();
    let mut counts = vec![0usize; subjects.len()];
    for &g in &seg {
        counts[g] += 1;
    }
    let sum = tape.segment_sum(pair_msgs, &seg, subjects.len())?;
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c as f64).collect();
    tape.row_scale(sum, tape.constant(Tensor::column(inv)))
}

/// Mean of the rows of `neighbors` (`[n, d]`); zeros for `n = 0`.
pub fn mean_aggregate(tape: &Tape, neighbors: Var) -> Result<Var> {
    let shape = tape.shape(neighbors);
    let n = shape[0];
    let sum = tape.segment_sum(neighbors, &vec![0; n], 1)?;
    Ok(if n == 0 { sum } else { tape.scale(sum, 1.0 / n as f64) })
}

/// `Σ α_o e_o` with `α = softmax(vᵀ tanh(W [e_s; e_r; e_o]))`; zeros when
/// there are no neighbors. `e_s` and `e_r` are `[1, d]`.
pub fn attentive_aggregate(
    tape: &Tape,
    store: &ParamStore,
    weights: &AttentiveWeights,
    e_s: Var,
    e_r: Var,
    neighbors: Var,
) -> Result<Var> {
    let n = tape.shape(neighbors)[0];
    let d = tape.shape(e_s)[1];
    if n == 0 {
        return Ok(tape.constant(Tensor::zeros(1, d)));
    }
    let rows = vec![0; n];
    let es = tape.gather_rows(e_s, &rows)?;
    let er = tape.gather_rows(e_r, &rows)?;
    let alpha = attention(tape, store, weights, es, er, neighbors, &rows, 1)?;
    tape.segment_sum(tape.row_scale(neighbors, alpha)?, &rows, 1)
}

/// Top-layer relational GCN state of `s` in `slice`.
pub fn rgcn_aggregate(
    tape: &Tape,
    store: &ParamStore,
    agg: &Aggregator,
    slice: &GraphSlice,
    s: usize,
    ent: Var,
) -> Result<Var> {
    let AggregatorWeights::Rgcn(rw) = &agg.weights else {
        return Err(Error::Config("rgcn_aggregate needs an rgcn aggregator".into()));
    };
    if !slice.events().iter().any(|e| e.subject == s || e.object == s) {
        // isolated node: a single self-loop pass per layer
        let mut h = tape.gather_rows(ent, &[s])?;
        for layer in &rw.layers {
            let pre = tape.matmul_t(h, tape.param(store, layer.self_loop))?;
            h = match agg.activation {
                Activation::Relu => tape.relu(pre),
                Activation::Identity => pre,
            };
        }
        return Ok(h);
    }
    let states = agg.rgcn_states(tape, store, rw, slice, ent)?;
    tape.gather_rows(states.h, &[states.index[&s]])
}

#[cfg(test)]
mod tests;
