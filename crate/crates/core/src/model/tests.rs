use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{grad_check, GradCheckOptions};

fn config(d: usize, agg: AggregatorKind, global: AggregatorKind) -> ModelConfig {
    ModelConfig {
        d,
        m: 3,
        aggregator: agg,
        global_aggregator: global,
        activation: Activation::Relu,
        lambda1: 0.1,
        lambda2: 0.1,
        seed: 7,
    }
}

fn rgcn2() -> AggregatorKind {
    AggregatorKind::Rgcn { layers: 2, blocks: 2 }
}

fn slice(t: usize, triples: &[(usize, usize, usize)]) -> GraphSlice {
    GraphSlice::new(t, triples.iter().map(|&(s, r, o)| Event::new(s, r, o, t)).collect())
}

fn set_all(model: &mut Model, ids: &[ParamId], v: f64) {
    for &id in ids {
        model.store.data_mut(id).iter_mut().for_each(|x| *x = v);
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Direct elementwise GRU formula.
fn gru_oracle(model: &Model, w: &GruWeights, a: &[f64], h: &[f64]) -> Vec<f64> {
    let d = h.len();
    let mv = |id: ParamId, x: &[f64], i: usize| -> f64 {
        let m = model.store.get(id);
        (0..x.len()).map(|j| m.data()[i * x.len() + j] * x[j]).sum()
    };
    let z: Vec<f64> = (0..d).map(|i| sig(mv(w.wz, a, i) + mv(w.uz, h, i))).collect();
    let r: Vec<f64> = (0..d).map(|i| sig(mv(w.wr, a, i) + mv(w.ur, h, i))).collect();
    let rh: Vec<f64> = (0..d).map(|i| r[i] * h[i]).collect();
    (0..d)
        .map(|i| {
            let c = (mv(w.wh, a, i) + mv(w.uh, &rh, i)).tanh();
            (1.0 - z[i]) * h[i] + z[i] * c
        })
        .collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn gru_zero_weights_halve_state() {
    let mut model = Model::new(config(3, AggregatorKind::Mean, AggregatorKind::Mean), 4, 2).unwrap();
    let ids = model.gru2.ids();
    set_all(&mut model, &ids, 0.0);
    let h = [0.4, -1.0, 2.0];
    let out = model.gru_step(GruKind::Pair, &[0.3; 12], &h).unwrap();
    assert!(close(&out, &[0.2, -0.5, 1.0], 1e-15));
    let out = model.gru_step(GruKind::Pair, &[0.3; 12], &[0.0; 3]).unwrap();
    assert_eq!(out, vec![0.0; 3]);
}

#[test]
fn gru_matches_formula() {
    let model = Model::new(config(3, AggregatorKind::Mean, AggregatorKind::Mean), 4, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (kind, w, width) in [
        (GruKind::Global, model.gru1, 3),
        (GruKind::Pair, model.gru2, 12),
        (GruKind::Subject, model.gru3, 9),
    ] {
        let a: Vec<f64> = (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = model.gru_step(kind, &a, &h).unwrap();
        assert!(close(&got, &gru_oracle(&model, &w, &a, &h), 1e-12));
    }
    assert!(matches!(
        model.gru_step(GruKind::Subject, &[0.0; 12], &[0.0; 3]),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn empty_slice_only_ticks_global_state() {
    let model = Model::new(config(4, rgcn2(), rgcn2()), 5, 3).unwrap();
    let mut state = model.empty_state();
    model.encode_slice(&mut state, &slice(0, &[(0, 1, 2), (3, 0, 4)])).unwrap();
    let before = state.clone();
    model.encode_slice(&mut state, &slice(1, &[])).unwrap();
    let expect = model.gru_step(GruKind::Global, &[0.0; 4], &before.h_global).unwrap();
    assert!(close(&state.h_global, &expect, 1e-15));
    assert_ne!(state.h_global, before.h_global);
    assert_eq!(state.h_s, before.h_s);
    assert_eq!(state.h_sr, before.h_sr);
    assert_eq!(state.last_t, Some(1));
}

#[test]
fn single_event_updates_one_key_each() {
    let model = Model::new(config(4, rgcn2(), rgcn2()), 5, 3).unwrap();
    let mut state = model.empty_state();
    model.encode_slice(&mut state, &slice(0, &[(2, 1, 4)])).unwrap();
    assert_eq!(state.h_s.keys().copied().collect::<Vec<_>>(), vec![2]);
    assert_eq!(state.h_sr.keys().copied().collect::<Vec<_>>(), vec![(2, 1)]);

    let before = state.clone();
    model.encode_slice(&mut state, &slice(1, &[(0, 0, 1)])).unwrap();
    assert_eq!(state.h_s[&2], before.h_s[&2]);
    assert_eq!(state.h_sr[&(2, 1)], before.h_sr[&(2, 1)]);
    assert_eq!(state.h_s.len(), 2);
}

#[test]
fn timestamps_must_increase() {
    let model = Model::new(config(4, AggregatorKind::Mean, AggregatorKind::Mean), 5, 3).unwrap();
    let mut state = model.empty_state();
    model.encode_slice(&mut state, &slice(2, &[(0, 0, 1)])).unwrap();
    let err = model.encode_slice(&mut state, &slice(2, &[(0, 0, 1)])).unwrap_err();
    assert!(matches!(err, Error::NonIncreasingTime { time: 2, last: 2 }));
    assert_eq!(err.code(), "E_TIME_ORDER");
}

#[test]
fn window_keeps_last_m_slices() {
    let model = Model::new(config(4, AggregatorKind::Mean, AggregatorKind::Mean), 5, 3).unwrap();
    let mut state = model.empty_state();
    for t in 0..5 {
        model.encode_slice(&mut state, &slice(t, &[(0, 0, 1)])).unwrap();
    }
    let ts: Vec<usize> = state.window.iter().map(|s| s.t).collect();
    assert_eq!(ts, vec![2, 3, 4]);
}

/// Plain-loop encoder for the mean aggregator on both paths.
struct Oracle<'a> {
    model: &'a Model,
    h: Vec<f64>,
    hs: BTreeMap<usize, Vec<f64>>,
    hsr: BTreeMap<(usize, usize), Vec<f64>>,
}

impl Oracle<'_> {
    fn row(&self, id: ParamId, i: usize) -> Vec<f64> {
        self.model.store.get(id).row(i).to_vec()
    }

    fn mean_msgs(&self, sl: &GraphSlice, emb: ParamId) -> (BTreeMap<(usize, usize), Vec<f64>>, BTreeMap<usize, Vec<f64>>) {
        let d = self.h.len();
        let mut pair = BTreeMap::new();
        for (s, r) in sl.pairs() {
            let objs = sl.objects(s, r);
            let mut acc = vec![0.0; d];
            for &o in objs {
                for (a, b) in acc.iter_mut().zip(self.row(emb, o)) {
                    *a += b / objs.len() as f64;
                }
            }
            pair.insert((s, r), acc);
        }
        let mut subj = BTreeMap::new();
        for s in sl.subjects() {
            let rels = sl.relations_of(s);
            let mut acc = vec![0.0; d];
            for r in &rels {
                for (a, b) in acc.iter_mut().zip(&pair[&(s, *r)]) {
                    *a += b / rels.len() as f64;
                }
            }
            subj.insert(s, acc);
        }
        (pair, subj)
    }

    fn step(&mut self, sl: &GraphSlice) {
        let d = self.h.len();
        let m = self.model;
        let (_, gsub) = self.mean_msgs(sl, m.global_entity_emb);
        let mut pooled = vec![0.0; d];
        if !gsub.is_empty() {
            pooled = vec![f64::NEG_INFINITY; d];
            for v in gsub.values() {
                for (p, x) in pooled.iter_mut().zip(v) {
                    *p = p.max(*x);
                }
            }
        }
        self.h = gru_oracle(m, &m.gru1, &pooled, &self.h);
        let (pair, subj) = self.mean_msgs(sl, m.entity_emb);
        let zero = vec![0.0; d];
        for (s, g) in &subj {
            let a = [self.row(m.entity_emb, *s), g.clone(), self.h.clone()].concat();
            let prev = self.hs.get(s).unwrap_or(&zero).clone();
            self.hs.insert(*s, gru_oracle(m, &m.gru3, &a, &prev));
        }
        for ((s, r), g) in &pair {
            let a = [
                self.row(m.entity_emb, *s),
                self.row(m.relation_emb, *r),
                g.clone(),
                self.h.clone(),
            ]
            .concat();
            let prev = self.hsr.get(&(*s, *r)).unwrap_or(&zero).clone();
            self.hsr.insert((*s, *r), gru_oracle(m, &m.gru2, &a, &prev));
        }
    }
}

#[test]
fn three_slices_match_unrolled_oracle() {
    let model = Model::new(config(3, AggregatorKind::Mean, AggregatorKind::Mean), 4, 2).unwrap();
    let slices = [
        slice(0, &[(0, 0, 1), (0, 0, 2), (1, 1, 3)]),
        slice(1, &[(2, 1, 0), (0, 1, 3), (0, 0, 1)]),
        slice(2, &[(3, 0, 2), (1, 1, 0), (1, 0, 0)]),
    ];
    let mut state = model.empty_state();
    let mut oracle = Oracle {
        model: &model,
        h: vec![0.0; 3],
        hs: BTreeMap::new(),
        hsr: BTreeMap::new(),
    };
    for sl in &slices {
        model.encode_slice(&mut state, sl).unwrap();
        oracle.step(sl);
    }
    assert!(close(&state.h_global, &oracle.h, 1e-12));
    assert_eq!(state.h_s.len(), oracle.hs.len());
    for (k, v) in &oracle.hs {
        assert!(close(&state.h_s[k], v, 1e-12), "h_s[{k}]");
    }
    assert_eq!(state.h_sr.len(), oracle.hsr.len());
    for (k, v) in &oracle.hsr {
        assert!(close(&state.h_sr[k], v, 1e-12), "h_sr[{k:?}]");
    }
}

#[test]
fn scoped_encoding_matches_full_encoding() {
    let model = Model::new(config(4, rgcn2(), rgcn2()), 6, 3).unwrap();
    let slices = [
        slice(0, &[(0, 0, 1), (2, 1, 3), (4, 2, 5)]),
        slice(1, &[(0, 1, 2), (2, 1, 3), (5, 0, 0)]),
    ];
    let mut full = model.empty_state();
    for sl in &slices {
        model.encode_slice(&mut full, sl).unwrap();
    }
    let base = model.empty_state();
    let tape = Tape::new();
    let mut ts = TapeState::new(&tape, &base);
    let scope = Scope::for_events(&[Event::new(2, 1, 0, 2)]);
    for sl in &slices {
        model.encode_on_tape(&tape, &model.store, sl, &mut ts, &scope).unwrap();
    }
    let part = ts.commit(&tape);
    assert_eq!(part.h_global, full.h_global);
    assert_eq!(part.h_s.keys().copied().collect::<Vec<_>>(), vec![2]);
    assert_eq!(part.h_s[&2], full.h_s[&2]);
    assert_eq!(part.h_sr[&(2, 1)], full.h_sr[&(2, 1)]);
}

#[test]
fn identical_rows_give_uniform_heads() {
    let mut model = Model::new(config(4, rgcn2(), rgcn2()), 5, 3).unwrap();
    let mut state = model.empty_state();
    model.encode_slice(&mut state, &slice(0, &[(0, 1, 2), (3, 0, 4)])).unwrap();
    for id in [model.w_o, model.w_r] {
        let t = model.store.get(id);
        let (n, cols) = (t.rows(), t.cols());
        let same = Tensor::matrix(n, cols, t.row(0).repeat(n));
        model.store.set(id, same).unwrap();
    }
    let po = model.score_objects(0, 1, &state).unwrap();
    assert!(po.probs.iter().all(|p| (p - 0.2).abs() < 1e-12));
    let pr = model.score_relations(3, &state).unwrap();
    assert!(pr.probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
    // zero global state
    let ps = model.score_subjects(&model.empty_state());
    assert!(ps.probs.iter().all(|p| (p - 0.2).abs() < 1e-15));
}

#[test]
fn heads_match_direct_softmax() {
    let mut model = Model::new(config(2, AggregatorKind::Mean, AggregatorKind::Mean), 3, 2).unwrap();
    let put = |store: &mut ParamStore, id, rows: usize, cols: usize, v: &[f64]| {
        store.set(id, Tensor::matrix(rows, cols, v.to_vec())).unwrap();
    };
    put(&mut model.store, model.entity_emb, 3, 2, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
    put(&mut model.store, model.relation_emb, 2, 2, &[0.7, -0.1, 0.2, 0.3]);
    put(&mut model.store, model.w_o, 3, 6, &[
        0.1, 0.2, 0.3, 0.4, 0.5, 0.6, //
        -0.1, 0.0, 0.2, -0.3, 0.1, 0.0, //
        0.3, -0.2, 0.1, 0.0, -0.4, 0.2,
    ]);
    put(&mut model.store, model.w_r, 2, 4, &[0.5, -0.5, 0.25, 0.0, -0.2, 0.1, 0.0, 0.3]);
    put(&mut model.store, model.w_s, 3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, -1.0]);
    let mut state = model.empty_state();
    state.h_sr.insert((1, 0), vec![0.2, -0.4]);
    state.h_s.insert(1, vec![-0.3, 0.6]);
    state.h_global = vec![0.5, -0.25];

    let softmax = |z: &[f64]| {
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    // [e_s : e_r : h_sr] = [-0.3, 0.4, 0.7, -0.1, 0.2, -0.4]
    let zo = [
        -0.03 + 0.08 + 0.21 - 0.04 + 0.1 - 0.24,
        0.03 + 0.0 + 0.14 + 0.03 + 0.02 + 0.0,
        -0.09 - 0.08 + 0.07 + 0.0 - 0.08 - 0.08,
    ];
    let po = model.score_objects(1, 0, &state).unwrap();
    assert!(close(&po.probs, &softmax(&zo), 1e-12));
    // [e_s : h_s] = [-0.3, 0.4, -0.3, 0.6]
    let zr = [-0.15 - 0.2 - 0.075 + 0.0, 0.06 + 0.04 + 0.0 + 0.18];
    let pr = model.score_relations(1, &state).unwrap();
    assert!(close(&pr.probs, &softmax(&zr), 1e-12));
    let ps = model.score_subjects(&state);
    assert!(close(&ps.probs, &softmax(&[0.5, -0.25, -0.25]), 1e-12));

    let joint = model.joint_event_probability(1, 0, 2, &state).unwrap();
    assert!((joint - ps.prob(1) * pr.prob(0) * po.prob(2)).abs() < 1e-15);
    assert!(joint <= ps.prob(1).min(pr.prob(0)).min(po.prob(2)));

    // unseen subject: only the static part contributes
    let pr0 = model.score_relations(0, &state).unwrap();
    assert!(pr0.probs.iter().all(|p| p.is_finite() && *p > 0.0));
    assert!(matches!(model.score_objects(3, 0, &state), Err(Error::IdOutOfRange { .. })));
    assert!(matches!(model.score_relations(0, &state).map(|_| ()), Ok(())));
    assert!(matches!(model.score_objects(0, 2, &state), Err(Error::IdOutOfRange { .. })));
}

#[test]
fn uniform_heads_give_uniform_joint() {
    let mut model = Model::new(config(3, AggregatorKind::Mean, AggregatorKind::Mean), 4, 2).unwrap();
    let heads = [model.w_o, model.w_r, model.w_s];
    set_all(&mut model, &heads, 0.0);
    let p = model.joint_event_probability(1, 1, 3, &model.empty_state()).unwrap();
    assert!((p - 1.0 / 32.0).abs() < 1e-15);
}

#[test]
fn joint_sums_to_one_over_all_triples() {
    for kind in [AggregatorKind::Mean, AggregatorKind::Attentive, rgcn2()] {
        let model = Model::new(config(4, kind, rgcn2()), 8, 4).unwrap();
        let mut state = model.empty_state();
        model.encode_slice(&mut state, &slice(0, &[(0, 1, 2), (3, 0, 4), (7, 3, 6)])).unwrap();
        model.encode_slice(&mut state, &slice(1, &[(0, 2, 5), (3, 0, 4)])).unwrap();
        let mut total = 0.0;
        for s in 0..8 {
            for r in 0..4 {
                for o in 0..8 {
                    total += model.joint_event_probability(s, r, o, &state).unwrap();
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-10, "{total}");
    }
}

fn toy_slices() -> Vec<GraphSlice> {
    vec![
        slice(0, &[(0, 0, 1), (1, 1, 2), (2, 2, 3), (0, 0, 4)]),
        slice(1, &[(0, 1, 1), (3, 2, 4), (4, 0, 0), (1, 1, 2)]),
        slice(2, &[(0, 0, 1), (1, 2, 3), (3, 2, 4)]),
    ]
}

/// Replays the first slices and scores the last on one tape.
fn toy_loss(model: &Model, tape: &Tape, store: &ParamStore, slices: &[GraphSlice]) -> Result<Var> {
    let base = model.empty_state();
    let mut ts = TapeState::new(tape, &base);
    let (last, prefix) = slices.split_last().unwrap();
    for sl in prefix {
        model.encode_on_tape(tape, store, sl, &mut ts, &Scope::All)?;
    }
    let l = model.head_losses(tape, store, &ts, last.events())?;
    let rel = tape.scale(l.relation, model.config.lambda1);
    let subj = tape.scale(l.subject, model.config.lambda2);
    tape.add(tape.add(l.object, rel)?, subj)
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    for kind in [AggregatorKind::None, AggregatorKind::Mean, AggregatorKind::Attentive, rgcn2()] {
        let model = Model::new(config(4, kind, rgcn2()), 5, 3).unwrap();
        let ids: Vec<ParamId> = model.store.ids().collect();
        let slices = toy_slices();
        let report = grad_check(&model.store, &ids, GradCheckOptions::default(), |t, s| {
            toy_loss(&model, t, s, &slices)
        })
        .unwrap();
        assert!(report.passed(), "{}: {:?}", kind.name(), report.params);
    }
}

#[test]
fn head_losses_match_distributions() {
    let model = Model::new(config(4, rgcn2(), rgcn2()), 5, 3).unwrap();
    let slices = toy_slices();
    let mut state = model.empty_state();
    for sl in &slices[..2] {
        model.encode_slice(&mut state, sl).unwrap();
    }
    let tape = Tape::inference();
    let ts = TapeState::new(&tape, &state);
    let l = model.head_losses(&tape, &model.store, &ts, slices[2].events()).unwrap();
    let (mut o, mut r, mut s) = (0.0, 0.0, 0.0);
    for e in slices[2].events() {
        o -= model.score_objects(e.subject, e.relation, &state).unwrap().prob(e.object).ln();
        r -= model.score_relations(e.subject, &state).unwrap().prob(e.relation).ln();
        s -= model.score_subjects(&state).prob(e.subject).ln();
    }
    assert!((tape.value(l.object).item() - o).abs() < 1e-12);
    assert!((tape.value(l.relation).item() - r).abs() < 1e-12);
    assert!((tape.value(l.subject).item() - s).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip() {
    let model = Model::new(config(4, AggregatorKind::Attentive, rgcn2()), 5, 3).unwrap();
    let bytes = encode_checkpoint(&model).unwrap();
    assert_eq!(&bytes[..8], b"RENETCK1");
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.config, model.config);
    for (id, name, t) in model.store.iter() {
        assert_eq!(back.store.name(id), name);
        assert_eq!(back.store.get(id), t);
    }

    let mut other = model.clone();
    other.store.data_mut(other.w_o)[0] = 123.5;
    let back = decode_checkpoint(&encode_checkpoint(&other).unwrap()).unwrap();
    assert_eq!(back.store.get(back.w_o).data()[0], 123.5);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().store.get(model.w_s), model.store.get(model.w_s));
}

#[test]
fn construction_is_seeded() {
    let a = Model::new(config(4, rgcn2(), rgcn2()), 5, 3).unwrap();
    let b = Model::new(config(4, rgcn2(), rgcn2()), 5, 3).unwrap();
    assert_eq!(encode_checkpoint(&a).unwrap(), encode_checkpoint(&b).unwrap());
    let mut c = config(4, rgcn2(), rgcn2());
    c.seed = 8;
    let c = Model::new(c, 5, 3).unwrap();
    assert_ne!(a.store.get(a.entity_emb), c.store.get(c.entity_emb));
}
