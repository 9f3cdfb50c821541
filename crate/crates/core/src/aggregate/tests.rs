use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Event;
use crate::numerics::{grad_check, GradCheckOptions};

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn rows(t: &Tape, data: &[&[f64]]) -> Var {
    let c = data.first().map_or(2, |r| r.len());
    let flat: Vec<f64> = data.iter().flat_map(|r| r.iter().copied()).collect();
    t.constant(Tensor::matrix(data.len(), c, flat))
}

#[test]
fn mean_examples() {
    let t = Tape::inference();
    let v = [0.3, -0.2];
    let m = mean_aggregate(&t, rows(&t, &[&v, &v, &v])).unwrap();
    for (a, b) in t.value(m).data().iter().zip(v) {
        assert!((a - b).abs() < 1e-15);
    }
    let m = mean_aggregate(&t, rows(&t, &[])).unwrap();
    assert_eq!(t.value(m).data(), &[0.0, 0.0]);
    let m = mean_aggregate(&t, rows(&t, &[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
    assert_eq!(t.value(m).data(), &[0.5, 0.5]);
    // neighbors of different widths cannot be stacked
    let a = t.constant(Tensor::row_vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
    assert!(t.select_rows(&[(a, 0), (b, 0)], 2).is_err());
}

fn attn_setup(d: usize, seed: u64) -> (ParamStore, AttentiveWeights) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let w = AttentiveWeights {
        w: store.add("w", rand_t(&mut rng, d, 3 * d)),
        v: store.add("v", rand_t(&mut rng, 1, d)),
    };
    (store, w)
}

#[test]
fn attentive_single_neighbor_is_identity() {
    let (store, aw) = attn_setup(3, 1);
    let t = Tape::inference();
    let es = rows(&t, &[&[0.1, 0.2, 0.3]]);
    let er = rows(&t, &[&[-0.5, 0.0, 0.4]]);
    let nb = rows(&t, &[&[0.7, -0.8, 0.9]]);
    let out = attentive_aggregate(&t, &store, &aw, es, er, nb).unwrap();
    assert_eq!(t.value(out).data(), &[0.7, -0.8, 0.9]);
    let empty = attentive_aggregate(&t, &store, &aw, es, er, t.constant(Tensor::zeros(0, 3))).unwrap();
    assert_eq!(t.value(empty).data(), &[0.0; 3]);
}

#[test]
fn attentive_with_zero_w_is_mean() {
    let (mut store, aw) = attn_setup(2, 2);
    store.set(aw.w, Tensor::zeros(2, 6)).unwrap();
    let t = Tape::inference();
    let es = rows(&t, &[&[0.1, 0.2]]);
    let er = rows(&t, &[&[0.3, 0.4]]);
    let nb = rows(&t, &[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]]);
    let a = t.value(attentive_aggregate(&t, &store, &aw, es, er, nb).unwrap());
    let m = t.value(mean_aggregate(&t, nb).unwrap());
    for (x, y) in a.data().iter().zip(m.data()) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn attentive_matches_scalar_oracle() {
    let d = 3;
    let (store, aw) = attn_setup(d, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let es: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let er: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nb: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();

    let w = store.get(aw.w).data();
    let v = store.get(aw.v).data();
    let mut scores = Vec::new();
    for o in &nb {
        let x: Vec<f64> = es.iter().chain(&er).chain(o).copied().collect();
        let mut s = 0.0;
        for i in 0..d {
            let mut z = 0.0;
            for j in 0..3 * d {
                z += w[i * 3 * d + j] * x[j];
            }
            s += v[i] * z.tanh();
        }
        scores.push(s);
    }
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let z: f64 = ex.iter().sum();
    let alpha: Vec<f64> = ex.iter().map(|e| e / z).collect();
    assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(alpha.iter().all(|&a| a > 0.0 && a < 1.0));
    let oracle: Vec<f64> = (0..d).map(|k| (0..3).map(|i| alpha[i] * nb[i][k]).sum()).collect();

    let t = Tape::inference();
    let out = attentive_aggregate(
        &t,
        &store,
        &aw,
        rows(&t, &[&es]),
        rows(&t, &[&er]),
        rows(&t, &[&nb[0], &nb[1], &nb[2]]),
    )
    .unwrap();
    for (a, b) in t.value(out).data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

fn build(kind: AggregatorKind, d: usize, nr: usize, seed: u64) -> (ParamStore, Aggregator) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let agg = Aggregator::new(kind, d, nr, &mut store, "agg", &mut rng).unwrap();
    (store, agg)
}

fn random_slice(rng: &mut ChaCha8Rng, ne: usize, nr: usize, n: usize) -> GraphSlice {
    let ev = (0..n)
        .map(|_| Event::new(rng.gen_range(0..ne), rng.gen_range(0..nr), rng.gen_range(0..ne), 0))
        .collect();
    GraphSlice::new(0, ev)
}

#[test]
fn rgcn_zero_weights_give_zero() {
    let (mut store, agg) = build(AggregatorKind::rgcn(4), 4, 2, 1);
    for id in agg.param_ids() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(shape[0], shape[1])).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let slice = random_slice(&mut rng, 6, 2, 8);
    let t = Tape::inference();
    let ent = t.constant(rand_t(&mut rng, 6, 4));
    let s = slice.events()[0].subject;
    let out = rgcn_aggregate(&t, &store, &agg, &slice, s, ent).unwrap();
    assert_eq!(t.value(out).data(), &[0.0; 4]);
}

#[test]
fn rgcn_parameter_count_per_relation() {
    for (d, b) in [(8, 4), (8, 2), (8, 1), (6, 3)] {
        let (store, agg) = build(AggregatorKind::Rgcn { layers: 2, blocks: b }, d, 3, 0);
        let AggregatorWeights::Rgcn(rw) = &agg.weights else { unreachable!() };
        for l in &rw.layers {
            assert_eq!(store.get(l.rel).cols(), d * d / b);
        }
    }
}

#[test]
fn rgcn_single_edge_hand_oracle() {
    let d = 2;
    let (mut store, mut agg) = build(AggregatorKind::Rgcn { layers: 1, blocks: 1 }, d, 1, 0);
    agg.activation = Activation::Identity;
    let AggregatorWeights::Rgcn(rw) = agg.weights.clone() else { unreachable!() };
    store.set(rw.layers[0].rel, Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0])).unwrap();
    store.set(rw.layers[0].self_loop, Tensor::matrix(2, 2, vec![0.5, 0.0, -1.0, 2.0])).unwrap();
    let slice = GraphSlice::new(0, vec![Event::new(0, 0, 1, 0)]);
    let t = Tape::inference();
    let ent = t.constant(Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 0.25]));
    let out = t.value(rgcn_aggregate(&t, &store, &agg, &slice, 0, ent).unwrap());
    // W_r e_1 = [1*0.5+2*0.25, 3*0.5+4*0.25] = [1.0, 2.5]; W_0 e_0 = [0.5, -3.0]
    assert_eq!(out.data(), &[1.5, -0.5]);

    // isolated node: W_0 e_s only
    let out = t.value(rgcn_aggregate(&t, &store, &agg, &GraphSlice::new(0, vec![]), 1, ent).unwrap());
    assert_eq!(out.data(), &[0.25, 0.0]);
}

/// Dense relational GCN with one full matrix per relation, stored in the
/// same row-major layout as a single-block weight row.
fn dense_rgcn(
    slice: &GraphSlice,
    ent: &Tensor,
    layers: &[(Tensor, Tensor)],
    d: usize,
    relu: bool,
) -> BTreeMap<usize, Vec<f64>> {
    let mut nodes: Vec<usize> = slice.events().iter().flat_map(|e| [e.subject, e.object]).collect();
    nodes.sort();
    nodes.dedup();
    let mut h: BTreeMap<usize, Vec<f64>> = nodes.iter().map(|&n| (n, ent.row(n).to_vec())).collect();
    let matvec = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += w[i * d + j] * x[j];
                }
                acc
            })
            .collect()
    };
    for (rel, self_w) in layers {
        let mut next = BTreeMap::new();
        for &n in &nodes {
            let mut agg = vec![0.0; d];
            for e in slice.events().iter().filter(|e| e.subject == n) {
                let c = slice.objects(n, e.relation).len() as f64;
                let m = matvec(rel.row(e.relation), &h[&e.object]);
                for k in 0..d {
                    agg[k] += m[k] * (1.0 / c);
                }
            }
            let sm = matvec(self_w.data(), &h[&n]);
            let out: Vec<f64> = (0..d)
                .map(|k| {
                    let v = agg[k] + sm[k];
                    if relu && v <= 0.0 {
                        0.0
                    } else {
                        v
                    }
                })
                .collect();
            next.insert(n, out);
        }
        h = next;
    }
    h
}

#[test]
fn single_block_matches_dense_bitwise() {
    let d = 5;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (store, agg) = build(AggregatorKind::Rgcn { layers: 2, blocks: 1 }, d, 3, seed);
        let AggregatorWeights::Rgcn(rw) = &agg.weights else { unreachable!() };
        let n = rng.gen_range(1..15);
        let slice = random_slice(&mut rng, 9, 3, n);
        let ent_t = rand_t(&mut rng, 9, d);
        let layers: Vec<(Tensor, Tensor)> = rw
            .layers
            .iter()
            .map(|l| (store.get(l.rel).clone(), store.get(l.self_loop).clone()))
            .collect();
        let oracle = dense_rgcn(&slice, &ent_t, &layers, d, true);
        let t = Tape::inference();
        let ent = t.constant(ent_t.clone());
        let msgs = agg.aggregate_slice(&t, &store, &slice, ent, ent).unwrap();
        let sm = t.value(msgs.subject_msgs);
        for (i, s) in msgs.subjects.iter().enumerate() {
            let got = sm.row(i);
            let want = &oracle[s];
            assert!(
                got.iter().zip(want).all(|(a, b)| a.to_bits() == b.to_bits()),
                "seed {seed} subject {s}: {got:?} vs {want:?}"
            );
        }
    }
}

#[test]
fn global_pool_examples() {
    let (store, agg) = build(AggregatorKind::Mean, 2, 1, 0);
    let t = Tape::inference();
    let ent = t.constant(Tensor::matrix(4, 2, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
    let rel = t.constant(Tensor::zeros(1, 2));
    let one = GraphSlice::new(0, vec![Event::new(0, 0, 2, 0)]);
    let g = t.value(agg.global_pool(&t, &store, &one, ent, rel).unwrap());
    assert_eq!(g.data(), &[1.0, 0.0]);
    let two = GraphSlice::new(0, vec![Event::new(0, 0, 2, 0), Event::new(1, 0, 3, 0)]);
    let g = t.value(agg.global_pool(&t, &store, &two, ent, rel).unwrap());
    assert_eq!(g.data(), &[1.0, 1.0]);
    let g = t.value(agg.global_pool(&t, &store, &GraphSlice::new(0, vec![]), ent, rel).unwrap());
    assert_eq!(g.data(), &[0.0, 0.0]);
}

#[test]
fn global_pool_matches_loop_oracle() {
    let d = 3;
    for kind in [AggregatorKind::Mean, AggregatorKind::Attentive, AggregatorKind::Rgcn { layers: 2, blocks: 3 }] {
        let (store, agg) = build(kind, d, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut ev = Vec::new();
        for s in 0..4 {
            for _ in 0..rng.gen_range(1..4) {
                ev.push(Event::new(s, rng.gen_range(0..2), rng.gen_range(0..8), 0));
            }
        }
        let slice = GraphSlice::new(0, ev);
        let t = Tape::inference();
        let ent = t.constant(rand_t(&mut rng, 8, d));
        let rel = t.constant(rand_t(&mut rng, 2, d));
        let g = t.value(agg.global_pool(&t, &store, &slice, ent, rel).unwrap());
        let msgs = agg.aggregate_slice(&t, &store, &slice, ent, rel).unwrap();
        let sm = t.value(msgs.subject_msgs);
        assert_eq!(msgs.subjects, vec![0, 1, 2, 3]);
        let mut want = vec![f64::NEG_INFINITY; d];
        for i in 0..4 {
            for k in 0..d {
                want[k] = want[k].max(sm.row(i)[k]);
            }
        }
        assert_eq!(g.data(), &want[..]);

        // the subject message averages the per-relation messages
        if !matches!(kind, AggregatorKind::Rgcn { .. }) {
            let pm = t.value(msgs.pair_msgs);
            for (i, &s) in msgs.subjects.iter().enumerate() {
                let rows: Vec<usize> = (0..msgs.pairs.len()).filter(|&p| msgs.pairs[p].0 == s).collect();
                for k in 0..d {
                    let avg = rows.iter().map(|&p| pm.row(p)[k]).sum::<f64>() / rows.len() as f64;
                    assert!((sm.row(i)[k] - avg).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn aggregators_ignore_event_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ev: Vec<Event> = (0..12)
        .map(|_| Event::new(rng.gen_range(0..5), rng.gen_range(0..2), rng.gen_range(0..5), 0))
        .collect();
    let mut rev = ev.clone();
    rev.reverse();
    let ent_t = rand_t(&mut rng, 5, 4);
    let rel_t = rand_t(&mut rng, 2, 4);
    for kind in [AggregatorKind::Mean, AggregatorKind::Attentive, AggregatorKind::rgcn(4)] {
        let (store, agg) = build(kind, 4, 2, 9);
        let run = |events: Vec<Event>| {
            let t = Tape::inference();
            let (ent, rel) = (t.constant(ent_t.clone()), t.constant(rel_t.clone()));
            let m = agg.aggregate_slice(&t, &store, &GraphSlice::new(0, events), ent, rel).unwrap();
            (t.value(m.pair_msgs).as_ref().clone(), t.value(m.subject_msgs).as_ref().clone())
        };
        assert_eq!(run(ev.clone()), run(rev.clone()));
    }
}

#[test]
fn aggregator_gradients_match_finite_differences() {
    let d = 4;
    for kind in [AggregatorKind::Mean, AggregatorKind::Attentive, AggregatorKind::Rgcn { layers: 2, blocks: 2 }] {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let ent_id = store.add("ent", rand_t(&mut rng, 5, d));
        let rel_id = store.add("rel", rand_t(&mut rng, 3, d));
        let agg = Aggregator::new(kind, d, 3, &mut store, "agg", &mut rng).unwrap();
        let slice = random_slice(&mut rng, 5, 3, 9);
        let ids: Vec<ParamId> = store.ids().collect();
        let target = rand_t(&mut rng, 1, d);
        let rep = grad_check(&store, &ids, GradCheckOptions::default(), |t, st| {
            let ent = t.param(st, ent_id);
            let rel = t.param(st, rel_id);
            let m = agg.aggregate_slice(t, st, &slice, ent, rel)?;
            let g = agg.global_pool(t, st, &slice, ent, rel)?;
            let tg = t.constant(target.clone());
            let a = t.sum(t.mul(t.tanh(m.pair_msgs), t.tanh(m.pair_msgs))?);
            let b = t.sum(t.mul(g, tg)?);
            let c = t.sum(t.sigmoid(m.subject_msgs));
            t.add(t.add(a, b)?, c)
        })
        .unwrap();
        assert!(rep.passed(), "{kind:?}: {:?}", rep.params);
    }
}
