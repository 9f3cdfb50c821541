use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn check(store: &ParamStore, f: impl Fn(&Tape, &ParamStore) -> crate::Result<Var>) -> f64 {
    let ids: Vec<ParamId> = store.ids().collect();
    let rep = grad_check(store, &ids, GradCheckOptions::default(), f).unwrap();
    rep.max_rel_error()
}

#[test]
fn concat_values() {
    let t = Tape::inference();
    let a = t.constant(Tensor::row_vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::row_vector(vec![3.0]));
    let c = t.concat_cols(&[a, b]).unwrap();
    assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn max_pool_values() {
    let t = Tape::inference();
    let a = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
    let m = t.max_pool(a).unwrap();
    assert_eq!(t.value(m).data(), &[1.0, 1.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_matrix(&mut rng, 2, 3);
    let b = rand_matrix(&mut rng, 3, 2);
    let t = Tape::inference();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let c = t.value(t.matmul(va, vb).unwrap());
    for i in 0..2 {
        for j in 0..2 {
            let mut s = 0.0;
            for p in 0..3 {
                s += a.data()[i * 3 + p] * b.data()[p * 2 + j];
            }
            assert!((c.data()[i * 2 + j] - s).abs() < 1e-14);
        }
    }
    // matmul_t against the explicit transpose
    let bt = t.constant(b.transpose());
    let c2 = t.value(t.matmul_t(va, bt).unwrap());
    assert_eq!(c.data(), c2.data());
}

#[test]
fn shape_errors_name_primitive() {
    let t = Tape::inference();
    let a = t.constant(Tensor::zeros(2, 3));
    let b = t.constant(Tensor::zeros(2, 3));
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    assert!(t.add(a, t.constant(Tensor::zeros(3, 2))).is_err());
}

#[test]
fn cross_entropy_values() {
    let t = Tape::inference();
    let l = t.constant(Tensor::row_vector(vec![0.0; 4]));
    let ce = t.softmax_cross_entropy(l, &[2]).unwrap();
    assert!((t.value(ce).item() - 4f64.ln()).abs() < 1e-12);

    let l = t.constant(Tensor::row_vector(vec![10.0, -10.0]));
    let ce = t.value(t.softmax_cross_entropy(l, &[0]).unwrap()).item();
    // ln(1 + e^-20)
    let oracle = (-20f64).exp().ln_1p();
    assert!((ce - oracle).abs() < 1e-20);
    assert!((ce - 2.061153622e-9).abs() < 1e-17);

    let l = t.constant(Tensor::row_vector(vec![3.7]));
    assert_eq!(
        t.value(t.softmax_cross_entropy(l, &[0]).unwrap()).item(),
        0.0
    );

    let l = t.constant(Tensor::row_vector(vec![0.0; 3]));
    assert!(matches!(
        t.softmax_cross_entropy(l, &[3]),
        Err(crate::Error::TargetOutOfRange { .. })
    ));
}

#[test]
fn square_gradient() {
    let t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0), true);
    let y = t.mul(x, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap().item(), 6.0);
}

#[test]
fn unused_leaf_gets_zero() {
    let t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0), true);
    let unused = t.leaf(Tensor::row_vector(vec![1.0, 2.0]), true);
    let y = t.tanh(x);
    let g = t.backward(y).unwrap();
    assert_eq!(g.wrt(unused).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let t = Tape::new();
    let x = t.leaf(Tensor::row_vector(vec![1.0, 2.0]), true);
    assert!(matches!(t.backward(x), Err(crate::Error::NonScalarLoss(_))));
}

#[test]
fn backward_replay_is_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = Tape::new();
    let x = t.leaf(rand_matrix(&mut rng, 3, 4), true);
    let w = t.leaf(rand_matrix(&mut rng, 4, 5), true);
    let h = t.tanh(t.matmul(x, w).unwrap());
    let l = t.sum(t.softmax_cross_entropy(h, &[0, 4, 2]).unwrap());
    let g1 = t.backward(l).unwrap();
    let g2 = t.backward(l).unwrap();
    assert_eq!(g1.wrt(x), g2.wrt(x));
    assert_eq!(g1.wrt(w), g2.wrt(w));
}

#[test]
fn cross_entropy_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = ParamStore::new();
    let id = s.add("logits", rand_matrix(&mut rng, 3, 5));
    let err = check(&s, |t, st| {
        let l = t.param(st, id);
        Ok(t.sum(t.softmax_cross_entropy(l, &[1, 0, 4])?))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn every_primitive_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = ParamStore::new();
    let a = s.add("a", rand_matrix(&mut rng, 4, 3));
    let b = s.add("b", rand_matrix(&mut rng, 3, 4));
    let c = s.add("c", rand_matrix(&mut rng, 4, 3));
    let w = s.add("w", rand_matrix(&mut rng, 2, 2 * 2 * 2));
    let col = s.add("col", rand_matrix(&mut rng, 4, 1));
    let err = check(&s, |t, st| {
        let (a, b, c, w, col) = (
            t.param(st, a),
            t.param(st, b),
            t.param(st, c),
            t.param(st, w),
            t.param(st, col),
        );
        let ab = t.matmul(a, b)?; // 4x4
        let abt = t.matmul_t(a, c)?; // 4x4
        let x = t.add(ab, abt)?;
        let x = t.sub(x, t.scale(ab, 0.3))?;
        let x = t.mul(t.sigmoid(x), t.tanh(abt))?;
        let x = t.affine(x, 1.5, 0.2);
        let r = t.relu(t.add(a, c)?);
        let cat = t.concat_cols(&[x, r])?; // 4x7
        let g = t.gather_rows(cat, &[3, 0, 0, 2])?;
        let sel = t.select_rows(&[(g, 1), (cat, 2), (g, 3)], 7)?;
        let seg = t.segment_sum(cat, &[0, 1, 0, 2], 3)?;
        let mx = t.segment_max(cat, &[1, 1, 0, 1], 2)?;
        let mp = t.max_pool(seg)?;
        let sm = t.segment_softmax(col, &[0, 0, 1, 0], 2)?;
        let rs = t.row_scale(cat, sm)?;
        let bd = t.block_diag(a.min_cols_hack(t, 3, 4)?, w, &[1, 0, 1, 1], 2, 4)?;
        let soft = t.softmax(bd);
        let ce = t.softmax_cross_entropy(rs, &[0, 6, 3, 2])?;
        let parts = [
            t.sum(sel),
            t.sum(seg),
            t.sum(mx),
            t.sum(mp),
            t.sum(t.mul(soft, soft)?),
            t.sum(ce),
        ];
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = t.add(acc, p)?;
        }
        Ok(acc)
    });
    assert!(err < 1e-4, "{err}");
}

/// Test helper: first 4 columns of a `[4, 3]` param padded via concat.
trait PadCols {
    fn min_cols_hack(self, t: &Tape, have: usize, want: usize) -> crate::Result<Var>;
}

impl PadCols for Var {
    fn min_cols_hack(self, t: &Tape, have: usize, want: usize) -> crate::Result<Var> {
        let rows = t.shape(self)[0];
        let extra = t.constant(Tensor::matrix(
            rows,
            want - have,
            vec![0.25; rows * (want - have)],
        ));
        t.concat_cols(&[self, extra])
    }
}

#[test]
fn quadratic_check_is_tight() {
    let mut s = ParamStore::new();
    let id = s.add("x", Tensor::row_vector(vec![0.3, -0.7, 1.1]));
    let err = check(&s, |t, st| {
        let x = t.param(st, id);
        Ok(t.sum(t.mul(x, x)?))
    });
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_rejects_non_finite() {
    let mut s = ParamStore::new();
    let id = s.add("x", Tensor::row_vector(vec![1.0]));
    let r = grad_check(&s, &[id], GradCheckOptions::default(), |t, st| {
        let x = t.param(st, id);
        Ok(t.scale(x, f64::INFINITY))
    });
    assert!(r.is_err());
}

#[test]
fn frozen_params_have_no_gradient() {
    let mut s = ParamStore::new();
    let a = s.add("a", Tensor::row_vector(vec![1.0]));
    let b = s.add("b", Tensor::row_vector(vec![2.0]));
    let t = Tape::with_trainable([a]);
    let l = t.mul(t.param(&s, a), t.param(&s, b)).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.param(a).unwrap().item(), 2.0);
    assert!(g.param(b).is_none());
}
