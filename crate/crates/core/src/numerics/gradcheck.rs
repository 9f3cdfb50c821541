use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub floor: f64,
    pub tol: f64,
    /// Check at most this many entries per parameter, evenly strided.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            floor: 1e-4,
            tol: 1e-4,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    let tape = Tape::inference();
    let out = f(&tape, store)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {x}")));
    }
    Ok(x)
}

/// Compares reverse-mode gradients of `f` against central finite
/// differences for each parameter in `ids`.
pub fn grad_check<F>(
    store: &ParamStore,
    ids: &[ParamId],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    eval(&f, store)?;
    let tape = Tape::with_trainable(ids.iter().copied());
    let out = f(&tape, store)?;
    let grads = tape.backward(out)?;

    let mut work = store.clone();
    let mut params = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.get(id).len();
        let zero;
        let analytic = match grads.param(id) {
            Some(g) => g.data(),
            None => {
                zero = vec![0.0; n];
                &zero
            }
        };
        let stride = match opts.max_entries {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            work.data_mut(id)[i] = orig + opts.h;
            let plus = eval(&f, &work)?;
            work.data_mut(id)[i] = orig - opts.h;
            let minus = eval(&f, &work)?;
            work.data_mut(id)[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            max_rel_error: worst,
            checked,
        });
    }
    Ok(GradCheckReport {
        params,
        tol: opts.tol,
    })
}
