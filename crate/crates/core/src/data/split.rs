use super::{Dataset, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

/// Chooses split boundaries on slice borders.
///
/// With `c(b)` the fraction of events in the first `b` slices, picks
/// `1 <= b1 < b2 <= T-1` minimizing `|c(b1) - train| + |c(b2) - (train + valid)|`.
/// Ties go to the smallest `b2`, then the smallest `b1`.
pub fn split_by_time(dataset: &Dataset, fractions: SplitFractions) -> Result<Dataset> {
    let t = dataset.num_slices();
    if t < 3 {
        return Err(Error::Dataset(format!(
            "splitting needs at least 3 distinct timestamps, found {t}"
        )));
    }
    let sum = fractions.train + fractions.valid + fractions.test;
    if [fractions.train, fractions.valid, fractions.test].iter().any(|f| *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got {sum}"
        )));
    }
    let total = dataset.num_events();
    if total == 0 {
        return Err(Error::Dataset("cannot split an empty dataset".into()));
    }
    let mut cum = vec![0usize; t + 1];
    for (i, sl) in dataset.slices.iter().enumerate() {
        cum[i + 1] = cum[i] + sl.len();
    }
    let frac = |b: usize| cum[b] as f64 / total as f64;
    let target1 = fractions.train;
    let target2 = fractions.train + fractions.valid;

    // best b1 in [1, b2) maintained as b2 advances
    let mut best_b1 = 1;
    let mut best_c1 = (frac(1) - target1).abs();
    let mut best = (f64::INFINITY, 1, 2);
    for b2 in 2..t {
        let c1 = (frac(b2 - 1) - target1).abs();
        if c1 < best_c1 {
            best_c1 = c1;
            best_b1 = b2 - 1;
        }
        let cost = best_c1 + (frac(b2) - target2).abs();
        if cost < best.0 {
            best = (cost, best_b1, b2);
        }
    }
    Ok(Dataset {
        split: Some(Split {
            train_end: best.1,
            valid_end: best.2,
        }),
        ..dataset.clone()
    })
}
