//! Per-vertex linear regression of the change field on tabular covariates.

use nalgebra::DMatrix;

use crate::cohort::{Cohort, Condition, Diagnosis, Sex};
use crate::error::{Error, Result};

/// `[1, t, age, sex, onehot(dx0), t·onehot(dx0)]`.
pub const NUM_FEATURES: usize = 10;

pub fn features(t_months: f64, cond: &Condition) -> [f64; NUM_FEATURES] {
    let mut f = [0.0; NUM_FEATURES];
    f[0] = 1.0;
    f[1] = t_months;
    f[2] = cond.age;
    f[3] = match cond.sex {
        Sex::F => 0.0,
        Sex::M => 1.0,
    };
    let k = cond.dx0.index();
    f[4 + k] = 1.0;
    f[7 + k] = t_months;
    f
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearBaseline {
    /// Row-major `[V, NUM_FEATURES]`; masked rows are zero.
    pub coef: Vec<f64>,
    pub mask: Vec<bool>,
    pub rank: usize,
    /// Fewer training pairs than features.
    pub underdetermined: bool,
}

impl LinearBaseline {
    /// Minimum-norm least squares over every (baseline, follow-up) pair.
    /// The intercept and one-hot columns are collinear by construction, so
    /// the design is always rank deficient and the pseudo-inverse picks the
    /// smallest coefficient vector.
    pub fn fit(train: &Cohort) -> Result<Self> {
        let pairs = train.pairs();
        if pairs.is_empty() {
            return Err(Error::Config(
                "linear baseline needs a non-empty training cohort".into(),
            ));
        }
        let nv = train.mask.len();
        let n = pairs.len();
        let x = DMatrix::from_fn(n, NUM_FEATURES, |r, c| {
            let (i, j) = pairs[r];
            let s = &train.subjects[i];
            features(s.visits[j].t_months, &s.condition(None))[c]
        });
        let mut y = DMatrix::zeros(n, nv);
        for (r, &(i, j)) in pairs.iter().enumerate() {
            for (v, d) in train.subjects[i].delta(j).into_iter().enumerate() {
                if train.mask[v] {
                    y[(r, v)] = d;
                }
            }
        }
        let svd = x.svd(true, true);
        let smax = svd.singular_values.max();
        let eps = smax * 1e-10 * n.max(NUM_FEATURES) as f64;
        let rank = svd.rank(eps);
        let b = svd.solve(&y, eps).map_err(|e| Error::Config(e.to_string()))?;
        let mut coef = vec![0.0; nv * NUM_FEATURES];
        for v in (0..nv).filter(|&v| train.mask[v]) {
            for c in 0..NUM_FEATURES {
                coef[v * NUM_FEATURES + c] = b[(c, v)];
            }
        }
        Ok(Self {
            coef,
            mask: train.mask.clone(),
            rank,
            underdetermined: n < NUM_FEATURES,
        })
    }

    pub fn predict(&self, t_months: f64, cond: &Condition) -> Vec<f64> {
        let f = features(t_months, cond);
        self.coef
            .chunks_exact(NUM_FEATURES)
            .map(|row| row.iter().zip(&f).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Fitted rate per month at vertex `v` for baseline class `dx0`.
    pub fn slope(&self, v: usize, dx0: Diagnosis) -> f64 {
        let row = &self.coef[v * NUM_FEATURES..(v + 1) * NUM_FEATURES];
        row[1] + row[7 + dx0.index()]
    }
}
