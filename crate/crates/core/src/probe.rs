//! Least-squares linear probe: one-hot category targets regressed on
//! features (plus a bias) through ridge-regularized normal equations.

use crate::fmat::RegionFeatureSet;
use crate::linalg::{cholesky_solve, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `(d + 1) × k`, last row is the bias.
    weights: Matrix,
}

impl LinearProbe {
    /// `None` if the system is singular even after the ridge term.
    pub fn fit(rows: &[Vec<f64>], labels: &[usize], k: usize, ridge: f64) -> Option<Self> {
        assert_eq!(rows.len(), labels.len(), "one label per row");
        let d = rows.first().map_or(0, |r| r.len()) + 1;
        let mut gram = Matrix::zeros(d, d);
        let mut rhs = Matrix::zeros(d, k);
        let mut aug = vec![0.0; d];
        for (r, &y) in rows.iter().zip(labels) {
            aug[..d - 1].copy_from_slice(r);
            aug[d - 1] = 1.0;
            gram.add_outer(1.0, &aug, &aug);
            if y < k {
                for (i, &a) in aug.iter().enumerate() {
                    rhs[(i, y)] += a;
                }
            }
        }
        for i in 0..d - 1 {
            gram[(i, i)] += ridge;
        }
        cholesky_solve(&gram, &rhs).map(|weights| Self { weights })
    }

    pub fn scores(&self, row: &[f64]) -> Vec<f64> {
        let d = self.weights.rows();
        let k = self.weights.cols();
        (0..k)
            .map(|c| row.iter().enumerate().map(|(i, v)| v * self.weights[(i, c)]).sum::<f64>() + self.weights[(d - 1, c)])
            .collect()
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        crate::head::argmax(&self.scores(row))
    }

    pub fn accuracy(&self, rows: &[Vec<f64>], labels: &[usize]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let hit = rows.iter().zip(labels).filter(|(r, &y)| self.predict(r) == y).count();
        hit as f64 / rows.len() as f64
    }
}

fn rows_and_labels(set: &RegionFeatureSet) -> (Vec<Vec<f64>>, Vec<usize>) {
    let rows = (0..set.len()).map(|r| set.row(r)).collect();
    let labels = set.index().iter().map(|k| k.category as usize).collect();
    (rows, labels)
}

/// Fit on `train`, report category accuracy on `test`.
pub fn probe_accuracy(train: &RegionFeatureSet, test: &RegionFeatureSet, ridge: f64) -> Option<f64> {
    let k = train.n_categories().max(test.n_categories());
    let (xr, yr) = rows_and_labels(train);
    let (xt, yt) = rows_and_labels(test);
    let p = LinearProbe::fit(&xr, &yr, k, ridge)?;
    Some(p.accuracy(&xt, &yt))
}
