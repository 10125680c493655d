//! Fixed 2-D view of a session: the first two principal axes of the target
//! sense vectors.

use nalgebra::{DMatrix, SymmetricEigen};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Projection {
    pub center: Vec<f64>,
    /// Two unit axes, largest variance first.
    pub axes: Vec<Vec<f64>>,
}

impl Projection {
    /// Principal axes of `vectors` around their mean. Each axis is signed so
    /// that its largest-magnitude component is positive, which keeps the view
    /// stable across runs.
    pub fn principal<V: AsRef<[f64]>>(vectors: &[V]) -> Option<Self> {
        let first = vectors.first()?.as_ref();
        let dim = first.len();
        if dim < 2 || vectors.iter().any(|v| v.as_ref().len() != dim) {
            return None;
        }
        let n = vectors.len() as f64;
        let mut center = vec![0.0; dim];
        for v in vectors {
            for (c, x) in center.iter_mut().zip(v.as_ref()) {
                *c += x / n;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for v in vectors {
            let d: Vec<f64> = v.as_ref().iter().zip(&center).map(|(x, c)| x - c).collect();
            for i in 0..dim {
                for j in 0..dim {
                    cov[(i, j)] += d[i] * d[j] / n;
                }
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let axes = order[..2]
            .iter()
            .map(|&k| {
                let mut axis: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
                let lead = axis
                    .iter()
                    .copied()
                    .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                if lead < 0.0 {
                    axis.iter_mut().for_each(|x| *x = -*x);
                }
                axis
            })
            .collect();
        Some(Self { center, axes })
    }

    pub fn project(&self, v: &[f64]) -> [f64; 2] {
        let coord = |axis: &[f64]| -> f64 {
            v.iter()
                .zip(&self.center)
                .zip(axis)
                .map(|((x, c), a)| (x - c) * a)
                .sum()
        };
        [coord(&self.axes[0]), coord(&self.axes[1])]
    }
}
