use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Principal axes of a point set, sorted by decreasing variance; each axis
/// is signed so that its largest-magnitude loading is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
    pub variances: [f64; 2],
}

impl Projection {
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(Error::Degenerate(format!("PCA needs at least 2 points, got {n}")));
        }
        let d = points[0].len();
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(Error::InvalidArgument("points must share a positive dimension".into()));
        }
        let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
        let svd = x.svd(false, true);
        let vt = svd.v_t.expect("requested right singular vectors");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
        let axis = |k: usize| -> (Vec<f64>, f64) {
            let Some(&i) = order.get(k) else {
                return (vec![0.0; d], 0.0);
            };
            let mut v: Vec<f64> = vt.row(i).iter().copied().collect();
            let lead = v.iter().fold(0.0f64, |m, &x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            let s = svd.singular_values[i];
            (v, s * s / (n - 1) as f64)
        };
        let (a0, v0) = axis(0);
        let (a1, v1) = axis(1);
        Ok(Self {
            mean,
            axes: [a0, a1],
            variances: [v0, v1],
        })
    }

    pub fn apply(&self, p: &[f64]) -> [f64; 2] {
        let c: Vec<f64> = p.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let dot = |a: &[f64]| a.iter().zip(&c).map(|(x, y)| x * y).sum::<f64>();
        [dot(&self.axes[0]), dot(&self.axes[1])]
    }
}

/// Deterministic 2-component PCA coordinates of `points`.
pub fn project_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let p = Projection::fit(points)?;
    Ok(points.iter().map(|x| p.apply(x)).collect())
}
