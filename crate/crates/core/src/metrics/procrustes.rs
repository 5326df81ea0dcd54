use crate::error::{Error, Result};
use crate::geom::{det, mat_mul, mat_vec, transpose, Mat3, Vec3};

const TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// `a ≈ u · diag(s) · vᵀ` by one-sided Jacobi rotations on the columns.
/// Singular values are not sorted; `u` is completed to an orthonormal basis
/// when `a` is rank deficient.
pub fn svd3(a: &Mat3) -> (Mat3, [f64; 3], Mat3) {
    let mut g = *a;
    let mut v = crate::geom::IDENTITY;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
            for r in &g {
                alpha += r[p] * r[p];
                beta += r[q] * r[q];
                gamma += r[p] * r[q];
            }
            if gamma.abs() <= TOL * (alpha * beta).sqrt() || gamma == 0.0 {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for m in [&mut g, &mut v] {
                for r in m.iter_mut() {
                    let (x, y) = (r[p], r[q]);
                    r[p] = c * x - s * y;
                    r[q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma: [f64; 3] = std::array::from_fn(|j| (0..3).map(|i| g[i][j] * g[i][j]).sum::<f64>().sqrt());
    let scale = sigma.iter().cloned().fold(0.0, f64::max);
    let mut cols: Vec<Option<Vec3>> =
        (0..3).map(|j| (sigma[j] > scale * 1e-12 && sigma[j] > 0.0).then(|| std::array::from_fn(|i| g[i][j] / sigma[j]))).collect();
    // Complete missing columns with Gram-Schmidt against the standard basis.
    for j in 0..3 {
        if cols[j].is_some() {
            continue;
        }
        let known: Vec<Vec3> = cols.iter().flatten().copied().collect();
        let fill = (0..3)
            .filter_map(|e| {
                let mut w = [0.0; 3];
                w[e] = 1.0;
                for k in &known {
                    let d: f64 = (0..3).map(|i| w[i] * k[i]).sum();
                    (0..3).for_each(|i| w[i] -= d * k[i]);
                }
                let n = crate::geom::norm(w);
                (n > 1e-6).then(|| crate::geom::scale(w, 1.0 / n))
            })
            .next()
            .expect("a standard basis vector escapes a rank-2 span");
        cols[j] = Some(fill);
    }
    let u: Mat3 = std::array::from_fn(|i| std::array::from_fn(|j| cols[j].unwrap()[i]));
    (u, sigma, v)
}

/// `x ↦ s·R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: Mat3,
    pub scale: f64,
    pub translation: Vec3,
}

impl Similarity {
    pub fn apply(&self, x: Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, x);
        std::array::from_fn(|k| self.scale * r[k] + self.translation[k])
    }

    /// Least-squares transform carrying `pred` onto `gt`, reflections
    /// excluded. Without `with_scale` the scale is fixed to one.
    pub fn fit(pred: &[Vec3], gt: &[Vec3], with_scale: bool) -> Result<Self> {
        if pred.len() != gt.len() || pred.is_empty() {
            return Err(Error::LengthMismatch { expected: gt.len(), found: pred.len() });
        }
        let centroid = |pts: &[Vec3]| -> Vec3 {
            std::array::from_fn(|k| pts.iter().map(|p| p[k]).sum::<f64>() / pts.len() as f64)
        };
        let (mp, mg) = (centroid(pred), centroid(gt));
        let x: Vec<Vec3> = pred.iter().map(|p| crate::geom::sub(*p, mp)).collect();
        let y: Vec<Vec3> = gt.iter().map(|p| crate::geom::sub(*p, mg)).collect();
        let var_y: f64 = y.iter().flatten().map(|v| v * v).sum();
        let gt_scale = gt.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        if var_y.sqrt() <= 1e-12 * gt_scale {
            return Err(Error::Degenerate("ground-truth points all coincide".into()));
        }
        let var_x: f64 = x.iter().flatten().map(|v| v * v).sum();
        let mut h = [[0.0; 3]; 3];
        for (a, b) in x.iter().zip(&y) {
            for i in 0..3 {
                for j in 0..3 {
                    h[i][j] += a[i] * b[j];
                }
            }
        }
        let (u, sigma, v) = svd3(&h);
        let mut d = [1.0; 3];
        let smallest = (0..3).min_by(|&a, &b| sigma[a].total_cmp(&sigma[b])).unwrap();
        if det(&v) * det(&u) < 0.0 {
            d[smallest] = -1.0;
        }
        let vd: Mat3 = std::array::from_fn(|i| std::array::from_fn(|j| v[i][j] * d[j]));
        let rotation = mat_mul(&vd, &transpose(&u));
        let scale = if !with_scale {
            1.0
        } else if var_x > 0.0 {
            (0..3).map(|k| d[k] * sigma[k]).sum::<f64>() / var_x
        } else {
            0.0
        };
        let rm = mat_vec(&rotation, mp);
        let translation = std::array::from_fn(|k| mg[k] - scale * rm[k]);
        Ok(Self { rotation, scale, translation })
    }
}

pub fn procrustes_align(pred: &[Vec3], gt: &[Vec3], with_scale: bool) -> Result<Vec<Vec3>> {
    let t = Similarity::fit(pred, gt, with_scale)?;
    Ok(pred.iter().map(|p| t.apply(*p)).collect())
}
