use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest one count as rank loss.
const RANK_TOL: f64 = 1e-10;

/// Mean vector plus orthonormal projection onto the leading principal axes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `dim x input_dim`, row-major; rows are unit principal axes.
    pub components: Vec<f64>,
    /// Sample variance along each kept axis, descending.
    pub variances: Vec<f64>,
    /// Requested output dimension; `dim()` is smaller when the data were
    /// rank deficient.
    pub requested: usize,
}

impl PcaBasis {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn dim(&self) -> usize {
        self.variances.len()
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.dim() < self.requested
    }

    pub fn axis(&self, i: usize) -> &[f64] {
        let d = self.input_dim();
        &self.components[i * d..(i + 1) * d]
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok((0..self.dim())
            .map(|i| self.axis(i).iter().zip(x.iter().zip(&self.mean)).map(|(a, (v, m))| a * (v - m)).sum())
            .collect())
    }

    /// Maps reduced coordinates back into the input space.
    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (i, &zi) in z.iter().enumerate().take(self.dim()) {
            out.iter_mut().zip(self.axis(i)).for_each(|(o, a)| *o += zi * a);
        }
        out
    }
}

/// Fits a PCA basis on row samples. Axes carrying (numerically) no variance
/// are dropped, so the returned dimension can be below `out_dim`.
pub fn pca_fit(samples: &[Vec<f64>], out_dim: usize) -> Result<PcaBasis> {
    let Some(first) = samples.first() else {
        return Err(Error::Empty("no PCA samples"));
    };
    let d = first.len();
    if out_dim == 0 || out_dim > d {
        return Err(Error::InvalidArgument(format!("PCA out_dim {out_dim} must lie in [1, {d}]")));
    }
    if samples.len() < out_dim {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least {out_dim} samples, got {}",
            samples.len()
        )));
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(Error::ShapeMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        mean.iter_mut().zip(s).for_each(|(m, x)| *m += x / n);
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for s in samples {
        let c: Vec<f64> = s.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            if c[i] == 0.0 {
                continue;
            }
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    let denom = (n - 1.0).max(1.0);
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut components = Vec::with_capacity(out_dim * d);
    let mut variances = Vec::with_capacity(out_dim);
    for &k in order.iter().take(out_dim) {
        let lambda = eig.eigenvalues[k];
        if top == 0.0 || lambda <= RANK_TOL * top {
            break;
        }
        let col = eig.eigenvectors.column(k);
        // Sign convention: largest-magnitude coordinate positive.
        let pivot = (0..d).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a))).unwrap();
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        components.extend(col.iter().map(|v| sign * v));
        variances.push(lambda);
    }
    Ok(PcaBasis {
        mean,
        components,
        variances,
        requested: out_dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize, scales: &[f64]) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|j| scales[j % scales.len()] * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>())
            .collect()
    }

    /// Leading eigenvalues by power iteration with deflation on the dense
    /// covariance, built without the eigen solver.
    fn power_eigenvalues(samples: &[Vec<f64>], k: usize) -> Vec<f64> {
        let d = samples[0].len();
        let n = samples.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n).collect();
        let mut c = vec![vec![0.0; d]; d];
        for s in samples {
            for i in 0..d {
                for j in 0..d {
                    c[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]) / (n - 1.0);
                }
            }
        }
        let mut out = vec![];
        for _ in 0..k {
            let mut v = vec![1.0; d];
            let mut lambda = 0.0;
            for _ in 0..5000 {
                let w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| c[i][j] * v[j]).sum()).collect();
                let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                lambda = norm;
                v = w.iter().map(|x| x / norm).collect();
            }
            for i in 0..d {
                for j in 0..d {
                    c[i][j] -= lambda * v[i] * v[j];
                }
            }
            out.push(lambda);
        }
        out
    }

    #[test]
    fn planar_data_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = [1.0, 2.0, 0.0, -1.0, 0.5];
        let v = [0.0, 1.0, 1.0, 1.0, -2.0];
        let samples: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                (0..5).map(|j| 3.0 + a * u[j] + b * v[j]).collect()
            })
            .collect();
        let basis = pca_fit(&samples, 2).unwrap();
        assert_eq!(basis.dim(), 2);
        for s in &samples {
            let back = basis.reconstruct(&basis.apply(s).unwrap());
            for (x, y) in s.iter().zip(&back) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn full_rank_projection_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples = gaussian(&mut rng, 200, 6, &[1.0, 2.0, 0.5]);
        let basis = pca_fit(&samples, 6).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = basis.axis(i).iter().zip(basis.axis(j)).map(|(a, b)| a * b).sum();
                assert!((dot - f64::from(u8::from(i == j))).abs() < 1e-6);
            }
        }
        let (a, b) = (&samples[0], &samples[1]);
        let (za, zb) = (basis.apply(a).unwrap(), basis.apply(b).unwrap());
        let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        assert!((dist(a, b) - dist(&za, &zb)).abs() < 1e-6);
    }

    #[test]
    fn projected_variance_matches_top_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = gaussian(&mut rng, 400, 5, &[3.0, 1.0, 2.0, 0.3, 0.7]);
        let basis = pca_fit(&samples, 3).unwrap();
        let oracle = power_eigenvalues(&samples, 3);
        let projected: Vec<Vec<f64>> = samples.iter().map(|s| basis.apply(s).unwrap()).collect();
        let n = samples.len() as f64;
        let total: f64 = (0..3).map(|j| projected.iter().map(|z| z[j] * z[j]).sum::<f64>() / (n - 1.0)).sum();
        let expect: f64 = oracle.iter().sum();
        assert!((total - expect).abs() < 1e-8 * expect, "{total} vs {expect}");
        for (got, want) in basis.variances.iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-8 * want);
        }
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let samples: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, 1.0]).collect();
        let basis = pca_fit(&samples, 3).unwrap();
        assert_eq!(basis.dim(), 1);
        assert!(basis.is_rank_deficient());
        assert!(pca_fit(&samples, 4).is_err());
        assert!(pca_fit(&samples[..2], 3).is_err());
        assert!(basis.apply(&[1.0]).is_err());
    }
}
