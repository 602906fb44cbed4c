//! Principal component analysis over plain row-major matrices.
//!
//! Fitting eigendecomposes the sample covariance with a cyclic Jacobi
//! sweep; at our dimensionalities (d <= a few dozen) this is exact to
//! machine precision and needs no external solver.

use crate::error::{contract_err, Result};

/// Centered projection onto the top principal directions.
///
/// `components` is `[k][d]` row-major; rows are orthonormal and ordered by
/// non-increasing explained variance. Each row's largest-magnitude entry is
/// made positive so fits are reproducible despite eigenvector sign freedom.
#[derive(Debug, Clone)]
pub struct PcaProjector {
    pub mean: Vec<f64>,
    pub components: Vec<f64>,
    pub explained: Vec<f64>,
    pub input_dim: usize,
    pub k: usize,
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), unordered.
fn jacobi_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += m[p * d + q] * m[p * d + q];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = m[i * d + p];
                    let aiq = m[i * d + q];
                    m[i * d + p] = c * aip - s * aiq;
                    m[i * d + q] = s * aip + c * aiq;
                }
                for j in 0..d {
                    let apj = m[p * d + j];
                    let aqj = m[q * d + j];
                    m[p * d + j] = c * apj - s * aqj;
                    m[q * d + j] = s * apj + c * aqj;
                }
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    let eigvals: Vec<f64> = (0..d).map(|i| m[i * d + i]).collect();
    (eigvals, v)
}

impl PcaProjector {
    /// Fits on `samples` (`[n][d]` row-major). Requires `n > k` and `k <= d`.
    pub fn fit(samples: &[f64], n: usize, d: usize, k: usize) -> Result<Self> {
        if k == 0 || d == 0 {
            return contract_err("pca dims must be positive");
        }
        if k > d {
            return contract_err(format!("pca k={k} exceeds data dim {d}"));
        }
        if n <= k {
            return contract_err(format!("pca needs more samples than components ({n} <= {k})"));
        }
        if samples.len() != n * d {
            return contract_err(format!(
                "sample buffer holds {} values, expected {n}x{d}",
                samples.len()
            ));
        }

        let mut mean = vec![0.0; d];
        for row in samples.chunks(d) {
            for (j, v) in row.iter().enumerate() {
                mean[j] += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);

        let mut cov = vec![0.0; d * d];
        for row in samples.chunks(d) {
            for i in 0..d {
                let ci = row[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += ci * (row[j] - mean[j]);
                }
            }
        }
        let denom = (n - 1) as f64;
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] /= denom;
                cov[j * d + i] = cov[i * d + j];
            }
        }

        let (eigvals, eigvecs) = jacobi_eigen(&cov, d);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());

        let mut components = vec![0.0; k * d];
        let mut explained = Vec::with_capacity(k);
        for (row, &src) in order[..k].iter().enumerate() {
            explained.push(eigvals[src].max(0.0));
            let col: Vec<f64> = (0..d).map(|i| eigvecs[i * d + src]).collect();
            let peak = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            let sign = if col[peak] < 0.0 { -1.0 } else { 1.0 };
            for (i, v) in col.iter().enumerate() {
                components[row * d + i] = sign * v;
            }
        }

        Ok(Self {
            mean,
            components,
            explained,
            input_dim: d,
            k,
        })
    }

    /// Centers and projects `[n][d]` rows to `[n][k]`.
    pub fn apply(&self, samples: &[f64], n: usize) -> Result<Vec<f64>> {
        let d = self.input_dim;
        if samples.len() != n * d {
            return contract_err(format!(
                "sample buffer holds {} values, expected {n}x{d}",
                samples.len()
            ));
        }
        let mut out = vec![0.0; n * self.k];
        for (r, row) in samples.chunks(d).enumerate() {
            for c in 0..self.k {
                out[r * self.k + c] = (0..d)
                    .map(|j| (row[j] - self.mean[j]) * self.components[c * d + j])
                    .sum();
            }
        }
        Ok(out)
    }

    /// Maps projected rows back: `mean + z . components`.
    pub fn reconstruct(&self, projected: &[f64], n: usize) -> Result<Vec<f64>> {
        if projected.len() != n * self.k {
            return contract_err(format!(
                "projected buffer holds {} values, expected {n}x{}",
                projected.len(),
                self.k
            ));
        }
        let d = self.input_dim;
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            for j in 0..d {
                out[r * d + j] = self.mean[j]
                    + (0..self.k)
                        .map(|c| projected[r * self.k + c] * self.components[c * d + j])
                        .sum::<f64>();
            }
        }
        Ok(out)
    }
}
