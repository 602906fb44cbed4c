//! Kraskov-style kNN estimators for mutual information and differential
//! entropy, with exact (brute-force) neighbor search. Sample counts at desk
//! scale stay below 10^4, so no spatial index is warranted.
//!
//! Low-entropy features produce exact ties, which degenerate the strict
//! neighbor counts. Every coordinate therefore gets a deterministic jitter
//! of magnitude <= 1e-10 derived by hashing the value's bits with its
//! column index: permuting samples permutes jitter with them, so estimates
//! are exactly permutation-invariant.

use crate::error::{contract_err, Result};

#[derive(Debug, Clone, Copy)]
pub struct MiEstimate {
    /// Nats. May be slightly negative by estimation noise.
    pub value: f64,
    pub samples: usize,
    pub k: usize,
}

/// Digamma via the ascending recurrence and the asymptotic series.
pub fn digamma(x: f64) -> f64 {
    assert!(x > 0.0, "digamma domain");
    let mut acc = 0.0;
    let mut x = x;
    while x < 8.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + x.ln() - 0.5 * inv
        - inv2
            * (1.0 / 12.0
                - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0))))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Value-and-column derived jitter in [-1e-10, 1e-10].
fn jitter(v: f64, col: usize) -> f64 {
    let h = splitmix(v.to_bits() ^ splitmix(col as u64 + 1));
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    (u - 0.5) * 2.0e-10
}

fn jittered(data: &[f64], d: usize) -> Vec<f64> {
    data.iter()
        .enumerate()
        .map(|(i, &v)| v + jitter(v, i % d))
        .collect()
}

fn max_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// KSG estimator (algorithm 1): psi(k) + psi(n) - mean[psi(n_x+1) +
/// psi(n_y+1)], with max-norm neighborhoods in the joint space and strict
/// marginal counts.
pub fn knn_mutual_information(
    x: &[f64],
    y: &[f64],
    n: usize,
    dx: usize,
    dy: usize,
    k: usize,
) -> Result<MiEstimate> {
    if k == 0 || n < 2 * k {
        return contract_err(format!("mi estimator needs n >= 2k (n={n}, k={k})"));
    }
    if x.len() != n * dx || y.len() != n * dy {
        return contract_err("sample buffers do not match the stated shapes");
    }
    let xs = jittered(x, dx);
    let ys = jittered(y, dy);

    let mut psi_terms = Vec::with_capacity(n);
    let mut dist = vec![0.0; n];
    for i in 0..n {
        let xi = &xs[i * dx..(i + 1) * dx];
        let yi = &ys[i * dy..(i + 1) * dy];
        for j in 0..n {
            let dxij = max_norm(xi, &xs[j * dx..(j + 1) * dx]);
            let dyij = max_norm(yi, &ys[j * dy..(j + 1) * dy]);
            dist[j] = dxij.max(dyij);
        }
        dist[i] = f64::INFINITY;
        let mut scratch = dist.clone();
        let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
        let eps = *kth;

        let mut nx = 0usize;
        let mut ny = 0usize;
        for j in 0..n {
            if j == i {
                continue;
            }
            if max_norm(xi, &xs[j * dx..(j + 1) * dx]) < eps {
                nx += 1;
            }
            if max_norm(yi, &ys[j * dy..(j + 1) * dy]) < eps {
                ny += 1;
            }
        }
        psi_terms.push(digamma((nx + 1) as f64) + digamma((ny + 1) as f64));
    }

    // Summing in sorted order makes the estimate bitwise independent of
    // sample order, not just equal in exact arithmetic.
    psi_terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let psi_sum: f64 = psi_terms.iter().sum();
    Ok(MiEstimate {
        value: digamma(k as f64) + digamma(n as f64) - psi_sum / n as f64,
        samples: n,
        k,
    })
}

/// Kozachenko-Leonenko differential entropy in nats: psi(n) - psi(k) +
/// d ln 2 + (d/n) sum ln eps_i, with eps_i the max-norm distance to the
/// k-th neighbor.
pub fn knn_entropy(x: &[f64], n: usize, d: usize, k: usize) -> Result<f64> {
    if k == 0 || n < 2 * k {
        return contract_err(format!("entropy estimator needs n >= 2k (n={n}, k={k})"));
    }
    if x.len() != n * d {
        return contract_err("sample buffer does not match the stated shape");
    }
    let xs = jittered(x, d);
    let mut log_terms = Vec::with_capacity(n);
    let mut dist = vec![0.0; n];
    for i in 0..n {
        let xi = &xs[i * d..(i + 1) * d];
        for j in 0..n {
            dist[j] = max_norm(xi, &xs[j * d..(j + 1) * d]);
        }
        dist[i] = f64::INFINITY;
        let (_, kth, _) = dist.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
        log_terms.push(kth.max(1e-300).ln());
    }
    log_terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let log_sum: f64 = log_terms.iter().sum();
    Ok(digamma(n as f64) - digamma(k as f64)
        + d as f64 * std::f64::consts::LN_2
        + (d as f64 / n as f64) * log_sum)
}
