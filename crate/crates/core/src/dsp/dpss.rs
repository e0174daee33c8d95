//! Discrete prolate spheroidal sequences (Slepian tapers).
//!
//! The taper family of length `n` with time-bandwidth product `nw` solves a
//! symmetric tridiagonal eigenproblem; the `k` tapers belong to the `k`
//! largest eigenvalues, found by Sturm bisection and refined by inverse
//! iteration. Results are cached because every 30 s window of a night
//! reuses the same family.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Count of eigenvalues of the tridiagonal (diag `d`, offdiag `e`) strictly
/// below `x`, via the Sturm sequence of leading principal minors.
fn count_below(d: &[f64], e: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = d[0] - x;
    if q < 0.0 {
        count += 1;
    }
    for i in 1..d.len() {
        if q == 0.0 {
            q = 1e-300;
        }
        q = d[i] - x - e[i - 1] * e[i - 1] / q;
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Solves (T - lambda I) x = b in place for symmetric tridiagonal T, using
/// LU with adjacent-row pivoting (stable even at a near-eigenvalue shift,
/// which is exactly how inverse iteration uses it).
fn solve_shifted(d: &[f64], e: &[f64], lambda: f64, b: &mut [f64]) {
    let n = d.len();
    if n == 1 {
        let a = d[0] - lambda;
        b[0] /= if a == 0.0 { 1e-300 } else { a };
        return;
    }
    let mut alpha: Vec<f64> = d.iter().map(|&x| x - lambda).collect();
    let mut beta: Vec<f64> = e.to_vec();
    let mut gamma = vec![0.0f64; n.saturating_sub(2)];
    for i in 0..n - 1 {
        let mut sub = e[i];
        if sub.abs() > alpha[i].abs() {
            let (ra, rb) = (alpha[i], beta[i]);
            let rc = if i + 2 < n { gamma[i] } else { 0.0 };
            alpha[i] = sub;
            beta[i] = alpha[i + 1];
            if i + 2 < n {
                gamma[i] = beta[i + 1];
                beta[i + 1] = rc;
            }
            sub = ra;
            alpha[i + 1] = rb;
            b.swap(i, i + 1);
        }
        if alpha[i] == 0.0 {
            alpha[i] = 1e-300;
        }
        let m = sub / alpha[i];
        alpha[i + 1] -= m * beta[i];
        if i + 2 < n {
            beta[i + 1] -= m * gamma[i];
        }
        b[i + 1] -= m * b[i];
    }
    if alpha[n - 1] == 0.0 {
        alpha[n - 1] = 1e-300;
    }
    b[n - 1] /= alpha[n - 1];
    if n >= 2 {
        b[n - 2] = (b[n - 2] - beta[n - 2] * b[n - 1]) / alpha[n - 2];
    }
    for i in (0..n.saturating_sub(2)).rev() {
        b[i] = (b[i] - beta[i] * b[i + 1] - gamma[i] * b[i + 2]) / alpha[i];
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

fn compute(n: usize, nw: f64, k: usize) -> Vec<Vec<f64>> {
    assert!(n >= 2, "taper length {n} too short");
    assert!(k >= 1 && k < n, "need 1 <= k < n, got k={k} n={n}");
    assert!(
        nw > 0.0 && nw < n as f64 / 2.0,
        "time-bandwidth {nw} out of range"
    );
    let w = nw / n as f64;
    let cos2w = (2.0 * std::f64::consts::PI * w).cos();
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let c = (n - 1) as f64 / 2.0 - i as f64;
            c * c * cos2w
        })
        .collect();
    let e: Vec<f64> = (0..n - 1)
        .map(|i| ((i + 1) * (n - 1 - i)) as f64 / 2.0)
        .collect();

    let radius: f64 = (0..n)
        .map(|i| {
            let left = if i > 0 { e[i - 1].abs() } else { 0.0 };
            let right = if i < n - 1 { e[i].abs() } else { 0.0 };
            left + right
        })
        .fold(0.0, f64::max);
    let lo0 = d.iter().cloned().fold(f64::INFINITY, f64::min) - radius;
    let hi0 = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + radius;
    let scale = hi0.abs().max(lo0.abs()).max(1.0);

    let mut tapers: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        // j-th largest eigenvalue = ascending index n-1-j; bisect until the
        // interval is tight enough for inverse iteration to lock on.
        let target = n - 1 - j;
        let (mut lo, mut hi) = (lo0, hi0);
        while hi - lo > 1e-13 * scale {
            let mid = 0.5 * (lo + hi);
            if count_below(&d, &e, mid) > target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let lambda = 0.5 * (lo + hi);

        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        for _ in 0..4 {
            solve_shifted(&d, &e, lambda, &mut v);
            for prev in &tapers {
                let proj: f64 = v.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev.iter()) {
                    *x -= proj * p;
                }
            }
            let nm = norm(&v);
            for x in v.iter_mut() {
                *x /= nm;
            }
        }

        // Sign convention: even-index tapers have positive mean, odd-index
        // tapers start positive. Power spectra are unaffected either way.
        let flip = if j % 2 == 0 {
            v.iter().sum::<f64>() < 0.0
        } else {
            let lead = v[..n / 2]
                .iter()
                .cloned()
                .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
                .unwrap_or(0.0);
            lead < 0.0
        };
        if flip {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
        tapers.push(v);
    }
    tapers
}

type Cache = Mutex<HashMap<(usize, u64, usize), Arc<Vec<Vec<f64>>>>>;

/// First `k` unit-norm DPSS tapers of length `n` at time-bandwidth `nw`.
pub fn dpss_tapers(n: usize, nw: f64, k: usize) -> Arc<Vec<Vec<f64>>> {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (n, nw.to_bits(), k);
    if let Some(hit) = cache.lock().unwrap().get(&key) {
        return Arc::clone(hit);
    }
    let tapers = Arc::new(compute(n, nw, k));
    cache
        .lock()
        .unwrap()
        .entry(key)
        .or_insert_with(|| Arc::clone(&tapers))
        .clone()
}
