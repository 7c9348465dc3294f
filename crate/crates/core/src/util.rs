//! Small shared utilities: deterministic parallel folds, least-squares fits.

use rayon::prelude::*;

/// Global switch for sequential (reduction-order-stable) execution. The
/// chunked folds below are already deterministic for a fixed chunk count;
/// this flag additionally removes rayon from the picture entirely.
use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

pub fn set_sequential(on: bool) {
    SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn sequential() -> bool {
    SEQUENTIAL.load(Ordering::SeqCst)
}

/// Applies `work` to fixed-size index chunks and sums the resulting vectors
/// in chunk order. The chunk grid is independent of thread count, so the
/// result is bitwise reproducible whether run sequentially or in parallel.
pub fn chunked_vector_sum<F>(n_items: usize, chunk: usize, out_len: usize, work: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    let ranges: Vec<std::ops::Range<usize>> = (0..n_items)
        .step_by(chunk.max(1))
        .map(|s| s..(s + chunk).min(n_items))
        .collect();
    let partials: Vec<Vec<f64>> = if sequential() {
        ranges
            .iter()
            .map(|r| {
                let mut buf = vec![0.0; out_len];
                work(r.clone(), &mut buf);
                buf
            })
            .collect()
    } else {
        ranges
            .par_iter()
            .map(|r| {
                let mut buf = vec![0.0; out_len];
                work(r.clone(), &mut buf);
                buf
            })
            .collect()
    };
    let mut out = vec![0.0; out_len];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// Maps `work` over disjoint output rows in parallel (deterministic: each row
/// is written by exactly one task with a fixed internal order).
pub fn par_rows<T: Send, F>(n_rows: usize, work: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
{
    if sequential() {
        (0..n_rows).map(work).collect()
    } else {
        (0..n_rows).into_par_iter().map(work).collect()
    }
}

/// Right-preconditioned restarted GMRES for a general linear operator.
/// Solves A x = b via A M^{-1} y = b, x = M^{-1} y. Returns (x, relative
/// residual, iterations).
pub fn gmres<A, M>(
    apply: A,
    precond: M,
    b: &[f64],
    rel_tol: f64,
    restart: usize,
    max_iter: usize,
) -> (Vec<f64>, f64, usize)
where
    A: Fn(&[f64]) -> Vec<f64>,
    M: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let dot = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(a, c)| a * c).sum() };
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return (vec![0.0; n], 0.0, 0);
    }
    let mut x = vec![0.0; n];
    let mut total_iters = 0;
    let mut rel = 1.0;
    'outer: while total_iters < max_iter {
        let ax = apply(&x);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = dot(&r, &r).sqrt();
        rel = beta / bnorm;
        if rel <= rel_tol {
            break;
        }
        for v in r.iter_mut() {
            *v /= beta;
        }
        let m = restart.min(max_iter - total_iters);
        let mut basis: Vec<Vec<f64>> = vec![r];
        let mut h = vec![vec![0.0f64; m]; m + 1];
        let mut cs = vec![0.0f64; m];
        let mut sn = vec![0.0f64; m];
        let mut g = vec![0.0f64; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            total_iters += 1;
            let z = precond(&basis[k]);
            let mut w = apply(&z);
            for (j, vj) in basis.iter().enumerate() {
                let hjk = dot(&w, vj);
                h[j][k] = hjk;
                for (wi, vi) in w.iter_mut().zip(vj) {
                    *wi -= hjk * vi;
                }
            }
            let hk1 = dot(&w, &w).sqrt();
            h[k + 1][k] = hk1;
            // Givens rotations to maintain the QR of H.
            for j in 0..k {
                let tmp = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = tmp;
            }
            let denom = (h[k][k] * h[k][k] + hk1 * hk1).sqrt();
            if denom == 0.0 {
                k_used = k;
                break;
            }
            cs[k] = h[k][k] / denom;
            sn[k] = hk1 / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            rel = g[k + 1].abs() / bnorm;
            if rel <= rel_tol || hk1 == 0.0 {
                break;
            }
            for v in w.iter_mut() {
                *v /= hk1;
            }
            basis.push(w);
        }
        // Back-substitute the least-squares solution.
        let mut y = vec![0.0f64; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in (i + 1)..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        let mut update = vec![0.0f64; n];
        for (j, &yj) in y.iter().enumerate() {
            for (u, v) in update.iter_mut().zip(&basis[j]) {
                *u += yj * v;
            }
        }
        let mz = precond(&update);
        for (xi, zi) in x.iter_mut().zip(&mz) {
            *xi += zi;
        }
        if rel <= rel_tol {
            break 'outer;
        }
    }
    (x, rel, total_iters)
}

/// Least-squares slope and intercept of y against x.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let denom = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    (slope, intercept)
}

/// Fits `log y = -sigma x + c` over the given samples, ignoring entries where
/// y is too small to trust. Returns the decay rate sigma.
pub fn fit_decay_rate(x: &[f64], y: &[f64], floor: f64) -> Option<f64> {
    let pts: (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter(|(_, &yi)| yi > floor)
        .map(|(&xi, &yi)| (xi, yi.ln()))
        .unzip();
    if pts.0.len() < 3 {
        return None;
    }
    let (slope, _) = linear_fit(&pts.0, &pts.1);
    Some(-slope)
}

/// log-log least-squares slope, skipping non-positive values.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter(|(&xi, &yi)| xi > 0.0 && yi > 0.0)
        .map(|(&xi, &yi)| (xi.ln(), yi.ln()))
        .unzip();
    linear_fit(&pts.0, &pts.1).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_matches_sequential() {
        let f = |r: std::ops::Range<usize>, buf: &mut [f64]| {
            for i in r {
                buf[i % 7] += (i as f64).sin();
            }
        };
        let a = chunked_vector_sum(1000, 64, 7, f);
        set_sequential(true);
        let b = chunked_vector_sum(1000, 64, 7, f);
        set_sequential(false);
        assert_eq!(a, b);
    }

    #[test]
    fn fits_exact_lines() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|a| 2.5 * a - 1.0).collect();
        let (s, c) = linear_fit(&x, &y);
        assert!((s - 2.5).abs() < 1e-12 && (c + 1.0).abs() < 1e-12);
        let ly: Vec<f64> = x.iter().map(|a| 3.0 * (-0.7 * a).exp()).collect();
        let sigma = fit_decay_rate(&x, &ly, 1e-300).unwrap();
        assert!((sigma - 0.7).abs() < 1e-12);
    }
}
