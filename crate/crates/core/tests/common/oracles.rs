//! Independent reference implementations shared by the test suites.

use facecomp_core::geometry::Rect;
use facecomp_core::reasoning::SvmSolution;
use nalgebra::{DMatrix, DVector};
use num_rational::Ratio;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `ceil((e - r/2) / r)` clamped to `[0, h]`, in exact rational arithmetic.
pub fn oracle_edge(e: usize, image: usize, grid: usize) -> usize {
    let r = Ratio::from_integer((image / grid) as i64);
    let v = ((Ratio::from_integer(e as i64) - r / 2) / r).ceil().to_integer();
    v.clamp(0, grid as i64) as usize
}

pub fn oracle(b: Rect, image: usize, grid: usize) -> Rect {
    Rect::new(
        oracle_edge(b.top, image, grid),
        oracle_edge(b.left, image, grid),
        oracle_edge(b.bottom, image, grid),
        oracle_edge(b.right, image, grid),
    )
}

pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

pub fn random_box(rng: &mut ChaCha8Rng, image: usize) -> Rect {
    let (t, b) = {
        let a = rng.random_range(0..image);
        let c = rng.random_range(a + 1..=image);
        (a, c)
    };
    let (l, r) = {
        let a = rng.random_range(0..image);
        let c = rng.random_range(a + 1..=image);
        (a, c)
    };
    Rect::new(t, l, b, r)
}

/// Hard-margin SVM by enumerating candidate support sets and solving the
/// equality-constrained KKT system on each.
pub fn active_set_oracle(x: &[Vec<f64>], y: &[i8]) -> (Vec<f64>, f64) {
    let n = x.len();
    let d = x[0].len();
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    for mask in 1u32..(1 << n) {
        let s: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        if !s.iter().any(|&i| y[i] > 0) || !s.iter().any(|&i| y[i] < 0) || s.len() > d + 1 {
            continue;
        }
        let k = s.len();
        let mut a = DMatrix::zeros(k + 1, k + 1);
        let mut rhs = DVector::zeros(k + 1);
        for (r, &i) in s.iter().enumerate() {
            for (c, &j) in s.iter().enumerate() {
                let dot: f64 = x[i].iter().zip(&x[j]).map(|(p, q)| p * q).sum();
                a[(r, c)] = y[i] as f64 * y[j] as f64 * dot;
            }
            a[(r, k)] = y[i] as f64;
            a[(k, r)] = y[i] as f64;
            rhs[r] = 1.0;
        }
        let Some(sol) = a.lu().solve(&rhs) else { continue };
        if (0..k).any(|r| sol[r] < -1e-12) || sol.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let mut w = vec![0.0; d];
        for (r, &i) in s.iter().enumerate() {
            for (wk, xk) in w.iter_mut().zip(&x[i]) {
                *wk += sol[r] * y[i] as f64 * xk;
            }
        }
        let b = sol[k];
        let feasible = (0..n).all(|i| y[i] as f64 * (w.iter().zip(&x[i]).map(|(p, q)| p * q).sum::<f64>() + b) >= 1.0 - 1e-9);
        if !feasible {
            continue;
        }
        let nw = norm(&w);
        if best.as_ref().is_none_or(|(_, _, bn)| nw < *bn - 1e-12) {
            best = Some((w, b, nw));
        }
    }
    let (w, b, _) = best.expect("separable instance");
    (w, b)
}

pub fn kkt_violation(x: &[Vec<f64>], y: &[i8], s: &SvmSolution) -> f64 {
    let mut worst: f64 = s.alpha.iter().zip(y).map(|(a, &l)| a * l as f64).sum::<f64>().abs();
    for i in 0..x.len() {
        let m = y[i] as f64 * s.decision(&x[i]);
        worst = worst.max(1.0 - m).max(-s.alpha[i]);
        if s.alpha[i] > 0.0 {
            worst = worst.max((s.alpha[i] * (m - 1.0)).abs());
        }
    }
    worst
}

/// Cyclic Jacobi eigenvalue iteration.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut e: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    e.sort_by(|x, y| y.total_cmp(x));
    e
}

pub fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    (0..d)
        .map(|i| (0..d).map(|j| rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1.0)).collect())
        .collect()
}


pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

/// Up to 8 points in 3-D with a margin of at least 0.2 around a random
/// hyperplane; `None` when every label came out the same.
pub fn separable_instance(rng: &mut ChaCha8Rng) -> Option<(Vec<Vec<f64>>, Vec<i8>)> {
    let w0: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
    let b0: f64 = rng.random_range(-0.5..0.5);
    let mut x = Vec::new();
    let mut y = Vec::new();
    while x.len() < 8 {
        let p: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f: f64 = p.iter().zip(&w0).map(|(a, b)| a * b).sum::<f64>() + b0;
        if f.abs() < 0.2 {
            continue;
        }
        y.push(if f > 0.0 { 1 } else { -1 });
        x.push(p);
    }
    (!y.iter().all(|&l| l == y[0])).then_some((x, y))
}
