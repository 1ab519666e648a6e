//! Linear support vector machine trained by sequential minimal optimisation
//! on the dual, with second-order working set selection.

use super::{dot, ReasoningError};

#[derive(Debug, Clone, PartialEq)]
pub struct SvmOptions {
    /// Box constraint; `None` is a hard margin.
    pub c: Option<f64>,
    /// Stop once the maximal KKT violation falls below this, relative to
    /// the magnitude of the bias.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SvmOptions {
    fn default() -> Self {
        Self {
            c: None,
            tolerance: 1e-10,
            max_iterations: 2_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SvmSolution {
    pub w: Vec<f64>,
    pub b: f64,
    pub alpha: Vec<f64>,
    /// Indices with a positive multiplier.
    pub support_indices: Vec<usize>,
    pub iterations: usize,
    /// Final maximal KKT violation.
    pub gap: f64,
}

impl SvmSolution {
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.w, x) + self.b
    }
}

const TAU: f64 = 1e-12;
const GRAM_CACHE_LIMIT: usize = 4_000_000;
const ALPHA_LIMIT: f64 = 1e12;

struct Kernel<'a> {
    x: &'a [Vec<f64>],
    gram: Option<Vec<f64>>,
    diag: Vec<f64>,
}

impl<'a> Kernel<'a> {
    fn new(x: &'a [Vec<f64>]) -> Self {
        let n = x.len();
        let gram = (n * n <= GRAM_CACHE_LIMIT).then(|| {
            let mut g = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let v = dot(&x[i], &x[j]);
                    g[i * n + j] = v;
                    g[j * n + i] = v;
                }
            }
            g
        });
        let diag = x.iter().map(|v| dot(v, v)).collect();
        Self { x, gram, diag }
    }

    fn row(&self, i: usize, out: &mut [f64]) {
        let n = self.x.len();
        match &self.gram {
            Some(g) => out.copy_from_slice(&g[i * n..(i + 1) * n]),
            None => {
                for (o, xt) in out.iter_mut().zip(self.x) {
                    *o = dot(&self.x[i], xt);
                }
            }
        }
    }
}

/// Solve `min 1/2 a'Qa - 1'a` s.t. `y'a = 0`, `0 <= a <= C` with
/// `Q_ij = y_i y_j <x_i, x_j>` and return the primal hyperplane.
pub fn svm_solve(x: &[Vec<f64>], labels: &[i8], options: &SvmOptions) -> Result<SvmSolution, ReasoningError> {
    let n = x.len();
    if n == 0 {
        return Err(ReasoningError::Empty);
    }
    if labels.len() != n {
        return Err(ReasoningError::Dimension(format!("{n} samples but {} labels", labels.len())));
    }
    let d = x[0].len();
    if x.iter().any(|v| v.len() != d) {
        return Err(ReasoningError::Dimension("ragged samples".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.iter().filter(|&&l| l == -1).count();
    if positives == 0 || negatives == 0 || positives + negatives != n {
        return Err(ReasoningError::SingleClass { positives, negatives });
    }
    let c = match options.c {
        Some(c) if !(c > 0.0) => return Err(ReasoningError::Argument(format!("C must be positive, got {c}"))),
        Some(c) => c,
        None => f64::INFINITY,
    };
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let kernel = Kernel::new(x);
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let (mut ki, mut kj) = (vec![0.0; n], vec![0.0; n]);
    let up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);

    let mut iterations = 0;
    let gap = loop {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        for t in 0..n {
            if up(alpha[t], y[t]) && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            if low(alpha[t], y[t]) {
                gmin = gmin.min(-y[t] * grad[t]);
            }
        }
        let gap = gmax - gmin;
        if i == usize::MAX || gap < options.tolerance * (1.0 + gmax.abs().max(gmin.abs())) {
            break gap.max(0.0);
        }
        if iterations >= options.max_iterations {
            return Err(ReasoningError::Diverged { iterations, gap });
        }
        iterations += 1;

        kernel.row(i, &mut ki);
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !low(alpha[t], y[t]) {
                continue;
            }
            let b = gmax + y[t] * grad[t];
            if b > 0.0 {
                let mut a = kernel.diag[i] + kernel.diag[t] - 2.0 * ki[t];
                if a <= 0.0 {
                    a = TAU;
                }
                let obj = -(b * b) / a;
                if obj <= best {
                    best = obj;
                    j = t;
                }
            }
        }
        if j == usize::MAX {
            break gap;
        }
        kernel.row(j, &mut kj);

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let mut quad = kernel.diag[i] + kernel.diag[j] - 2.0 * ki[j];
        if quad <= 0.0 {
            quad = TAU;
        }
        let (mut ai, mut aj) = (old_i, old_j);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > c {
                    ai = c;
                    aj = c - diff;
                }
            } else if aj > c {
                aj = c;
                ai = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        alpha[i] = ai;
        alpha[j] = aj;
        let (di, dj) = (ai - old_i, aj - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
        if !(ai.abs() < ALPHA_LIMIT && aj.abs() < ALPHA_LIMIT) {
            return Err(ReasoningError::Diverged { iterations, gap });
        }
    };

    let mut w = vec![0.0; d];
    for t in 0..n {
        if alpha[t] != 0.0 {
            for (wk, xk) in w.iter_mut().zip(&x[t]) {
                *wk += alpha[t] * y[t] * xk;
            }
        }
    }
    // b from the free support vectors, or the midpoint of the feasible interval
    let (mut sum, mut free) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            sum += yg;
            free += 1;
        } else if (alpha[t] == 0.0) == (y[t] > 0.0) {
            ub = ub.min(yg);
        } else {
            lb = lb.max(yg);
        }
    }
    let rho = if free > 0 { sum / free as f64 } else { (ub + lb) / 2.0 };
    let support_indices = (0..n).filter(|&t| alpha[t] > 0.0).collect();
    Ok(SvmSolution {
        w,
        b: -rho,
        alpha,
        support_indices,
        iterations,
        gap,
    })
}
