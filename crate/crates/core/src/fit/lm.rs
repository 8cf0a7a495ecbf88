//! Weighted Levenberg–Marquardt with analytic Jacobians.

use nalgebra::{DMatrix, DVector};

/// A model over its own abscissae: point `i` evaluates to f(xᵢ; p).
pub trait Model {
    fn n_params(&self) -> usize;
    fn n_points(&self) -> usize;
    fn eval(&self, i: usize, p: &[f64]) -> f64;
    /// Write ∂f/∂pⱼ at point `i` into `grad`.
    fn grad(&self, i: usize, p: &[f64], grad: &mut [f64]);
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Relative χ² decrease below which an accepted step counts as converged.
    pub ftol: f64,
    /// Relative parameter change below which a step counts as converged.
    pub xtol: f64,
    pub lambda0: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            ftol: 1e-14,
            xtol: 1e-12,
            lambda0: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: Vec<f64>,
    /// Unscaled (JᵀWJ)⁻¹ at the solution.
    pub inv_hessian: DMatrix<f64>,
    pub chi2: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn chi2<M: Model + ?Sized>(m: &M, y: &[f64], w: &[f64], p: &[f64]) -> f64 {
    (0..m.n_points())
        .map(|i| {
            let r = (y[i] - m.eval(i, p)) * w[i];
            r * r
        })
        .sum()
}

/// Minimise Σ ((yᵢ − f(xᵢ))·wᵢ)², `w` being 1/σ.
pub fn levenberg_marquardt<M: Model + ?Sized>(
    m: &M,
    y: &[f64],
    w: &[f64],
    p0: &[f64],
    opts: LmOptions,
) -> LmOutcome {
    let np = m.n_params();
    let mut p = p0.to_vec();
    let mut cost = chi2(m, y, w, &p);
    let mut lambda = opts.lambda0;
    let mut g = vec![0.0; np];
    let mut converged = false;
    let mut iterations = 0;
    let normal = |p: &[f64], g: &mut [f64]| {
        let mut jtj = DMatrix::<f64>::zeros(np, np);
        let mut jtr = DVector::<f64>::zeros(np);
        for i in 0..m.n_points() {
            m.grad(i, p, g);
            let wi = w[i];
            let r = (y[i] - m.eval(i, p)) * wi * wi;
            for a in 0..np {
                jtr[a] += g[a] * r;
                let ga = g[a] * wi * wi;
                for b in a..np {
                    jtj[(a, b)] += ga * g[b];
                }
            }
        }
        for a in 0..np {
            for b in 0..a {
                jtj[(a, b)] = jtj[(b, a)];
            }
        }
        (jtj, jtr)
    };
    if !cost.is_finite() {
        return LmOutcome {
            params: p,
            inv_hessian: DMatrix::from_element(np, np, f64::NAN),
            chi2: cost,
            iterations: 0,
            converged: false,
        };
    }
    let (mut jtj, mut jtr) = normal(&p, &mut g);
    while iterations < opts.max_iter {
        iterations += 1;
        if cost == 0.0 || jtr.amax() == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for i in 0..np {
                let d = jtj[(i, i)];
                a[(i, i)] = d + lambda * if d > 0.0 { d } else { 1.0 };
            }
            let step = match a.clone().cholesky() {
                Some(c) => c.solve(&jtr),
                None => match a.lu().solve(&jtr) {
                    Some(s) => s,
                    None => {
                        lambda *= 10.0;
                        continue;
                    }
                },
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let c = chi2(m, y, w, &trial);
            if c.is_finite() && c <= cost * (1.0 + 8.0 * f64::EPSILON) {
                let dcost = ((cost - c) / cost.max(f64::MIN_POSITIVE)).max(0.0);
                let dx = step
                    .iter()
                    .zip(&p)
                    .map(|(s, v)| s.abs() / (v.abs() + 1e-300))
                    .fold(0.0, f64::max);
                p = trial;
                cost = c;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if dx < opts.xtol || (dcost < opts.ftol && dx < opts.xtol.sqrt()) {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e16 {
                break;
            }
        }
        if accepted {
            let (a, b) = normal(&p, &mut g);
            jtj = a;
            jtr = b;
        }
        if converged || !accepted {
            // no downhill step at any damping: stationary to working precision
            converged = true;
            break;
        }
    }
    let inv_hessian = pseudo_inverse(&jtj);
    LmOutcome {
        params: p,
        inv_hessian,
        chi2: cost,
        iterations,
        converged,
    }
}

/// Symmetric pseudo-inverse after diagonal equilibration; directions below
/// 1e−12 of the largest eigenvalue of the equilibrated matrix are treated as
/// unidentifiable and given infinite variance.
fn pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let d: Vec<f64> = (0..n).map(|i| if a[(i, i)] > 0.0 { a[(i, i)].sqrt().recip() } else { 0.0 }).collect();
    let b = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * d[i] * d[j]);
    let eig = b.symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let mut out = DMatrix::zeros(n, n);
    let mut bad = vec![false; n];
    for k in 0..n {
        let l = eig.eigenvalues[k];
        let v = eig.eigenvectors.column(k);
        if l > 1e-12 * max && l > 0.0 {
            out += v * v.transpose() / l;
        } else {
            for i in 0..n {
                bad[i] |= v[i].abs() > 1e-6;
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] *= d[i] * d[j];
        }
        if bad[i] || d[i] == 0.0 {
            out[(i, i)] = f64::INFINITY;
        }
    }
    out
}
