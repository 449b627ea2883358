//! Curve fits and estimators for the analysis pipeline.
//!
//! All nonlinear fits go through the damped least-squares driver
//! [`levenberg_marquardt`], with central-difference Jacobians and 95%
//! confidence intervals from the Jacobian Gramian at the optimum. Fit
//! failures return diagnostics; nothing is silently clamped.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("fit '{model}' did not converge after {iterations} iterations (cost {cost:.3e})")]
    NonConvergence {
        model: String,
        iterations: usize,
        cost: f64,
    },
    #[error("under-determined fit: {points} points for {params} parameters")]
    UnderDetermined { points: usize, params: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("signal too flat to fit reliably: max |C| = {0:.3e}")]
    Unreliable(f64),
}

/// Parameter-estimate record produced by every analysis fit.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub model: String,
    pub names: Vec<String>,
    pub values: Vec<f64>,
    /// 95% confidence half-widths (Jacobian-based).
    pub ci95: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn value(&self, name: &str) -> f64 {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter '{name}' in fit '{}'", self.model));
        self.values[i]
    }

    pub fn ci(&self, name: &str) -> f64 {
        let i = self.names.iter().position(|n| n == name).unwrap();
        self.ci95[i]
    }
}

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iterations: usize,
    pub cost_tol: f64,
    pub step_tol: f64,
    /// Relative step for central-difference Jacobians.
    pub fd_step_rel: f64,
    pub lambda0: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            cost_tol: 1e-14,
            step_tol: 1e-12,
            fd_step_rel: 1e-6,
            lambda0: 1e-3,
        }
    }
}

/// Solve a small dense real linear system by LU with partial pivoting.
fn solve_real(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for k in 0..n {
        let mut pmax = a[k][k].abs();
        let mut prow = k;
        for i in (k + 1)..n {
            if a[i][k].abs() > pmax {
                pmax = a[i][k].abs();
                prow = i;
            }
        }
        if pmax == 0.0 {
            return None;
        }
        a.swap(k, prow);
        b.swap(k, prow);
        for i in (k + 1)..n {
            let f = a[i][k] / a[k][k];
            a[i][k] = 0.0;
            for j in (k + 1)..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in (i + 1)..n {
            acc -= a[i][j] * x[j];
        }
        x[i] = acc / a[i][i];
    }
    Some(x)
}

fn jacobian_central<F>(f: &F, x: &[f64], fd_rel: f64) -> (Vec<Vec<f64>>, usize)
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = x.len();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut m = 0;
    for k in 0..n {
        let h = fd_rel * x[k].abs().max(1e-30) + fd_rel * 1e-12;
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += h;
        xm[k] -= h;
        let rp = f(&xp);
        let rm = f(&xm);
        m = rp.len();
        cols.push(
            rp.iter()
                .zip(rm.iter())
                .map(|(p, q)| (p - q) / (2.0 * h))
                .collect(),
        );
    }
    (cols, m)
}

/// Damped least squares on a residual vector.
///
/// Returns the optimum, the 95% CI half-widths, the final residual 2-norm,
/// the iteration count, and a convergence flag.
pub fn levenberg_marquardt<F>(
    f: F,
    x0: &[f64],
    opts: &LmOptions,
) -> (Vec<f64>, Vec<f64>, f64, usize, bool)
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut r = f(&x);
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    let mut lambda = opts.lambda0;
    let mut converged = false;
    let mut iters = 0;
    let mut stalled = 0usize;

    for it in 0..opts.max_iterations {
        iters = it + 1;
        let (jcols, m) = jacobian_central(&f, &x, opts.fd_step_rel);
        // Normal equations: (JᵀJ + λ diag(JᵀJ)) δ = -Jᵀr
        let mut jtj = vec![vec![0.0; n]; n];
        let mut jtr = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                jtj[i][j] = (0..m).map(|k| jcols[i][k] * jcols[j][k]).sum();
            }
            jtr[i] = (0..m).map(|k| jcols[i][k] * r[k]).sum();
        }
        let gnorm = jtr.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if gnorm < 1e-18 {
            converged = true;
            break;
        }

        let mut accepted = false;
        for _try in 0..16 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[i][i] += lambda * jtj[i][i].max(1e-30);
            }
            let mut b: Vec<f64> = jtr.iter().map(|v| -v).collect();
            let Some(delta) = solve_real(&mut a, &mut b) else {
                lambda *= 10.0;
                continue;
            };
            let xn: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
            let rn = f(&xn);
            let cn: f64 = rn.iter().map(|v| v * v).sum();
            if cn.is_finite() && cn < cost {
                let rel_drop = (cost - cn) / cost.max(1e-300);
                x = xn;
                r = rn;
                cost = cn;
                lambda = (lambda / 3.0).max(1e-14);
                accepted = true;
                if cost < opts.cost_tol {
                    converged = true;
                } else if rel_drop < opts.step_tol {
                    // Progress has stalled at the attainable floor.
                    stalled += 1;
                    if stalled >= 2 {
                        converged = true;
                    }
                } else {
                    stalled = 0;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent direction left; treat the current point as final.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    // CI from the Gramian at the optimum: cov = s² (JᵀJ)⁻¹.
    let (jcols, m) = jacobian_central(&f, &x, opts.fd_step_rel);
    let dof = m.saturating_sub(n).max(1);
    let s2 = cost / dof as f64;
    let mut ci = vec![0.0; n];
    let mut jtj = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            jtj[i][j] = (0..m).map(|k| jcols[i][k] * jcols[j][k]).sum();
        }
    }
    for i in 0..n {
        let mut a = jtj.clone();
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        if let Some(col) = solve_real(&mut a, &mut e) {
            if col[i] > 0.0 {
                ci[i] = 1.96 * (s2 * col[i]).sqrt();
            }
        }
    }

    (x, ci, cost.sqrt(), iters, converged)
}

#[cfg(test)]
mod lm_tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn recovers_exponential_parameters() {
        let t: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let truth = [2.5, 0.8];
        let data: Vec<f64> = t.iter().map(|&ti| truth[0] * (-truth[1] * ti).exp()).collect();
        let resid = |p: &[f64]| -> Vec<f64> {
            t.iter()
                .zip(data.iter())
                .map(|(&ti, &d)| p[0] * (-p[1] * ti).exp() - d)
                .collect()
        };
        let (x, _ci, rnorm, _it, conv) =
            levenberg_marquardt(resid, &[1.0, 0.3], &LmOptions::default());
        assert!(conv);
        assert!(rnorm < 1e-8);
        assert_abs_diff_eq!(x[0], truth[0], epsilon = 1e-8);
        assert_abs_diff_eq!(x[1], truth[1], epsilon = 1e-8);
    }

    #[test]
    fn ci_covers_noisy_truth() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let t: Vec<f64> = (0..80).map(|i| i as f64 * 0.05).collect();
        let truth = [1.0, 1.3];
        let mut hits = 0;
        let trials = 50;
        for _ in 0..trials {
            let data: Vec<f64> = t
                .iter()
                .map(|&ti| truth[0] * (-truth[1] * ti).exp() + 0.01 * (rng.gen::<f64>() - 0.5) * 2.0)
                .collect();
            let resid = |p: &[f64]| -> Vec<f64> {
                t.iter()
                    .zip(data.iter())
                    .map(|(&ti, &d)| p[0] * (-p[1] * ti).exp() - d)
                    .collect()
            };
            let (x, ci, _, _, _) = levenberg_marquardt(resid, &[0.8, 1.0], &LmOptions::default());
            if (x[1] - truth[1]).abs() <= ci[1] {
                hits += 1;
            }
        }
        // 95% CI should cover the truth in the overwhelming majority of trials.
        assert!(hits >= 44, "CI covered truth only {hits}/{trials} times");
    }
}
