//! Mehrotra predictor-corrector interior point for the storage program
//!
//! ```text
//! min  Σ_t ½ [p b] Q_t [p b]ᵀ + g_t·[p b]
//! s.t. p_t/η − η b_t + e_t − e_{t−1} = 0      (e_{−1} = e0)
//!      0 ≤ p_t ≤ R,  0 ≤ b_t ≤ R,  0 ≤ e_t ≤ E
//! ```
//!
//! The Hessian is block diagonal per interval, so the normal-equation matrix
//! `A H⁻¹ Aᵀ` is tridiagonal and each iteration costs O(T).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Iterations without improvement before a stalled solve stops.
const STALL_ITERS: usize = 30;

/// Per-interval data of the structured QP.
#[derive(Debug, Clone)]
pub(crate) struct StorageQp {
    pub eta: f64,
    pub e0: f64,
    /// Upper bounds of (p, b, e).
    pub ub: [f64; 3],
    /// Linear cost on (p, b).
    pub g: Vec<[f64; 2]>,
    /// Hessian entries (pp, pb, bb) on (p, b).
    pub q: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IpmOptions {
    pub max_iter: usize,
    /// Relative tolerance on residuals and complementarity.
    pub tol: f64,
    /// Looser tolerance accepted when rounding stalls progress above `tol`.
    pub accept_tol: f64,
    /// Same fallback on the unscaled residual, kept below the public KKT bound.
    pub accept_abs: f64,
}

impl Default for IpmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-11,
            accept_tol: 1e-9,
            accept_abs: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct QpSolution {
    /// Primal values, index `3t + k` with k = 0 (p), 1 (b), 2 (e).
    pub x: Vec<f64>,
    /// Multipliers of the equality rows (sign convention of `A x = c`).
    pub nu: Vec<f64>,
    pub zl: Vec<f64>,
    pub zu: Vec<f64>,
    pub iterations: usize,
}

struct Direction {
    dx: Vec<f64>,
    dnu: Vec<f64>,
    dzl: Vec<f64>,
    dzu: Vec<f64>,
}

impl StorageQp {
    fn horizon(&self) -> usize {
        self.g.len()
    }

    fn upper(&self, i: usize) -> f64 {
        self.ub[i % 3]
    }

    /// `A x − c`.
    fn primal_residual(&self, x: &[f64], out: &mut [f64]) {
        let t_len = self.horizon();
        for t in 0..t_len {
            let prev = if t == 0 { self.e0 } else { x[3 * (t - 1) + 2] };
            out[t] = x[3 * t] / self.eta - self.eta * x[3 * t + 1] + x[3 * t + 2] - prev;
        }
    }

    /// `Aᵀ ν` accumulated into `out`.
    fn add_at_nu(&self, nu: &[f64], scale: f64, out: &mut [f64]) {
        let t_len = self.horizon();
        for t in 0..t_len {
            out[3 * t] += scale * nu[t] / self.eta;
            out[3 * t + 1] -= scale * nu[t] * self.eta;
            let next = if t + 1 < t_len { nu[t + 1] } else { 0.0 };
            out[3 * t + 2] += scale * (nu[t] - next);
        }
    }

    /// `Q x + g − Aᵀν − zl + zu`.
    fn dual_residual(&self, x: &[f64], nu: &[f64], zl: &[f64], zu: &[f64], out: &mut [f64]) {
        for t in 0..self.horizon() {
            let [qpp, qpb, qbb] = self.q[t];
            let (p, b) = (x[3 * t], x[3 * t + 1]);
            out[3 * t] = qpp * p + qpb * b + self.g[t][0];
            out[3 * t + 1] = qpb * p + qbb * b + self.g[t][1];
            out[3 * t + 2] = 0.0;
        }
        self.add_at_nu(nu, -1.0, out);
        for i in 0..out.len() {
            out[i] += zu[i] - zl[i];
        }
    }

    /// Solves the Newton system for complementarity residuals `r_cl`, `r_cu`.
    #[allow(clippy::too_many_arguments)]
    fn newton(
        &self,
        x: &[f64],
        w: &[f64],
        zl: &[f64],
        zu: &[f64],
        r_d: &[f64],
        r_p: &[f64],
        r_cl: &[f64],
        r_cu: &[f64],
    ) -> Direction {
        let t_len = self.horizon();
        let n = 3 * t_len;
        let mut rt = vec![0.0; n];
        let mut hdiag = vec![0.0; n];
        for i in 0..n {
            hdiag[i] = zl[i] / x[i] + zu[i] / w[i];
            rt[i] = -r_d[i] - r_cl[i] / x[i] + r_cu[i] / w[i];
        }
        // Block inverses of H: 2x2 on (p, b), scalar on e.
        let mut inv = vec![[0.0f64; 3]; t_len];
        for t in 0..t_len {
            let [qpp, qpb, qbb] = self.q[t];
            let a = qpp + hdiag[3 * t];
            let d = qbb + hdiag[3 * t + 1];
            let det = a * d - qpb * qpb;
            inv[t] = [d / det, -qpb / det, a / det];
        }
        let apply_hinv = |v: &[f64], out: &mut [f64]| {
            for t in 0..t_len {
                let [ia, ib, id] = inv[t];
                let (vp, vb) = (v[3 * t], v[3 * t + 1]);
                out[3 * t] = ia * vp + ib * vb;
                out[3 * t + 1] = ib * vp + id * vb;
                out[3 * t + 2] = v[3 * t + 2] / hdiag[3 * t + 2];
            }
        };

        let mut hrt = vec![0.0; n];
        apply_hinv(&rt, &mut hrt);
        // rhs = −r_p − A H⁻¹ rt
        let mut rhs = vec![0.0; t_len];
        {
            let mut ahr = vec![0.0; t_len];
            // A applied to hrt without the e0 offset.
            for t in 0..t_len {
                let prev = if t == 0 { 0.0 } else { hrt[3 * (t - 1) + 2] };
                ahr[t] = hrt[3 * t] / self.eta - self.eta * hrt[3 * t + 1] + hrt[3 * t + 2] - prev;
            }
            for t in 0..t_len {
                rhs[t] = -r_p[t] - ahr[t];
            }
        }
        // M = A H⁻¹ Aᵀ = diag(s) plus a path Laplacian with edge weights c_t
        // (SoC columns), grounded at the last node.
        let a_pb = [1.0 / self.eta, -self.eta];
        let s: Vec<f64> = (0..t_len)
            .map(|t| {
                let [ia, ib, id] = inv[t];
                a_pb[0] * (ia * a_pb[0] + ib * a_pb[1]) + a_pb[1] * (ib * a_pb[0] + id * a_pb[1])
            })
            .collect();
        let c: Vec<f64> = (0..t_len).map(|t| 1.0 / hdiag[3 * t + 2]).collect();
        let a_dir = |d: &[f64], out: &mut [f64]| {
            for t in 0..t_len {
                let prev = if t == 0 { 0.0 } else { d[3 * (t - 1) + 2] };
                out[t] = d[3 * t] / self.eta - self.eta * d[3 * t + 1] + d[3 * t + 2] - prev;
            }
        };
        let mut dnu = crate::linalg::solve_grounded_path(&s, &c, &rhs);
        let mut tmp = rt;
        self.add_at_nu(&dnu, 1.0, &mut tmp);
        let mut dx = vec![0.0; n];
        apply_hinv(&tmp, &mut dx);

        // One refinement pass on A dx = −r_p; near the boundary H spans many
        // decades and the first solve loses the primal rows.
        let mut err = vec![0.0; t_len];
        a_dir(&dx, &mut err);
        for t in 0..t_len {
            err[t] = -r_p[t] - err[t];
        }
        let fix = crate::linalg::solve_grounded_path(&s, &c, &err);
        let mut at = vec![0.0; n];
        self.add_at_nu(&fix, 1.0, &mut at);
        let mut dfix = vec![0.0; n];
        apply_hinv(&at, &mut dfix);
        for i in 0..n {
            dx[i] += dfix[i];
        }
        for t in 0..t_len {
            dnu[t] += fix[t];
        }
        let mut dzl = vec![0.0; n];
        let mut dzu = vec![0.0; n];
        for i in 0..n {
            dzl[i] = -(r_cl[i] + zl[i] * dx[i]) / x[i];
            dzu[i] = (-r_cu[i] + zu[i] * dx[i]) / w[i];
        }
        Direction { dx, dnu, dzl, dzu }
    }

    pub(crate) fn solve(&self, opts: &IpmOptions) -> Result<QpSolution> {
        let t_len = self.horizon();
        let n = 3 * t_len;
        if t_len == 0 {
            return Ok(QpSolution {
                x: vec![],
                nu: vec![],
                zl: vec![],
                zu: vec![],
                iterations: 0,
            });
        }
        let gscale = self
            .g
            .iter()
            .flat_map(|g| g.iter())
            .chain(self.q.iter().flat_map(|q| q.iter()))
            .fold(1.0f64, |m, v| m.max(v.abs()));
        let uscale = self.ub.iter().fold(1.0f64, |m, v| m.max(*v));
        let tol_p = opts.tol * uscale;
        let tol_d = opts.tol * gscale;
        let tol_c = opts.tol * gscale * uscale;

        let mut x: Vec<f64> = (0..n).map(|i| 0.5 * self.upper(i)).collect();
        let mut w: Vec<f64> = (0..n).map(|i| self.upper(i) - x[i]).collect();
        let z0 = gscale.sqrt();
        let mut zl = vec![z0; n];
        let mut zu = vec![z0; n];
        let mut nu = vec![0.0; t_len];

        let mut r_d = vec![0.0; n];
        let mut r_p = vec![0.0; t_len];
        let mut r_cl = vec![0.0; n];
        let mut r_cu = vec![0.0; n];
        let mut last_residual = f64::INFINITY;
        let mut best = (f64::INFINITY, 0, vec![], vec![], vec![], vec![]);
        let mut best_abs = f64::INFINITY;
        let acceptable = |scaled: f64, abs: f64| scaled <= opts.accept_tol || abs <= opts.accept_abs;

        for iter in 0..opts.max_iter {
            self.dual_residual(&x, &nu, &zl, &zu, &mut r_d);
            self.primal_residual(&x, &mut r_p);
            let pinf = r_p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let dinf = r_d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let comp = (0..n).fold(0.0f64, |m, i| m.max(x[i] * zl[i]).max(w[i] * zu[i]));
            last_residual = (pinf / uscale).max(dinf / gscale).max(comp / (gscale * uscale));
            if pinf <= tol_p && dinf <= tol_d && comp <= tol_c {
                return Ok(QpSolution {
                    x,
                    nu,
                    zl,
                    zu,
                    iterations: iter,
                });
            }
            if last_residual < best.0 {
                best = (last_residual, iter, x.clone(), nu.clone(), zl.clone(), zu.clone());
                best_abs = pinf.max(dinf).max(comp);
            } else if iter - best.1 > STALL_ITERS && acceptable(best.0, best_abs) {
                // rounding floor reached above the target tolerance
                break;
            }
            let mu = (0..n).map(|i| x[i] * zl[i] + w[i] * zu[i]).sum::<f64>() / (2 * n) as f64;

            // predictor
            for i in 0..n {
                r_cl[i] = x[i] * zl[i];
                r_cu[i] = w[i] * zu[i];
            }
            let aff = self.newton(&x, &w, &zl, &zu, &r_d, &r_p, &r_cl, &r_cu);
            let alpha_aff = step_length(&x, &w, &zl, &zu, &aff, 1.0);
            let mu_aff = (0..n)
                .map(|i| {
                    (x[i] + alpha_aff * aff.dx[i]) * (zl[i] + alpha_aff * aff.dzl[i])
                        + (w[i] - alpha_aff * aff.dx[i]) * (zu[i] + alpha_aff * aff.dzu[i])
                })
                .sum::<f64>()
                / (2 * n) as f64;
            let sigma = (mu_aff / mu).powi(3).min(1.0);

            // corrector
            for i in 0..n {
                r_cl[i] = x[i] * zl[i] + aff.dx[i] * aff.dzl[i] - sigma * mu;
                r_cu[i] = w[i] * zu[i] - aff.dx[i] * aff.dzu[i] - sigma * mu;
            }
            let dir = self.newton(&x, &w, &zl, &zu, &r_d, &r_p, &r_cl, &r_cu);
            let alpha = step_length(&x, &w, &zl, &zu, &dir, 0.995);
            if !alpha.is_finite() || alpha <= 0.0 {
                break;
            }
            for i in 0..n {
                x[i] += alpha * dir.dx[i];
                w[i] -= alpha * dir.dx[i];
                zl[i] += alpha * dir.dzl[i];
                zu[i] += alpha * dir.dzu[i];
            }
            for t in 0..t_len {
                nu[t] += alpha * dir.dnu[t];
            }
            if x.iter().chain(&zl).any(|v| !v.is_finite()) {
                break;
            }
        }
        if acceptable(best.0, best_abs) {
            let (_, iterations, x, nu, zl, zu) = best;
            return Ok(QpSolution {
                x,
                nu,
                zl,
                zu,
                iterations,
            });
        }
        Err(Error::NonConvergence {
            iterations: opts.max_iter,
            residual: last_residual.min(best.0),
        })
    }
}

/// Largest step in (0, 1] keeping all slacks and multipliers positive, damped by `frac`.
fn step_length(x: &[f64], w: &[f64], zl: &[f64], zu: &[f64], d: &Direction, frac: f64) -> f64 {
    let mut a = 1.0f64;
    for i in 0..x.len() {
        let dx = d.dx[i];
        if dx < 0.0 {
            a = a.min(-frac * x[i] / dx);
        }
        if dx > 0.0 {
            a = a.min(frac * w[i] / dx);
        }
        if d.dzl[i] < 0.0 {
            a = a.min(-frac * zl[i] / d.dzl[i]);
        }
        if d.dzu[i] < 0.0 {
            a = a.min(-frac * zu[i] / d.dzu[i]);
        }
    }
    a
}

