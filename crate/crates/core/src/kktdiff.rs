//! Sensitivity of the SoC-transition duals to the price forecast.
//!
//! Differentiating every KKT condition of the price-taker program gives a
//! linear system `A dz = rhs dλ` over
//! `z = (p, b, e, θ, ū, u̲, v̄, v̲, w̄, w̲)`, ten blocks of length T.
//! [`assemble_kkt_jacobian`] returns `A` densely in that block order. Solves
//! assemble it directly in time-major order, where it is banded with
//! bandwidth about ten, and factor it with a banded LU. A vanishing pivot falls back to a
//! minimum-norm least-squares solve and marks the result degenerate.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::arbitrage::{ArbProblem, IpmOptions};
use crate::domain::{ArbSolution, StorageParams};
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{least_squares_min_norm, BandMatrix, BandedSolve};

/// Number of variable blocks in the differentiated KKT system.
pub const BLOCKS: usize = 10;
const P: usize = 0;
const B: usize = 1;
const E: usize = 2;
const TH: usize = 3;
const U_HI: usize = 4;
const U_LO: usize = 5;
const V_HI: usize = 6;
const V_LO: usize = 7;
const W_HI: usize = 8;
const W_LO: usize = 9;

/// Slack and multiplier both below this fraction of their scale mark a
/// weakly active constraint, where the dual map has a kink.
const WEAK_ACTIVITY: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KktJacobian {
    /// `10T × 10T` coefficient matrix in block order.
    pub a: DMatrix<f64>,
    /// `10T × T`; block 0 is `−I`, block 1 is `+I`, the rest zero.
    pub rhs: DMatrix<f64>,
    pub horizon: usize,
}

/// `∂θ/∂λ̂` over a horizon, with the degeneracy flag of the solve.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSensitivity {
    pub jacobian: DMatrix<f64>,
    pub degenerate: bool,
    /// Rows of `jacobian` that are uniquely determined by the KKT system.
    pub unique_rows: Vec<bool>,
}

/// First-transition duals and their price Jacobian across SoC levels.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaJacobian {
    /// `θ_j` for each SoC level.
    pub theta: Vec<f64>,
    /// `N × T`; degenerate rows are zero.
    pub jacobian: DMatrix<f64>,
    pub degenerate: Vec<bool>,
}

impl ThetaJacobian {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|d| *d)
    }
}

/// Scale of the bound multipliers, from the prices and the linear cost.
fn dual_scale(params: &StorageParams, prices: &[f64]) -> f64 {
    prices.iter().fold(params.cost_linear.max(1.0), |m, v| m.max(v.abs()))
}

/// Nonzero entries of the differentiated KKT matrix in block order.
///
/// Complementarity rows use the identified active set: multipliers and
/// slacks below `WEAK_ACTIVITY` of their scale count as exact zeros. The
/// solver's residual duals on inactive bounds would otherwise keep a
/// genuinely rank-deficient system barely invertible.
fn kkt_entries(sol: &ArbSolution, params: &StorageParams, prices: &[f64]) -> Vec<(usize, usize, f64)> {
    let t_len = sol.horizon();
    let eta = params.efficiency;
    let r = params.power_rating;
    let cap = params.capacity;
    let zcut = WEAK_ACTIVITY * dual_scale(params, prices);
    let z = |m: f64| if m <= zcut { 0.0 } else { m };
    let sr = |s: f64| if s <= WEAK_ACTIVITY * r { 0.0 } else { s };
    let se = |s: f64| if s <= WEAK_ACTIVITY * cap { 0.0 } else { s };
    let at = |blk: usize, t: usize| blk * t_len + t;
    let mut out = Vec::with_capacity(26 * t_len);
    for t in 0..t_len {
        let mut put = |row: usize, blk: usize, tt: usize, v: f64| out.push((at(row, t), at(blk, tt), v));
        // stationarity in p, b, e
        if params.cost_quadratic > 0.0 {
            put(0, P, t, -2.0 * params.cost_quadratic);
        }
        put(0, TH, t, -1.0 / eta);
        put(0, U_HI, t, -1.0);
        put(0, U_LO, t, 1.0);

        put(1, TH, t, eta);
        put(1, V_HI, t, -1.0);
        put(1, V_LO, t, 1.0);

        put(2, TH, t, -1.0);
        if t + 1 < t_len {
            put(2, TH, t + 1, 1.0);
        }
        put(2, W_HI, t, -1.0);
        put(2, W_LO, t, 1.0);

        // SoC transition
        put(3, P, t, 1.0 / eta);
        put(3, B, t, -eta);
        put(3, E, t, 1.0);
        if t > 0 {
            put(3, E, t - 1, -1.0);
        }

        // complementarity
        put(4, P, t, -z(sol.u_hi[t]));
        put(4, U_HI, t, sr(r - sol.p[t]));
        put(5, P, t, z(sol.u_lo[t]));
        put(5, U_LO, t, sr(sol.p[t]));
        put(6, B, t, -z(sol.v_hi[t]));
        put(6, V_HI, t, sr(r - sol.b[t]));
        put(7, B, t, z(sol.v_lo[t]));
        put(7, V_LO, t, sr(sol.b[t]));
        put(8, E, t, -z(sol.w_hi[t]));
        put(8, W_HI, t, se(cap - sol.e[t]));
        put(9, E, t, z(sol.w_lo[t]));
        put(9, W_LO, t, se(sol.e[t]));
    }
    out.retain(|e| e.2 != 0.0);
    out
}

fn check_horizon(sol: &ArbSolution, prices: &[f64]) -> Result<()> {
    if prices.len() != sol.horizon() {
        return Err(Error::shape(format!(
            "{} prices for a horizon of {}",
            prices.len(),
            sol.horizon()
        )));
    }
    Ok(())
}

/// `rhs` in block order: block 0 is `−I`, block 1 is `+I`.
fn kkt_rhs(t_len: usize, time_major_rows: bool) -> DMatrix<f64> {
    let mut rhs = DMatrix::zeros(BLOCKS * t_len, t_len);
    for t in 0..t_len {
        let (r0, r1) = if time_major_rows {
            (BLOCKS * t, BLOCKS * t + 1)
        } else {
            (t, t_len + t)
        };
        rhs[(r0, t)] = -1.0;
        rhs[(r1, t)] = 1.0;
    }
    rhs
}

/// Builds the differentiated KKT system at `sol`.
///
/// The quadratic cost adds `−2 C2 I` in the first block row's `dp` column;
/// with `C2 = 0` that block is absent.
pub fn assemble_kkt_jacobian(sol: &ArbSolution, params: &StorageParams, prices: &[f64]) -> Result<KktJacobian> {
    check_horizon(sol, prices)?;
    let t_len = sol.horizon();
    let n = BLOCKS * t_len;
    let mut a = DMatrix::zeros(n, n);
    for (i, j, v) in kkt_entries(sol, params, prices) {
        a[(i, j)] = v;
    }
    Ok(KktJacobian {
        a,
        rhs: kkt_rhs(t_len, false),
        horizon: t_len,
    })
}

/// Position of block-order index `i` in time-major order.
fn time_major(i: usize, t_len: usize) -> usize {
    let (blk, t) = (i / t_len, i % t_len);
    BLOCKS * t + blk
}

/// True when some constraint has both slack and multiplier near zero.
fn weakly_active(sol: &ArbSolution, params: &StorageParams, prices: &[f64]) -> bool {
    let zscale = dual_scale(params, prices);
    let r = params.power_rating;
    let cap = params.capacity;
    let weak = |slack: f64, scale: f64, mult: f64| {
        slack <= WEAK_ACTIVITY * scale && mult <= WEAK_ACTIVITY * zscale
    };
    (0..sol.horizon()).any(|t| {
        weak(sol.p[t], r, sol.u_lo[t])
            || weak(r - sol.p[t], r, sol.u_hi[t])
            || weak(sol.b[t], r, sol.v_lo[t])
            || weak(r - sol.b[t], r, sol.v_hi[t])
            || weak(sol.e[t], cap, sol.w_lo[t])
            || weak(cap - sol.e[t], cap, sol.w_hi[t])
    })
}

/// Outcome of one linear solve of the differentiated system.
enum SystemSolve {
    /// Nonsingular; the unique solution.
    Exact(DMatrix<f64>),
    /// Singular; the (approximately) minimum-norm least-squares solution and,
    /// per right-hand-side column, whether the system is consistent.
    Singular(DMatrix<f64>, Vec<bool>),
}

impl SystemSolve {
    fn consistent(&self) -> bool {
        match self {
            SystemSolve::Exact(_) => true,
            SystemSolve::Singular(_, ok) => ok.iter().all(|c| *c),
        }
    }

    fn column_consistent(&self, c: usize) -> bool {
        match self {
            SystemSolve::Exact(_) => true,
            SystemSolve::Singular(_, ok) => ok[c],
        }
    }

    fn into_solution(self) -> DMatrix<f64> {
        match self {
            SystemSolve::Exact(x) | SystemSolve::Singular(x, _) => x,
        }
    }
}

const LSTSQ_DELTA: f64 = 1e-14;
const CONSISTENCY_TOL: f64 = 1e-7;

/// `A` (or `Aᵀ`) in time-major order, where it is banded.
struct Permuted {
    a: BandMatrix,
    t_len: usize,
}

impl Permuted {
    fn new(sol: &ArbSolution, params: &StorageParams, prices: &[f64], transpose: bool) -> Self {
        let t_len = sol.horizon();
        let entries: Vec<(usize, usize, f64)> = kkt_entries(sol, params, prices)
            .into_iter()
            .map(|(i, j, v)| {
                let (i, j) = (time_major(i, t_len), time_major(j, t_len));
                if transpose {
                    (j, i, v)
                } else {
                    (i, j, v)
                }
            })
            .collect();
        Self {
            a: BandMatrix::from_triplets(BLOCKS * t_len, &entries),
            t_len,
        }
    }

    /// Solves for a right-hand side given in block order; the result is in block order too.
    fn solve(&self, rhs_block: &DMatrix<f64>) -> SystemSolve {
        let mut rhs = DMatrix::zeros(rhs_block.nrows(), rhs_block.ncols());
        for i in 0..rhs.nrows() {
            rhs.set_row(time_major(i, self.t_len), &rhs_block.row(i));
        }
        let back = |x: DMatrix<f64>| {
            let mut out = DMatrix::zeros(x.nrows(), x.ncols());
            for i in 0..x.nrows() {
                out.set_row(i, &x.row(time_major(i, self.t_len)));
            }
            out
        };
        if let BandedSolve::Solved(x) = self.a.lu_solve(&rhs) {
            if x.iter().all(|v| v.is_finite()) {
                return SystemSolve::Exact(back(x));
            }
        }
        let x = self
            .a
            .regularized_lstsq(&rhs, LSTSQ_DELTA)
            .filter(|x| x.iter().all(|v| v.is_finite()))
            .unwrap_or_else(|| DMatrix::zeros(rhs.nrows(), rhs.ncols()));
        let resid = self.a.mul(&x) - &rhs;
        let ok = (0..rhs.ncols())
            .map(|c| {
                let tol = CONSISTENCY_TOL * rhs.column(c).amax().max(1.0);
                resid.column(c).iter().all(|r| r.abs() <= tol)
            })
            .collect();
        SystemSolve::Singular(back(x), ok)
    }
}

/// Unit columns selecting the θ block rows `rows`.
fn theta_selectors(t_len: usize, rows: std::ops::Range<usize>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(BLOCKS * t_len, rows.len());
    for (c, r) in rows.enumerate() {
        m[(TH * t_len + r, c)] = 1.0;
    }
    m
}

/// Full `T × T` Jacobian `∂θ/∂λ̂` at `sol`.
///
/// A singular `A` arises when active constraints are redundant, e.g. while
/// idling at a SoC bound. If the system stays consistent the derivative
/// exists, but only the θ rows flagged in `unique_rows` are determined; the
/// other rows are taken from the minimum-norm solution. An inconsistent
/// system or a weakly active constraint marks the whole result degenerate.
pub fn dual_price_sensitivity(sol: &ArbSolution, params: &StorageParams, prices: &[f64]) -> Result<DualSensitivity> {
    let kkt = assemble_kkt_jacobian(sol, params, prices)?;
    let t_len = kkt.horizon;
    let weak = weakly_active(sol, params, prices);
    let solved = Permuted::new(sol, params, prices, false).solve(&kkt.rhs);
    let (x, degenerate, unique_rows) = match solved {
        SystemSolve::Exact(x) => (x, weak, vec![true; t_len]),
        singular => {
            let consistent = singular.consistent();
            let x = if consistent {
                singular.into_solution()
            } else {
                least_squares_min_norm(&kkt.a, &kkt.rhs)
            };
            let rows = Permuted::new(sol, params, prices, true).solve(&theta_selectors(t_len, 0..t_len));
            let unique = (0..t_len).map(|r| rows.column_consistent(r)).collect();
            (x, weak || !consistent, unique)
        }
    };
    Ok(DualSensitivity {
        jacobian: x.rows(TH * t_len, t_len).into_owned(),
        degenerate,
        unique_rows,
    })
}

/// Gradient of `θ_1` alone, through one transposed solve `Aᵀ y = e_θ1`, so
/// that the row is `yᵀ rhs`. The flag is set when the row is not determined.
fn first_theta_gradient(sol: &ArbSolution, params: &StorageParams, prices: &[f64]) -> Result<(Vec<f64>, bool)> {
    check_horizon(sol, prices)?;
    let t_len = sol.horizon();
    let solved = Permuted::new(sol, params, prices, true).solve(&theta_selectors(t_len, 0..1));
    let exact = matches!(solved, SystemSolve::Exact(_));
    if !solved.consistent() {
        return Ok((vec![0.0; t_len], true));
    }
    // yᵀ rhs is only well defined when A dz = rhs is itself solvable. Range
    // membership is linear, so one generic combination of the columns decides
    // it for all of them.
    if !exact && !Permuted::new(sol, params, prices, false).solve(&generic_combination(t_len)).consistent() {
        return Ok((vec![0.0; t_len], true));
    }
    let y = solved.into_solution();
    let row = (0..t_len).map(|t| y[(B * t_len + t, 0)] - y[(P * t_len + t, 0)]).collect();
    Ok((row, weakly_active(sol, params, prices)))
}

/// `rhs · r` for a fixed weight vector `r` with no special structure.
fn generic_combination(t_len: usize) -> DMatrix<f64> {
    let r = DVector::from_fn(t_len, |t, _| 1.0 + 0.5 * (1.7 * t as f64 + 0.3).sin());
    DMatrix::from_column_slice(BLOCKS * t_len, 1, (kkt_rhs(t_len, false) * r).as_slice())
}

/// For each SoC level, solves the horizon program from that level and
/// differentiates its first-transition dual. Degenerate levels get a zero row.
pub fn theta_jacobian(prices: &[f64], params: &StorageParams, soc_levels: &[f64]) -> Result<ThetaJacobian> {
    theta_jacobian_with(prices, params, soc_levels, &IpmOptions::default())
}

pub fn theta_jacobian_with(
    prices: &[f64],
    params: &StorageParams,
    soc_levels: &[f64],
    opts: &IpmOptions,
) -> Result<ThetaJacobian> {
    let t_len = prices.len();
    let rows = exec::map(soc_levels, |&e| -> Result<(f64, Vec<f64>, bool)> {
        if t_len == 0 {
            return Ok((0.0, vec![], false));
        }
        let sol = ArbProblem::price_taker(prices, params, e).solve(opts)?;
        let (row, degenerate) = first_theta_gradient(&sol, params, prices)?;
        let row = if degenerate { vec![0.0; t_len] } else { row };
        Ok((sol.theta[0], row, degenerate))
    });
    let mut out = ThetaJacobian {
        theta: Vec::with_capacity(soc_levels.len()),
        jacobian: DMatrix::zeros(soc_levels.len(), t_len),
        degenerate: Vec::with_capacity(soc_levels.len()),
    };
    for (j, r) in rows.into_iter().enumerate() {
        let (theta, row, degenerate) = r?;
        out.theta.push(theta);
        for (k, v) in row.into_iter().enumerate() {
            out.jacobian[(j, k)] = v;
        }
        out.degenerate.push(degenerate);
    }
    Ok(out)
}

/// Writes a matrix as headerless CSV, one row per line.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, mut w: W) -> Result<()> {
    for i in 0..m.nrows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}
