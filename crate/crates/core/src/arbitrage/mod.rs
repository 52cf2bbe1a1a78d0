//! Horizon arbitrage programs and their duals.
//!
//! The price-taker program maximizes `Σ λ_t (p_t − b_t) − c(p_t, b_t)` over
//! the storage feasibility set; the price-maker variants replace `λ_t` with
//! the realized price `λ_t − f(p_t − b_t)`.
//!
//! Dual signs follow the Lagrangian of the maximization:
//!
//! ```text
//! λ_t − ∂c/∂p − θ_t/η − ū_t + u̲_t = 0
//! −λ_t + θ_t η − v̄_t + v̲_t = 0
//! −θ_t + θ_{t+1} − w̄_t + w̲_t = 0      (θ_{T+1} = 0)
//! ```
//!
//! so `θ_t ≥ 0` for nonnegative prices and `θ_1 = ∂V/∂e_0`.

mod ipm;

pub use ipm::IpmOptions;
use ipm::{QpSolution, StorageQp};

use serde::{Deserialize, Serialize};

use crate::domain::{ArbSolution, SensitivityKind, SensitivityModel, StorageParams};
use crate::error::{Error, Result};

/// One horizon arbitrage instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ArbProblem {
    pub prices: Vec<f64>,
    pub params: StorageParams,
    /// SoC before the first interval; overrides `params.initial_soc`.
    pub initial_soc: f64,
    pub sensitivity: SensitivityModel,
}

impl ArbProblem {
    pub fn price_taker(prices: &[f64], params: &StorageParams, initial_soc: f64) -> Self {
        Self {
            prices: prices.to_vec(),
            params: *params,
            initial_soc,
            sensitivity: SensitivityModel::PRICE_TAKER,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.sensitivity.validate()?;
        if self.prices.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("prices must be finite"));
        }
        if !(0.0..=self.params.capacity).contains(&self.initial_soc) {
            return Err(Error::invalid("initial soc out of range"));
        }
        Ok(())
    }

    /// Solves the program with the algorithm appropriate for its sensitivity.
    pub fn solve(&self, opts: &IpmOptions) -> Result<ArbSolution> {
        self.validate()?;
        if self.prices.is_empty() {
            return Ok(ArbSolution::empty());
        }
        match self.sensitivity.kind {
            _ if self.sensitivity.is_price_taker() => {
                let qp = self.quadratic_program(0.0);
                let sol = qp.solve(opts)?;
                Ok(self.to_solution(&sol))
            }
            SensitivityKind::Linear => {
                let qp = self.quadratic_program(self.sensitivity.alpha);
                let sol = qp.solve(opts)?;
                Ok(self.to_solution(&sol))
            }
            SensitivityKind::Cubic | SensitivityKind::PriceTaker => solve_sqp(self, opts),
        }
    }

    /// Linear and quadratic cost of the minimization form, with an optional
    /// linear impact `α y²` added to the revenue.
    fn quadratic_program(&self, alpha: f64) -> StorageQp {
        let c1 = self.params.cost_linear;
        let c2 = self.params.cost_quadratic;
        StorageQp {
            eta: self.params.efficiency,
            e0: self.initial_soc,
            ub: [self.params.power_rating, self.params.power_rating, self.params.capacity],
            g: self.prices.iter().map(|&l| [c1 - l, l]).collect(),
            q: vec![[2.0 * (alpha + c2), -2.0 * alpha, 2.0 * alpha]; self.prices.len()],
        }
    }

    /// Maps solver variables onto the named multipliers.
    fn to_solution(&self, s: &QpSolution) -> ArbSolution {
        let t_len = self.prices.len();
        let pick = |v: &[f64], k: usize| (0..t_len).map(|t| v[3 * t + k]).collect::<Vec<_>>();
        let p = pick(&s.x, 0);
        let b = pick(&s.x, 1);
        let objective = self.objective(&p, &b);
        ArbSolution {
            e: pick(&s.x, 2),
            theta: s.nu.iter().map(|v| -v).collect(),
            u_lo: pick(&s.zl, 0),
            u_hi: pick(&s.zu, 0),
            v_lo: pick(&s.zl, 1),
            v_hi: pick(&s.zu, 1),
            w_lo: pick(&s.zl, 2),
            w_hi: pick(&s.zu, 2),
            p,
            b,
            objective,
            iterations: s.iterations,
        }
    }

    /// Profit of a dispatch under this problem's prices and sensitivity.
    pub fn objective(&self, p: &[f64], b: &[f64]) -> f64 {
        self.prices
            .iter()
            .zip(p.iter().zip(b))
            .map(|(&l, (&p, &b))| self.sensitivity.revenue(l, p - b) - self.params.cost(p, b))
            .sum()
    }

    /// Marginal revenue of net output `y` at interval `t`.
    fn marginal_revenue(&self, t: usize, y: f64) -> f64 {
        self.prices[t] - self.sensitivity.impact_cost_slope(y)
    }
}

/// Maximum absolute KKT violations of a solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    /// Most negative inequality dual, as a positive number.
    pub dual_feasibility: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual_feasibility)
            .max(self.complementarity)
    }
}

/// Evaluates every KKT condition of `prob` at `sol`.
pub fn kkt_residuals(prob: &ArbProblem, sol: &ArbSolution) -> KktResiduals {
    let par = &prob.params;
    let eta = par.efficiency;
    let t_len = prob.prices.len();
    let mut r = KktResiduals {
        stationarity: 0.0,
        primal: 0.0,
        dual_feasibility: 0.0,
        complementarity: 0.0,
    };
    let upd = |m: &mut f64, v: f64| *m = m.max(v.abs());
    for t in 0..t_len {
        let (p, b, e) = (sol.p[t], sol.b[t], sol.e[t]);
        let mr = prob.marginal_revenue(t, p - b);
        let th = sol.theta[t];
        let th_next = if t + 1 < t_len { sol.theta[t + 1] } else { 0.0 };
        upd(
            &mut r.stationarity,
            mr - par.marginal_discharge_cost(p) - th / eta - sol.u_hi[t] + sol.u_lo[t],
        );
        upd(&mut r.stationarity, -mr + th * eta - sol.v_hi[t] + sol.v_lo[t]);
        upd(&mut r.stationarity, -th + th_next - sol.w_hi[t] + sol.w_lo[t]);

        let e_prev = if t == 0 { prob.initial_soc } else { sol.e[t - 1] };
        upd(&mut r.primal, e - e_prev + p / eta - b * eta);
        for (v, hi) in [(p, par.power_rating), (b, par.power_rating), (e, par.capacity)] {
            upd(&mut r.primal, (-v).max(0.0));
            upd(&mut r.primal, (v - hi).max(0.0));
        }
        for d in [sol.u_lo[t], sol.u_hi[t], sol.v_lo[t], sol.v_hi[t], sol.w_lo[t], sol.w_hi[t]] {
            upd(&mut r.dual_feasibility, (-d).max(0.0));
        }
        for c in [
            sol.u_hi[t] * (par.power_rating - p),
            sol.u_lo[t] * p,
            sol.v_hi[t] * (par.power_rating - b),
            sol.v_lo[t] * b,
            sol.w_hi[t] * (par.capacity - e),
            sol.w_lo[t] * e,
        ] {
            upd(&mut r.complementarity, c);
        }
    }
    r
}

/// Price-taker arbitrage with default solver options.
pub fn solve_arbitrage(prob: &ArbProblem) -> Result<ArbSolution> {
    solve_arbitrage_with(prob, &IpmOptions::default())
}

pub fn solve_arbitrage_with(prob: &ArbProblem, opts: &IpmOptions) -> Result<ArbSolution> {
    if !prob.sensitivity.is_price_taker() {
        return Err(Error::invalid("solve_arbitrage requires a price-taker sensitivity"));
    }
    prob.solve(opts)
}

/// Hindsight dispatch against realized prices.
pub fn solve_hindsight(prices: &[f64], params: &StorageParams, e0: f64) -> Result<ArbSolution> {
    solve_arbitrage(&ArbProblem::price_taker(prices, params, e0))
}

/// Hindsight dispatch of a price maker whose output moves the price by `f(y)`.
pub fn solve_hindsight_pricemaker(
    prices: &[f64],
    sensitivity: &SensitivityModel,
    params: &StorageParams,
    e0: f64,
) -> Result<ArbSolution> {
    solve_hindsight_pricemaker_with(prices, sensitivity, params, e0, &IpmOptions::default())
}

pub fn solve_hindsight_pricemaker_with(
    prices: &[f64],
    sensitivity: &SensitivityModel,
    params: &StorageParams,
    e0: f64,
    opts: &IpmOptions,
) -> Result<ArbSolution> {
    if sensitivity.kind == SensitivityKind::PriceTaker {
        return Err(Error::invalid("price-maker hindsight requires a linear or cubic sensitivity"));
    }
    ArbProblem {
        prices: prices.to_vec(),
        params: *params,
        initial_soc: e0,
        sensitivity: *sensitivity,
    }
    .solve(opts)
}

/// Optimal profit over `prices` starting from SoC `e`; zero for an empty horizon.
pub fn opportunity_value(prices: &[f64], params: &StorageParams, e: f64) -> Result<f64> {
    if prices.is_empty() {
        return Ok(0.0);
    }
    Ok(solve_hindsight(prices, params, e)?.objective)
}

/// Sequential quadratic programming for the cubic price maker.
///
/// Each step minimizes the second-order model of the (convex) negated profit
/// over the exact feasible set, then backtracks along the step with an Armijo
/// test. The final QP's multipliers are the duals of the returned solution.
fn solve_sqp(prob: &ArbProblem, opts: &IpmOptions) -> Result<ArbSolution> {
    const MAX_OUTER: usize = 200;
    const FIRST_ORDER_TOL: f64 = 1e-5;
    let t_len = prob.prices.len();
    let alpha = prob.sensitivity.alpha;
    let c1 = prob.params.cost_linear;
    let c2 = prob.params.cost_quadratic;

    let taker = ArbProblem {
        sensitivity: SensitivityModel::PRICE_TAKER,
        ..prob.clone()
    };
    let start = taker.quadratic_program(0.0).solve(opts)?;
    let mut p: Vec<f64> = (0..t_len).map(|t| start.x[3 * t]).collect();
    let mut b: Vec<f64> = (0..t_len).map(|t| start.x[3 * t + 1]).collect();
    let neg_profit = |p: &[f64], b: &[f64]| -prob.objective(p, b);

    let mut iterations = start.iterations;
    let mut last: Option<(QpSolution, f64)> = None;
    for _ in 0..MAX_OUTER {
        let mut g = Vec::with_capacity(t_len);
        let mut q = Vec::with_capacity(t_len);
        let mut grad = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let y = p[t] - b[t];
            let slope = prob.marginal_revenue(t, y);
            let (gp, gb) = (c1 + 2.0 * c2 * p[t] - slope, slope);
            let h = 12.0 * alpha * y * y;
            let qt = [h + 2.0 * c2, -h, h];
            g.push([
                gp - qt[0] * p[t] - qt[1] * b[t],
                gb - qt[1] * p[t] - qt[2] * b[t],
            ]);
            q.push(qt);
            grad.push([gp, gb]);
        }
        let qp = StorageQp {
            eta: prob.params.efficiency,
            e0: prob.initial_soc,
            ub: [prob.params.power_rating, prob.params.power_rating, prob.params.capacity],
            g,
            q,
        };
        let sol = qp.solve(opts)?;
        iterations += sol.iterations;
        let dp: Vec<f64> = (0..t_len).map(|t| sol.x[3 * t] - p[t]).collect();
        let db: Vec<f64> = (0..t_len).map(|t| sol.x[3 * t + 1] - b[t]).collect();
        let step = dp.iter().chain(&db).fold(0.0f64, |m, v| m.max(v.abs()));
        let cand = prob.to_solution(&sol);
        let res = kkt_residuals(prob, &cand).max();
        if step <= 1e-10 || res <= 1e-9 {
            let mut out = cand;
            out.iterations = iterations;
            return Ok(out);
        }
        let slope: f64 = (0..t_len).map(|t| grad[t][0] * dp[t] + grad[t][1] * db[t]).sum();
        let f0 = neg_profit(&p, &b);
        let mut s = 1.0;
        let (mut np, mut nb) = (p.clone(), b.clone());
        for _ in 0..60 {
            for t in 0..t_len {
                np[t] = p[t] + s * dp[t];
                nb[t] = b[t] + s * db[t];
            }
            if neg_profit(&np, &nb) <= f0 + 1e-4 * s * slope.min(0.0) {
                break;
            }
            s *= 0.5;
        }
        p = np;
        b = nb;
        last = Some((sol, res));
    }
    match last {
        Some((sol, res)) if res <= FIRST_ORDER_TOL => {
            let mut out = prob.to_solution(&sol);
            out.iterations = iterations;
            Ok(out)
        }
        Some((_, res)) => Err(Error::NonConvergence {
            iterations: MAX_OUTER,
            residual: res,
        }),
        None => Err(Error::Internal("price-maker iteration did not run".into())),
    }
}
