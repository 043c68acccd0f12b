//! Polynomial affine Monte Carlo (PAMC) for CRRA investors.
//!
//! The value function is represented as `W^{1−γ}/(1−γ) · exp(L_t(H, ln S))`
//! with `L_t` a polynomial in the state variable `H = X` and the log-price.
//! Backward induction alternates between the first-order-condition strategy
//! given `L_{t+Δt}`, a one-interval inner resimulation and a regression that
//! produces `L_t`.
//!
//! [`run_pamc_indirect`] optimises in the artificial pure-factor market and
//! converts exposures to instrument weights only at `t = 0`.
//! [`run_pamc_direct`] prices the composition at every node and optimises the
//! instrument weights directly, repricing options on inner draws with their
//! second-order local expansion. Node sensitivities come from a per-run
//! interpolant in `X` ([`LegTable`]), which is exact up to its resolution
//! because re-struck legs are homogeneous in `(S, K)`.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lstsq, singular_values2, solve2};
use crate::model::{factor_geometry, simulate_paths, FactorGeometry, HestonParams, LogState, MarketState, SimConfig, Stepper};
use crate::pricing::{build_sigma, Leg, LegTable, LocalGreeks, PricerConfig, SigmaMatrix};
use crate::rng::{Domain, Substream};
use crate::scalar::{lit, Real};

/// Condition number above which a two-instrument completion is rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Relative resolution of the per-run sensitivity tables of the direct method.
pub const NODE_TABLE_TOL: f64 = 1e-6;

/// Nodes with variance at or below this hold no risky position in the direct method.
pub const X_NODE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvestorSpec<T> {
    /// Relative risk aversion.
    pub gamma: T,
    pub w0: T,
}

impl<T: Real> InvestorSpec<T> {
    pub fn baseline() -> Self {
        Self {
            gamma: lit(4.0),
            w0: T::one(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "InvestorSpec::validate";
        if !(self.gamma > T::zero()) || !self.gamma.is_finite() || self.gamma == T::one() {
            return Err(Error::invalid(OP, "gamma", format!("must be > 0 and != 1, got {}", self.gamma)));
        }
        if !(self.w0 > T::zero()) || !self.w0.is_finite() {
            return Err(Error::invalid(OP, "w0", format!("must be finite and > 0, got {}", self.w0)));
        }
        Ok(())
    }
}

/// Wealth fractions held in the two pure-factor assets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureVector<T> {
    pub eta: [T; 2],
}

/// `η* = (1/γ)(ΦΦᵀ)⁻¹(Λ + ∂P/∂H σ^H A + ∂P/∂lnS σ^S B)`.
pub fn optimal_exposure<T: Real>(
    geom: &FactorGeometry<T>,
    grad_h: T,
    grad_lns: T,
    sigma_h: T,
    sigma_s: T,
    gamma: T,
) -> Result<ExposureVector<T>> {
    const OP: &str = "optimal_exposure";
    if !(gamma > T::zero()) || !gamma.is_finite() {
        return Err(Error::invalid(OP, "gamma", format!("must be > 0, got {gamma}")));
    }
    let rho = geom.rho();
    if !(rho.abs() < T::one()) {
        return Err(Error::invalid(OP, "rho", format!("must lie in (-1, 1), got {rho}")));
    }
    let rhs = rhs_vector(geom, grad_h, grad_lns, sigma_h, sigma_s);
    let m = geom.correlation();
    let sol = solve2(m, rhs).ok_or_else(|| Error::numerical(OP, "singular correlation matrix"))?;
    Ok(ExposureVector {
        eta: [sol[0] / gamma, sol[1] / gamma],
    })
}

#[inline]
fn rhs_vector<T: Real>(geom: &FactorGeometry<T>, grad_h: T, grad_lns: T, sigma_h: T, sigma_s: T) -> [T; 2] {
    let gh = grad_h * sigma_h;
    let gs = grad_lns * sigma_s;
    [
        geom.lambda_vec[0] + gh * geom.a_vec[0] + gs * geom.b_vec[0],
        geom.lambda_vec[1] + gh * geom.a_vec[1] + gs * geom.b_vec[1],
    ]
}

fn pair_condition<T: Real>(rows: &[[T; 2]]) -> T {
    let s = singular_values2([rows[0], rows[1]]);
    if s[1] > T::zero() {
        s[0] / s[1]
    } else {
        T::infinity()
    }
}

fn check_pair<T: Real>(op: &'static str, rows: &[[T; 2]], names: impl Fn(usize) -> String) -> Result<()> {
    if rows.len() != 2 {
        return Err(Error::invalid(op, "sigma", format!("expected 2 instruments, got {}", rows.len())));
    }
    let cond = pair_condition(rows);
    if !(cond <= lit(MAX_CONDITION)) {
        return Err(Error::IllConditioned {
            op,
            first: names(0),
            second: names(1),
            cond: cond.to_f64_lossy(),
        });
    }
    Ok(())
}

/// Unique solution of `Σᵀπ = η` for a two-instrument composition.
pub fn exposure_to_weights<T: Real>(eta: &ExposureVector<T>, sigma: &SigmaMatrix<T>) -> Result<Vec<T>> {
    const OP: &str = "exposure_to_weights";
    let label = |i: usize| sigma.instruments.get(i).map(|s| s.label()).unwrap_or_else(|| format!("#{i}"));
    check_pair(OP, &sigma.rows, label)?;
    weights_from_rows(OP, &sigma.rows, eta)
}

fn weights_from_rows<T: Real>(op: &'static str, rows: &[[T; 2]], eta: &ExposureVector<T>) -> Result<Vec<T>> {
    let st = [[rows[0][0], rows[1][0]], [rows[0][1], rows[1][1]]];
    let pi = solve2(st, eta.eta).ok_or_else(|| Error::numerical(op, "singular variance matrix"))?;
    Ok(pi.to_vec())
}

/// Instrument weights from the derivatives-market first-order condition
/// `π* = (1/γ)(ΣΦΦᵀΣᵀ)⁻¹(ΣΛ + ∂P/∂H σ^H ΣA + ∂P/∂lnS σ^S ΣB)`.
pub fn direct_weights<T: Real>(
    geom: &FactorGeometry<T>,
    rows: &[[T; 2]],
    grad_h: T,
    grad_lns: T,
    sigma_h: T,
    sigma_s: T,
    gamma: T,
) -> Result<Vec<T>> {
    const OP: &str = "direct_weights";
    check_pair(OP, rows, |i| format!("instrument #{i}"))?;
    let v = rhs_vector(geom, grad_h, grad_lns, sigma_h, sigma_s);
    let m = geom.correlation();
    let sm = |r: &[T; 2]| [r[0] * m[0][0] + r[1] * m[1][0], r[0] * m[0][1] + r[1] * m[1][1]];
    let dot = |a: [T; 2], b: &[T; 2]| a[0] * b[0] + a[1] * b[1];
    let (r0, r1) = (&rows[0], &rows[1]);
    let q = [[dot(sm(r0), r0), dot(sm(r0), r1)], [dot(sm(r1), r0), dot(sm(r1), r1)]];
    let b = [dot(v, r0), dot(v, r1)];
    let pi = solve2(q, b).ok_or_else(|| Error::numerical(OP, "singular instrument covariance"))?;
    Ok(vec![pi[0] / gamma, pi[1] / gamma])
}

/// Exposure, weights and risk-exposure norm at one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult<T> {
    pub eta: ExposureVector<T>,
    pub pi: Vec<T>,
    pub sigma: SigmaMatrix<T>,
    pub l1: T,
    pub cash: T,
}

impl<T: Real> AllocationResult<T> {
    pub fn new(eta: ExposureVector<T>, pi: Vec<T>, sigma: SigmaMatrix<T>) -> Self {
        let l1 = pi.iter().fold(T::zero(), |a, p| a + p.abs());
        let cash = pi.iter().fold(T::one(), |a, &p| a - p);
        Self { eta, pi, sigma, l1, cash }
    }

    /// `max |Σᵀπ − η|`.
    pub fn residual(&self) -> T {
        let mut r = [T::zero(), T::zero()];
        for (row, p) in self.sigma.rows.iter().zip(self.pi.iter()) {
            r[0] = r[0] + row[0] * *p;
            r[1] = r[1] + row[1] * *p;
        }
        (r[0] - self.eta.eta[0]).abs().max((r[1] - self.eta.eta[1]).abs())
    }
}

/// `ln[(1/N) Σ W^{1−γ} exp(L)] − (1−γ) ln W₀`; `next_values = None` at the terminal step.
pub fn transformed_value_sample<T: Real>(inner_wealth: &[T], next_values: Option<&[T]>, gamma: T, w0: T) -> Result<T> {
    const OP: &str = "transformed_value_sample";
    if inner_wealth.is_empty() {
        return Err(Error::invalid(OP, "inner_wealth", "no inner samples"));
    }
    if let Some(v) = next_values {
        if v.len() != inner_wealth.len() {
            return Err(Error::invalid(OP, "next_values", "length differs from inner_wealth"));
        }
    }
    let one_m_g = T::one() - gamma;
    let mut terms = Vec::with_capacity(inner_wealth.len());
    for (i, &w) in inner_wealth.iter().enumerate() {
        if !(w > T::zero()) {
            return Err(Error::Bankruptcy {
                op: OP,
                wealth: w.to_f64_lossy(),
            });
        }
        let l = next_values.map_or(T::zero(), |v| v[i]);
        terms.push(one_m_g * (w / w0).ln() + l);
    }
    log_mean_exp(&terms).ok_or_else(|| Error::NonFinite {
        op: OP,
        reason: "transformed value is not finite".into(),
    })
}

fn log_mean_exp<T: Real>(terms: &[T]) -> Option<T> {
    let m = terms.iter().cloned().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return None;
    }
    let s = terms.iter().fold(T::zero(), |a, &t| a + (t - m).exp());
    let out = m + (s / T::from_usize_lossy(terms.len())).ln();
    out.is_finite().then_some(out)
}

/// Polynomial basis in `(H, ln S)` with per-slice standardisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyBasis<T> {
    pub order: usize,
    pub mean: [T; 2],
    pub scale: [T; 2],
    /// Variables with no spread in the sample are excluded from the fit.
    pub active: [bool; 2],
}

impl<T: Real> PolyBasis<T> {
    pub fn new(order: usize) -> Self {
        Self {
            order,
            mean: [T::zero(), T::zero()],
            scale: [T::one(), T::one()],
            active: [true, true],
        }
    }

    /// `(a, b)` exponents of `H^a (ln S)^b`, graded by total degree.
    pub fn exponents(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for d in 0..=self.order {
            for a in (0..=d).rev() {
                out.push((a, d - a));
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        (self.order + 1) * (self.order + 2) / 2
    }

    fn fitted(order: usize, samples: &[(T, T, T)]) -> Self {
        let n = T::from_usize_lossy(samples.len());
        let mut mean = [T::zero(), T::zero()];
        for &(h, s, _) in samples {
            mean[0] = mean[0] + h;
            mean[1] = mean[1] + s;
        }
        mean = [mean[0] / n, mean[1] / n];
        let mut var = [T::zero(), T::zero()];
        for &(h, s, _) in samples {
            var[0] = var[0] + (h - mean[0]) * (h - mean[0]);
            var[1] = var[1] + (s - mean[1]) * (s - mean[1]);
        }
        let mut scale = [T::one(), T::one()];
        let mut active = [true, true];
        for i in 0..2 {
            let sd = (var[i] / n).sqrt();
            if sd > T::epsilon() * lit(1e3) * (T::one() + mean[i].abs()) {
                scale[i] = sd;
            } else {
                active[i] = false;
            }
        }
        Self {
            order,
            mean,
            scale,
            active,
        }
    }

    #[inline]
    fn z(&self, h: T, lns: T) -> [T; 2] {
        [(h - self.mean[0]) / self.scale[0], (lns - self.mean[1]) / self.scale[1]]
    }

    fn powers(&self, z: T) -> Vec<T> {
        let mut p = Vec::with_capacity(self.order + 1);
        let mut acc = T::one();
        for _ in 0..=self.order {
            p.push(acc);
            acc = acc * z;
        }
        p
    }

    fn uses(&self, a: usize, b: usize) -> bool {
        (a == 0 || self.active[0]) && (b == 0 || self.active[1])
    }
}

/// One fitted `L_t`, with the bounding box of the states it was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSlice<T> {
    pub basis: PolyBasis<T>,
    /// Coefficients in standardised variables; empty for the zero function.
    pub coeffs: Vec<T>,
    pub lo: [T; 2],
    pub hi: [T; 2],
}

impl<T: Real> ValueSlice<T> {
    pub fn zero(order: usize) -> Self {
        Self {
            basis: PolyBasis::new(order),
            coeffs: Vec::new(),
            lo: [T::neg_infinity(), T::neg_infinity()],
            hi: [T::infinity(), T::infinity()],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| *c == T::zero())
    }

    #[inline]
    fn clamp(&self, h: T, lns: T) -> (T, T) {
        (h.max(self.lo[0]).min(self.hi[0]), lns.max(self.lo[1]).min(self.hi[1]))
    }

    /// Fitted polynomial at `(h, lns)`; not clamped, so inner draws just outside
    /// the fitted box see the polynomial's own continuation.
    pub fn value(&self, h: T, lns: T) -> T {
        if self.coeffs.is_empty() {
            return T::zero();
        }
        let z = self.basis.z(h, lns);
        let ph = self.basis.powers(z[0]);
        let ps = self.basis.powers(z[1]);
        self.basis
            .exponents()
            .iter()
            .zip(self.coeffs.iter())
            .fold(T::zero(), |acc, (&(a, b), &c)| acc + c * ph[a] * ps[b])
    }

    /// `(∂L/∂H, ∂L/∂lnS)`, evaluated at the state clamped into the fitted box.
    pub fn gradient(&self, h: T, lns: T) -> [T; 2] {
        if self.coeffs.is_empty() {
            return [T::zero(), T::zero()];
        }
        let (ch, cs) = self.clamp(h, lns);
        if ch != h || cs != lns {
            log::trace!("value gradient clamped from ({h}, {lns}) to ({ch}, {cs})");
        }
        let z = self.basis.z(ch, cs);
        let ph = self.basis.powers(z[0]);
        let ps = self.basis.powers(z[1]);
        let mut g = [T::zero(), T::zero()];
        for (&(a, b), &c) in self.basis.exponents().iter().zip(self.coeffs.iter()) {
            if a > 0 {
                g[0] = g[0] + c * T::from_usize_lossy(a) * ph[a - 1] * ps[b];
            }
            if b > 0 {
                g[1] = g[1] + c * T::from_usize_lossy(b) * ph[a] * ps[b - 1];
            }
        }
        [g[0] / self.basis.scale[0], g[1] / self.basis.scale[1]]
    }
}

/// Least-squares fit of `v̂` on the polynomial basis. `samples` are `(H, ln S, v̂)`.
pub fn regress_value<T: Real>(samples: &[(T, T, T)], basis: &PolyBasis<T>) -> Result<ValueSlice<T>> {
    const OP: &str = "regress_value";
    let basis = PolyBasis::fitted(basis.order, samples);
    let exps = basis.exponents();
    let cols: Vec<usize> = (0..exps.len()).filter(|&j| basis.uses(exps[j].0, exps[j].1)).collect();
    let rows = samples.len();
    if rows <= exps.len() {
        return Err(Error::invalid(
            OP,
            "samples",
            format!("need more than {} samples for order {}, got {rows}", exps.len(), basis.order),
        ));
    }
    if samples.iter().any(|s| !(s.0.is_finite() && s.1.is_finite() && s.2.is_finite())) {
        return Err(Error::NonFinite {
            op: OP,
            reason: "regression sample is not finite".into(),
        });
    }
    let mut a = vec![T::zero(); rows * cols.len()];
    let mut y = Vec::with_capacity(rows);
    let mut lo = [T::infinity(), T::infinity()];
    let mut hi = [T::neg_infinity(), T::neg_infinity()];
    for (i, &(h, s, v)) in samples.iter().enumerate() {
        let z = basis.z(h, s);
        let ph = basis.powers(z[0]);
        let ps = basis.powers(z[1]);
        for (c, &j) in cols.iter().enumerate() {
            let (ea, eb) = exps[j];
            a[c * rows + i] = ph[ea] * ps[eb];
        }
        y.push(v);
        lo = [lo[0].min(h), lo[1].min(s)];
        hi = [hi[0].max(h), hi[1].max(s)];
    }
    let sol = lstsq(&a, rows, cols.len(), &y, lit(1e-12));
    if sol.rank < cols.len() {
        log::warn!(
            "{OP}: design matrix has rank {} < {}; using the minimum-norm solution",
            sol.rank,
            cols.len()
        );
    }
    if cols.len() < exps.len() {
        log::debug!("{OP}: degenerate regressor spread, active = {:?}", basis.active);
    }
    let mut coeffs = vec![T::zero(); exps.len()];
    for (c, &j) in cols.iter().enumerate() {
        coeffs[j] = sol.x[c];
    }
    Ok(ValueSlice { basis, coeffs, lo, hi })
}

/// `L_t` for every rebalance time; the slice at the horizon is identically zero.
///
/// The slice at index 0 is never fitted (all paths share the initial state)
/// and is stored as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueApprox<T> {
    pub order: usize,
    pub times: Vec<T>,
    pub slices: Vec<ValueSlice<T>>,
}

impl<T: Real> ValueApprox<T> {
    pub fn new(order: usize, times: Vec<T>) -> Self {
        let slices = vec![ValueSlice::zero(order); times.len()];
        Self { order, times, slices }
    }

    pub fn value(&self, step: usize, h: T, lns: T) -> T {
        self.slices[step].value(h, lns)
    }

    pub fn gradient(&self, step: usize, h: T, lns: T) -> [T; 2] {
        self.slices[step].gradient(h, lns)
    }

    pub fn terminal(&self) -> &ValueSlice<T> {
        self.slices.last().expect("value approximation has at least one slice")
    }
}

/// Outcome of a PAMC run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PamcOutput<T> {
    pub allocation: AllocationResult<T>,
    pub value: ValueApprox<T>,
    /// Inner draws of the direct method whose wealth did not stay positive
    /// and were left out of their node's average. Always zero for the indirect method.
    pub ruined_draws: usize,
}

fn check_run<T: Real>(
    params: &HestonParams<T>,
    investor: &InvestorSpec<T>,
    cfg: &SimConfig<T>,
    composition: &[Leg<T>],
) -> Result<()> {
    params.validate()?;
    investor.validate()?;
    cfg.validate()?;
    if composition.len() != 2 {
        return Err(Error::invalid(
            "run_pamc",
            "composition",
            format!("expected 2 instruments, got {}", composition.len()),
        ));
    }
    Ok(())
}

/// Per-path view of the state at one grid node.
struct Node<T> {
    state: MarketState<T>,
    log: LogState<T>,
}

fn node<T: Real>(paths: &crate::model::PathSet<T>, m: usize, j: usize, w0: T) -> Node<T> {
    let state = paths.state(m, j, w0);
    Node {
        log: LogState::from_state(&state),
        state,
    }
}

/// Backward induction shared by both variants. `path_value` returns the
/// regressand for path `m` at step `j` given `L_{j+1}`.
fn backward<T, F>(paths: &crate::model::PathSet<T>, order: usize, path_value: F) -> Result<ValueApprox<T>>
where
    T: Real,
    F: Fn(usize, usize, &ValueSlice<T>) -> Result<T> + Sync,
{
    let n = paths.n_steps;
    let mut value = ValueApprox::new(order, paths.times.clone());
    let template = PolyBasis::new(order);
    for j in (1..n).rev() {
        let next = &value.slices[j + 1];
        let vs: Vec<Result<(T, T, T)>> = (0..paths.n_paths)
            .into_par_iter()
            .map(|m| {
                let v = path_value(m, j, next).map_err(|e| e.at_node(m, j))?;
                Ok((paths.variance_at(m, j), paths.stock_at(m, j).ln(), v))
            })
            .collect();
        let samples = vs.into_iter().collect::<Result<Vec<_>>>()?;
        let slice = regress_value(&samples, &template).map_err(|e| e.at_step(j, paths.times[j].to_f64_lossy()))?;
        value.slices[j] = slice;
    }
    Ok(value)
}

fn first_slice<T: Real>(value: &ValueApprox<T>) -> &ValueSlice<T> {
    // with a single rebalance L_Δt is the terminal zero slice
    &value.slices[1.min(value.slices.len() - 1)]
}

/// Pure-factor backward induction; option pricing happens only at `t = 0`.
pub fn run_pamc_indirect<T: Real>(
    params: &HestonParams<T>,
    investor: &InvestorSpec<T>,
    cfg: &SimConfig<T>,
    basis: &PolyBasis<T>,
    composition: &[Leg<T>],
    pricer: &PricerConfig<T>,
) -> Result<PamcOutput<T>> {
    check_run(params, investor, cfg, composition)?;
    let paths = simulate_paths(params, cfg)?;
    let stepper = Stepper::new(params, cfg.dt, cfg.substeps_per_dt);
    let gamma = investor.gamma;
    let one_m_g = T::one() - gamma;
    let growth = (params.r * cfg.dt).exp();
    let n_inner = cfg.n_inner;

    let value = backward(&paths, basis.order, |m, j, next| {
        let nd = node(&paths, m, j, investor.w0);
        let x = nd.state.x;
        let geom = factor_geometry(params, &nd.state);
        let g = next.gradient(x, nd.log.ln_s);
        let eta = optimal_exposure(&geom, g[0], g[1], params.sigma_x * x.sqrt(), x.sqrt(), gamma)?.eta;
        let cash = growth * (T::one() - eta[0] - eta[1]);
        let mut rng = Substream::new(cfg.seed, Domain::Inner, m as u64, j as u64);
        let mut terms = Vec::with_capacity(n_inner);
        for _ in 0..n_inner {
            let mut st = nd.log;
            stepper.advance(&mut st, &mut rng);
            let ret = cash + eta[0] * (st.ln_f1 - nd.log.ln_f1).exp() + eta[1] * (st.ln_f2 - nd.log.ln_f2).exp();
            if !(ret > T::zero()) {
                return Err(Error::Bankruptcy {
                    op: "run_pamc_indirect",
                    wealth: (ret * investor.w0).to_f64_lossy(),
                });
            }
            terms.push(one_m_g * ret.ln() + next.value(st.x, st.ln_s));
        }
        log_mean_exp(&terms).ok_or_else(|| Error::NonFinite {
            op: "run_pamc_indirect",
            reason: "transformed value is not finite".into(),
        })
    })?;

    let init = cfg.initial;
    let x0 = init.x;
    let g = first_slice(&value).gradient(x0, init.s.ln());
    let geom = factor_geometry(params, &init);
    let eta = optimal_exposure(&geom, g[0], g[1], params.sigma_x * x0.sqrt(), x0.sqrt(), gamma)?;
    let instruments = composition
        .iter()
        .map(|l| l.resolve(&init, params, pricer))
        .collect::<Result<Vec<_>>>()?;
    let sigma = build_sigma(&instruments, &init, params, pricer)?;
    let pi = exposure_to_weights(&eta, &sigma)?;
    Ok(PamcOutput {
        allocation: AllocationResult::new(eta, pi, sigma),
        value,
        ruined_draws: 0,
    })
}

fn sigma_rows<T: Real>(greeks: &[LocalGreeks<T>; 2], s: T, x: T, params: &HestonParams<T>) -> [[T; 2]; 2] {
    let row = |g: &LocalGreeks<T>| SigmaMatrix::row_from_quote(&g.as_quote(), s, x, params);
    [row(&greeks[0]), row(&greeks[1])]
}

/// Derivatives-market backward induction with per-node pricing.
pub fn run_pamc_direct<T: Real>(
    params: &HestonParams<T>,
    investor: &InvestorSpec<T>,
    cfg: &SimConfig<T>,
    basis: &PolyBasis<T>,
    composition: &[Leg<T>],
    pricer: &PricerConfig<T>,
) -> Result<PamcOutput<T>> {
    check_run(params, investor, cfg, composition)?;
    let paths = simulate_paths(params, cfg)?;
    let n = cfg.n_steps;
    let legs = [composition[0], composition[1]];

    // sensitivities at every interior (path, step) node; t = 0 is handled below
    let (mut x_lo, mut x_hi) = (T::infinity(), T::zero());
    for m in 0..paths.n_paths {
        for j in 1..n {
            let x = paths.variance_at(m, j);
            if x > lit(X_NODE_FLOOR) {
                x_lo = x_lo.min(x);
                x_hi = x_hi.max(x);
            }
        }
    }
    if x_lo > x_hi {
        x_lo = cfg.initial.x;
        x_hi = cfg.initial.x;
    }
    let tables = [
        LegTable::build(&legs[0], params, pricer, x_lo, x_hi, lit(NODE_TABLE_TOL))?,
        LegTable::build(&legs[1], params, pricer, x_lo, x_hi, lit(NODE_TABLE_TOL))?,
    ];
    let greeks: Vec<[LocalGreeks<T>; 2]> = (0..paths.n_paths * n)
        .into_par_iter()
        .map(|idx| {
            let (m, j) = (idx / n, idx % n);
            let (s, x) = (paths.stock_at(m, j), paths.variance_at(m, j));
            if j == 0 || x <= lit(X_NODE_FLOOR) {
                return [LocalGreeks::stock(T::one()); 2];
            }
            [tables[0].eval(s, x), tables[1].eval(s, x)]
        })
        .collect();

    let stepper = Stepper::new(params, cfg.dt, cfg.substeps_per_dt);
    let gamma = investor.gamma;
    let one_m_g = T::one() - gamma;
    let growth = (params.r * cfg.dt).exp();
    let dt = cfg.dt;
    let n_inner = cfg.n_inner;
    let ruined = AtomicUsize::new(0);

    let value = backward(&paths, basis.order, |m, j, next| {
        let nd = node(&paths, m, j, investor.w0);
        let (s, x) = (nd.state.s, nd.state.x);
        let geom = factor_geometry(params, &nd.state);
        let gk = &greeks[m * n + j];
        let g = next.gradient(x, nd.log.ln_s);
        let pi = if x <= lit(X_NODE_FLOOR) {
            // every risk premium and loading vanishes with the variance
            vec![T::zero(), T::zero()]
        } else {
            let rows = sigma_rows(gk, s, x, params);
            direct_weights(&geom, &rows, g[0], g[1], params.sigma_x * x.sqrt(), x.sqrt(), gamma)?
        };
        let cash = growth * (T::one() - pi[0] - pi[1]);
        let mut rng = Substream::new(cfg.seed, Domain::Inner, m as u64, j as u64);
        let mut terms = Vec::with_capacity(n_inner);
        let mut worst = T::zero();
        for _ in 0..n_inner {
            let mut st = nd.log;
            stepper.advance(&mut st, &mut rng);
            let ds = st.ln_s.exp() - s;
            let dx = st.x - x;
            let r0 = gk[0].reprice(ds, dx, dt) / gk[0].price;
            let r1 = gk[1].reprice(ds, dx, dt) / gk[1].price;
            let ret = cash + pi[0] * r0 + pi[1] * r1;
            if !(ret > T::zero()) {
                worst = worst.min(ret);
                continue;
            }
            terms.push(one_m_g * ret.ln() + next.value(st.x, st.ln_s));
        }
        if terms.is_empty() {
            return Err(Error::Bankruptcy {
                op: "run_pamc_direct",
                wealth: (worst * investor.w0).to_f64_lossy(),
            });
        }
        ruined.fetch_add(n_inner - terms.len(), Ordering::Relaxed);
        log_mean_exp(&terms).ok_or_else(|| Error::NonFinite {
            op: "run_pamc_direct",
            reason: "transformed value is not finite".into(),
        })
    })?;

    let init = cfg.initial;
    let x0 = init.x;
    let g = first_slice(&value).gradient(x0, init.s.ln());
    let geom = factor_geometry(params, &init);
    let mut instruments = Vec::with_capacity(2);
    let mut g0 = Vec::with_capacity(2);
    for leg in &legs {
        let (inst, q) = leg.local_greeks(&init, params, pricer).map_err(|e| e.at_node(0, 0))?;
        instruments.push(inst);
        g0.push(q);
    }
    let rows = sigma_rows(&[g0[0], g0[1]], init.s, x0, params);
    let pi = direct_weights(&geom, &rows, g[0], g[1], params.sigma_x * x0.sqrt(), x0.sqrt(), gamma)?;
    let eta = ExposureVector {
        eta: [
            rows[0][0] * pi[0] + rows[1][0] * pi[1],
            rows[0][1] * pi[0] + rows[1][1] * pi[1],
        ],
    };
    let sigma = SigmaMatrix {
        rows: rows.to_vec(),
        instruments,
        quotes: g0.iter().map(|q| q.as_quote()).collect(),
    };
    let ruined_draws = ruined.into_inner();
    if ruined_draws > 0 {
        log::warn!("run_pamc_direct: {ruined_draws} inner draws with non-positive wealth left out");
    }
    Ok(PamcOutput {
        allocation: AllocationResult::new(eta, pi, sigma),
        value,
        ruined_draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pricing::{InstrumentKind, InstrumentSpec};

    fn baseline_geom(rho: f64) -> FactorGeometry<f64> {
        let p = HestonParams {
            rho,
            ..HestonParams::baseline()
        };
        factor_geometry(&p, &MarketState::initial(&p))
    }

    #[test]
    fn zero_gradient_exposure_baseline() {
        let g = baseline_geom(-0.4);
        let e = optimal_exposure(&g, 0.0, 0.0, 0.0, 0.0, 4.0).unwrap();
        // independent hand solve of [[1,-0.4],[-0.4,1]] e = [0.52,-0.923]/4
        let det = 1.0 - 0.16;
        let want = [(0.52 - 0.4 * 0.923) / det / 4.0, (-0.923 + 0.4 * 0.52) / det / 4.0];
        assert!((e.eta[0] - want[0]).abs() < 1e-15);
        assert!((e.eta[1] - want[1]).abs() < 1e-15);
        assert!((e.eta[0] - 0.044_88).abs() < 1e-5);
        assert!((e.eta[1] + 0.212_80).abs() < 1e-5);
    }

    #[test]
    fn uncorrelated_and_no_premia_exposures() {
        let g = baseline_geom(0.0);
        let e = optimal_exposure(&g, 0.0, 0.0, 0.0, 0.0, 4.0).unwrap();
        assert!((e.eta[0] - 0.13).abs() < 1e-15 && (e.eta[1] + 0.23075).abs() < 1e-15);
        let mut z = baseline_geom(-0.4);
        z.lambda_vec = [0.0, 0.0];
        assert_eq!(optimal_exposure(&z, 0.0, 0.0, 0.1, 0.1, 4.0).unwrap().eta, [0.0, 0.0]);
        assert!(optimal_exposure(&z, 0.0, 0.0, 0.1, 0.1, -1.0).is_err());
    }

    #[test]
    fn weights_identity_rows() {
        let sigma = SigmaMatrix {
            rows: vec![[1.0, 0.0], [0.0, 1.0]],
            instruments: vec![InstrumentSpec::stock(), InstrumentSpec::new(InstrumentKind::Call, 1.0, 0.1)],
            quotes: vec![],
        };
        let eta = ExposureVector { eta: [0.3, -0.7] };
        assert_eq!(exposure_to_weights(&eta, &sigma).unwrap(), vec![0.3, -0.7]);
        let bad = SigmaMatrix {
            rows: vec![[1.0, 1.0], [1.0, 1.0 + 1e-14]],
            ..sigma
        };
        assert!(matches!(exposure_to_weights(&eta, &bad), Err(Error::IllConditioned { .. })));
    }

    #[test]
    fn direct_formula_equals_exposure_then_solve() {
        let g = baseline_geom(-0.4);
        let rows = [[0.13, 0.0], [0.9, 0.4]];
        let pi = direct_weights(&g, &rows, -4.3, 0.2, 0.0325, 0.13, 4.0).unwrap();
        let eta = optimal_exposure(&g, -4.3, 0.2, 0.0325, 0.13, 4.0).unwrap();
        let sigma = SigmaMatrix {
            rows: rows.to_vec(),
            instruments: vec![],
            quotes: vec![],
        };
        let pi2 = weights_from_rows("t", &sigma.rows, &eta).unwrap();
        for i in 0..2 {
            assert!((pi[i] - pi2[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn transformed_value_trivial_cases() {
        assert_eq!(transformed_value_sample(&[1.0], Some(&[0.0]), 4.0, 1.0).unwrap(), 0.0);
        let w = (0.05f64 / 60.0).exp();
        let v = transformed_value_sample(&[w; 5], None, 4.0, 1.0).unwrap();
        assert!((v - (-3.0 * 0.05 / 60.0)).abs() < 1e-15);
        let direct = ((1.1f64.powf(-3.0) * 0.2f64.exp() + 0.95f64.powf(-3.0) * (-0.1f64).exp()) / 2.0).ln();
        let v = transformed_value_sample(&[1.1, 0.95], Some(&[0.2, -0.1]), 4.0, 1.0).unwrap();
        assert!((v - direct).abs() < 1e-14);
        assert!(matches!(
            transformed_value_sample(&[1.0, -0.1], None, 4.0, 1.0),
            Err(Error::Bankruptcy { .. })
        ));
    }

    #[test]
    fn regression_recovers_polynomial() {
        let mut rng = Substream::new(1, Domain::Oracle, 0, 0);
        let f = |h: f64, s: f64| 0.3 - 2.0 * h + 0.5 * s + 40.0 * h * h - 3.0 * h * s + 0.7 * s * s;
        let samples: Vec<(f64, f64, f64)> = (0..200)
            .map(|_| {
                let h = 0.01 + 0.02 * rng.uniform();
                let s = -0.2 + 0.4 * rng.uniform();
                (h, s, f(h, s))
            })
            .collect();
        let sl = regress_value(&samples, &PolyBasis::new(2)).unwrap();
        for &(h, s, v) in samples.iter().take(20) {
            assert!((sl.value(h, s) - v).abs() < 1e-8);
            let g = sl.gradient(h, s);
            assert!((g[0] - (-2.0 + 80.0 * h - 3.0 * s)).abs() < 1e-6);
            assert!((g[1] - (0.5 - 3.0 * h + 1.4 * s)).abs() < 1e-6);
        }
    }

    #[test]
    fn regression_of_constant() {
        let samples: Vec<(f64, f64, f64)> = (0..50).map(|i| (0.01 + i as f64 * 1e-4, (i as f64 * 0.37).sin(), 1.25)).collect();
        let sl = regress_value(&samples, &PolyBasis::new(2)).unwrap();
        assert!((sl.coeffs[0] - 1.25).abs() < 1e-10);
        assert!(sl.coeffs[1..].iter().all(|c| c.abs() < 1e-10));
        assert!(regress_value(&samples[..5], &PolyBasis::new(2)).is_err());
    }

    #[test]
    fn zero_slice_gives_zero_gradient() {
        let z = ValueSlice::<f64>::zero(2);
        assert_eq!(z.gradient(0.02, 0.1), [0.0, 0.0]);
        assert_eq!(z.value(0.02, 0.1), 0.0);
        assert!(z.is_zero());
    }

    fn small_cfg(params: &HestonParams<f64>, steps: usize) -> SimConfig<f64> {
        let mut cfg = SimConfig::baseline(params);
        cfg.horizon = steps as f64 / 60.0;
        let mut cfg = cfg.with_steps(steps);
        cfg.n_paths = 40;
        cfg.n_inner = 200;
        cfg
    }

    #[test]
    fn no_premia_means_no_risky_holdings() {
        let p = HestonParams {
            lambda: 0.0,
            lambda_x: 0.0,
            ..HestonParams::baseline()
        };
        let cfg = small_cfg(&p, 6);
        let legs = [Leg::Stock, Leg::DeltaNeutralStraddle { maturity: 0.1 }];
        let out = run_pamc_indirect(&p, &InvestorSpec::baseline(), &cfg, &PolyBasis::new(2), &legs, &PricerConfig::default()).unwrap();
        assert!(out.allocation.eta.eta.iter().all(|e| e.abs() < 1e-12));
        assert!(out.allocation.pi.iter().all(|e| e.abs() < 1e-10));
        assert!((out.allocation.cash - 1.0).abs() < 1e-10);
        assert!(out.value.terminal().is_zero());
    }

    #[test]
    fn wealth_scale_does_not_matter() {
        let p = HestonParams::baseline();
        let cfg = small_cfg(&p, 4);
        let legs = [Leg::Stock, Leg::DeltaNeutralStraddle { maturity: 0.1 }];
        let a = run_pamc_indirect(&p, &InvestorSpec::baseline(), &cfg, &PolyBasis::new(2), &legs, &PricerConfig::default()).unwrap();
        let inv = InvestorSpec { gamma: 4.0, w0: 37.5 };
        let mut cfg2 = cfg;
        cfg2.initial.w = 37.5;
        let b = run_pamc_indirect(&p, &inv, &cfg2, &PolyBasis::new(2), &legs, &PricerConfig::default()).unwrap();
        assert_eq!(a.allocation.eta, b.allocation.eta);
        assert_eq!(a.allocation.pi, b.allocation.pi);
    }

    #[test]
    fn seed_reproducible() {
        let p = HestonParams::baseline();
        let cfg = small_cfg(&p, 3);
        let legs = [Leg::Stock, Leg::DeltaNeutralStraddle { maturity: 0.1 }];
        let run = || run_pamc_indirect(&p, &InvestorSpec::baseline(), &cfg, &PolyBasis::new(2), &legs, &PricerConfig::default()).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_composition() {
        let p = HestonParams::baseline();
        let cfg = small_cfg(&p, 3);
        let err = run_pamc_indirect(&p, &InvestorSpec::baseline(), &cfg, &PolyBasis::new(2), &[Leg::Stock], &PricerConfig::default());
        assert!(err.unwrap_err().is_invalid_input());
        let inv = InvestorSpec { gamma: 1.0, w0: 1.0 };
        let legs = [Leg::Stock, Leg::DeltaNeutralStraddle { maturity: 0.1 }];
        assert!(run_pamc_indirect(&p, &inv, &cfg, &PolyBasis::new(2), &legs, &PricerConfig::default()).is_err());
    }

    #[test]
    fn direct_runs_and_matches_its_identity() {
        let p = HestonParams::baseline();
        let mut cfg = small_cfg(&p, 3);
        cfg.n_paths = 12;
        let legs = [Leg::Stock, Leg::DeltaNeutralStraddle { maturity: 0.1 }];
        let out = run_pamc_direct(&p, &InvestorSpec::baseline(), &cfg, &PolyBasis::new(2), &legs, &PricerConfig::default()).unwrap();
        assert!(out.allocation.residual() < 1e-10);
        let pi = exposure_to_weights(&out.allocation.eta, &out.allocation.sigma).unwrap();
        for i in 0..2 {
            assert!((pi[i] - out.allocation.pi[i]).abs() < 1e-10);
        }
    }
}
