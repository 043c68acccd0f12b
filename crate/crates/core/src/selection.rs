//! Choosing the derivative that completes the market with the smallest risk
//! exposure `‖π‖₁`.
//!
//! Every candidate pairs the stock with one option. The optimal exposure and
//! the value-function gradient do not depend on the candidate, so they are
//! computed once ([`SweepContext`]) and only the instrument's price, delta and
//! variance sensitivity change across a sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{singular_values2, solve2};
use crate::model::{factor_geometry, HestonParams, MarketState, SimConfig};
use crate::pamc::{optimal_exposure, run_pamc_indirect, ExposureVector, InvestorSpec, PolyBasis, ValueApprox};
use crate::pricing::{
    price_instrument, EquitySlice, InstrumentKind, InstrumentSpec, Leg, PriceAndGreeks, PricerConfig, VixCoefficients,
};
use crate::rng::{Domain, Substream};
use crate::scalar::{lit, Real};

/// Candidate instruments of a sweep.
///
/// Equity strikes are fractions of `S₀`; VIX strikes are fractions of the
/// prevailing VIX level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid<T> {
    pub kinds: Vec<InstrumentKind>,
    /// Primary strike grid (the put strike for strangles).
    pub moneyness: Vec<T>,
    /// Range searched for the strangle call strike.
    pub call_range: (T, T),
    pub call_step: T,
    pub maturities: Vec<T>,
}

impl<T: Real> CandidateGrid<T> {
    /// Call, put, straddle and strangle over `K/S₀ ∈ [0.90, 1.10]` at `T_op = 0.1`.
    pub fn equity_default() -> Self {
        Self {
            kinds: vec![InstrumentKind::Call, InstrumentKind::Put, InstrumentKind::Straddle, InstrumentKind::Strangle],
            moneyness: grid_points(lit(0.90), lit(1.10), lit(0.005)),
            call_range: (lit(1.00), lit(1.10)),
            call_step: lit(0.005),
            maturities: vec![lit(0.1)],
        }
    }

    /// VIX call at 105%, VIX put at 95% and the best strangle over maturities `0.1, 0.2, …, 1.0`.
    pub fn maturity_default() -> Self {
        Self {
            kinds: vec![InstrumentKind::VixCall, InstrumentKind::VixPut, InstrumentKind::Strangle],
            moneyness: vec![lit(0.95), lit(1.05)],
            call_range: (lit(1.00), lit(1.05)),
            call_step: lit(0.005),
            maturities: (1..=10).map(|i| lit::<T>(0.1) * T::from_usize_lossy(i)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "CandidateGrid::validate";
        let increasing = |v: &[T]| v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|x| x.is_finite());
        if self.kinds.is_empty() {
            return Err(Error::invalid(OP, "kinds", "at least one instrument kind is required"));
        }
        if self.kinds.contains(&InstrumentKind::Stock) {
            return Err(Error::invalid(OP, "kinds", "the stock is always the companion, not a candidate"));
        }
        if self.moneyness.is_empty() || !increasing(&self.moneyness) || self.moneyness[0] <= T::zero() {
            return Err(Error::invalid(OP, "moneyness", "must be positive and strictly increasing"));
        }
        if self.maturities.is_empty() || !increasing(&self.maturities) || self.maturities[0] <= T::zero() {
            return Err(Error::invalid(OP, "maturities", "must be positive and strictly increasing"));
        }
        let (lo, hi) = self.call_range;
        if !(lo >= T::one()) || !(hi >= lo) || !hi.is_finite() {
            return Err(Error::invalid(OP, "call_range", format!("need 1 <= lo <= hi, got [{lo}, {hi}]")));
        }
        if !(self.call_step > T::zero()) {
            return Err(Error::invalid(OP, "call_step", "must be > 0"));
        }
        Ok(())
    }

    fn call_strikes(&self) -> Vec<T> {
        grid_points(self.call_range.0, self.call_range.1, self.call_step)
    }
}

/// `lo, lo + step, …` up to `hi` inclusive (with a half-step tolerance).
pub fn grid_points<T: Real>(lo: T, hi: T, step: T) -> Vec<T> {
    let n = ((hi - lo) / step + lit(0.5)).floor().to_usize().unwrap_or(0);
    (0..=n).map(|i| lo + step * T::from_usize_lossy(i)).collect()
}

/// One evaluated candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow<T> {
    pub instrument: InstrumentSpec<T>,
    /// Primary strike as a fraction of `S₀` (of VIX for VIX options).
    pub moneyness: T,
    pub pi_s: T,
    pub pi_o: T,
    pub l1: T,
    /// Strangle call strike as a fraction of `S₀`.
    pub companion_strike: Option<T>,
}

impl<T: Real> SweepRow<T> {
    fn new(instrument: InstrumentSpec<T>, moneyness: T, (pi_s, pi_o): (T, T), companion_strike: Option<T>) -> Self {
        Self {
            instrument,
            moneyness,
            pi_s,
            pi_o,
            l1: pi_s.abs() + pi_o.abs(),
            companion_strike,
        }
    }
}

/// A sweep cell: the candidate's coordinates and its outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell<T> {
    pub kind: InstrumentKind,
    pub moneyness: T,
    pub maturity: T,
    pub row: Result<SweepRow<T>>,
}

/// Candidate-independent inputs to the explicit weights at one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepContext<T> {
    pub state: MarketState<T>,
    pub gamma: T,
    /// `∂L/∂X` at the state.
    pub grad_x: T,
    pub eta: ExposureVector<T>,
}

impl<T: Real> SweepContext<T> {
    pub fn new(state: MarketState<T>, params: &HestonParams<T>, gamma: T, grad_x: T) -> Result<Self> {
        state.validate()?;
        let geom = factor_geometry(params, &state);
        let sx = state.x.max(T::zero()).sqrt();
        // the Heston value function does not depend on the log-price
        let eta = optimal_exposure(&geom, grad_x, T::zero(), params.sigma_x * sx, sx, gamma)?;
        Ok(Self { state, gamma, grad_x, eta })
    }

    /// Gradient from the first interior slice of a fitted value function.
    pub fn from_value(value: &ValueApprox<T>, state: MarketState<T>, params: &HestonParams<T>, gamma: T) -> Result<Self> {
        let step = 1.min(value.times.len().saturating_sub(1));
        let g = value.gradient(step, state.x, state.s.ln());
        Self::new(state, params, gamma, g[0])
    }

    /// Runs PAMC-indirect once and takes its `t = Δt` gradient.
    pub fn from_pamc(
        params: &HestonParams<T>,
        investor: &InvestorSpec<T>,
        cfg: &SimConfig<T>,
        basis: &PolyBasis<T>,
        pricer: &PricerConfig<T>,
    ) -> Result<Self> {
        let legs = [Leg::Stock, Leg::DeltaNeutralStraddle { maturity: lit(0.1) }];
        let out = run_pamc_indirect(params, investor, cfg, basis, &legs, pricer)?;
        Self::from_value(&out.value, cfg.initial, params, investor.gamma)
    }
}

/// `(π^S, π^O)` for the pair [stock, instrument] from a quote.
pub fn explicit_weights_from_quote<T: Real>(
    inst: &InstrumentSpec<T>,
    q: &PriceAndGreeks<T>,
    state: &MarketState<T>,
    params: &HestonParams<T>,
    gamma: T,
    grad_x: T,
    vega_tol: T,
) -> Result<(T, T)> {
    const OP: &str = "explicit_heston_weights";
    if !(gamma > T::zero()) || gamma == T::one() {
        return Err(Error::invalid(OP, "gamma", format!("must be > 0 and != 1, got {gamma}")));
    }
    let loading = q.vega_x * params.sigma_x * state.x.max(T::zero()).sqrt() / q.price;
    if !(loading.abs() > vega_tol) {
        return Err(Error::Uncompletable {
            op: OP,
            instrument: inst.label(),
            vega: q.vega_x.to_f64_lossy(),
        });
    }
    let one_m_r2 = T::one() - params.rho * params.rho;
    let pi_o = (q.price / (gamma * params.sigma_x * one_m_r2) * (params.lambda_x - params.rho * params.lambda)
        + q.price / gamma * grad_x)
        / q.vega_x;
    let pi_s = (params.lambda - params.rho * params.lambda_x) / (gamma * one_m_r2) - pi_o * state.s / q.price * q.delta;
    Ok((pi_s, pi_o))
}

/// `(π^S, π^O)` for the pair [stock, `inst`] at `state`.
pub fn explicit_heston_weights<T: Real>(
    inst: &InstrumentSpec<T>,
    state: &MarketState<T>,
    params: &HestonParams<T>,
    gamma: T,
    grad_x: T,
    pricer: &PricerConfig<T>,
) -> Result<(T, T)> {
    let q = price_instrument(inst, state, params, pricer)?;
    explicit_weights_from_quote(inst, &q, state, params, gamma, grad_x, pricer.rank_tol)
}

fn strike_scale<T: Real>(kind: InstrumentKind, state: &MarketState<T>, params: &HestonParams<T>) -> Result<T> {
    if kind.is_vix() {
        Ok(VixCoefficients::new(params)?.vix(state.x))
    } else {
        Ok(state.s)
    }
}

/// Evaluates every `(kind, moneyness)` candidate of `grid` at one maturity.
fn sweep_at<T: Real>(
    grid: &CandidateGrid<T>,
    maturity: T,
    ctx: &SweepContext<T>,
    params: &HestonParams<T>,
    pricer: &PricerConfig<T>,
) -> Vec<SweepCell<T>> {
    let state = &ctx.state;
    let calls = grid.call_strikes();
    let needs_equity = grid.kinds.iter().any(|k| k.is_equity_option());
    let slice = if needs_equity {
        let mut probe: Vec<T> = grid.moneyness.iter().chain(calls.iter()).map(|&m| m * state.s).collect();
        probe.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        probe.dedup();
        Some(EquitySlice::with_strikes(state, maturity, params, &pricer.quad, &probe))
    } else {
        None
    };
    let weights = |inst: &InstrumentSpec<T>| -> Result<(T, T)> {
        let q = if inst.kind.is_equity_option() {
            let q = match slice.as_ref() {
                Some(Ok(s)) => s.price(inst)?,
                Some(Err(e)) => return Err(e.clone()),
                None => unreachable!("equity candidates always build a slice"),
            };
            crate::pricing::check_floor(inst, q, pricer.price_floor)?
        } else {
            price_instrument(inst, state, params, pricer)?
        };
        explicit_weights_from_quote(inst, &q, state, params, ctx.gamma, ctx.grad_x, pricer.rank_tol)
    };
    let mut jobs = Vec::new();
    for &kind in &grid.kinds {
        for &m in &grid.moneyness {
            jobs.push((kind, m));
        }
    }
    jobs.par_iter()
        .map(|&(kind, m)| {
            let row = (|| {
                let scale = strike_scale(kind, state, params)?;
                if kind == InstrumentKind::Strangle {
                    let put = m * scale;
                    let mut best: Option<SweepRow<T>> = None;
                    let mut last_err = None;
                    for &c in calls.iter().filter(|&&c| c * scale >= put) {
                        let inst = InstrumentSpec::strangle(put, c * scale, maturity);
                        match weights(&inst) {
                            Ok(w) => {
                                let row = SweepRow::new(inst, m, w, Some(c));
                                // strict comparison keeps the lowest call strike on ties
                                if best.as_ref().is_none_or(|b| row.l1 < b.l1) {
                                    best = Some(row);
                                }
                            }
                            Err(e) => last_err = Some(e),
                        }
                    }
                    best.ok_or_else(|| {
                        last_err.unwrap_or_else(|| {
                            Error::invalid("sweep", "call_range", format!("no call strike at or above put strike {m}"))
                        })
                    })
                } else {
                    let inst = InstrumentSpec::new(kind, m * scale, maturity);
                    Ok(SweepRow::new(inst, m, weights(&inst)?, None))
                }
            })();
            if let Err(e) = &row {
                log::warn!("sweep: {kind} at moneyness {m}, maturity {maturity}: {e}");
            }
            SweepCell { kind, moneyness: m, maturity, row }
        })
        .collect()
}

/// `‖π‖₁` over the moneyness grid at the first maturity of `grid`.
pub fn sweep_moneyness<T: Real>(
    grid: &CandidateGrid<T>,
    ctx: &SweepContext<T>,
    params: &HestonParams<T>,
    pricer: &PricerConfig<T>,
) -> Result<Vec<SweepCell<T>>> {
    grid.validate()?;
    params.validate()?;
    Ok(sweep_at(grid, grid.maturities[0], ctx, params, pricer))
}

/// Best candidate of each kind over the moneyness grid, at every maturity.
///
/// Each cell holds the minimal-`‖π‖₁` row across the moneyness grid for
/// that kind and maturity.
pub fn sweep_maturity<T: Real>(
    grid: &CandidateGrid<T>,
    ctx: &SweepContext<T>,
    params: &HestonParams<T>,
    pricer: &PricerConfig<T>,
) -> Result<Vec<SweepCell<T>>> {
    grid.validate()?;
    params.validate()?;
    let mut out = Vec::new();
    for &tau in &grid.maturities {
        let cells = sweep_at(grid, tau, ctx, params, pricer);
        for &kind in &grid.kinds {
            out.push(best_of(kind, tau, cells.iter().filter(|c| c.kind == kind)));
        }
    }
    Ok(out)
}

fn best_of<'a, T: Real>(kind: InstrumentKind, maturity: T, cells: impl Iterator<Item = &'a SweepCell<T>>) -> SweepCell<T> {
    let mut best: Option<&SweepCell<T>> = None;
    let mut err = None;
    for c in cells {
        match &c.row {
            Ok(r) => {
                if best.is_none_or(|b| r.l1 < b.row.as_ref().map(|x| x.l1).unwrap_or(T::infinity())) {
                    best = Some(c);
                }
            }
            Err(e) => err = Some(e.clone()),
        }
    }
    match best {
        Some(c) => c.clone(),
        None => SweepCell {
            kind,
            moneyness: T::nan(),
            maturity,
            row: Err(err.unwrap_or_else(|| Error::invalid("sweep_maturity", "moneyness", "empty grid"))),
        },
    }
}

/// Minimal `‖π‖₁` among the successful cells of one kind.
pub fn min_l1<T: Real>(cells: &[SweepCell<T>], kind: InstrumentKind) -> Option<T> {
    cells
        .iter()
        .filter(|c| c.kind == kind)
        .filter_map(|c| c.row.as_ref().ok())
        .map(|r| r.l1)
        .fold(None, |a: Option<T>, l| Some(a.map_or(l, |a| a.min(l))))
}

/// One point of a variance-sensitivity profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VegaPoint<T> {
    pub maturity: T,
    pub vega_x: T,
    pub vega_over_price: T,
}

/// `∂O/∂X` and `(∂O/∂X)/O` of `inst` (absolute strikes) across `maturities`.
pub fn vega_profile<T: Real>(
    inst: &InstrumentSpec<T>,
    maturities: &[T],
    state: &MarketState<T>,
    params: &HestonParams<T>,
    pricer: &PricerConfig<T>,
) -> Result<Vec<VegaPoint<T>>> {
    maturities
        .par_iter()
        .map(|&tau| {
            let q = price_instrument(&InstrumentSpec { maturity: tau, ..*inst }, state, params, pricer)?;
            Ok(VegaPoint {
                maturity: tau,
                vega_x: q.vega_x,
                vega_over_price: q.vega_x / q.price,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// l1-minimal weights

/// Tolerance of the simplex pivots.
pub const LP_TOL: f64 = 1e-9;

/// Minimal-`‖π‖₁` weights with `Σᵀπ = η` and their norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseWeights<T> {
    pub pi: Vec<T>,
    pub l1: T,
}

impl<T: Real> SparseWeights<T> {
    pub fn support(&self) -> usize {
        self.pi.iter().filter(|p| **p != T::zero()).count()
    }
}

/// Solves `min ‖π‖₁` subject to `Σᵀπ = η` as a linear program in the split
/// `π = α − β`, `α, β ≥ 0`, and returns a vertex of it.
pub fn sparsify_l1<T: Real>(rows: &[[T; 2]], eta: &ExposureVector<T>) -> Result<SparseWeights<T>> {
    const OP: &str = "sparsify_l1";
    let n = rows.len();
    if n < 2 {
        return Err(Error::invalid(OP, "sigma", format!("need at least 2 instruments, got {n}")));
    }
    if rows.iter().any(|r| !r[0].is_finite() || !r[1].is_finite()) || !eta.eta.iter().all(|e| e.is_finite()) {
        return Err(Error::invalid(OP, "sigma", "entries must be finite"));
    }
    // rank of Σ through the 2×2 Gram matrix
    let mut gram = [[T::zero(); 2]; 2];
    for r in rows {
        for a in 0..2 {
            for b in 0..2 {
                gram[a][b] = gram[a][b] + r[a] * r[b];
            }
        }
    }
    let sv = singular_values2(gram);
    if !(sv[1] > sv[0] * lit(LP_TOL) * lit(LP_TOL)) || sv[0] == T::zero() {
        return Err(Error::Infeasible {
            op: OP,
            reason: format!("variance matrix has rank < 2 (Gram singular values {}, {})", sv[0], sv[1]),
        });
    }
    let a: Vec<Vec<T>> = (0..2)
        .map(|k| rows.iter().map(|r| r[k]).chain(rows.iter().map(|r| -r[k])).collect())
        .collect();
    let c = vec![T::one(); 2 * n];
    let x = simplex(&a, &eta.eta, &c, lit(LP_TOL)).map_err(|reason| Error::Infeasible { op: OP, reason })?;
    let pi: Vec<T> = (0..n).map(|i| x[i] - x[n + i]).collect();
    let l1 = pi.iter().fold(T::zero(), |s, p| s + p.abs());
    Ok(SparseWeights { pi, l1 })
}

/// Two-phase dense simplex for `min cᵀx` subject to `A x = b`, `x ≥ 0`,
/// with Bland's rule. Returns a basic optimal solution.
fn simplex<T: Real>(a: &[Vec<T>], b: &[T], c: &[T], tol: T) -> std::result::Result<Vec<T>, String> {
    let m = a.len();
    let nv = c.len();
    let width = nv + m + 1;
    // tableau rows: constraints, then the objective row
    let mut t = vec![vec![T::zero(); width]; m + 1];
    for i in 0..m {
        let sign = if b[i] < T::zero() { -T::one() } else { T::one() };
        for j in 0..nv {
            t[i][j] = a[i][j] * sign;
        }
        t[i][nv + i] = T::one();
        t[i][width - 1] = b[i] * sign;
    }
    let mut basis: Vec<usize> = (nv..nv + m).collect();

    // phase 1: minimise the sum of artificials
    let mut obj = vec![T::zero(); width];
    for i in 0..m {
        for j in 0..width {
            if !(nv..nv + m).contains(&j) {
                obj[j] = obj[j] - t[i][j];
            }
        }
    }
    t[m] = obj;
    run_pivots(&mut t, &mut basis, nv + m, tol)?;
    let scale = b.iter().fold(T::one(), |s, v| s.max(v.abs()));
    if -t[m][width - 1] > tol * scale {
        return Err(format!("phase one ended with infeasibility {}", -t[m][width - 1]));
    }
    // drive degenerate artificials out of the basis
    for i in 0..m {
        if basis[i] >= nv {
            if let Some(j) = (0..nv).find(|&j| t[i][j].abs() > tol) {
                pivot(&mut t, &mut basis, i, j);
            }
        }
    }

    // phase 2 on the original objective, artificials barred
    let mut obj = vec![T::zero(); width];
    obj[..nv].copy_from_slice(c);
    for i in 0..m {
        let cb = if basis[i] < nv { c[basis[i]] } else { T::zero() };
        if cb != T::zero() {
            for j in 0..width {
                obj[j] = obj[j] - cb * t[i][j];
            }
        }
    }
    t[m] = obj;
    run_pivots(&mut t, &mut basis, nv, tol)?;
    let mut x = vec![T::zero(); nv];
    for i in 0..m {
        if basis[i] < nv {
            x[basis[i]] = t[i][width - 1];
        }
    }
    Ok(x)
}

fn run_pivots<T: Real>(t: &mut [Vec<T>], basis: &mut [usize], allowed: usize, tol: T) -> std::result::Result<(), String> {
    let m = basis.len();
    let width = t[0].len();
    for _ in 0..10_000 {
        // Bland: lowest-index improving column
        let Some(j) = (0..allowed).find(|&j| t[m][j] < -tol) else {
            return Ok(());
        };
        let mut leave: Option<(usize, T)> = None;
        for i in 0..m {
            if t[i][j] > tol {
                let ratio = t[i][width - 1] / t[i][j];
                let better = match leave {
                    None => true,
                    Some((l, r)) => ratio < r - tol || (ratio <= r + tol && basis[i] < basis[l]),
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
        }
        let Some((i, _)) = leave else {
            return Err("objective unbounded below".into());
        };
        pivot(t, basis, i, j);
    }
    Err("pivot limit reached".into())
}

fn pivot<T: Real>(t: &mut [Vec<T>], basis: &mut [usize], row: usize, col: usize) {
    let p = t[row][col];
    for v in t[row].iter_mut() {
        *v = *v / p;
    }
    let pr = t[row].clone();
    for (i, r) in t.iter_mut().enumerate() {
        if i != row {
            let f = r[col];
            if f != T::zero() {
                for (v, &q) in r.iter_mut().zip(&pr) {
                    *v = *v - f * q;
                }
            }
        }
    }
    basis[row] = col;
}

/// Smallest `‖π‖₁` over every two-instrument subsystem, with the pair attaining it.
pub fn best_pair_l1<T: Real>(rows: &[[T; 2]], eta: &ExposureVector<T>) -> Option<(T, (usize, usize))> {
    let mut best: Option<(T, (usize, usize))> = None;
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let m = [[rows[i][0], rows[j][0]], [rows[i][1], rows[j][1]]];
            let sv = singular_values2(m);
            if !(sv[1] > sv[0] * lit(1e-12)) {
                continue;
            }
            if let Some(p) = solve2(m, eta.eta) {
                let l1 = p[0].abs() + p[1].abs();
                if best.is_none_or(|(b, _)| l1 < b) {
                    best = Some((l1, (i, j)));
                }
            }
        }
    }
    best
}

/// One random instance on which the LP disagreed with the pair search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Violation {
    pub trial: usize,
    pub rows: Vec<[f64; 2]>,
    pub eta: [f64; 2],
    pub lp_l1: Option<f64>,
    pub pair_l1: Option<f64>,
    pub support: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub trials: usize,
    pub n_max: usize,
    pub seed: u64,
    pub max_gap: f64,
    pub max_support: usize,
    pub violations: Vec<Prop1Violation>,
}

impl Prop1Report {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Random check that the l1-minimal completion needs at most two instruments
/// and that the best pair attains the minimum.
///
/// Instances draw `n` uniformly from `2..=n_max`, Gaussian rows and a Gaussian
/// target exposure; every fourth instance duplicates some rows.
pub fn verify_prop1(trials: usize, n_max: usize, seed: u64) -> Result<Prop1Report> {
    const OP: &str = "verify_prop1";
    if trials == 0 {
        return Err(Error::invalid(OP, "trials", "must be >= 1"));
    }
    if n_max < 2 {
        return Err(Error::invalid(OP, "n_max", "must be >= 2"));
    }
    let results: Vec<(f64, usize, Option<Prop1Violation>)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = Substream::new(seed, Domain::Prop1, trial as u64, 0);
            let n = 2 + ((rng.uniform() * (n_max - 1) as f64) as usize).min(n_max - 2);
            let mut rows: Vec<[f64; 2]> = (0..n).map(|_| [rng.normal(), rng.normal()]).collect();
            if trial % 4 == 3 && n >= 3 {
                for k in 2..n {
                    rows[k] = rows[k % 2];
                }
            }
            let eta = ExposureVector { eta: [rng.normal(), rng.normal()] };
            check_instance(trial, &rows, &eta)
        })
        .collect();
    let mut report = Prop1Report {
        trials,
        n_max,
        seed,
        max_gap: 0.0,
        max_support: 0,
        violations: Vec::new(),
    };
    for (gap, support, v) in results {
        report.max_gap = report.max_gap.max(gap);
        report.max_support = report.max_support.max(support);
        report.violations.extend(v);
    }
    Ok(report)
}

fn check_instance(trial: usize, rows: &[[f64; 2]], eta: &ExposureVector<f64>) -> (f64, usize, Option<Prop1Violation>) {
    let pair = best_pair_l1(rows, eta).map(|p| p.0);
    let lp = sparsify_l1(rows, eta);
    let violation = |lp_l1, support, reason: String| Prop1Violation {
        trial,
        rows: rows.to_vec(),
        eta: eta.eta,
        lp_l1,
        pair_l1: pair,
        support,
        reason,
    };
    match (lp, pair) {
        (Ok(w), Some(p)) => {
            let gap = (w.l1 - p).abs();
            let support = w.support();
            let residual = (0..2)
                .map(|k| (rows.iter().zip(&w.pi).map(|(r, pi)| r[k] * pi).sum::<f64>() - eta.eta[k]).abs())
                .fold(0.0, f64::max);
            let v = if gap > 1e-8 * p.max(1.0) {
                Some(violation(Some(w.l1), support, format!("LP minimum differs from the best pair by {gap:e}")))
            } else if support > 2 {
                Some(violation(Some(w.l1), support, format!("LP vertex has {support} non-zero weights")))
            } else if residual > 1e-8 * eta.eta[0].abs().max(eta.eta[1].abs()).max(1.0) {
                Some(violation(Some(w.l1), support, format!("exposure residual {residual:e}")))
            } else {
                None
            };
            (gap, support, v)
        }
        (Err(e), _) => (f64::INFINITY, 0, Some(violation(None, 0, e.to_string()))),
        (Ok(w), None) => (f64::INFINITY, w.support(), Some(violation(Some(w.l1), w.support(), "no nonsingular pair".into()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pamc::exposure_to_weights;
    use crate::pricing::{build_sigma, McPricingConfig};

    fn setup() -> (HestonParams<f64>, MarketState<f64>, PricerConfig<f64>) {
        let p = HestonParams::baseline();
        let pc = PricerConfig {
            mc: McPricingConfig { n_paths: 4000, ..McPricingConfig::default() },
            ..PricerConfig::default()
        };
        (p, MarketState::initial(&p), pc)
    }

    #[test]
    fn vix_stock_weight_is_the_one_factor_ratio() {
        let (p, st, pc) = setup();
        let vix0 = VixCoefficients::new(&p).unwrap().vix(st.x);
        let inst = InstrumentSpec::new(InstrumentKind::VixCall, 1.05 * vix0, 0.1);
        let (pi_s, pi_o) = explicit_heston_weights(&inst, &st, &p, 4.0, 0.7, &pc).unwrap();
        assert!((pi_s - 0.345_238).abs() < 1e-6);
        assert!((pi_s - (4.0 - 0.4 * 7.1) / (4.0 * 0.84)).abs() < 1e-12);
        assert!(pi_o < 0.0);
    }

    #[test]
    fn no_volatility_premium_means_no_option() {
        let (mut p, st, pc) = setup();
        p.lambda_x = p.rho * p.lambda;
        let inst = InstrumentSpec::new(InstrumentKind::Call, 1.0, 0.1);
        let (_, pi_o) = explicit_heston_weights(&inst, &st, &p, 4.0, 0.0, &pc).unwrap();
        assert_eq!(pi_o, 0.0);
    }

    #[test]
    fn explicit_weights_match_exposure_then_solve() {
        let (p, st, pc) = setup();
        let grad_x = 0.9;
        let inst = InstrumentSpec::new(InstrumentKind::Call, 1.02, 0.1);
        let w = explicit_heston_weights(&inst, &st, &p, 4.0, grad_x, &pc).unwrap();
        let ctx = SweepContext::new(st, &p, 4.0, grad_x).unwrap();
        let sigma = build_sigma(&[InstrumentSpec::stock(), inst], &st, &p, &pc).unwrap();
        let pi = exposure_to_weights(&ctx.eta, &sigma).unwrap();
        assert!((w.0 - pi[0]).abs() < 1e-10 && (w.1 - pi[1]).abs() < 1e-10);
    }

    #[test]
    fn flat_instrument_cannot_complete() {
        let (p, st, _) = setup();
        let q = PriceAndGreeks { price: 0.1, delta: 0.5, vega_x: 0.0 };
        let inst = InstrumentSpec::new(InstrumentKind::Call, 1.0, 0.1);
        let err = explicit_weights_from_quote(&inst, &q, &st, &p, 4.0, 0.0, 1e-8).unwrap_err();
        assert!(matches!(err, Error::Uncompletable { .. }));
    }

    #[test]
    fn single_point_sweep_matches_direct_evaluation() {
        let (p, st, pc) = setup();
        let ctx = SweepContext::new(st, &p, 4.0, 0.5).unwrap();
        let grid = CandidateGrid {
            kinds: vec![InstrumentKind::Put],
            moneyness: vec![1.0],
            call_range: (1.0, 1.0),
            call_step: 0.005,
            maturities: vec![0.1],
        };
        let cells = sweep_moneyness(&grid, &ctx, &p, &pc).unwrap();
        assert_eq!(cells.len(), 1);
        let row = cells[0].row.as_ref().unwrap();
        let w = explicit_heston_weights(&row.instrument, &st, &p, 4.0, 0.5, &pc).unwrap();
        assert_eq!((row.pi_s, row.pi_o), w);
        assert_eq!(row.l1, w.0.abs() + w.1.abs());
    }

    #[test]
    fn sweep_reports_bad_cells_and_continues() {
        let (p, st, pc) = setup();
        let ctx = SweepContext::new(st, &p, 4.0, 0.5).unwrap();
        let grid = CandidateGrid {
            kinds: vec![InstrumentKind::VixCall],
            moneyness: vec![1.0, 40.0],
            call_range: (1.0, 1.1),
            call_step: 0.005,
            maturities: vec![0.1],
        };
        let cells = sweep_moneyness(&grid, &ctx, &p, &pc).unwrap();
        assert!(cells[0].row.is_ok());
        assert!(cells[1].row.is_err());
        let bad = CandidateGrid { moneyness: vec![1.0, 0.9], ..grid };
        assert!(sweep_moneyness(&bad, &ctx, &p, &pc).is_err());
    }

    #[test]
    fn grid_points_are_inclusive() {
        let g = grid_points(0.9f64, 1.1, 0.005);
        assert_eq!(g.len(), 41);
        assert!((g[40] - 1.1).abs() < 1e-12);
        assert_eq!(grid_points(1.0, 1.0, 0.005), vec![1.0]);
    }

    #[test]
    fn square_system_is_solved_exactly() {
        let rows = [[0.13f64, 0.0], [0.4, -0.8]];
        let eta = ExposureVector { eta: [0.05, -0.2] };
        let w = sparsify_l1(&rows, &eta).unwrap();
        let p = solve2([[0.13, 0.4], [0.0, -0.8]], eta.eta).unwrap();
        assert!((w.pi[0] - p[0]).abs() < 1e-12 && (w.pi[1] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn duplicated_rows_add_nothing() {
        let base = [[0.13f64, 0.0], [0.4, -0.8]];
        let eta = ExposureVector { eta: [0.05, -0.2] };
        let two = sparsify_l1(&base, &eta).unwrap();
        let four = sparsify_l1(&[base[0], base[1], base[0], base[1]], &eta).unwrap();
        assert!((two.l1 - four.l1).abs() < 1e-12);
        assert!(four.support() <= 2);
        // ties resolve to the first copy
        assert_eq!(four.pi[2], 0.0);
        assert_eq!(four.pi[3], 0.0);
    }

    #[test]
    fn rank_deficient_system_is_infeasible() {
        let rows = [[1.0, 2.0], [2.0, 4.0], [-0.5, -1.0]];
        let err = sparsify_l1(&rows, &ExposureVector { eta: [1.0, 0.0] }).unwrap_err();
        assert!(matches!(err, Error::Infeasible { .. }));
        assert!(sparsify_l1(&[[1.0, 0.0]], &ExposureVector { eta: [1.0, 0.0] }).is_err());
    }

    #[test]
    fn zero_target_needs_no_position() {
        let rows = [[1.0, 0.3], [0.2, -1.0], [0.5, 0.5]];
        let w = sparsify_l1(&rows, &ExposureVector { eta: [0.0, 0.0] }).unwrap();
        assert_eq!(w.l1, 0.0);
    }

    #[test]
    fn lp_agrees_with_pair_search() {
        let trivial = verify_prop1(1, 2, 3).unwrap();
        assert!(trivial.passed());
        let report = verify_prop1(200, 6, 11).unwrap();
        assert!(report.passed(), "{:?}", report.violations);
        assert!(report.max_support <= 2 && report.max_gap < 1e-8);
        assert!(verify_prop1(0, 6, 1).is_err());
    }
}
