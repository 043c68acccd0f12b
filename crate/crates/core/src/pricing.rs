//! Pricing of the candidate derivatives and the sensitivities that populate
//! the instrument variance matrix Σ.
//!
//! Equity options use the two-integral `P₁/P₂` representation of the Heston
//! price under the pricing measure, integrated with composite Simpson. VIX
//! options are priced by Monte Carlo on the risk-neutral variance, using the
//! closed form of VIX² as an affine function of the instantaneous variance.
//!
//! Pricing-measure dynamics are `dX = κ*(θ* − X) dt + σ^X √X dW`, with
//! `κ* = κ + λ^X σ^X` and `θ* = κθ/κ*`.

use std::fmt;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::model::{HestonParams, MarketState};
use crate::rng::{Domain, Substream};
use crate::scalar::{lit, Real};

/// VIX averaging window in years.
pub const VIX_WINDOW: f64 = 30.0 / 365.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentKind {
    Stock,
    Call,
    Put,
    Straddle,
    Strangle,
    VixCall,
    VixPut,
    VixStraddle,
}

impl InstrumentKind {
    pub fn is_vix(self) -> bool {
        matches!(self, InstrumentKind::VixCall | InstrumentKind::VixPut | InstrumentKind::VixStraddle)
    }

    pub fn is_equity_option(self) -> bool {
        matches!(
            self,
            InstrumentKind::Call | InstrumentKind::Put | InstrumentKind::Straddle | InstrumentKind::Strangle
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            InstrumentKind::Stock => "stock",
            InstrumentKind::Call => "call",
            InstrumentKind::Put => "put",
            InstrumentKind::Straddle => "straddle",
            InstrumentKind::Strangle => "strangle",
            InstrumentKind::VixCall => "vix_call",
            InstrumentKind::VixPut => "vix_put",
            InstrumentKind::VixStraddle => "vix_straddle",
        }
    }
}

impl fmt::Display for InstrumentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A tradable instrument. Options are rolled so that `maturity` is the
/// constant time to maturity.
///
/// For strangles `strike` is the put strike and `strike2` the call strike.
/// VIX strikes are in VIX (volatility) units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstrumentSpec<T> {
    pub kind: InstrumentKind,
    pub strike: T,
    pub strike2: T,
    pub maturity: T,
}

impl<T: Real> InstrumentSpec<T> {
    pub fn stock() -> Self {
        Self {
            kind: InstrumentKind::Stock,
            strike: T::zero(),
            strike2: T::zero(),
            maturity: T::zero(),
        }
    }

    pub fn new(kind: InstrumentKind, strike: T, maturity: T) -> Self {
        Self {
            kind,
            strike,
            strike2: strike,
            maturity,
        }
    }

    pub fn strangle(put_strike: T, call_strike: T, maturity: T) -> Self {
        Self {
            kind: InstrumentKind::Strangle,
            strike: put_strike,
            strike2: call_strike,
            maturity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "InstrumentSpec::validate";
        if self.kind == InstrumentKind::Stock {
            return Ok(());
        }
        if !(self.maturity > T::zero()) || !self.maturity.is_finite() {
            return Err(Error::invalid(OP, "maturity", format!("must be > 0, got {}", self.maturity)));
        }
        if !(self.strike >= T::zero()) || !self.strike.is_finite() {
            return Err(Error::invalid(OP, "strike", format!("must be finite and >= 0, got {}", self.strike)));
        }
        if self.kind.is_equity_option() && self.strike == T::zero() {
            return Err(Error::invalid(OP, "strike", "equity option strikes must be > 0"));
        }
        if self.kind == InstrumentKind::Strangle && !(self.strike <= self.strike2) {
            return Err(Error::invalid(
                OP,
                "strike2",
                format!("strangle call strike {} must be >= put strike {}", self.strike2, self.strike),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.kind {
            InstrumentKind::Stock => "stock".to_string(),
            InstrumentKind::Strangle => format!("strangle(K={}/{}, T={})", self.strike, self.strike2, self.maturity),
            k => format!("{k}(K={}, T={})", self.strike, self.maturity),
        }
    }
}

/// Price with its sensitivities to the stock and to the instantaneous variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceAndGreeks<T> {
    pub price: T,
    pub delta: T,
    pub vega_x: T,
}

impl<T: Real> std::ops::Add for PriceAndGreeks<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            price: self.price + o.price,
            delta: self.delta + o.delta,
            vega_x: self.vega_x + o.vega_x,
        }
    }
}

/// Composite-Simpson settings for the `P₁/P₂` integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig<T> {
    pub lower: T,
    /// Nominal upper limit; extended while the integrand tail is not negligible.
    pub upper: T,
    /// Simpson intervals on `[lower, upper]` (rounded up to even).
    pub nodes: usize,
    /// Maximum allowed price change between successive refinements.
    pub tol: T,
    pub max_doublings: usize,
    /// Central finite-difference step in X for `vega_x`.
    pub fd_step_x: T,
    /// The upper limit grows until `|φ(u)|/u` falls below this.
    pub tail_tol: T,
}

impl<T: Real> Default for QuadratureConfig<T> {
    fn default() -> Self {
        Self {
            lower: lit(1e-8),
            upper: lit(200.0),
            nodes: 2000,
            tol: lit(1e-9),
            max_doublings: 5,
            fd_step_x: lit(1e-5),
            tail_tol: lit(1e-14),
        }
    }
}

/// Monte Carlo settings for VIX options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McPricingConfig<T> {
    pub n_paths: usize,
    /// Euler steps per year of option maturity (at least one step is taken).
    pub steps_per_year: usize,
    pub seed: u64,
    /// Common-random-number central difference step in X₀.
    pub fd_step_x: T,
}

impl<T: Real> Default for McPricingConfig<T> {
    fn default() -> Self {
        Self {
            n_paths: 20_000,
            steps_per_year: 250,
            seed: 20_240_101,
            fd_step_x: lit(1e-5),
        }
    }
}

/// Everything needed to price any [`InstrumentKind`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PricerConfig<T> {
    pub quad: QuadratureConfig<T>,
    pub mc: McPricingConfig<T>,
    /// Prices below this are rejected: the instrument must keep a nonzero value.
    pub price_floor: T,
    /// Smallest admissible singular value of Σ for a complete composition.
    pub rank_tol: T,
}

impl<T: Real> Default for PricerConfig<T> {
    fn default() -> Self {
        Self {
            quad: QuadratureConfig::default(),
            mc: McPricingConfig::default(),
            price_floor: lit(1e-10),
            rank_tol: lit(1e-8),
        }
    }
}

// ---------------------------------------------------------------------------
// characteristic function

#[inline]
fn cexpm1<T: Real>(w: Complex<T>) -> Complex<T> {
    let half = lit::<T>(0.5);
    let s = (w.im * half).sin();
    Complex::new(w.re.exp_m1() * w.im.cos() - lit::<T>(2.0) * s * s, w.re.exp() * w.im.sin())
}

/// `ln(1 + z) / z`, accurate for small `|z|`.
#[inline]
fn log1p_ratio<T: Real>(z: Complex<T>) -> Complex<T> {
    if z.norm() < lit(1e-3) {
        let one = Complex::new(T::one(), T::zero());
        let c = |v: f64| Complex::new(lit::<T>(v), T::zero());
        one - z * (c(0.5) - z * (c(1.0 / 3.0) - z * (c(0.25) - z * c(0.2))))
    } else {
        (z + T::one()).ln() / z
    }
}

/// `C(u) + x D(u)`, the log characteristic function of `ln(S_τ/S) − rτ` under the
/// pricing measure, for CIR coefficients `(kappa, theta)` already risk-neutral.
///
/// The classical form divides `κ − ρσiu − d` by `σ²`, which cancels
/// catastrophically for small vol-of-vol; here `β − d = −σ² q / (β + d)` is used
/// so that no division by `σ²` remains.
fn ln_cf_core<T: Real>(u: Complex<T>, tau: T, kappa: T, theta: T, sigma: T, rho: T, x: T) -> Complex<T> {
    let i = Complex::new(T::zero(), T::one());
    let iu = i * u;
    let q = u * u + iu;
    let beta = Complex::new(kappa, T::zero()) - iu * (rho * sigma);
    let d = (beta * beta + q * (sigma * sigma)).sqrt();
    let bpd = beta + d;
    // (β − d)/σ²
    let bmd_over_s2 = -q / bpd;
    // g = (β − d)/(β + d)
    let g = bmd_over_s2 * (sigma * sigma) / bpd;
    let one_minus_e = -cexpm1(-d * tau);
    let e = -one_minus_e + T::one();
    let one = Complex::new(T::one(), T::zero());
    let d_term = bmd_over_s2 * one_minus_e / (one - g * e);
    // ln((1 − g e)/(1 − g)) / σ² = (z/σ²) · ln(1+z)/z with z = g(1 − e)/(1 − g)
    let z_over_s2 = bmd_over_s2 / bpd * one_minus_e / (one - g);
    let z = z_over_s2 * (sigma * sigma);
    let log_term = z_over_s2 * log1p_ratio(z);
    let two = lit::<T>(2.0);
    (bmd_over_s2 * tau - log_term * two) * (kappa * theta) + d_term * x
}

/// Risk-neutral characteristic function `E^Q[exp(iu ln S_{t+τ})]` at variance `x`
/// and log-price `ln_s`.
pub fn heston_char_fn<T: Real>(u: Complex<T>, tau: T, params: &HestonParams<T>, x: T, ln_s: T) -> Complex<T> {
    let i = Complex::new(T::zero(), T::one());
    let core = ln_cf_core(
        u,
        tau,
        params.kappa_star(),
        params.theta_star(),
        params.sigma_x,
        params.rho,
        x,
    );
    (i * u * (ln_s + params.r * tau) + core).exp()
}

// ---------------------------------------------------------------------------
// equity options

/// Integrand factors on a fixed Simpson grid for one `(x, τ)`:
/// `exp(ψ_j(u)) w / (iu π)` so that `P_j = 1/2 + Σ Re[e^{iu m} c_j]`, `m = ln(F/K)`.
#[derive(Debug, Clone)]
struct CfGrid<T> {
    u: Vec<T>,
    c1_fine: Vec<Complex<T>>,
    c2_fine: Vec<Complex<T>>,
    c1_coarse: Vec<Complex<T>>,
    c2_coarse: Vec<Complex<T>>,
}

fn simpson_weights<T: Real>(n: usize, h: T) -> Vec<T> {
    let third = h / lit(3.0);
    (0..=n)
        .map(|j| {
            if j == 0 || j == n {
                third
            } else if j % 2 == 1 {
                third * lit(4.0)
            } else {
                third * lit(2.0)
            }
        })
        .collect()
}

/// Upper integration limit: the nominal one, extended until the integrand tail is negligible.
fn upper_limit<T: Real>(tau: T, params: &HestonParams<T>, x: T, quad: &QuadratureConfig<T>) -> T {
    let (ks, ts) = (params.kappa_star(), params.theta_star());
    let mut upper = quad.upper;
    let cap = quad.upper * lit(500.0);
    while upper < cap {
        let u = Complex::new(upper, T::zero());
        let mag = ln_cf_core(u, tau, ks, ts, params.sigma_x, params.rho, x).re.exp() / upper;
        if mag < quad.tail_tol {
            break;
        }
        upper = upper * lit(1.5);
    }
    upper
}

impl<T: Real> CfGrid<T> {
    /// `intervals` is the fine Simpson interval count (even, and divisible by 4 so
    /// that the coarse grid with half the intervals is also a Simpson grid).
    fn build(tau: T, params: &HestonParams<T>, x: T, lower: T, upper: T, intervals: usize) -> Self {
        let (ks, ts) = (params.kappa_star(), params.theta_star());
        let h = (upper - lower) / T::from_usize_lossy(intervals);
        let w_fine = simpson_weights(intervals, h);
        let w_coarse = simpson_weights(intervals / 2, h * lit(2.0));
        let pi = T::PI();
        let i = Complex::new(T::zero(), T::one());
        let mut u = Vec::with_capacity(intervals + 1);
        let mut c1f = Vec::with_capacity(intervals + 1);
        let mut c2f = Vec::with_capacity(intervals + 1);
        let mut c1c = Vec::with_capacity(intervals / 2 + 1);
        let mut c2c = Vec::with_capacity(intervals / 2 + 1);
        for j in 0..=intervals {
            let uj = lower + h * T::from_usize_lossy(j);
            let cu = Complex::new(uj, T::zero());
            let psi2 = ln_cf_core(cu, tau, ks, ts, params.sigma_x, params.rho, x);
            let psi1 = ln_cf_core(cu - i, tau, ks, ts, params.sigma_x, params.rho, x);
            let denom = i * uj * pi;
            let f1 = psi1.exp() / denom;
            let f2 = psi2.exp() / denom;
            u.push(uj);
            c1f.push(f1 * w_fine[j]);
            c2f.push(f2 * w_fine[j]);
            if j % 2 == 0 {
                c1c.push(f1 * w_coarse[j / 2]);
                c2c.push(f2 * w_coarse[j / 2]);
            }
        }
        Self {
            u,
            c1_fine: c1f,
            c2_fine: c2f,
            c1_coarse: c1c,
            c2_coarse: c2c,
        }
    }

    /// `(P₁, P₂)` on the fine and on the coarse grid for log-forward-moneyness `m`.
    fn probabilities(&self, m: T) -> ([T; 2], [T; 2]) {
        self.sum(m, true)
    }

    /// `(P₁, P₂)` on the fine grid only.
    fn fine(&self, m: T) -> [T; 2] {
        self.sum(m, false).0
    }

    fn sum(&self, m: T, coarse: bool) -> ([T; 2], [T; 2]) {
        let half = lit::<T>(0.5);
        let (mut p1f, mut p2f, mut p1c, mut p2c) = (half, half, half, half);
        let h = if self.u.len() > 1 { self.u[1] - self.u[0] } else { T::zero() };
        let (ss, cs) = (h * m).sin_cos();
        let step = Complex::new(cs, ss);
        let mut rot = Complex::new(T::one(), T::zero());
        for (j, &uj) in self.u.iter().enumerate() {
            // phase recurrence, re-anchored periodically to bound drift
            if j % 256 == 0 {
                let (s, c) = (uj * m).sin_cos();
                rot = Complex::new(c, s);
            }
            p1f = p1f + (rot * self.c1_fine[j]).re;
            p2f = p2f + (rot * self.c2_fine[j]).re;
            if coarse && j % 2 == 0 {
                p1c = p1c + (rot * self.c1_coarse[j / 2]).re;
                p2c = p2c + (rot * self.c2_coarse[j / 2]).re;
            }
            rot = rot * step;
        }
        ([p1f, p2f], [p1c, p2c])
    }
}

/// Call/put quote at one strike; put values follow from parity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquityQuote<T> {
    pub strike: T,
    pub maturity: T,
    pub call: T,
    pub put: T,
    /// `∂C/∂S = P₁`; the put delta is `P₁ − 1`.
    pub call_delta: T,
    /// `∂C/∂X`, equal to `∂P/∂X`.
    pub vega_x: T,
}

impl<T: Real> EquityQuote<T> {
    pub fn call_greeks(&self) -> PriceAndGreeks<T> {
        PriceAndGreeks {
            price: self.call,
            delta: self.call_delta,
            vega_x: self.vega_x,
        }
    }

    pub fn put_greeks(&self) -> PriceAndGreeks<T> {
        PriceAndGreeks {
            price: self.put,
            delta: self.call_delta - T::one(),
            vega_x: self.vega_x,
        }
    }
}

/// Heston call prices for several strikes sharing one `(state, maturity)`;
/// the characteristic function is evaluated once per grid.
pub struct EquitySlice<T> {
    s: T,
    maturity: T,
    disc: T,
    ln_f_over_s: T,
    base: CfGrid<T>,
    up: CfGrid<T>,
    down: CfGrid<T>,
    fd_h: T,
    tol: T,
    x: T,
}

impl<T: Real> EquitySlice<T> {
    pub fn new(state: &MarketState<T>, maturity: T, params: &HestonParams<T>, quad: &QuadratureConfig<T>) -> Result<Self> {
        Self::with_strikes(state, maturity, params, quad, &[state.s])
    }

    /// Builds the grid and refines it until every strike in `probe` converges.
    pub fn with_strikes(
        state: &MarketState<T>,
        maturity: T,
        params: &HestonParams<T>,
        quad: &QuadratureConfig<T>,
        probe: &[T],
    ) -> Result<Self> {
        const OP: &str = "price_equity_option";
        params.validate()?;
        state.validate()?;
        if !(state.x > T::zero()) {
            return Err(Error::invalid(OP, "x", "instantaneous variance must be > 0"));
        }
        if !(maturity > T::zero()) {
            return Err(Error::invalid(OP, "maturity", "must be > 0"));
        }
        if params.kappa_star() <= T::zero() {
            return Err(Error::invalid(OP, "lambda_x", "risk-neutral mean reversion kappa* must be > 0"));
        }
        let upper = upper_limit(maturity, params, state.x, quad);
        let scale = (upper / quad.upper).max(T::one());
        let base_nodes = (T::from_usize_lossy(quad.nodes.max(4)) * scale).ceil().to_usize().unwrap_or(quad.nodes);
        // the nominal count is the fine grid, checked against half of it
        let mut intervals = base_nodes.div_ceil(4) * 4;
        let disc = (-params.r * maturity).exp();
        let ln_f_over_s = params.r * maturity;
        let h = quad.fd_step_x.min(state.x * lit(0.5));
        let mut last_gap = T::zero();
        for _ in 0..=quad.max_doublings {
            let base = CfGrid::build(maturity, params, state.x, quad.lower, upper, intervals);
            let mut ok = true;
            for &k in probe {
                let m = ln_f_over_s - (k / state.s).ln();
                let (fine, coarse) = base.probabilities(m);
                let cf = state.s * fine[0] - k * disc * fine[1];
                let cc = state.s * coarse[0] - k * disc * coarse[1];
                let gap = (cf - cc).abs();
                if !gap.is_finite() {
                    return Err(Error::NonFinite {
                        op: OP,
                        reason: format!("characteristic function overflow at strike {k}, maturity {maturity}"),
                    });
                }
                last_gap = last_gap.max(gap);
                if gap > quad.tol {
                    ok = false;
                }
            }
            if ok {
                let up = CfGrid::build(maturity, params, state.x + h, quad.lower, upper, intervals);
                let down = CfGrid::build(maturity, params, state.x - h, quad.lower, upper, intervals);
                return Ok(Self {
                    s: state.s,
                    maturity,
                    disc,
                    ln_f_over_s,
                    base,
                    up,
                    down,
                    fd_h: h,
                    tol: quad.tol,
                    x: state.x,
                });
            }
            last_gap = T::zero();
            intervals *= 2;
        }
        Err(Error::QuadratureNonConvergence {
            op: OP,
            reason: format!(
                "refinements still disagree by {} > {} after {} doublings (maturity {maturity})",
                last_gap, quad.tol, quad.max_doublings
            ),
        })
    }

    fn call_on(&self, grid: &CfGrid<T>, k: T) -> (T, T, T) {
        let m = self.ln_f_over_s - (k / self.s).ln();
        let (fine, coarse) = grid.probabilities(m);
        let call = self.s * fine[0] - k * self.disc * fine[1];
        let coarse_call = self.s * coarse[0] - k * self.disc * coarse[1];
        (call, fine[0], (call - coarse_call).abs())
    }

    pub fn quote(&self, strike: T) -> Result<EquityQuote<T>> {
        const OP: &str = "price_equity_option";
        if !(strike > T::zero()) {
            return Err(Error::invalid(OP, "strike", "must be > 0"));
        }
        let (call, p1, gap) = self.call_on(&self.base, strike);
        if !call.is_finite() {
            return Err(Error::NonFinite {
                op: OP,
                reason: format!("price at strike {strike} is not finite"),
            });
        }
        if gap > self.tol {
            return Err(Error::QuadratureNonConvergence {
                op: OP,
                reason: format!("strike {strike}: refinements disagree by {gap}"),
            });
        }
        let (cu, _, _) = self.call_on(&self.up, strike);
        let (cd, _, _) = self.call_on(&self.down, strike);
        let vega = (cu - cd) / (self.fd_h * lit(2.0));
        let put = call - self.s + strike * self.disc;
        Ok(EquityQuote {
            strike,
            maturity: self.maturity,
            call,
            put,
            call_delta: p1,
            vega_x: vega,
        })
    }

    /// Analytic call delta `P₁` only.
    pub fn call_delta(&self, strike: T) -> T {
        self.base.fine(self.ln_f_over_s - (strike / self.s).ln())[0]
    }

    pub fn price(&self, inst: &InstrumentSpec<T>) -> Result<PriceAndGreeks<T>> {
        match inst.kind {
            InstrumentKind::Call => Ok(self.quote(inst.strike)?.call_greeks()),
            InstrumentKind::Put => Ok(self.quote(inst.strike)?.put_greeks()),
            InstrumentKind::Straddle => {
                let q = self.quote(inst.strike)?;
                Ok(q.call_greeks() + q.put_greeks())
            }
            InstrumentKind::Strangle => {
                let put = self.quote(inst.strike)?.put_greeks();
                let call = self.quote(inst.strike2)?.call_greeks();
                Ok(put + call)
            }
            k => Err(Error::invalid("price_equity_option", "kind", format!("{k} is not an equity option"))),
        }
    }

    /// Strike in `[lo, hi]` where the straddle delta `2P₁ − 1` vanishes.
    pub fn delta_neutral_strike(&self, lo: T, hi: T) -> Result<T> {
        // Illinois false position in ln K
        let f = |y: T| self.call_delta(y.exp()) * lit(2.0) - T::one();
        let (mut a, mut b) = (lo.ln(), hi.ln());
        let (mut fa, mut fb) = (f(a), f(b));
        if fa.signum() == fb.signum() {
            return Err(Error::numerical(
                "delta_neutral_strike",
                format!("straddle delta does not change sign on [{lo}, {hi}]"),
            ));
        }
        let mut side = 0i8;
        for _ in 0..200 {
            let c = (a * fb - b * fa) / (fb - fa);
            let fc = f(c);
            if fc.abs() < lit(1e-13) || (b - a).abs() < T::epsilon() * lit(8.0) {
                return Ok(c.exp());
            }
            if fc.signum() == fb.signum() {
                b = c;
                fb = fc;
                if side == -1 {
                    fa = fa * lit(0.5);
                }
                side = -1;
            } else {
                a = c;
                fa = fc;
                if side == 1 {
                    fb = fb * lit(0.5);
                }
                side = 1;
            }
        }
        Ok(((a * fb - b * fa) / (fb - fa)).exp())
    }
}

impl<T: Real> EquitySlice<T> {
    fn value_on(&self, grid: &CfGrid<T>, inst: &InstrumentSpec<T>, spot: T, disc: T, ln_f_over_s: T) -> (T, T) {
        let call = |k: T| {
            let fine = grid.fine(ln_f_over_s - (k / spot).ln());
            (spot * fine[0] - k * disc * fine[1], fine[0])
        };
        match inst.kind {
            InstrumentKind::Call => call(inst.strike),
            InstrumentKind::Put => {
                let (c, d) = call(inst.strike);
                (c - spot + inst.strike * disc, d - T::one())
            }
            InstrumentKind::Straddle => {
                let (c, d) = call(inst.strike);
                (c + c - spot + inst.strike * disc, d + d - T::one())
            }
            InstrumentKind::Strangle => {
                let (cp, dp) = call(inst.strike);
                let (cc, dc) = call(inst.strike2);
                (cp - spot + inst.strike * disc + cc, dp - T::one() + dc)
            }
            _ => (T::nan(), T::nan()),
        }
    }

    /// Second-order sensitivities of an equity option at this slice's state.
    pub fn local_greeks(&self, inst: &InstrumentSpec<T>, params: &HestonParams<T>) -> Result<LocalGreeks<T>> {
        const OP: &str = "local_greeks";
        if !inst.kind.is_equity_option() {
            return Err(Error::invalid(OP, "kind", format!("{} is not an equity option", inst.kind)));
        }
        let s = self.s;
        let (d, l) = (self.disc, self.ln_f_over_s);
        let first = self.price(inst)?;
        let hs = s * lit(1e-3);
        let (vu, _) = self.value_on(&self.base, inst, s + hs, d, l);
        let (v0, _) = self.value_on(&self.base, inst, s, d, l);
        let (vd, _) = self.value_on(&self.base, inst, s - hs, d, l);
        let (pu, du) = self.value_on(&self.up, inst, s, d, l);
        let (pd, dd) = self.value_on(&self.down, inst, s, d, l);
        let hx = self.fd_h;
        let gamma = (vu - v0 - v0 + vd) / (hs * hs);
        let vanna = (du - dd) / (hx * lit(2.0));
        let volga = (pu - v0 - v0 + pd) / (hx * hx);
        let x = self.x;
        let half = lit::<T>(0.5);
        let sig = params.sigma_x;
        // pricing equation under the risk-neutral dynamics
        let theta = params.r * first.price
            - params.r * s * first.delta
            - params.kappa_star() * (params.theta_star() - x) * first.vega_x
            - half * x * s * s * gamma
            - params.rho * sig * x * s * vanna
            - half * sig * sig * x * volga;
        let out = LocalGreeks {
            price: first.price,
            delta: first.delta,
            gamma,
            vega_x: first.vega_x,
            vanna,
            volga,
            theta,
        };
        if !out.is_finite() {
            return Err(Error::NonFinite {
                op: OP,
                reason: format!("{} at x = {}", inst.label(), self.x),
            });
        }
        Ok(out)
    }
}

/// Price, first- and second-order sensitivities in `(S, X)` and time decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalGreeks<T> {
    pub price: T,
    pub delta: T,
    pub gamma: T,
    pub vega_x: T,
    pub vanna: T,
    pub volga: T,
    /// `∂O/∂t` at fixed strike and expiry date.
    pub theta: T,
}

impl<T: Real> LocalGreeks<T> {
    pub fn stock(s: T) -> Self {
        Self {
            price: s,
            delta: T::one(),
            gamma: T::zero(),
            vega_x: T::zero(),
            vanna: T::zero(),
            volga: T::zero(),
            theta: T::zero(),
        }
    }

    fn is_finite(&self) -> bool {
        [self.price, self.delta, self.gamma, self.vega_x, self.vanna, self.volga, self.theta]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Second-order Taylor value after a move `(ds, dx)` over `dt`.
    #[inline]
    pub fn reprice(&self, ds: T, dx: T, dt: T) -> T {
        let half = lit::<T>(0.5);
        self.price
            + self.theta * dt
            + self.delta * ds
            + self.vega_x * dx
            + half * self.gamma * ds * ds
            + self.vanna * ds * dx
            + half * self.volga * dx * dx
    }

    pub fn as_quote(&self) -> PriceAndGreeks<T> {
        PriceAndGreeks {
            price: self.price,
            delta: self.delta,
            vega_x: self.vega_x,
        }
    }
}

/// A position in a composition, re-struck at every rebalance.
///
/// Strikes of [`Leg::Option`] are moneyness ratios: relative to the stock for
/// equity options and to the prevailing VIX level for VIX options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "leg", rename_all = "snake_case")]
pub enum Leg<T> {
    Stock,
    Option { spec: InstrumentSpec<T> },
    DeltaNeutralStraddle { maturity: T },
}

impl<T: Real> Leg<T> {
    /// Absolute instrument at `state`.
    pub fn resolve(&self, state: &MarketState<T>, params: &HestonParams<T>, cfg: &PricerConfig<T>) -> Result<InstrumentSpec<T>> {
        match *self {
            Leg::Stock => Ok(InstrumentSpec::stock()),
            Leg::Option { spec } if spec.kind == InstrumentKind::Stock => Ok(spec),
            Leg::Option { spec } if spec.kind.is_vix() => {
                let level = VixCoefficients::new(params)?.vix(state.x);
                Ok(InstrumentSpec {
                    strike: spec.strike * level,
                    strike2: spec.strike2 * level,
                    ..spec
                })
            }
            Leg::Option { spec } => Ok(InstrumentSpec {
                strike: spec.strike * state.s,
                strike2: spec.strike2 * state.s,
                ..spec
            }),
            Leg::DeltaNeutralStraddle { maturity } => delta_neutral_straddle(state, maturity, params, &cfg.quad),
        }
    }

    /// Resolved instrument with its local sensitivities; equity legs only.
    pub fn local_greeks(
        &self,
        state: &MarketState<T>,
        params: &HestonParams<T>,
        cfg: &PricerConfig<T>,
    ) -> Result<(InstrumentSpec<T>, LocalGreeks<T>)> {
        const OP: &str = "local_greeks";
        let (inst, slice) = match *self {
            Leg::Stock => return Ok((InstrumentSpec::stock(), LocalGreeks::stock(state.s))),
            Leg::Option { spec } if spec.kind == InstrumentKind::Stock => {
                return Ok((spec, LocalGreeks::stock(state.s)))
            }
            Leg::Option { spec } if spec.kind.is_vix() => {
                return Err(Error::invalid(OP, "kind", "VIX legs have no closed-form local expansion"))
            }
            Leg::Option { .. } => {
                let inst = self.resolve(state, params, cfg)?;
                inst.validate()?;
                let probe = [inst.strike, inst.strike2];
                (inst, EquitySlice::with_strikes(state, inst.maturity, params, &cfg.quad, &probe)?)
            }
            Leg::DeltaNeutralStraddle { maturity } => {
                let slice = EquitySlice::new(state, maturity, params, &cfg.quad)?;
                let k = slice.delta_neutral_strike(state.s * lit(0.5), state.s * lit(2.0))?;
                (InstrumentSpec::new(InstrumentKind::Straddle, k, maturity), slice)
            }
        };
        let g = slice.local_greeks(&inst, params)?;
        check_floor(&inst, g.as_quote(), cfg.price_floor)?;
        Ok((inst, g))
    }

    pub fn label(&self) -> String {
        match self {
            Leg::Stock => "stock".to_string(),
            Leg::Option { spec } => spec.label(),
            Leg::DeltaNeutralStraddle { maturity } => format!("delta_neutral_straddle(T={maturity})"),
        }
    }
}

/// Spot-normalised sensitivities of a rolling equity leg as a Chebyshev
/// interpolant in `ln X`, built from exact prices at `S = 1`.
///
/// Re-struck legs are homogeneous of degree one in `(S, K)`, so one table
/// serves every node of a run.
#[derive(Debug, Clone)]
pub struct LegTable<T> {
    stock: bool,
    lo: T,
    hi: T,
    coef: Vec<[T; 7]>,
}

impl<T: Real> LegTable<T> {
    const MAX_NODES: usize = 512;

    /// Interpolant over `[x_lo, x_hi]`, refined until the trailing Chebyshev
    /// coefficients fall below `tol` relative to each sensitivity's scale
    /// (floored at `1e-3`).
    pub fn build(
        leg: &Leg<T>,
        params: &HestonParams<T>,
        cfg: &PricerConfig<T>,
        x_lo: T,
        x_hi: T,
        tol: T,
    ) -> Result<Self> {
        const OP: &str = "LegTable::build";
        if matches!(leg, Leg::Stock) || matches!(leg, Leg::Option { spec } if spec.kind == InstrumentKind::Stock) {
            return Ok(Self { stock: true, lo: x_lo, hi: x_hi, coef: Vec::new() });
        }
        if !(x_lo > T::zero()) || !(x_hi >= x_lo) || !x_hi.is_finite() {
            return Err(Error::invalid(OP, "x range", format!("need 0 < x_lo <= x_hi, got [{x_lo}, {x_hi}]")));
        }
        let (mut lo, mut hi) = (x_lo.ln(), x_hi.ln());
        let pad = lit::<T>(1e-6).max((hi - lo) * lit(1e-3));
        lo = lo - pad;
        hi = hi + pad;
        let base = MarketState::initial(params);
        let at = |y: T| -> Result<[T; 7]> {
            let st = MarketState { s: T::one(), x: y.exp(), ..base };
            let g = leg.local_greeks(&st, params, cfg)?.1;
            Ok([g.price, g.delta, g.gamma, g.vega_x, g.vanna, g.volga, g.theta])
        };
        let node = |k: usize, n: usize| {
            let c = (T::PI() * T::from_usize_lossy(k) / T::from_usize_lossy(n)).cos();
            (hi + lo) * lit(0.5) + (hi - lo) * lit(0.5) * c
        };
        let mut n = 16;
        let mut vals = Vec::with_capacity(n + 1);
        for k in 0..=n {
            vals.push(at(node(k, n))?);
        }
        loop {
            let coef = lobatto_coefficients(&vals);
            let mut ok = true;
            for comp in 0..7 {
                let scale = vals.iter().fold(lit::<T>(1e-3), |a, v| a.max(v[comp].abs()));
                let tail = coef[n - 2..].iter().fold(T::zero(), |a, c| a.max(c[comp].abs()));
                if tail > tol * scale {
                    ok = false;
                }
            }
            if ok {
                return Ok(Self { stock: false, lo, hi, coef });
            }
            if 2 * n > Self::MAX_NODES {
                return Err(Error::numerical(
                    OP,
                    format!("sensitivities not resolved with {n} nodes on X in [{x_lo}, {x_hi}]"),
                ));
            }
            // Lobatto nodes nest under doubling
            let mut next = Vec::with_capacity(2 * n + 1);
            for k in 0..=2 * n {
                if k % 2 == 0 {
                    next.push(vals[k / 2]);
                } else {
                    next.push(at(node(k, 2 * n))?);
                }
            }
            vals = next;
            n *= 2;
        }
    }

    /// Number of interpolation nodes (zero for the stock).
    pub fn nodes(&self) -> usize {
        self.coef.len()
    }

    /// Whether `x` lies inside the interpolated range.
    pub fn covers(&self, x: T) -> bool {
        self.stock || (x > T::zero() && x.ln() >= self.lo && x.ln() <= self.hi)
    }

    /// Sensitivities at `(s, x)`; `x` must be covered.
    pub fn eval(&self, s: T, x: T) -> LocalGreeks<T> {
        if self.stock {
            return LocalGreeks::stock(s);
        }
        let y = x.ln().max(self.lo).min(self.hi);
        let z = (y + y - self.lo - self.hi) / (self.hi - self.lo);
        let mut v = [T::zero(); 7];
        let last = self.coef.len() - 1;
        for (comp, out) in v.iter_mut().enumerate() {
            let (mut b1, mut b2) = (T::zero(), T::zero());
            for (j, c) in self.coef.iter().enumerate().rev() {
                let cj = if j == 0 || j == last { c[comp] * lit(0.5) } else { c[comp] };
                if j == 0 {
                    *out = cj + z * b1 - b2;
                } else {
                    let b0 = cj + z * b1 * lit(2.0) - b2;
                    b2 = b1;
                    b1 = b0;
                }
            }
        }
        LocalGreeks {
            price: v[0] * s,
            delta: v[1],
            gamma: v[2] / s,
            vega_x: v[3] * s,
            vanna: v[4],
            volga: v[5] * s,
            theta: v[6] * s,
        }
    }
}

/// Chebyshev coefficients from values at `cos(πk/n)`, `k = 0..=n`; the first
/// and last coefficients carry the usual factor two.
fn lobatto_coefficients<T: Real>(vals: &[[T; 7]]) -> Vec<[T; 7]> {
    let n = vals.len() - 1;
    let nf = T::from_usize_lossy(n);
    (0..=n)
        .map(|j| {
            let mut c = [T::zero(); 7];
            for (k, v) in vals.iter().enumerate() {
                let w = if k == 0 || k == n { lit::<T>(0.5) } else { T::one() };
                let ph = (T::PI() * T::from_usize_lossy((j * k) % (2 * n)) / nf).cos() * w;
                for comp in 0..7 {
                    c[comp] = c[comp] + v[comp] * ph;
                }
            }
            c.map(|x| x * lit::<T>(2.0) / nf)
        })
        .collect()
}

pub fn price_equity_option<T: Real>(
    inst: &InstrumentSpec<T>,
    state: &MarketState<T>,
    params: &HestonParams<T>,
    quad: &QuadratureConfig<T>,
) -> Result<PriceAndGreeks<T>> {
    inst.validate()?;
    if !inst.kind.is_equity_option() {
        return Err(Error::invalid("price_equity_option", "kind", format!("{} is not an equity option", inst.kind)));
    }
    let probe: Vec<T> = if inst.kind == InstrumentKind::Strangle {
        vec![inst.strike, inst.strike2]
    } else {
        vec![inst.strike]
    };
    EquitySlice::with_strikes(state, inst.maturity, params, quad, &probe)?.price(inst)
}

/// Straddle struck where its delta vanishes at `state`.
pub fn delta_neutral_straddle<T: Real>(
    state: &MarketState<T>,
    maturity: T,
    params: &HestonParams<T>,
    quad: &QuadratureConfig<T>,
) -> Result<InstrumentSpec<T>> {
    let slice = EquitySlice::new(state, maturity, params, quad)?;
    let k = slice.delta_neutral_strike(state.s * lit(0.5), state.s * lit(2.0))?;
    Ok(InstrumentSpec::new(InstrumentKind::Straddle, k, maturity))
}

// ---------------------------------------------------------------------------
// VIX

/// Coefficients of `VIX² = (a_τ X + b_τ)/τ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VixCoefficients<T> {
    pub a_tau: T,
    pub b_tau: T,
    pub kappa_star: T,
    pub theta_star: T,
    pub tau: T,
}

impl<T: Real> VixCoefficients<T> {
    pub fn new(params: &HestonParams<T>) -> Result<Self> {
        Self::with_window(params, lit(VIX_WINDOW))
    }

    pub fn with_window(params: &HestonParams<T>, tau: T) -> Result<Self> {
        let ks = params.kappa_star();
        if !(ks > T::zero()) {
            return Err(Error::invalid(
                "vix_squared",
                "lambda_x",
                format!("kappa* = kappa + lambda_x sigma_x must be > 0, got {ks}"),
            ));
        }
        let ts = params.theta_star();
        let a = -(-ks * tau).exp_m1() / ks;
        Ok(Self {
            a_tau: a,
            b_tau: ts * (tau - a),
            kappa_star: ks,
            theta_star: ts,
            tau,
        })
    }

    #[inline]
    pub fn vix_squared(&self, x: T) -> T {
        (self.a_tau * x + self.b_tau) / self.tau
    }

    #[inline]
    pub fn vix(&self, x: T) -> T {
        self.vix_squared(x).max(T::zero()).sqrt()
    }
}

pub fn vix_squared<T: Real>(x: T, params: &HestonParams<T>) -> Result<T> {
    if !(x >= T::zero()) {
        return Err(Error::invalid("vix_squared", "x", format!("must be >= 0, got {x}")));
    }
    Ok(VixCoefficients::new(params)?.vix_squared(x))
}

/// Terminal VIX levels at `maturity` for paths started at each of `x0s`,
/// driven by common random numbers. Returns one vector per starting variance.
pub fn simulate_vix_terminal<T: Real>(
    x0s: &[T],
    params: &HestonParams<T>,
    maturity: T,
    mc: &McPricingConfig<T>,
) -> Result<Vec<Vec<T>>> {
    let coef = VixCoefficients::new(params)?;
    let steps = (maturity * T::from_usize_lossy(mc.steps_per_year)).ceil().to_usize().unwrap_or(1).max(1);
    let h = maturity / T::from_usize_lossy(steps);
    let sqrt_h = h.sqrt();
    let (ks, ts, sig) = (coef.kappa_star, coef.theta_star, params.sigma_x);
    let mut out = vec![Vec::with_capacity(mc.n_paths); x0s.len()];
    let mut xs = x0s.to_vec();
    for m in 0..mc.n_paths {
        let mut rng = Substream::new(mc.seed, Domain::VixPricing, m as u64, 0);
        xs.copy_from_slice(x0s);
        for _ in 0..steps {
            let dw = sqrt_h * T::lit(rng.normal());
            for x in xs.iter_mut() {
                let xp = x.max(T::zero());
                *x = *x + ks * (ts - xp) * h + sig * xp.sqrt() * dw;
            }
        }
        for (v, &x) in out.iter_mut().zip(xs.iter()) {
            v.push(coef.vix(x.max(T::zero())));
        }
    }
    Ok(out)
}

fn mean<T: Real>(v: impl Iterator<Item = T>, n: usize) -> T {
    v.fold(T::zero(), |a, b| a + b) / T::from_usize_lossy(n)
}

/// Monte Carlo VIX call/put/straddle. `delta` is zero; `vega_x` is a
/// common-random-number central difference in X₀.
pub fn price_vix_option<T: Real>(
    inst: &InstrumentSpec<T>,
    state: &MarketState<T>,
    params: &HestonParams<T>,
    mc: &McPricingConfig<T>,
    price_floor: T,
) -> Result<PriceAndGreeks<T>> {
    const OP: &str = "price_vix_option";
    inst.validate()?;
    params.validate()?;
    state.validate()?;
    if !inst.kind.is_vix() {
        return Err(Error::invalid(OP, "kind", format!("{} is not a VIX option", inst.kind)));
    }
    if mc.n_paths == 0 {
        return Err(Error::invalid(OP, "n_paths", "must be >= 1"));
    }
    let h = mc.fd_step_x.min(state.x * lit(0.5)).max(mc.fd_step_x * lit(1e-3));
    let x0s = [state.x, state.x + h, (state.x - h).max(T::zero())];
    let vix = simulate_vix_terminal(&x0s, params, inst.maturity, mc)?;
    let disc = (-params.r * inst.maturity).exp();
    let n = mc.n_paths;
    let k = inst.strike;
    let width = x0s[1] - x0s[2];
    let leg = |payoff: &dyn Fn(T) -> T| -> PriceAndGreeks<T> {
        let p0 = mean(vix[0].iter().map(|&v| payoff(v)), n);
        let pu = mean(vix[1].iter().map(|&v| payoff(v)), n);
        let pd = mean(vix[2].iter().map(|&v| payoff(v)), n);
        PriceAndGreeks {
            price: disc * p0,
            delta: T::zero(),
            vega_x: disc * (pu - pd) / width,
        }
    };
    let call = || leg(&|v: T| (v - k).max(T::zero()));
    let put = || leg(&|v: T| (k - v).max(T::zero()));
    let out = match inst.kind {
        InstrumentKind::VixCall => call(),
        InstrumentKind::VixPut => put(),
        _ => call() + put(),
    };
    if !(out.price.abs() >= price_floor) {
        return Err(Error::DegeneratePrice {
            op: OP,
            price: out.price.to_f64_lossy(),
            floor: price_floor.to_f64_lossy(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// dispatch and Σ

/// Price any instrument at `state`.
pub fn price_instrument<T: Real>(
    inst: &InstrumentSpec<T>,
    state: &MarketState<T>,
    params: &HestonParams<T>,
    cfg: &PricerConfig<T>,
) -> Result<PriceAndGreeks<T>> {
    let out = match inst.kind {
        InstrumentKind::Stock => PriceAndGreeks {
            price: state.s,
            delta: T::one(),
            vega_x: T::zero(),
        },
        k if k.is_vix() => return price_vix_option(inst, state, params, &cfg.mc, cfg.price_floor),
        _ => price_equity_option(inst, state, params, &cfg.quad)?,
    };
    check_floor(inst, out, cfg.price_floor)
}

pub(crate) fn check_floor<T: Real>(inst: &InstrumentSpec<T>, q: PriceAndGreeks<T>, floor: T) -> Result<PriceAndGreeks<T>> {
    if !(q.price.abs() >= floor) || !q.price.is_finite() {
        return Err(Error::DegeneratePrice {
            op: "price_instrument",
            price: q.price.to_f64_lossy(),
            floor: floor.to_f64_lossy(),
        })
        .map_err(|e| {
            log::debug!("{}: {e}", inst.label());
            e
        });
    }
    Ok(q)
}

/// Variance matrix of a composition: row `i` holds the loadings of the
/// instrument's return on `(B^S, B^X)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaMatrix<T> {
    pub rows: Vec<[T; 2]>,
    pub instruments: Vec<InstrumentSpec<T>>,
    pub quotes: Vec<PriceAndGreeks<T>>,
}

impl<T: Real> SigmaMatrix<T> {
    /// Σ row from a quote at state `(s, x)`: `[Δ S σ^S / O, ∂O/∂X σ^H / O]`.
    pub fn row_from_quote(q: &PriceAndGreeks<T>, s: T, x: T, params: &HestonParams<T>) -> [T; 2] {
        let sq = x.max(T::zero()).sqrt();
        [q.delta * s * sq / q.price, q.vega_x * params.sigma_x * sq / q.price]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Singular values, largest first.
    pub fn singular_values(&self) -> Vec<T> {
        let n = self.rows.len();
        if n < 2 {
            return self.rows.iter().map(|r| (r[0] * r[0] + r[1] * r[1]).sqrt()).collect();
        }
        let mut a = Vec::with_capacity(2 * n);
        a.extend(self.rows.iter().map(|r| r[0]));
        a.extend(self.rows.iter().map(|r| r[1]));
        let mut s = svd(&a, n, 2).s;
        s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        s
    }

    pub fn instrument_list(&self) -> String {
        self.instruments.iter().map(|i| i.label()).collect::<Vec<_>>().join(", ")
    }
}

pub fn build_sigma<T: Real>(
    instruments: &[InstrumentSpec<T>],
    state: &MarketState<T>,
    params: &HestonParams<T>,
    cfg: &PricerConfig<T>,
) -> Result<SigmaMatrix<T>> {
    let mut rows = Vec::with_capacity(instruments.len());
    let mut quotes = Vec::with_capacity(instruments.len());
    for inst in instruments {
        let q = price_instrument(inst, state, params, cfg)?;
        let row = match inst.kind {
            InstrumentKind::Stock => [state.x.max(T::zero()).sqrt(), T::zero()],
            k if k.is_vix() => [T::zero(), SigmaMatrix::row_from_quote(&q, state.s, state.x, params)[1]],
            _ => SigmaMatrix::row_from_quote(&q, state.s, state.x, params),
        };
        rows.push(row);
        quotes.push(q);
    }
    let sigma = SigmaMatrix {
        rows,
        instruments: instruments.to_vec(),
        quotes,
    };
    if sigma.len() >= 2 {
        let s = sigma.singular_values();
        let smin = s[1];
        if !(smin > cfg.rank_tol) {
            return Err(Error::IncompleteMarket {
                op: "build_sigma",
                instruments: sigma.instrument_list(),
                sigma_min: smin.to_f64_lossy(),
            });
        }
    }
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn baseline() -> (HestonParams<f64>, MarketState<f64>) {
        let p = HestonParams::baseline();
        (p, MarketState::initial(&p))
    }

    #[test]
    fn char_fn_trivial_points() {
        let (p, _) = baseline();
        let one = heston_char_fn(Complex::new(0.0, 0.0), 0.1, &p, 0.0169, 0.3);
        assert!((one - Complex::new(1.0, 0.0)).norm() < 1e-14);
        // u = -i gives the forward
        let fwd = heston_char_fn(Complex::new(0.0, -1.0), 0.1, &p, 0.0169, 0.3);
        let expect = (0.3f64 + 0.05 * 0.1).exp();
        assert!((fwd.re - expect).abs() < 1e-13 && fwd.im.abs() < 1e-13);
    }

    #[test]
    fn char_fn_matches_textbook_form_at_moderate_vol_of_vol() {
        // classical little-trap expression, evaluated directly
        let (p, _) = baseline();
        let (k, th, s, r) = (p.kappa_star(), p.theta_star(), p.sigma_x, p.rho);
        let tau = 0.5;
        let x = 0.02;
        for &uu in &[0.3, 1.0, 7.5, 40.0] {
            let u = Complex::new(uu, 0.0);
            let i = Complex::new(0.0, 1.0);
            let beta = k - r * s * i * u;
            let d = (beta * beta + s * s * (u * u + i * u)).sqrt();
            let g = (beta - d) / (beta + d);
            let e = (-d * tau).exp();
            let c = k * th / (s * s) * ((beta - d) * tau - 2.0 * ((1.0 - g * e) / (1.0 - g)).ln());
            let dd = (beta - d) / (s * s) * (1.0 - e) / (1.0 - g * e);
            let want = (i * u * (p.r * tau) + c + x * dd).exp();
            let got = heston_char_fn(u, tau, &p, x, 0.0);
            assert!((want - got).norm() < 1e-12, "u={uu}: {want} vs {got}");
        }
    }

    #[test]
    fn put_call_parity_holds() {
        let (p, st) = baseline();
        let quad = QuadratureConfig::default();
        let c = price_equity_option(&InstrumentSpec::new(InstrumentKind::Call, 1.0, 0.1), &st, &p, &quad).unwrap();
        let pu = price_equity_option(&InstrumentSpec::new(InstrumentKind::Put, 1.0, 0.1), &st, &p, &quad).unwrap();
        let parity = 1.0 - (-0.05f64 * 0.1).exp();
        assert!((c.price - pu.price - parity).abs() < 1e-6);
        assert!((c.delta - pu.delta - 1.0).abs() < 1e-15);
    }

    #[test]
    fn straddle_is_call_plus_put() {
        let (p, st) = baseline();
        let quad = QuadratureConfig::default();
        let c = price_equity_option(&InstrumentSpec::new(InstrumentKind::Call, 1.02, 0.1), &st, &p, &quad).unwrap();
        let pu = price_equity_option(&InstrumentSpec::new(InstrumentKind::Put, 1.02, 0.1), &st, &p, &quad).unwrap();
        let sd = price_equity_option(&InstrumentSpec::new(InstrumentKind::Straddle, 1.02, 0.1), &st, &p, &quad).unwrap();
        assert_eq!(sd, c + pu);
    }

    #[test]
    fn rejects_invalid_instruments() {
        let (p, st) = baseline();
        let quad = QuadratureConfig::default();
        let bad = InstrumentSpec::strangle(1.05, 1.0, 0.1);
        assert!(price_equity_option(&bad, &st, &p, &quad).is_err());
        let vix = InstrumentSpec::new(InstrumentKind::VixCall, 0.1, 0.1);
        assert!(price_equity_option(&vix, &st, &p, &quad).is_err());
        let zero_t = InstrumentSpec::new(InstrumentKind::Call, 1.0, 0.0);
        assert!(zero_t.validate().is_err());
    }

    #[test]
    fn quadrature_failure_is_reported() {
        let (p, st) = baseline();
        let quad = QuadratureConfig {
            nodes: 8,
            tol: 1e-15,
            max_doublings: 0,
            ..QuadratureConfig::default()
        };
        let err = price_equity_option(&InstrumentSpec::new(InstrumentKind::Call, 1.0, 0.1), &st, &p, &quad).unwrap_err();
        assert!(matches!(err, Error::QuadratureNonConvergence { .. }));
    }

    #[test]
    fn vix_coefficients_baseline() {
        let (p, _) = baseline();
        let c = VixCoefficients::new(&p).unwrap();
        assert!((c.kappa_star - 3.225).abs() < 1e-12);
        assert!((c.theta_star - 0.026_202).abs() < 1e-6);
        assert!(c.a_tau > 0.0 && c.b_tau > 0.0);
        let bad = HestonParams { lambda_x: -25.0, ..p };
        assert!(vix_squared(0.01, &bad).is_err());
    }

    #[test]
    fn vix_squared_is_affine() {
        let (p, _) = baseline();
        let xs = [0.004, 0.0169, 0.0298];
        let v: Vec<f64> = xs.iter().map(|&x| vix_squared(x, &p).unwrap()).collect();
        // equally spaced grid
        assert!((v[0] - 2.0 * v[1] + v[2]).abs() < 1e-17);
    }

    #[test]
    fn vix_short_window_recovers_spot_variance() {
        let (p, _) = baseline();
        let ts = p.theta_star();
        let c = VixCoefficients::with_window(&p, 1e-9).unwrap();
        assert!((c.vix_squared(ts) - ts).abs() < 1e-12);
        let c = VixCoefficients::with_window(&p, 1e-9).unwrap();
        assert!((c.vix_squared(0.03) - 0.03).abs() < 1e-9);
    }

    #[test]
    fn vix_straddle_is_exactly_call_plus_put() {
        let (p, st) = baseline();
        let mc = McPricingConfig { n_paths: 2000, ..McPricingConfig::default() };
        let k = 0.14;
        let c = price_vix_option(&InstrumentSpec::new(InstrumentKind::VixCall, k, 0.1), &st, &p, &mc, 1e-10).unwrap();
        let pu = price_vix_option(&InstrumentSpec::new(InstrumentKind::VixPut, k, 0.1), &st, &p, &mc, 1e-10).unwrap();
        let sd = price_vix_option(&InstrumentSpec::new(InstrumentKind::VixStraddle, k, 0.1), &st, &p, &mc, 1e-10).unwrap();
        assert_eq!(sd, c + pu);
        assert_eq!(c.delta, 0.0);
    }

    #[test]
    fn zero_strike_vix_call_is_discounted_mean_vix() {
        let (p, st) = baseline();
        let mc = McPricingConfig { n_paths: 3000, ..McPricingConfig::default() };
        let c = price_vix_option(&InstrumentSpec::new(InstrumentKind::VixCall, 0.0, 0.1), &st, &p, &mc, 1e-10).unwrap();
        let vix = simulate_vix_terminal(&[st.x], &p, 0.1, &mc).unwrap();
        let direct = (-0.05f64 * 0.1).exp() * vix[0].iter().sum::<f64>() / vix[0].len() as f64;
        assert!((c.price - direct).abs() < 1e-12);
    }

    #[test]
    fn worthless_vix_option_is_degenerate() {
        let (p, st) = baseline();
        let mc = McPricingConfig { n_paths: 500, ..McPricingConfig::default() };
        let err = price_vix_option(&InstrumentSpec::new(InstrumentKind::VixCall, 5.0, 0.1), &st, &p, &mc, 1e-10).unwrap_err();
        assert!(matches!(err, Error::DegeneratePrice { .. }));
    }

    #[test]
    fn sigma_rows() {
        let (p, st) = baseline();
        let cfg = PricerConfig { mc: McPricingConfig { n_paths: 4000, ..McPricingConfig::default() }, ..PricerConfig::default() };
        let s = build_sigma(&[InstrumentSpec::stock()], &st, &p, &cfg).unwrap();
        assert_eq!(s.rows, vec![[st.x.sqrt(), 0.0]]);
        let vix0 = VixCoefficients::new(&p).unwrap().vix(st.x);
        let s = build_sigma(
            &[InstrumentSpec::stock(), InstrumentSpec::new(InstrumentKind::VixCall, vix0, 0.1)],
            &st,
            &p,
            &cfg,
        )
        .unwrap();
        assert_eq!(s.rows[1][0], 0.0);
        let q = s.quotes[1];
        assert!((s.rows[1][1] - q.vega_x * p.sigma_x * st.x.sqrt() / q.price).abs() < 1e-15);
        let dup = build_sigma(&[InstrumentSpec::stock(), InstrumentSpec::stock()], &st, &p, &cfg);
        assert!(matches!(dup, Err(Error::IncompleteMarket { .. })));
    }

    #[test]
    fn delta_neutral_straddle_has_zero_delta() {
        let (p, st) = baseline();
        let quad = QuadratureConfig::default();
        let inst = delta_neutral_straddle(&st, 0.1, &p, &quad).unwrap();
        let q = price_equity_option(&inst, &st, &p, &quad).unwrap();
        assert!(q.delta.abs() < 1e-10);
        assert!(inst.strike > 1.0 && inst.strike < 1.05);
    }

    #[test]
    fn f32_pricing_is_close_to_f64() {
        let p32 = HestonParams::<f32>::baseline();
        let st32 = MarketState::initial(&p32);
        let quad32 = QuadratureConfig { tol: 1e-3f32, tail_tol: 1e-7, ..QuadratureConfig::default() };
        let c32 = price_equity_option(&InstrumentSpec::new(InstrumentKind::Call, 1.0f32, 0.1), &st32, &p32, &quad32).unwrap();
        let (p, st) = baseline();
        let c64 = price_equity_option(&InstrumentSpec::new(InstrumentKind::Call, 1.0, 0.1), &st, &p, &QuadratureConfig::default()).unwrap();
        assert!((c32.price as f64 - c64.price).abs() < 1e-3);
    }

    #[test]
    fn theta_matches_calendar_difference() {
        let (p, st) = baseline();
        let quad = QuadratureConfig::default();
        let inst = InstrumentSpec::new(InstrumentKind::Straddle, 1.01, 0.1);
        let g = EquitySlice::with_strikes(&st, 0.1, &p, &quad, &[1.01]).unwrap().local_greeks(&inst, &p).unwrap();
        let eps = 1e-4;
        let at = |tau: f64| price_equity_option(&InstrumentSpec { maturity: tau, ..inst }, &st, &p, &quad).unwrap().price;
        let fd = (at(0.1 - eps) - at(0.1 + eps)) / (2.0 * eps);
        assert!((g.theta - fd).abs() < 1e-4 * fd.abs());
    }

    #[test]
    fn taylor_reprice_is_second_order() {
        let (p, st) = baseline();
        let quad = QuadratureConfig::default();
        let inst = InstrumentSpec::new(InstrumentKind::Straddle, 1.0, 0.1);
        let g = EquitySlice::with_strikes(&st, 0.1, &p, &quad, &[1.0]).unwrap().local_greeks(&inst, &p).unwrap();
        let err = |h: f64| {
            let (ds, dx, dt) = (0.02 * h, 0.002 * h, h * h / 60.0);
            let moved = MarketState { s: st.s + ds, x: st.x + dx, ..st };
            let exact = price_equity_option(&InstrumentSpec { maturity: 0.1 - dt, ..inst }, &moved, &p, &quad).unwrap().price;
            (g.reprice(ds, dx, dt) - exact).abs()
        };
        let (e1, e2) = (err(0.5), err(0.25));
        assert!(e1 < 1e-2 * g.price);
        assert!(e1 / e2 > 6.0);
    }

    #[test]
    fn leg_table_matches_exact_pricing() {
        let (p, _) = baseline();
        let cfg = PricerConfig::default();
        let leg = Leg::DeltaNeutralStraddle { maturity: 0.1 };
        let table = LegTable::build(&leg, &p, &cfg, 0.004, 0.06, 1e-6).unwrap();
        for &(s, x) in &[(1.0, 0.0169), (1.3, 0.0041), (0.8, 0.031), (1.05, 0.0599)] {
            assert!(table.covers(x));
            let st = MarketState { s, x, ..MarketState::initial(&p) };
            let exact = leg.local_greeks(&st, &p, &cfg).unwrap().1;
            let got = table.eval(s, x);
            let pairs = [
                (got.price, exact.price, exact.price),
                (got.delta, exact.delta, 1.0),
                (got.gamma, exact.gamma, exact.gamma),
                (got.vega_x, exact.vega_x, exact.vega_x),
                (got.vanna, exact.vanna, exact.vanna.abs().max(1.0)),
                (got.volga, exact.volga, exact.volga.abs()),
                (got.theta, exact.theta, exact.theta.abs()),
            ];
            for (k, (a, b, scale)) in pairs.iter().enumerate() {
                assert!((a - b).abs() <= 1e-5 * scale, "component {k} at ({s}, {x}): {a} vs {b}");
            }
        }
        let stock = LegTable::build(&Leg::Stock, &p, &cfg, 0.01, 0.02, 1e-9).unwrap();
        assert_eq!(stock.eval(1.7, 0.3), LocalGreeks::stock(1.7));
    }
}
