//! Analytic benchmarks: Black–Scholes prices, myopic exposures and the
//! complete-market Heston strategy.
//!
//! For the complete market the transformed value function is exponential
//! affine, `P = A(τ) + B(τ) X` with `τ = T − t`. Substituting into the HJB
//! equation at the optimum gives
//!
//! ```text
//! B' = c₀ + c₁ B + c₂ B²,   B(0) = 0
//! A' = (1 − γ) r + κθ B,    A(0) = 0
//! c₀ = (1 − γ)/(2γ) · ℓᵀ(ΦΦᵀ)⁻¹ℓ,  ℓ = [λ, λ^X]
//! c₁ = (1 − γ) σ λ^X / γ − κ
//! c₂ = σ² / (2γ)
//! ```
//!
//! which is integrated with an adaptive Dormand–Prince scheme.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{factor_geometry, HestonParams, MarketState};
use crate::pamc::{optimal_exposure, ExposureVector};
use crate::scalar::{lit, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionSide {
    Call,
    Put,
}

/// Standard normal distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Lognormal price of a European option with total variance `total_var`.
pub fn bs_price(side: OptionSide, s: f64, k: f64, tau: f64, r: f64, total_var: f64) -> Result<f64> {
    const OP: &str = "bs_price";
    for (name, v) in [("s", s), ("k", k), ("tau", tau)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::invalid(OP, name, format!("must be finite and > 0, got {v}")));
        }
    }
    if !(total_var >= 0.0) || !total_var.is_finite() {
        return Err(Error::invalid(OP, "total_var", format!("must be finite and >= 0, got {total_var}")));
    }
    let dk = k * (-r * tau).exp();
    if total_var == 0.0 {
        return Ok(match side {
            OptionSide::Call => (s - dk).max(0.0),
            OptionSide::Put => (dk - s).max(0.0),
        });
    }
    let sd = total_var.sqrt();
    let d1 = ((s / dk).ln() + 0.5 * total_var) / sd;
    let d2 = d1 - sd;
    Ok(match side {
        OptionSide::Call => s * norm_cdf(d1) - dk * norm_cdf(d2),
        OptionSide::Put => dk * norm_cdf(-d2) - s * norm_cdf(-d1),
    })
}

/// `(1/γ)(ΦΦᵀ)⁻¹Λ(x)`: the exposure with a flat value function.
pub fn merton_exposure<T: Real>(params: &HestonParams<T>, gamma: T, x: T) -> Result<ExposureVector<T>> {
    let state = MarketState {
        x,
        ..MarketState::initial(params)
    };
    let g = factor_geometry(params, &state);
    optimal_exposure(&g, T::zero(), T::zero(), T::zero(), T::zero(), gamma)
}

/// Coefficients of the scalar Riccati equation for `B(τ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiccatiCoefficients<T> {
    pub c0: T,
    pub c1: T,
    pub c2: T,
    /// `(1 − γ) r`
    pub a0: T,
    /// `κθ`
    pub a1: T,
}

impl<T: Real> RiccatiCoefficients<T> {
    pub fn new(params: &HestonParams<T>, gamma: T) -> Self {
        let one = T::one();
        let two = lit::<T>(2.0);
        let (l, lx, rho, s) = (params.lambda, params.lambda_x, params.rho, params.sigma_x);
        let quad = (l * l - two * rho * l * lx + lx * lx) / (one - rho * rho);
        Self {
            c0: (one - gamma) / (two * gamma) * quad,
            c1: (one - gamma) * s * lx / gamma - params.kappa_x,
            c2: s * s / (two * gamma),
            a0: (one - gamma) * params.r,
            a1: params.kappa_x * params.theta_x,
        }
    }

    #[inline]
    fn rhs(&self, y: [T; 2]) -> [T; 2] {
        let b = y[1];
        [self.a0 + self.a1 * b, self.c0 + (self.c1 + self.c2 * b) * b]
    }
}

/// `A(τ)` and `B(τ)` on a grid of remaining times, with cubic Hermite
/// interpolation in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineCoefficients<T> {
    pub tau: Vec<T>,
    pub a_fun: Vec<T>,
    pub b_fun: Vec<T>,
    pub coef: RiccatiCoefficients<T>,
}

/// Largest interpolation cell; keeps the Hermite error far below the solver tolerance.
const MAX_CELL: f64 = 1e-3;
const BLOW_UP: f64 = 1e8;

impl<T: Real> AffineCoefficients<T> {
    pub fn solve(params: &HestonParams<T>, gamma: T, horizon: T, tol: T) -> Result<Self> {
        const OP: &str = "heston_complete_exposure";
        params.validate()?;
        check_gamma(OP, gamma)?;
        if !(horizon >= T::zero()) || !horizon.is_finite() {
            return Err(Error::invalid(OP, "horizon", format!("must be finite and >= 0, got {horizon}")));
        }
        let coef = RiccatiCoefficients::new(params, gamma);
        let cells = (horizon / lit(MAX_CELL)).ceil().to_usize().unwrap_or(1).max(1);
        let cell = horizon / T::from_usize_lossy(cells);
        let mut tau = vec![T::zero()];
        let mut a_fun = vec![T::zero()];
        let mut b_fun = vec![T::zero()];
        let mut y = [T::zero(), T::zero()];
        let mut h = cell;
        let mut t = T::zero();
        for i in 1..=cells {
            let target = if i == cells { horizon } else { cell * T::from_usize_lossy(i) };
            while t < target {
                let step = h.min(target - t);
                let (next, err) = dopri_step(&coef, y, step);
                let scale = tol * (T::one() + next[1].abs().max(next[0].abs()));
                if err <= scale || step <= T::epsilon() * lit(16.0) {
                    t = if step == target - t { target } else { t + step };
                    y = next;
                    if !(y[1].abs() < lit(BLOW_UP)) || !y[0].is_finite() {
                        return Err(Error::RiccatiBlowUp {
                            op: OP,
                            tau: t.to_f64_lossy(),
                        });
                    }
                }
                let ratio = if err > T::zero() {
                    (scale / err).powf(lit(0.2)) * lit(0.9)
                } else {
                    lit(5.0)
                };
                h = step * ratio.max(lit(0.2)).min(lit(5.0));
            }
            tau.push(target);
            a_fun.push(y[0]);
            b_fun.push(y[1]);
        }
        Ok(Self { tau, a_fun, b_fun, coef })
    }

    fn interp(&self, tau: T, which: usize) -> T {
        let vals = if which == 0 { &self.a_fun } else { &self.b_fun };
        let last = self.tau.len() - 1;
        let tau = tau.max(T::zero()).min(self.tau[last]);
        if last == 0 {
            return vals[0];
        }
        let cell = self.tau[1] - self.tau[0];
        let i = (tau / cell).floor().to_usize().unwrap_or(0).min(last - 1);
        let (t0, t1) = (self.tau[i], self.tau[i + 1]);
        let h = t1 - t0;
        let s = (tau - t0) / h;
        let y0 = [self.a_fun[i], self.b_fun[i]];
        let y1 = [self.a_fun[i + 1], self.b_fun[i + 1]];
        let d0 = self.coef.rhs(y0)[which] * h;
        let d1 = self.coef.rhs(y1)[which] * h;
        let (p0, p1) = (vals[i], vals[i + 1]);
        let two = lit::<T>(2.0);
        let three = lit::<T>(3.0);
        let s2 = s * s;
        let s3 = s2 * s;
        p0 * (two * s3 - three * s2 + T::one())
            + d0 * (s3 - two * s2 + s)
            + p1 * (three * s2 - two * s3)
            + d1 * (s3 - s2)
    }

    pub fn b_at(&self, tau: T) -> T {
        self.interp(tau, 1)
    }

    pub fn a_at(&self, tau: T) -> T {
        self.interp(tau, 0)
    }

    pub fn horizon(&self) -> T {
        *self.tau.last().unwrap_or(&T::zero())
    }
}

fn check_gamma<T: Real>(op: &'static str, gamma: T) -> Result<()> {
    if !(gamma > T::zero()) || gamma == T::one() || !gamma.is_finite() {
        return Err(Error::invalid(op, "gamma", format!("must be > 0 and != 1, got {gamma}")));
    }
    Ok(())
}

/// One Dormand–Prince 5(4) step; returns the fifth-order solution and the
/// embedded error estimate.
fn dopri_step<T: Real>(coef: &RiccatiCoefficients<T>, y: [T; 2], h: T) -> ([T; 2], T) {
    let c = |v: f64| lit::<T>(v);
    let f = |y: [T; 2]| coef.rhs(y);
    let add = |y: [T; 2], terms: &[(f64, [T; 2])]| -> [T; 2] {
        let mut out = y;
        for &(w, k) in terms {
            out[0] = out[0] + h * c(w) * k[0];
            out[1] = out[1] + h * c(w) * k[1];
        }
        out
    };
    let k1 = f(y);
    let k2 = f(add(y, &[(1.0 / 5.0, k1)]));
    let k3 = f(add(y, &[(3.0 / 40.0, k1), (9.0 / 40.0, k2)]));
    let k4 = f(add(y, &[(44.0 / 45.0, k1), (-56.0 / 15.0, k2), (32.0 / 9.0, k3)]));
    let k5 = f(add(
        y,
        &[
            (19372.0 / 6561.0, k1),
            (-25360.0 / 2187.0, k2),
            (64448.0 / 6561.0, k3),
            (-212.0 / 729.0, k4),
        ],
    ));
    let k6 = f(add(
        y,
        &[
            (9017.0 / 3168.0, k1),
            (-355.0 / 33.0, k2),
            (46732.0 / 5247.0, k3),
            (49.0 / 176.0, k4),
            (-5103.0 / 18656.0, k5),
        ],
    ));
    let y5 = add(
        y,
        &[
            (35.0 / 384.0, k1),
            (500.0 / 1113.0, k3),
            (125.0 / 192.0, k4),
            (-2187.0 / 6784.0, k5),
            (11.0 / 84.0, k6),
        ],
    );
    let k7 = f(y5);
    let e = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    let ks = [k1, k2, k3, k4, k5, k6, k7];
    let mut err = [T::zero(), T::zero()];
    for (w, k) in e.iter().zip(ks.iter()) {
        err[0] = err[0] + h * c(*w) * k[0];
        err[1] = err[1] + h * c(*w) * k[1];
    }
    (y5, err[0].abs().max(err[1].abs()))
}

/// Solver tolerance for [`heston_complete_exposure`].
pub const RICCATI_TOL: f64 = 1e-10;

/// Optimal pure-factor exposure of the complete Heston market at `(t, x)`.
pub fn heston_complete_exposure<T: Real>(
    params: &HestonParams<T>,
    gamma: T,
    t: T,
    horizon: T,
    x: T,
) -> Result<ExposureVector<T>> {
    let coef = AffineCoefficients::solve(params, gamma, horizon, lit(RICCATI_TOL))?;
    complete_exposure_from(&coef, params, gamma, t, x)
}

/// As [`heston_complete_exposure`] with precomputed coefficients.
pub fn complete_exposure_from<T: Real>(
    coef: &AffineCoefficients<T>,
    params: &HestonParams<T>,
    gamma: T,
    t: T,
    x: T,
) -> Result<ExposureVector<T>> {
    const OP: &str = "heston_complete_exposure";
    let horizon = coef.horizon();
    if !(t >= T::zero() && t <= horizon) {
        return Err(Error::invalid(OP, "t", format!("must lie in [0, {horizon}], got {t}")));
    }
    if !(x >= T::zero()) {
        return Err(Error::invalid(OP, "x", "must be >= 0"));
    }
    let b = coef.b_at(horizon - t);
    let state = MarketState {
        x,
        ..MarketState::initial(params)
    };
    let g = factor_geometry(params, &state);
    optimal_exposure(&g, b, T::zero(), params.sigma_x * x.sqrt(), x.sqrt(), gamma)
}

/// HJB residual of `P = A(T − t) + B(T − t) x` evaluated with the exposure that
/// the oracle reports. Time derivatives come from Richardson-extrapolated
/// central differences of the interpolated coefficients.
pub fn hjb_residual(coef: &AffineCoefficients<f64>, params: &HestonParams<f64>, gamma: f64, t: f64, x: f64) -> Result<f64> {
    let horizon = coef.horizon();
    let tau = horizon - t;
    let p = |tt: f64| coef.a_at(tt) + coef.b_at(tt) * x;
    let d = |h: f64| (p(tau + h) - p(tau - h)) / (2.0 * h);
    let h = 1e-3_f64.min(tau.min(horizon - tau) / 2.0).max(1e-6);
    let p_tau = (4.0 * d(h / 2.0) - d(h)) / 3.0;
    let p_t = -p_tau;
    let p_x = coef.b_at(tau);
    let eta = complete_exposure_from(coef, params, gamma, t, x)?.eta;
    let rho = params.rho;
    let sx = x.sqrt();
    let lam = [params.lambda * sx, params.lambda_x * sx];
    let eta_lam = eta[0] * lam[0] + eta[1] * lam[1];
    let eta_m_eta = eta[0] * eta[0] + 2.0 * rho * eta[0] * eta[1] + eta[1] * eta[1];
    let eta_a = rho * eta[0] + eta[1];
    let s = params.sigma_x;
    Ok(p_t + (1.0 - gamma) * (params.r + eta_lam) - 0.5 * gamma * (1.0 - gamma) * eta_m_eta
        + params.kappa_x * (params.theta_x - x) * p_x
        + 0.5 * s * s * x * p_x * p_x
        + (1.0 - gamma) * s * sx * p_x * eta_a)
}
