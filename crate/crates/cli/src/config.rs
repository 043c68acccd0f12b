//! Experiment configuration read from TOML.
//!
//! Every field is optional; omitted values fall back to the baseline Heston
//! calibration and the library defaults. `resolve` fills every optional field
//! so that the manifest records the exact inputs of a run.

use std::path::Path;

use mktcomplete::model::{HestonParams, MarketState, SimConfig};
use mktcomplete::pamc::{InvestorSpec, PolyBasis};
use mktcomplete::pricing::{InstrumentKind, InstrumentSpec, Leg, PricerConfig};
use mktcomplete::selection::CandidateGrid;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub model: ModelConfig,
    pub initial: InitialConfig,
    pub investor: InvestorConfig,
    pub simulation: SimulationConfig,
    pub basis: BasisConfig,
    pub pricer: PricerSection,
    pub pamc: PamcConfig,
    pub price: PriceConfig,
    pub sweep_moneyness: GridConfig,
    pub sweep_maturity: GridConfig,
    pub vega_profile: VegaConfig,
    pub verify_prop1: Prop1Config,
    pub compare_methods: CompareConfig,
    pub output: OutputConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            model: ModelConfig::default(),
            initial: InitialConfig::default(),
            investor: InvestorConfig::default(),
            simulation: SimulationConfig::default(),
            basis: BasisConfig::default(),
            pricer: PricerSection::default(),
            pamc: PamcConfig::default(),
            price: PriceConfig::default(),
            sweep_moneyness: GridConfig::default(),
            sweep_maturity: GridConfig::default(),
            vega_profile: VegaConfig::default(),
            verify_prop1: Prop1Config::default(),
            compare_methods: CompareConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub r: f64,
    pub lambda: f64,
    pub lambda_x: f64,
    pub kappa_x: f64,
    pub theta_x: f64,
    pub sigma_x: f64,
    pub rho: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let p = HestonParams::<f64>::baseline();
        Self {
            r: p.r,
            lambda: p.lambda,
            lambda_x: p.lambda_x,
            kappa_x: p.kappa_x,
            theta_x: p.theta_x,
            sigma_x: p.sigma_x,
            rho: p.rho,
        }
    }
}

/// Starting state; `x0` defaults to the long-run variance `theta_x`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConfig {
    pub s0: Option<f64>,
    pub x0: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvestorConfig {
    pub gamma: f64,
    pub w0: f64,
}

impl Default for InvestorConfig {
    fn default() -> Self {
        let i = InvestorSpec::<f64>::baseline();
        Self { gamma: i.gamma, w0: i.w0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_paths: usize,
    pub n_inner: usize,
    pub n_steps: usize,
    pub horizon: f64,
    pub seed: u64,
    pub substeps_per_dt: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let c = SimConfig::baseline(&HestonParams::<f64>::baseline());
        Self {
            n_paths: c.n_paths,
            n_inner: c.n_inner,
            n_steps: c.n_steps,
            horizon: c.horizon,
            seed: c.seed,
            substeps_per_dt: c.substeps_per_dt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    pub order: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self { order: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PricerSection {
    pub quad_nodes: usize,
    pub quad_tol: f64,
    pub quad_upper: f64,
    pub mc_paths: usize,
    pub mc_steps_per_year: usize,
    pub mc_seed: u64,
    pub price_floor: f64,
    pub rank_tol: f64,
}

impl Default for PricerSection {
    fn default() -> Self {
        let c = PricerConfig::<f64>::default();
        Self {
            quad_nodes: c.quad.nodes,
            quad_tol: c.quad.tol,
            quad_upper: c.quad.upper,
            mc_paths: c.mc.n_paths,
            mc_steps_per_year: c.mc.steps_per_year,
            mc_seed: c.mc.seed,
            price_floor: c.price_floor,
            rank_tol: c.rank_tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Indirect,
    Direct,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Indirect => "indirect",
            Method::Direct => "direct",
        }
    }
}

/// One position of a composition. Option strikes are moneyness ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "leg", rename_all = "snake_case", deny_unknown_fields)]
pub enum LegConfig {
    Stock,
    Option {
        kind: InstrumentKind,
        strike: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        strike2: Option<f64>,
        maturity: f64,
    },
    DeltaNeutralStraddle {
        maturity: f64,
    },
}

impl LegConfig {
    pub fn to_leg(self) -> Leg<f64> {
        match self {
            LegConfig::Stock => Leg::Stock,
            LegConfig::Option {
                kind,
                strike,
                strike2,
                maturity,
            } => Leg::Option {
                spec: InstrumentSpec {
                    kind,
                    strike,
                    strike2: strike2.unwrap_or(strike),
                    maturity,
                },
            },
            LegConfig::DeltaNeutralStraddle { maturity } => Leg::DeltaNeutralStraddle { maturity },
        }
    }
}

fn default_legs() -> Vec<LegConfig> {
    vec![LegConfig::Stock, LegConfig::DeltaNeutralStraddle { maturity: 0.1 }]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PamcConfig {
    pub method: Method,
    pub legs: Vec<LegConfig>,
}

impl Default for PamcConfig {
    fn default() -> Self {
        Self {
            method: Method::Indirect,
            legs: default_legs(),
        }
    }
}

/// An instrument with absolute strikes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrumentConfig {
    pub kind: InstrumentKind,
    #[serde(default)]
    pub strike: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strike2: Option<f64>,
    #[serde(default)]
    pub maturity: f64,
}

impl InstrumentConfig {
    pub fn to_spec(self) -> InstrumentSpec<f64> {
        if self.kind == InstrumentKind::Stock {
            return InstrumentSpec::stock();
        }
        InstrumentSpec {
            kind: self.kind,
            strike: self.strike,
            strike2: self.strike2.unwrap_or(self.strike),
            maturity: self.maturity,
        }
    }

    fn new(kind: InstrumentKind, strike: f64, maturity: f64) -> Self {
        Self {
            kind,
            strike,
            strike2: None,
            maturity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriceConfig {
    pub instruments: Vec<InstrumentConfig>,
}

impl Default for PriceConfig {
    fn default() -> Self {
        use InstrumentKind::*;
        let vix0 = 0.15;
        Self {
            instruments: vec![
                InstrumentConfig::new(Stock, 0.0, 0.0),
                InstrumentConfig::new(Call, 1.0, 0.1),
                InstrumentConfig::new(Put, 1.0, 0.1),
                InstrumentConfig::new(Straddle, 1.0, 0.1),
                InstrumentConfig {
                    kind: Strangle,
                    strike: 0.95,
                    strike2: Some(1.05),
                    maturity: 0.1,
                },
                InstrumentConfig::new(VixCall, vix0, 0.1),
                InstrumentConfig::new(VixPut, vix0, 0.1),
            ],
        }
    }
}

/// Candidate grid of a sweep. Omitted fields take the verb's default grid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub kinds: Option<Vec<InstrumentKind>>,
    pub moneyness: Option<Vec<f64>>,
    pub call_range: Option<[f64; 2]>,
    pub call_step: Option<f64>,
    pub maturities: Option<Vec<f64>>,
    /// Value-function slope in X; when omitted a PAMC-indirect run supplies it.
    pub grad_x: Option<f64>,
}

impl GridConfig {
    fn resolve(&mut self, base: CandidateGrid<f64>) {
        self.kinds.get_or_insert(base.kinds);
        self.moneyness.get_or_insert(base.moneyness);
        self.call_range.get_or_insert([base.call_range.0, base.call_range.1]);
        self.call_step.get_or_insert(base.call_step);
        self.maturities.get_or_insert(base.maturities);
    }

    /// Candidate grid after `resolve`.
    pub fn grid(&self) -> CandidateGrid<f64> {
        let base = CandidateGrid::equity_default();
        let range = self.call_range.unwrap_or([base.call_range.0, base.call_range.1]);
        CandidateGrid {
            kinds: self.kinds.clone().unwrap_or(base.kinds),
            moneyness: self.moneyness.clone().unwrap_or(base.moneyness),
            call_range: (range[0], range[1]),
            call_step: self.call_step.unwrap_or(base.call_step),
            maturities: self.maturities.clone().unwrap_or(base.maturities),
        }
    }
}

/// Strangle with strikes as fractions of `S₀`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrangleConfig {
    pub put: f64,
    pub call: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VegaConfig {
    pub strangles: Vec<StrangleConfig>,
    pub maturities: Vec<f64>,
}

impl Default for VegaConfig {
    fn default() -> Self {
        Self {
            strangles: vec![StrangleConfig { put: 1.0, call: 1.0 }, StrangleConfig { put: 0.95, call: 1.05 }],
            maturities: vec![1e-4, 1e-3, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prop1Config {
    pub trials: usize,
    pub n_max: usize,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Self { trials: 1000, n_max: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub gammas: Vec<f64>,
    pub direct_steps: Vec<usize>,
    pub legs: Vec<LegConfig>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            gammas: vec![2.0, 4.0, 6.0, 8.0],
            direct_steps: vec![60, 300],
            legs: default_legs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub path: Option<String>,
    pub format: Format,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    /// Fills every defaulted field with its effective value.
    pub fn resolve(&mut self) {
        let p = self.params();
        self.initial.s0.get_or_insert(1.0);
        self.initial.x0.get_or_insert(p.theta_x);
        self.sweep_moneyness.resolve(CandidateGrid::equity_default());
        self.sweep_maturity.resolve(CandidateGrid::maturity_default());
    }

    pub fn params(&self) -> HestonParams<f64> {
        let m = self.model;
        HestonParams {
            r: m.r,
            lambda: m.lambda,
            lambda_x: m.lambda_x,
            kappa_x: m.kappa_x,
            theta_x: m.theta_x,
            sigma_x: m.sigma_x,
            rho: m.rho,
        }
    }

    pub fn state(&self) -> MarketState<f64> {
        let p = self.params();
        MarketState {
            s: self.initial.s0.unwrap_or(1.0),
            x: self.initial.x0.unwrap_or(p.theta_x),
            w: self.investor.w0,
            ..MarketState::initial(&p)
        }
    }

    pub fn investor(&self) -> InvestorSpec<f64> {
        InvestorSpec {
            gamma: self.investor.gamma,
            w0: self.investor.w0,
        }
    }

    pub fn sim(&self) -> SimConfig<f64> {
        let s = self.simulation;
        SimConfig {
            n_paths: s.n_paths,
            n_inner: s.n_inner,
            horizon: s.horizon,
            seed: s.seed,
            substeps_per_dt: s.substeps_per_dt,
            initial: self.state(),
            ..SimConfig::baseline(&self.params())
        }
        .with_steps(s.n_steps)
    }

    pub fn basis(&self) -> PolyBasis<f64> {
        PolyBasis::new(self.basis.order)
    }

    pub fn pricer(&self) -> PricerConfig<f64> {
        let s = self.pricer;
        let mut c = PricerConfig::default();
        c.quad.nodes = s.quad_nodes;
        c.quad.tol = s.quad_tol;
        c.quad.upper = s.quad_upper;
        c.mc.n_paths = s.mc_paths;
        c.mc.steps_per_year = s.mc_steps_per_year;
        c.mc.seed = s.mc_seed;
        c.price_floor = s.price_floor;
        c.rank_tol = s.rank_tol;
        c
    }

    /// Checks that every shared section is admissible.
    pub fn validate(&self) -> Result<(), CliError> {
        let lib = |e: mktcomplete::Error| CliError::Config(e.to_string());
        self.params().validate().map_err(lib)?;
        self.state().validate().map_err(lib)?;
        self.investor().validate().map_err(lib)?;
        self.sim().validate().map_err(lib)?;
        if self.basis.order == 0 {
            return Err(CliError::Config("basis.order: must be >= 1".into()));
        }
        let q = self.pricer;
        if q.quad_nodes < 2 || !(q.quad_tol > 0.0) || !(q.quad_upper > 0.0) {
            return Err(CliError::Config("pricer: quad_nodes >= 2, quad_tol > 0 and quad_upper > 0 are required".into()));
        }
        if q.mc_paths == 0 || q.mc_steps_per_year == 0 {
            return Err(CliError::Config("pricer: mc_paths and mc_steps_per_year must be >= 1".into()));
        }
        if !(q.price_floor >= 0.0) || !(q.rank_tol >= 0.0) {
            return Err(CliError::Config("pricer: price_floor and rank_tol must be >= 0".into()));
        }
        Ok(())
    }
}
