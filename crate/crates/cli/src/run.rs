//! One function per CLI verb, each producing a result table.

use std::time::Instant;

use log::{info, warn};
use mktcomplete::model::simulate_paths;
use mktcomplete::oracle::heston_complete_exposure;
use mktcomplete::pamc::{exposure_to_weights, run_pamc_direct, run_pamc_indirect, PamcOutput};
use mktcomplete::pricing::{build_sigma, price_instrument, InstrumentKind, InstrumentSpec, Leg};
use mktcomplete::selection::{sweep_maturity, sweep_moneyness, vega_profile, SweepCell, SweepContext};

use crate::config::{Config, LegConfig, Method};
use crate::output::{fmt_sig, Cell, Table, Timing};
use crate::CliError;

/// A finished experiment: its table and the timings that go to the manifest.
pub struct Outcome {
    pub table: Table,
    pub timings: Vec<Timing>,
}

impl Outcome {
    fn untimed(table: Table) -> Self {
        Self { table, timings: Vec::new() }
    }
}

fn timed<R>(label: impl Into<String>, timings: &mut Vec<Timing>, f: impl FnOnce() -> R) -> R {
    let start = Instant::now();
    let out = f();
    timings.push(Timing {
        label: label.into(),
        seconds: start.elapsed().as_secs_f64(),
    });
    out
}

/// Instrument label with strikes and maturity at the output precision.
fn label(inst: &InstrumentSpec<f64>) -> String {
    match inst.kind {
        InstrumentKind::Stock => "stock".to_string(),
        InstrumentKind::Strangle => format!(
            "strangle(K={}/{}, T={})",
            fmt_sig(inst.strike),
            fmt_sig(inst.strike2),
            fmt_sig(inst.maturity)
        ),
        k => format!("{k}(K={}, T={})", fmt_sig(inst.strike), fmt_sig(inst.maturity)),
    }
}

fn legs(cfg: &[LegConfig]) -> Vec<Leg<f64>> {
    cfg.iter().map(|l| l.to_leg()).collect()
}

pub fn price(cfg: &Config) -> Result<Outcome, CliError> {
    let (p, st, pc) = (cfg.params(), cfg.state(), cfg.pricer());
    let mut t = Table::new(
        "price",
        &["kind", "strike", "strike2", "maturity", "price", "delta", "vega_x", "error"],
    );
    for inst in cfg.price.instruments.iter().map(|i| i.to_spec()) {
        let coords: [Cell; 4] = [inst.kind.name().into(), inst.strike.into(), inst.strike2.into(), inst.maturity.into()];
        let tail = match price_instrument(&inst, &st, &p, &pc) {
            Ok(q) => [q.price.into(), q.delta.into(), q.vega_x.into(), Cell::Empty],
            Err(e) if e.is_invalid_input() => return Err(CliError::Config(e.to_string())),
            Err(e) => {
                warn!("{}: {e}", label(&inst));
                [Cell::Empty, Cell::Empty, Cell::Empty, e.to_string().into()]
            }
        };
        t.push(coords.into_iter().chain(tail).collect());
    }
    Ok(Outcome::untimed(t))
}

pub fn simulate(cfg: &Config) -> Result<Outcome, CliError> {
    let paths = simulate_paths(&cfg.params(), &cfg.sim())?;
    let mut t = Table::new("simulate", &["path", "step", "t", "s", "x", "s_f1", "s_f2"]);
    for j in 0..paths.n_paths {
        for m in 0..=paths.n_steps {
            let s = paths.state(j, m, cfg.investor.w0);
            t.push(vec![j.into(), m.into(), s.t.into(), s.s.into(), s.x.into(), s.s_f1.into(), s.s_f2.into()]);
        }
    }
    Ok(Outcome::untimed(t))
}

fn run_method(cfg: &Config, method: Method, steps: usize, gamma: f64, composition: &[Leg<f64>]) -> mktcomplete::Result<PamcOutput<f64>> {
    let (p, pc, basis) = (cfg.params(), cfg.pricer(), cfg.basis());
    let investor = mktcomplete::pamc::InvestorSpec { gamma, ..cfg.investor() };
    let sim = cfg.sim().with_steps(steps);
    match method {
        Method::Indirect => run_pamc_indirect(&p, &investor, &sim, &basis, composition, &pc),
        Method::Direct => run_pamc_direct(&p, &investor, &sim, &basis, composition, &pc),
    }
}

pub fn pamc(cfg: &Config) -> Result<Outcome, CliError> {
    let composition = legs(&cfg.pamc.legs);
    let mut timings = Vec::new();
    let method = cfg.pamc.method;
    let out = timed(method.name(), &mut timings, || {
        run_method(cfg, method, cfg.simulation.n_steps, cfg.investor.gamma, &composition)
    })?;
    let a = &out.allocation;
    let name_of = |i: usize| a.sigma.instruments.get(i).map_or(String::new(), label);
    let mut t = Table::new(
        "pamc",
        &[
            "method",
            "gamma",
            "eta_1",
            "eta_2",
            "instrument_1",
            "pi_1",
            "instrument_2",
            "pi_2",
            "cash",
            "l1",
            "ruined_draws",
        ],
    );
    t.push(vec![
        method.name().into(),
        cfg.investor.gamma.into(),
        a.eta.eta[0].into(),
        a.eta.eta[1].into(),
        name_of(0).into(),
        a.pi[0].into(),
        name_of(1).into(),
        a.pi[1].into(),
        a.cash.into(),
        a.l1.into(),
        out.ruined_draws.into(),
    ]);
    Ok(Outcome { table: t, timings })
}

fn sweep_context(cfg: &Config, grad_x: Option<f64>, timings: &mut Vec<Timing>) -> Result<SweepContext<f64>, CliError> {
    let (p, st) = (cfg.params(), cfg.state());
    let ctx = match grad_x {
        Some(g) => SweepContext::new(st, &p, cfg.investor.gamma, g)?,
        None => timed("context", timings, || {
            SweepContext::from_pamc(&p, &cfg.investor(), &cfg.sim(), &cfg.basis(), &cfg.pricer())
        })?,
    };
    info!("sweep context: grad_x = {}, eta = {:?}", ctx.grad_x, ctx.eta.eta);
    Ok(ctx)
}

fn sweep_cells(t: &mut Table, cells: &[SweepCell<f64>], with_maturity: bool) {
    for c in cells {
        let mut row: Vec<Cell> = Vec::new();
        if with_maturity {
            row.push(c.maturity.into());
        }
        match &c.row {
            Ok(r) => {
                row.extend([r.moneyness.into(), c.kind.name().into()]);
                row.extend([r.pi_s.into(), r.pi_o.into(), r.l1.into(), r.companion_strike.into()]);
            }
            Err(e) => {
                warn!("{} at moneyness {} maturity {}: {e}", c.kind, c.moneyness, c.maturity);
                let m = if c.moneyness.is_finite() { c.moneyness.into() } else { Cell::Empty };
                row.extend([m, c.kind.name().into(), Cell::Empty, Cell::Empty, Cell::Empty, Cell::Empty]);
            }
        }
        t.push(row);
    }
}

pub fn sweep_moneyness_cmd(cfg: &Config) -> Result<Outcome, CliError> {
    let mut timings = Vec::new();
    let ctx = sweep_context(cfg, cfg.sweep_moneyness.grad_x, &mut timings)?;
    let grid = cfg.sweep_moneyness.grid();
    let cells = timed("sweep", &mut timings, || sweep_moneyness(&grid, &ctx, &cfg.params(), &cfg.pricer()))?;
    let mut t = Table::new("sweep_moneyness", &["moneyness", "kind", "pi_s", "pi_o", "l1", "companion_strike"]);
    sweep_cells(&mut t, &cells, false);
    Ok(Outcome { table: t, timings })
}

pub fn sweep_maturity_cmd(cfg: &Config) -> Result<Outcome, CliError> {
    let mut timings = Vec::new();
    let ctx = sweep_context(cfg, cfg.sweep_maturity.grad_x, &mut timings)?;
    let grid = cfg.sweep_maturity.grid();
    let cells = timed("sweep", &mut timings, || sweep_maturity(&grid, &ctx, &cfg.params(), &cfg.pricer()))?;
    let mut t = Table::new(
        "sweep_maturity",
        &["maturity", "moneyness", "kind", "pi_s", "pi_o", "l1", "companion_strike"],
    );
    sweep_cells(&mut t, &cells, true);
    Ok(Outcome { table: t, timings })
}

pub fn vega(cfg: &Config) -> Result<Outcome, CliError> {
    let (p, st, pc) = (cfg.params(), cfg.state(), cfg.pricer());
    let v = &cfg.vega_profile;
    if v.maturities.is_empty() || v.maturities.iter().any(|t| !(*t > 0.0)) {
        return Err(CliError::Config("vega_profile.maturities: must be non-empty and positive".into()));
    }
    let mut t = Table::new("vega_profile", &["put", "call", "maturity", "vega_x", "vega_over_price", "error"]);
    for s in &v.strangles {
        for &tau in &v.maturities {
            let inst = InstrumentSpec::strangle(s.put * st.s, s.call * st.s, tau);
            let head: [Cell; 3] = [s.put.into(), s.call.into(), tau.into()];
            let tail = match vega_profile(&inst, &[tau], &st, &p, &pc) {
                Ok(q) => [q[0].vega_x.into(), q[0].vega_over_price.into(), Cell::Empty],
                Err(e) if e.is_invalid_input() => return Err(CliError::Config(e.to_string())),
                Err(e) => {
                    warn!("{}: {e}", label(&inst));
                    [Cell::Empty, Cell::Empty, e.to_string().into()]
                }
            };
            t.push(head.into_iter().chain(tail).collect());
        }
    }
    Ok(Outcome::untimed(t))
}

pub fn prop1(cfg: &Config) -> Result<Outcome, CliError> {
    let c = cfg.verify_prop1;
    let mut timings = Vec::new();
    let r = timed("verify", &mut timings, || {
        mktcomplete::selection::verify_prop1(c.trials, c.n_max, cfg.simulation.seed)
    })?;
    for v in &r.violations {
        warn!("trial {}: {} (lp {:?}, pair {:?}, support {})", v.trial, v.reason, v.lp_l1, v.pair_l1, v.support);
    }
    let mut t = Table::new(
        "verify_prop1",
        &["trials", "n_max", "seed", "max_gap", "max_support", "violations", "passed"],
    );
    t.push(vec![
        r.trials.into(),
        r.n_max.into(),
        r.seed.into(),
        r.max_gap.into(),
        r.max_support.into(),
        r.violations.len().into(),
        if r.passed() { "true" } else { "false" }.into(),
    ]);
    Ok(Outcome { table: t, timings })
}

pub fn compare(cfg: &Config) -> Result<Outcome, CliError> {
    let c = &cfg.compare_methods;
    if c.gammas.is_empty() {
        return Err(CliError::Config("compare_methods.gammas: at least one value is required".into()));
    }
    if c.direct_steps.contains(&0) {
        return Err(CliError::Config("compare_methods.direct_steps: must be >= 1".into()));
    }
    let composition = legs(&c.legs);
    let (p, st, pc) = (cfg.params(), cfg.state(), cfg.pricer());
    let mut timings = Vec::new();
    let mut t = Table::new("compare_methods", &["gamma", "method", "steps", "second_instrument", "pi_s", "pi_o", "ruined_draws", "error"]);

    let mut methods = vec![(Method::Indirect.name().to_string(), Some((Method::Indirect, cfg.simulation.n_steps)))];
    methods.extend(c.direct_steps.iter().map(|&n| (format!("direct@{n}"), Some((Method::Direct, n)))));
    methods.push(("closed_form".to_string(), None));

    for &gamma in &c.gammas {
        for (name, run) in &methods {
            let cell = format!("gamma={gamma} {name}");
            let res = timed(cell.clone(), &mut timings, || -> mktcomplete::Result<(String, Vec<f64>, Cell)> {
                match run {
                    Some((m, n)) => {
                        let out = run_method(cfg, *m, *n, gamma, &composition)?;
                        let second = label(&out.allocation.sigma.instruments[1]);
                        Ok((second, out.allocation.pi, out.ruined_draws.into()))
                    }
                    None => {
                        let insts: Vec<_> =
                            composition.iter().map(|l| l.resolve(&st, &p, &pc)).collect::<Result<_, _>>()?;
                        let sigma = build_sigma(&insts, &st, &p, &pc)?;
                        let eta = heston_complete_exposure(&p, gamma, 0.0, cfg.simulation.horizon, st.x)?;
                        Ok((label(&insts[1]), exposure_to_weights(&eta, &sigma)?, Cell::Empty))
                    }
                }
            });
            let steps: Cell = run.map_or(Cell::Empty, |(_, n)| n.into());
            match res {
                Ok((second, pi, ruined)) => {
                    t.push(vec![
                        gamma.into(),
                        name.as_str().into(),
                        steps,
                        second.into(),
                        pi[0].into(),
                        pi[1].into(),
                        ruined,
                        Cell::Empty,
                    ]);
                }
                Err(e) if e.is_invalid_input() => return Err(CliError::Config(e.to_string())),
                Err(e) => {
                    warn!("{cell}: {e}");
                    t.push(vec![
                        gamma.into(),
                        name.as_str().into(),
                        steps,
                        Cell::Empty,
                        Cell::Empty,
                        Cell::Empty,
                        Cell::Empty,
                        e.to_string().into(),
                    ]);
                }
            }
        }
    }
    Ok(Outcome { table: t, timings })
}
