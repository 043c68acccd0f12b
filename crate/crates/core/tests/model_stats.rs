use mktcomplete::model::{simulate_paths, step_inner, InnerStream, MarketState, SimConfig};
use mktcomplete::HestonParams64 as HestonParams;

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn discounted_stock_is_a_martingale_without_premia() {
    let p = HestonParams { lambda: 0.0, lambda_x: 0.0, ..HestonParams::baseline() };
    let cfg = SimConfig { n_paths: 100_000, seed: 5, ..SimConfig::baseline(&p) };
    let paths = simulate_paths(&p, &cfg).unwrap();
    let st: Vec<f64> = (0..cfg.n_paths).map(|m| paths.stock_at(m, cfg.n_steps)).collect();
    let (m, se) = mean_se(&st);
    let want = (p.r * cfg.horizon).exp();
    assert!((m - want).abs() < 3.0 * se, "{m} vs {want} (se {se})");
}

#[test]
fn integrated_variance_matches_cir_mean() {
    let p = HestonParams::baseline();
    let mut cfg = SimConfig { n_paths: 20_000, seed: 9, ..SimConfig::baseline(&p) }.with_steps(500);
    cfg.initial.x = 0.04;
    let paths = simulate_paths(&p, &cfg).unwrap();
    let n = cfg.n_steps;
    let avg: Vec<f64> = (0..cfg.n_paths)
        .map(|m| {
            let inner: f64 = (1..n).map(|j| paths.variance_at(m, j)).sum();
            (inner + 0.5 * (paths.variance_at(m, 0) + paths.variance_at(m, n))) * cfg.dt / cfg.horizon
        })
        .collect();
    let (m, se) = mean_se(&avg);
    let (k, th, x0, t) = (p.kappa_x, p.theta_x, cfg.initial.x, cfg.horizon);
    let want = th + (x0 - th) * (1.0 - (-k * t).exp()) / (k * t);
    assert!((m - want).abs() < 3.0 * se, "{m} vs {want} (se {se})");
}

#[test]
fn brownian_increments_have_the_model_correlation() {
    let p = HestonParams::baseline();
    let cfg = SimConfig { n_paths: 2000, ..SimConfig::baseline(&p) };
    let paths = simulate_paths(&p, &cfg).unwrap();
    let n = paths.dbs.len() as f64;
    let (sa, sb) = (paths.dbs.iter().sum::<f64>() / n, paths.dbx.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (a, b) in paths.dbs.iter().zip(&paths.dbx) {
        cov += (a - sa) * (b - sb);
        va += (a - sa) * (a - sa);
        vb += (b - sb) * (b - sb);
    }
    let corr = cov / (va * vb).sqrt();
    let se = (1.0 - p.rho * p.rho) / n.sqrt();
    assert!((corr - p.rho).abs() < 5.0 * se, "{corr}");
    assert!((va / n / cfg.dt - 1.0).abs() < 0.01);
    assert!(paths.variance.iter().all(|&x| x >= 0.0));
}

#[test]
fn pure_factor_assets_load_on_their_own_factor() {
    let p = HestonParams::baseline();
    let cfg = SimConfig { n_paths: 300, ..SimConfig::baseline(&p) };
    let paths = simulate_paths(&p, &cfg).unwrap();
    // least squares of the diffusion part of each log-return on (ΔB^S, ΔB^X)
    let mut g = [[0.0; 2]; 2];
    let mut rhs = [[0.0; 2]; 2];
    for m in 0..cfg.n_paths {
        for j in 0..cfg.n_steps {
            let st = paths.state(m, j, 1.0);
            let nx = paths.state(m, j + 1, 1.0);
            let (a, b) = paths.increments(m, j);
            let sx = st.x.sqrt();
            let d1 = (nx.s_f1 / st.s_f1).ln() - (p.r + p.lambda * sx - 0.5) * cfg.dt;
            let d2 = (nx.s_f2 / st.s_f2).ln() - (p.r + p.lambda_x * sx - 0.5) * cfg.dt;
            let z = [a, b];
            for r in 0..2 {
                for c in 0..2 {
                    g[r][c] += z[r] * z[c];
                }
                rhs[0][r] += z[r] * d1;
                rhs[1][r] += z[r] * d2;
            }
        }
    }
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    for (asset, want) in [(0, [1.0, 0.0]), (1, [0.0, 1.0])] {
        let y = rhs[asset];
        let beta = [(y[0] * g[1][1] - g[0][1] * y[1]) / det, (g[0][0] * y[1] - g[1][0] * y[0]) / det];
        assert!((beta[0] - want[0]).abs() < 1e-9 && (beta[1] - want[1]).abs() < 1e-9, "{beta:?}");
    }
}

#[test]
fn inner_log_return_has_the_euler_drift() {
    let p = HestonParams::baseline();
    let st = MarketState::initial(&p);
    let dt = 1.0 / 60.0;
    let out = step_inner(&p, &st, dt, 100_000, 1, InnerStream { seed: 3, path: 0, step: 0 }).unwrap();
    let lr: Vec<f64> = out.iter().map(|s| (s.s / st.s).ln()).collect();
    let (m, se) = mean_se(&lr);
    let want = (p.r + p.lambda * st.x - 0.5 * st.x) * dt;
    assert!((m - want).abs() < 3.0 * se, "{m} vs {want}");
    assert!(out.iter().all(|s| s.x >= 0.0 && s.w == st.w));
}

#[test]
fn constant_variance_without_vol_of_vol() {
    let p = HestonParams { sigma_x: 1e-300, ..HestonParams::baseline() };
    let st = MarketState::initial(&p);
    let out = step_inner(&p, &st, 1.0 / 60.0, 50, 1, InnerStream { seed: 1, path: 2, step: 3 }).unwrap();
    assert!(out.iter().all(|s| (s.x - p.theta_x).abs() < 1e-15));
}
