use mktcomplete::model::{factor_geometry, MarketState};
use mktcomplete::oracle::merton_exposure;
use mktcomplete::pamc::{exposure_to_weights, optimal_exposure, ExposureVector};
use mktcomplete::pricing::{price_equity_option, InstrumentKind, InstrumentSpec, PriceAndGreeks, QuadratureConfig, SigmaMatrix};
use mktcomplete::selection::{best_pair_l1, explicit_weights_from_quote, sparsify_l1, SweepContext};
use mktcomplete::HestonParams64 as HestonParams;
use proptest::prelude::*;

fn rows_strategy() -> impl Strategy<Value = Vec<[f64; 2]>> {
    (2usize..=6).prop_flat_map(|n| prop::collection::vec(prop::array::uniform2(-2.0f64..2.0), n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn lp_minimum_is_attained_by_a_pair(rows in rows_strategy(), e0 in -1.0f64..1.0, e1 in -1.0f64..1.0) {
        let eta = ExposureVector { eta: [e0, e1] };
        let pair = best_pair_l1(&rows, &eta);
        prop_assume!(pair.is_some());
        let (best, _) = pair.unwrap();
        // keep clear of nearly rank-one draws
        prop_assume!(best < 1e4);
        let w = sparsify_l1(&rows, &eta).unwrap();
        prop_assert!((w.l1 - best).abs() <= 1e-8 * best.max(1.0), "lp {} pair {}", w.l1, best);
        prop_assert!(w.support() <= 2);
        for k in 0..2 {
            let got: f64 = rows.iter().zip(&w.pi).map(|(r, p)| r[k] * p).sum();
            prop_assert!((got - eta.eta[k]).abs() <= 1e-9 * best.max(1.0));
        }
    }

    #[test]
    fn every_candidate_delivers_the_same_exposure(
        price in 0.01f64..1.0,
        delta in -1.0f64..1.0,
        vega in prop_oneof![0.05f64..2.0, -2.0f64..-0.05],
        grad_x in -3.0f64..3.0,
        gamma in prop_oneof![1.5f64..10.0, 0.2f64..0.8],
    ) {
        let p = HestonParams::baseline();
        let st = MarketState::initial(&p);
        let ctx = SweepContext::new(st, &p, gamma, grad_x).unwrap();
        let q = PriceAndGreeks { price, delta, vega_x: vega };
        let inst = InstrumentSpec::new(InstrumentKind::Call, 1.0, 0.1);
        let (pi_s, pi_o) = explicit_weights_from_quote(&inst, &q, &st, &p, gamma, grad_x, 1e-8).unwrap();
        let row = SigmaMatrix::row_from_quote(&q, st.s, st.x, &p);
        let eta = [pi_s * st.x.sqrt() + pi_o * row[0], pi_o * row[1]];
        prop_assert!((eta[0] - ctx.eta.eta[0]).abs() < 1e-10);
        prop_assert!((eta[1] - ctx.eta.eta[1]).abs() < 1e-10);
        // a zero-delta instrument leaves the stock weight at its one-factor value
        let flat = PriceAndGreeks { delta: 0.0, ..q };
        let (vs, vo) = explicit_weights_from_quote(&inst, &flat, &st, &p, gamma, grad_x, 1e-8).unwrap();
        let one_factor = (p.lambda - p.rho * p.lambda_x) / (gamma * (1.0 - p.rho * p.rho));
        prop_assert_eq!(vs, one_factor);
        prop_assert!(vs.abs() + vo.abs() >= vs.abs());
    }

    #[test]
    fn myopic_exposure_matches_merton(
        lambda in -5.0f64..5.0,
        lambda_x in -8.0f64..8.0,
        rho in -0.95f64..0.95,
        x in 0.001f64..0.2,
        gamma in 1.5f64..10.0,
    ) {
        let p = HestonParams { lambda, lambda_x, rho, ..HestonParams::baseline() };
        let st = MarketState { x, ..MarketState::initial(&p) };
        let g = factor_geometry(&p, &st);
        let e = optimal_exposure(&g, 0.0, 0.0, p.sigma_x * x.sqrt(), x.sqrt(), gamma).unwrap();
        let m = merton_exposure(&p, gamma, x).unwrap();
        prop_assert!((e.eta[0] - m.eta[0]).abs() < 1e-12 && (e.eta[1] - m.eta[1]).abs() < 1e-12);
    }

    #[test]
    fn weights_reproduce_the_exposure(
        a in prop::array::uniform4(-2.0f64..2.0),
        e0 in -1.0f64..1.0,
        e1 in -1.0f64..1.0,
    ) {
        let det = a[0] * a[3] - a[1] * a[2];
        prop_assume!(det.abs() > 0.05);
        let sigma = SigmaMatrix {
            rows: vec![[a[0], a[1]], [a[2], a[3]]],
            instruments: vec![InstrumentSpec::stock(), InstrumentSpec::new(InstrumentKind::Put, 1.0, 0.1)],
            quotes: vec![],
        };
        let eta = ExposureVector { eta: [e0, e1] };
        let pi = exposure_to_weights(&eta, &sigma).unwrap();
        for k in 0..2 {
            let got = sigma.rows[0][k] * pi[0] + sigma.rows[1][k] * pi[1];
            prop_assert!((got - eta.eta[k]).abs() < 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn put_call_parity_and_homogeneity(k in 0.8f64..1.2, tau in 0.05f64..1.0, s in 0.5f64..3.0) {
        let p = HestonParams::baseline();
        let st = MarketState { s, ..MarketState::initial(&p) };
        let quad = QuadratureConfig::default();
        let c = price_equity_option(&InstrumentSpec::new(InstrumentKind::Call, k * s, tau), &st, &p, &quad).unwrap();
        let put = price_equity_option(&InstrumentSpec::new(InstrumentKind::Put, k * s, tau), &st, &p, &quad).unwrap();
        let fwd = s - k * s * (-p.r * tau).exp();
        prop_assert!((c.price - put.price - fwd).abs() < 1e-8 * s);
        prop_assert!((c.delta - put.delta - 1.0).abs() < 1e-10);
        let unit = MarketState::initial(&p);
        let c1 = price_equity_option(&InstrumentSpec::new(InstrumentKind::Call, k, tau), &unit, &p, &quad).unwrap();
        prop_assert!((c.price - s * c1.price).abs() < 1e-8 * s);
        prop_assert!((c.delta - c1.delta).abs() < 1e-8);
    }
}
