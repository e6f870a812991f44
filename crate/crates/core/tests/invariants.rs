use proptest::prelude::*;

use fou_merton::asymptotics::{practical_strategy, strategy_pi1, ExpansionInputs};
use fou_merton::fou::{stationary_variance, FouParams, HistoryPolicy};
use fou_merton::harness::report::num;
use fou_merton::market::{distortion_q, MarketModel, ModelSpec};
use fou_merton::mc::{simulate_wealth, Scenario, StrategyContext, StrategyKind, StrategySpec, CRN_STREAM};
use fou_merton::merton::solve_merton_power;
use fou_merton::stats::weighted_fit;
use fou_merton::{FactorSimulator, UtilitySpec};

fn inputs(h: f64, eps: f64, rho: f64, gamma: f64) -> ExpansionInputs {
    let p = FouParams::new(1.0, h, eps).unwrap();
    let m = MarketModel::builtin(rho, gamma, p.sigma_ou()).unwrap();
    ExpansionInputs::new(p, m, 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stationary_variance_scales_as_a_to_minus_2h(a in 0.2f64..5.0, h in 0.51f64..0.95) {
        let lhs = stationary_variance(a, h);
        let rhs = stationary_variance(1.0, h) * a.powf(-2.0 * h);
        prop_assert!(lhs > 0.0);
        prop_assert!(((lhs - rhs) / rhs).abs() < 1e-12);
    }

    #[test]
    fn distortion_power_is_even_in_rho_and_on_the_right_side_of_one(
        gamma in prop_oneof![0.05f64..0.95, 1.05f64..6.0],
        rho in -0.99f64..0.99,
    ) {
        let q = distortion_q(gamma, rho).unwrap();
        prop_assert_eq!(q, distortion_q(gamma, -rho).unwrap());
        prop_assert_eq!(distortion_q(gamma, 0.0).unwrap(), 1.0);
        if gamma < 1.0 { prop_assert!(q > 0.0 && q <= 1.0) } else { prop_assert!(q >= 1.0) }
    }

    #[test]
    fn averaging_inequalities_hold(h in 0.51f64..0.95, gamma in 0.1f64..0.9) {
        let inp = inputs(h, 0.1, -0.5, gamma);
        let (g1, g2) = inp.averages.inequality_gaps();
        prop_assert!(g1 >= -1e-14 && g2 >= -1e-14);
        let p = practical_strategy(&inp).unwrap();
        prop_assert!(p.sharpe_sq <= inp.averages.lambda_bar_sq + 1e-14);
        prop_assert!(p.c_star > 0.0);
    }

    #[test]
    fn correction_is_odd_in_rho(rho in 0.01f64..0.95, eps in 0.001f64..1.0, y in -2.0f64..2.0) {
        let a = inputs(0.6, eps, rho, 0.4);
        let b = inputs(0.6, eps, -rho, 0.4);
        let (da, db) = (a.deterministic_correction(0.3).unwrap(), b.deterministic_correction(0.3).unwrap());
        prop_assert!(da > 0.0 && (da + db).abs() <= 1e-15 * da.abs().max(1e-300));
        let (pa, pb) = (strategy_pi1(0.3, 1.0, y, &a, true).unwrap(), strategy_pi1(0.3, 1.0, y, &b, true).unwrap());
        prop_assert!(pa > 0.0 && (pa + pb).abs() <= 1e-12 * pa);
    }

    #[test]
    fn power_merton_derivative_identities(
        gamma in prop_oneof![0.1f64..0.95, 1.1f64..5.0],
        lambda in 0.0f64..1.5,
        t in 0.0f64..1.0,
        x in 0.05f64..20.0,
    ) {
        let s = solve_merton_power(gamma, lambda, 1.0).unwrap();
        let d1 = s.d1_value(t, x).unwrap();
        prop_assert!(((d1 + s.d2_value(t, x).unwrap()) / d1).abs() < 1e-10);
        prop_assert!(((s.risk_tolerance(t, x).unwrap() - x / gamma) / x).abs() < 1e-12);
        prop_assert!(s.value_x(t, x).unwrap() > 0.0 && s.value_xx(t, x).unwrap() < 0.0);
    }

    #[test]
    fn weighted_fit_recovers_exact_lines(a in -5.0f64..5.0, b in -5.0f64..5.0, w in prop::collection::vec(0.1f64..10.0, 3..8)) {
        let x: Vec<f64> = (0..w.len()).map(|i| i as f64 * 0.7 - 1.0).collect();
        let y: Vec<f64> = x.iter().map(|v| a + b * v).collect();
        let f = weighted_fit(&x, &y, &w);
        prop_assert!((f.intercept - a).abs() < 1e-10 && (f.slope - b).abs() < 1e-10);
    }

    #[test]
    fn csv_numbers_round_trip(x in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(num(x).parse::<f64>().unwrap(), x);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn proportional_wealth_stays_positive_and_zero_strategy_is_inert(
        factor in -3.0f64..3.0,
        x0 in 0.01f64..100.0,
        path in 0u64..1000,
    ) {
        let sc = Scenario { dt: 0.02, ..Scenario::baseline() };
        let p = sc.params(0.1).unwrap();
        let sim = FactorSimulator::new(p, HistoryPolicy::default().grid(&p, 1.0, 0.02).unwrap(), sc.rho).unwrap();
        let inp = sc.inputs(0.1).unwrap();
        let ctx = StrategyContext { inputs: &inp, merton: None };
        let hist = sim.history(3, 0);
        let f = sim.future(&hist, 3, CRN_STREAM, path);
        let u = UtilitySpec::power(0.4).unwrap();
        let scaled = StrategySpec { kind: StrategyKind::ScaledPi0 { factor }, utility: u.clone() };
        let w = simulate_wealth(&scaled, &ctx, &f, x0).unwrap();
        prop_assert!(w.wealth.iter().all(|v| *v > 0.0) && !w.flagged && !w.absorbed);
        let zero = StrategySpec { kind: StrategyKind::Zero, utility: u };
        let inert = simulate_wealth(&zero, &ctx, &f, x0).unwrap().terminal;
        prop_assert!(((inert - x0) / x0).abs() < 1e-14);
    }

    #[test]
    fn constant_model_gives_exact_invariants(lambda in 0.05f64..1.5, sigma in 0.05f64..1.0, h in 0.51f64..0.95) {
        let p = FouParams::new(1.0, h, 0.1).unwrap();
        let m = MarketModel::from_spec(&ModelSpec::Constant { lambda, sigma }, -0.5, 0.4, p.sigma_ou()).unwrap();
        let inp = ExpansionInputs::new(p, m, 1.0).unwrap();
        let av = &inp.averages;
        prop_assert_eq!(av.lambda_tilde, lambda);
        prop_assert_eq!(av.avg_lambda_lambda_prime, 0.0);
        prop_assert_eq!(inp.deterministic_correction(0.0).unwrap(), 0.0);
        let ps = practical_strategy(&inp).unwrap();
        prop_assert!(((ps.c_star - lambda / (0.4 * sigma)) / ps.c_star).abs() < 1e-12);
        prop_assert!(ps.cauchy_schwarz_gap.abs() < 1e-12);
    }
}
