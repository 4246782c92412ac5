mod common;

use adatoken::infoflow::{analyze, flow_values, information_contribution, s_cross, s_self, InfoFlowParams};
use adatoken::numcore::Rng;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn metrics_match_loop_oracles() {
    let params = InfoFlowParams::default();
    let mut rng = Rng::new(11);
    for _ in 0..200 {
        let types = common::random_types(&mut rng);
        let heads = 1 + rng.below(4);
        let rec = common::random_record(&mut rng, 0, heads, types);
        let s = s_self(&rec).unwrap().value;
        assert!(rel(s, common::oracle_s_self(&rec)) <= 1e-12);
        let c = s_cross(&rec, &params).unwrap();
        assert!(rel(c, common::oracle_s_cross(&rec, params.a1, params.a2)) <= 1e-12);
    }
}

#[test]
fn analyze_matches_unrolled_inf() {
    let params = InfoFlowParams::default();
    let mut rng = Rng::new(12);
    for _ in 0..20 {
        let types = common::random_types(&mut rng);
        let records: Vec<_> = (0..6).map(|l| common::random_record(&mut rng, l, 2, types.clone())).collect();
        let report = analyze(&records, &params).unwrap();
        let ss: Vec<f64> = records.iter().map(common::oracle_s_self).collect();
        let sc: Vec<f64> = records.iter().map(|r| common::oracle_s_cross(r, params.a1, params.a2)).collect();
        let inf = common::oracle_inf(&ss, &sc, params.sigma, params.gamma, params.epsilon, params.alpha);
        for (l, st) in report.layers.iter().enumerate() {
            assert!(rel(st.inf, inf[l]) <= 1e-12, "layer {l}: {} vs {}", st.inf, inf[l]);
        }
    }
}

#[test]
fn flow_worked_example_and_linearity() {
    let p = InfoFlowParams {
        sigma: 0.5,
        gamma: 0.9,
        ..InfoFlowParams::default()
    };
    let f = flow_values(&[0.8, 0.6, 0.4], &p);
    let expect = [0.4, 0.66, 0.794];
    for i in 0..3 {
        assert!((f[i] - expect[i]).abs() < 1e-15);
    }
    let mut rng = Rng::new(5);
    for _ in 0..100 {
        let n = 1 + rng.below(40);
        let s1: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let s2: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let (a, b) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
        let mix: Vec<f64> = (0..n).map(|i| a * s1[i] + b * s2[i]).collect();
        let (f1, f2, fm) = (flow_values(&s1, &p), flow_values(&s2, &p), flow_values(&mix, &p));
        for i in 0..n {
            assert!((fm[i] - (a * f1[i] + b * f2[i])).abs() <= 1e-12);
        }
    }
}

#[test]
fn inf_scalar_example() {
    let p = InfoFlowParams {
        epsilon: 0.5,
        ..InfoFlowParams::default()
    };
    let v = information_contribution(&[0.7], &[0.3], &[0.4], &p).unwrap();
    assert!((v[0] - 2.752747).abs() < 1e-6);
}
