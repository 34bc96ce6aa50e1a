use std::sync::Arc;

use gevolab_core::export::write_columns;
use gevolab_core::pseudo_op::linear_fit;
use gevolab_core::symbols::{bracket, LevelId};
use gevolab_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn symbols_for(profile: DegeneracyProfile) -> WeightSymbols {
    let class = classify(&profile).unwrap();
    let cutoffs = CutoffFamily::default();
    let consts = TransformConstants::for_profile(&profile, &class, &cutoffs).unwrap();
    WeightSymbols::new(&profile, &class, &consts, &cutoffs, 1.0).unwrap()
}

fn geometric(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| lo * (hi / lo).powf(i as f64 / (count - 1) as f64)).collect()
}

// xi with <xi>_1 = b.
fn frequency_at(b: f64) -> f64 {
    (b * b - 1.0).sqrt()
}

#[test]
fn weight_grows_no_faster_than_order_q() {
    let s = symbols_for(DegeneracyProfile::default());
    let brackets = geometric(10.0, 1e4, 13);
    let xis: Vec<f64> = brackets.iter().map(|&b| frequency_at(b)).collect();
    // lambda is monotone in |x| and saturates beyond the profile support, so
    // a long positive ray reaches the supremum over x.
    let mut xs = vec![0.0];
    xs.extend(geometric(0.1, 1e8, 60));
    let table = s.tabulate(&xs, &xis).unwrap();
    let taper = vec![1.0; xs.len()];
    let mut sup = vec![0.0f64; xis.len()];
    for t in geometric(1e-5, 1.0, 120) {
        let values = s.lambda_on_table(&table, t, &taper).unwrap();
        for (i, v) in values.iter().enumerate() {
            let m = i % xis.len();
            sup[m] = sup[m].max(v.abs());
        }
    }
    let ratios: Vec<f64> = sup.iter().zip(&brackets).map(|(v, b)| v / b.powf(s.q)).collect();
    let constant = ratios.iter().cloned().fold(0.0, f64::max);
    assert!(constant.is_finite() && constant < 10.0, "ratios {ratios:?}");
    let top = brackets.len() / 3;
    let x: Vec<f64> = brackets[top..].iter().map(|b| b.ln()).collect();
    let y: Vec<f64> = sup[top..].iter().map(|v| v.ln()).collect();
    let slope = linear_fit(&x, &y).0;
    assert!(slope <= s.q + 0.05, "fitted order {slope} exceeds q = {}", s.q);
}

#[test]
fn spatial_derivative_of_local_weight_has_nominal_exponents() {
    let profile = DegeneracyProfile::default();
    let s = symbols_for(profile);
    let level = s.level(LevelId::Second);
    let (sigma, k, gap) = (profile.sigma2, profile.k, profile.ell - profile.k);
    let xi_order = 2.0 * sigma * gap / (sigma * gap + k + 1.0);
    assert!((xi_order - (s.q - 2.0 * (k + 1.0) * (1.0 - sigma) / (sigma * gap + k + 1.0))).abs() < 1e-12);

    let dx_lambda2 = |x: f64, xi: f64| -> f64 {
        let step = 1e-3 * bracket(x, 1.0);
        (s.lambda2(x + step, xi).unwrap() - s.lambda2(x - step, xi).unwrap()) / (2.0 * step)
    };
    let times = geometric(1e-4, 1.0, 400);
    let sup_in_time = |xi: f64| times.iter().map(|&t| level.local_factor(t, xi)).fold(0.0, f64::max);

    let xi = frequency_at(1e3);
    let xs = geometric(10.0, 1e3, 9);
    let x_logs: Vec<f64> = xs.iter().map(|&x| bracket(x, 1.0).ln()).collect();
    let x_values: Vec<f64> = xs.iter().map(|&x| (sup_in_time(xi) * dx_lambda2(x, xi)).abs().ln()).collect();
    let x_slope = linear_fit(&x_logs, &x_values).0;
    assert!((x_slope + sigma).abs() <= 0.05, "x exponent {x_slope}");

    let brackets = geometric(1e2, 1e4, 9);
    let xi_logs: Vec<f64> = brackets.iter().map(|b| b.ln()).collect();
    let xi_values: Vec<f64> = brackets
        .iter()
        .map(|&b| {
            let xi = frequency_at(b);
            (sup_in_time(xi) * dx_lambda2(2.0, xi)).abs().ln()
        })
        .collect();
    let xi_slope = linear_fit(&xi_logs, &xi_values).0;
    assert!((xi_slope - xi_order).abs() <= 0.05, "xi exponent {xi_slope} vs {xi_order}");
}

#[test]
fn time_derivative_matches_central_difference() {
    let s = symbols_for(DegeneracyProfile::default());
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let t = rng.gen_range(0.05..0.95);
        let x = rng.gen_range(-200.0..200.0);
        let xi = rng.gen_range(-1e3..1e3);
        let d = 1e-5 * t;
        let fd = (s.lambda(t + d, x, xi).unwrap() - s.lambda(t - d, x, xi).unwrap()) / (2.0 * d);
        let exact = s.dt_lambda(t, x, xi).unwrap();
        assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(1e-3), "({t}, {x}, {xi}): {fd} vs {exact}");
    }
}

#[test]
fn weight_vanishes_at_initial_time_for_every_regime() {
    let profiles = [
        DegeneracyProfile::default(),
        DegeneracyProfile::with_indices(1.0, 2.0, 0.5, 0.8, 0.3),
        DegeneracyProfile::with_indices(1.0, 2.0, 2.0, 0.7, 0.3),
    ];
    for p in profiles {
        let s = symbols_for(p);
        for &(x, xi) in &[(0.0, 0.0), (3.0, 10.0), (-500.0, 2e3), (40.0, -7.0)] {
            let parts = s.lambda_parts(0.0, x, xi).unwrap();
            assert_eq!([parts.evolution2, parts.zone2, parts.evolution1, parts.zone1], [0.0; 4]);
            if s.regime == Regime::SecondOrderGap {
                assert_eq!(s.lambda(0.0, x, xi).unwrap(), 0.0);
            }
            assert_eq!(s.dt_lambda(0.0, x, xi).unwrap(), 0.0);
        }
    }
}

#[test]
fn zone_rate_identity_holds_throughout_the_zone() {
    let s = symbols_for(DegeneracyProfile::default());
    let level = s.level(LevelId::Second);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let xi: f64 = rng.gen_range(2.0..2e3);
        let x = rng.gen_range(-50.0..50.0);
        // chi = 1 for t S <= 1/2.
        let t = rng.gen_range(0.0..0.5) / level.zone_speed(xi);
        if t == 0.0 || t > 1.0 {
            continue;
        }
        let rate = s.rate_parts(t, x, xi).unwrap().zone2;
        let expected = -s.consts.mpsi2 * t.powf(1.0) * bracket(xi, 1.0).powi(2);
        assert!((rate - expected).abs() <= 1e-14 * expected.abs(), "{t} {xi}");
    }
}

#[test]
fn symbol_grid_export_layout() {
    let s = Arc::new(symbols_for(DegeneracyProfile::default()));
    let field = s.lambda_field();
    let (mut ts, mut xs, mut xis, mut values) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &t in &[0.5, 1.0] {
        for &x in &[-2.0, 3.0] {
            for &xi in &[5.0, 50.0] {
                ts.push(t);
                xs.push(x);
                xis.push(xi);
                values.push(field.eval(t, x, xi).unwrap().re);
            }
        }
    }
    let dir = std::env::temp_dir().join(format!("gevolab-symbols-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("lambda.bin");
    write_columns(&path, &[("t", &ts), ("x", &xs), ("xi", &xis), ("value", &values)]).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 4 * 8 * 8);
    let column = |c: usize| -> Vec<f64> {
        bytes[c * 64..(c + 1) * 64].chunks(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()
    };
    assert_eq!(column(2), xis);
    assert_eq!(column(3), values);
    let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("lambda.bin.json")).unwrap()).unwrap();
    assert_eq!(sidecar["columns"], serde_json::json!(["t", "x", "xi", "value"]));
    assert_eq!(sidecar["rows"], 8);
    std::fs::remove_dir_all(&dir).unwrap();
}
