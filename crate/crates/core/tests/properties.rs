use proptest::prelude::*;

use upconv_core::chains::{plan_frequencies, DoubleChainConfig};
use upconv_core::qutrit::{
    fit_leakage, run_rb, DecompositionMode, PulseConfig, PulseLibrary, RbSpec, Spur, TransmonParams,
};
use upconv_core::readout::{
    preselect, simulate_mixture, simulate_shots, fit_gmm, label_centroids, QutritLabel, ReadoutModel,
};

fn iq_spurs() -> Vec<Spur> {
    [(100.0, -52.0), (-100.0, -70.0), (-200.0, -70.0), (-400.0, -65.0)]
        .iter()
        .map(|&(offset_mhz, level_dbc)| Spur { offset_mhz, level_dbc })
        .collect()
}

fn double_spurs() -> Vec<Spur> {
    vec![Spur { offset_mhz: 100.0, level_dbc: -72.0 }, Spur { offset_mhz: -100.0, level_dbc: -72.0 }]
}

#[test]
fn spur_content_orders_gate_error() {
    let p = TransmonParams::default();
    let cfg = PulseConfig::default();
    for mode in [DecompositionMode::Standard, DecompositionMode::OnePulse] {
        let e = |spurs: &[Spur]| PulseLibrary::build(mode, &cfg, &p, spurs).unwrap().mean_clifford_infidelity().unwrap();
        let (clean, dc, iq) = (e(&[]), e(&double_spurs()), e(&iq_spurs()));
        assert!(clean < dc && dc < iq, "{mode:?}: {clean:e} {dc:e} {iq:e}");
    }
}

#[test]
fn leakage_population_grows_with_length() {
    let lengths = vec![1, 10, 20, 40, 80, 120];
    let r = run_rb(&RbSpec { bootstrap: 0, ..RbSpec::new(lengths, 6) }, &TransmonParams::default(), None).unwrap();
    assert!(r.p_f.windows(2).all(|w| w[1] >= w[0]), "{:?}", r.p_f);
    assert!(r.p_g.first().unwrap() > r.p_g.last().unwrap());
}

#[test]
fn preselection_never_raises_thermal_fraction() {
    let model = ReadoutModel::stand_in();
    let mut cal = Vec::new();
    for l in QutritLabel::ALL {
        cal.extend(simulate_shots(l, &model, 2000, 40 + l.index() as u64).unwrap());
    }
    let gmm = fit_gmm(&cal, &label_centroids(&cal).unwrap(), 1).unwrap();
    let th = 0.036;
    let n = 5000;
    for seed in 0..8 {
        let pre = simulate_mixture([1.0 - th, th, 0.0], &model, n, 1000 + seed).unwrap();
        let excited = pre.iter().filter(|s| s.label == Some(QutritLabel::E)).count();
        let mut e_main = simulate_shots(QutritLabel::E, &model, excited, 2000 + seed).unwrap().into_iter();
        let mut g_main = simulate_shots(QutritLabel::G, &model, n - excited, 3000 + seed).unwrap().into_iter();
        let main: Vec<_> = pre
            .iter()
            .map(|s| if s.label == Some(QutritLabel::E) { e_main.next() } else { g_main.next() }.unwrap())
            .collect();
        let kept = preselect(&pre, &main, &gmm).unwrap().kept;
        let before = excited as f64 / n as f64;
        let after = kept.iter().filter(|s| s.label == Some(QutritLabel::E)).count() as f64 / kept.len() as f64;
        let sigma = (th * (1.0 - th) / n as f64).sqrt();
        assert!(after <= before + 3.0 * sigma, "seed {seed}: {before} -> {after}");
        assert!(after < 0.5 * th);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn leakage_round_trip(p_up in 1e-6f64..1e-3, p_down in 1e-4f64..1e-2) {
        let xs: Vec<f64> = (0..=40).map(|k| (1 + 5 * k) as f64).collect();
        let s = p_up + p_down;
        let ys: Vec<f64> = xs.iter().map(|&n| p_up / s * (1.0 - (-s * n).exp())).collect();
        let f = fit_leakage(&xs, &ys).unwrap();
        prop_assert!((f.p_up / p_up - 1.0).abs() < 5e-4, "{} vs {}", f.p_up, p_up);
        prop_assert!((f.p_down / p_down - 1.0).abs() < 5e-3, "{} vs {}", f.p_down, p_down);
    }

    #[test]
    fn plan_hits_target_with_image_out_of_band(target in 0.5e9f64..8.5e9) {
        let cfg = DoubleChainConfig::default();
        let p = plan_frequencies(target, &cfg).unwrap();
        prop_assert!((p.f_lo2_hz - cfg.lo1.frequency - p.f_if1_hz - target).abs() < 1e-3);
        prop_assert!(p.f_if1_hz >= cfg.if1_band_hz[0] && p.f_if1_hz <= cfg.if1_band_hz[1]);
        prop_assert!(p.f_lo2_hz >= cfg.lo2_band_hz[0] && p.f_lo2_hz <= cfg.lo2_band_hz[1]);
        prop_assert!(p.image_hz >= 24.5e9 && p.image_hz <= 32.5e9);
    }
}
