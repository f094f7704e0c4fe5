use fourierflow::biaslab::*;

#[test]
fn monte_carlo_slope_tracks_alpha() {
    let g = DiffusionCoeff::Constant { g0: 1.0 };
    for &alpha in &[1.0, 2.0] {
        let start = std::time::Instant::now();
        let curve = empirical_bias_experiment(&BiasExperiment::new(alpha, 1.0, 128, 50, 7), &g).unwrap();
        eprintln!("alpha {alpha}: slope {} +- {} in {:?}", curve.slope, curve.slope_ci, start.elapsed());
        assert!((curve.slope + alpha).abs() <= 0.1 * alpha);
        assert!(!curve.widened_ci);
    }
}

#[test]
fn scaling_gamma_scales_thresholds() {
    let g = DiffusionCoeff::Constant { g0: 1.0 };
    let pl = PowerLawSpectrum::new(2.0, 1.0).unwrap();
    let a = analytic_threshold_curve(&pl, &g, 1.0, 32, 32).unwrap();
    let b = analytic_threshold_curve(&pl, &g, 4.0, 32, 32).unwrap();
    for (x, y) in a.t_gamma.iter().zip(&b.t_gamma) {
        assert!((y / x - 0.25).abs() < 1e-14);
    }
    assert!((a.slope - b.slope).abs() < 1e-12);
    assert!((a.slope + 2.0).abs() < 0.05);
}

#[test]
fn few_trials_widen_the_interval() {
    let g = DiffusionCoeff::Constant { g0: 1.0 };
    let curve = empirical_bias_experiment(&BiasExperiment::new(2.0, 1.0, 32, 3, 1), &g).unwrap();
    assert!(curve.widened_ci);
}

#[test]
fn noise_power_is_flat_across_bands() {
    let g = DiffusionCoeff::Constant { g0: 1.0 };
    let flat = noise_flatness(&g, 0.3, 128, 200, 5).unwrap();
    eprintln!("relative spread {}", flat.relative_spread);
    assert!(flat.relative_spread < 0.05);
    // per-cell power of the unnormalized transform is V * H * W
    let expect = 0.3 * 128.0 * 128.0;
    let mean = flat.per_cell_power.iter().sum::<f64>() / flat.per_cell_power.len() as f64;
    assert!((mean / expect - 1.0).abs() < 0.02);
}

#[test]
fn synthesized_slope_over_many_seeds() {
    for &alpha in &[1.0, 2.0] {
        let spec = PowerLawSpectrum::new(alpha, 1.0).unwrap();
        let freqs = bin_mean_frequency(128, 128);
        let mut sum = vec![0.0; freqs.len()];
        for seed in 0..20 {
            let f = synth_power_law_field(&spec, 128, 128, seed).unwrap();
            let a = ndarray::Array2::from_shape_vec((128, 128), f).unwrap();
            let p = fourierflow::fields::radial_energy_spectrum(a.view()).unwrap();
            let e = EmpiricalSpectrum::from_profile(&p, 128, 128);
            for (s, v) in sum.iter_mut().zip(&e.per_cell) {
                *s += v;
            }
        }
        let (x, y): (Vec<f64>, Vec<f64>) = full_ring_bins(128, 128).map(|k| (freqs[k].ln(), sum[k].ln())).unzip();
        let (slope, _, _) = fit_line(&x, &y).unwrap();
        assert!((slope + alpha).abs() < 0.1 * alpha, "{slope}");
    }
}
