use fdrecon::grid::integrate;
use fdrecon::data::DEFAULT_COMPLETE_MARGIN;
use fdrecon::simulation::{generate_dgp, generate_targets, run_study, run_study_with, DgpConfig, DgpId, Design};
use fdrecon::{
    classify_complete, Bandwidths, CovarianceEstimate, FunctionalDataset, MeanEstimate, Method, ModelConfig,
    NoiseVariance, ReconstructionModel,
};

#[test]
fn dgp1_partial_fragments_have_mean_width_055() {
    let config = DgpConfig::new(DgpId::One, 2000, 5, 7, 1);
    let targets = generate_targets(&config).unwrap();
    let rep = generate_dgp(&config, &targets, 0).unwrap();
    let widths: Vec<f64> = rep
        .fragments
        .iter()
        .filter(|f| !(f.lo == 0.0 && f.hi == 1.0))
        .map(|f| f.len())
        .collect();
    let n = widths.len() as f64;
    assert!(n > 800.0, "roughly half the curves are partial, got {n}");
    let mean = widths.iter().sum::<f64>() / n;
    let sd = (widths.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((mean - 0.55).abs() < 3.0 * sd / n.sqrt(), "mean width {mean}");
}

#[test]
fn dgp3_observes_on_the_51_point_grid() {
    let config = DgpConfig::new(DgpId::Three, 50, 0, 3, 1);
    let targets = generate_targets(&config).unwrap();
    let rep = generate_dgp(&config, &targets, 0).unwrap();
    for c in rep.dataset.curves().iter().chain(&rep.target_curves) {
        for p in c.points() {
            let j = p.u * 51.0;
            assert!((j - j.round()).abs() < 1e-9 && (1.0..=51.0).contains(&j.round()), "u={}", p.u);
        }
    }
}

#[test]
fn same_seed_gives_identical_data() {
    for dgp in [DgpId::One, DgpId::Four] {
        let config = DgpConfig::new(dgp, 30, 10, 99, 2);
        let targets = generate_targets(&config).unwrap();
        let a = generate_dgp(&config, &targets, 1).unwrap();
        let b = generate_dgp(&config, &generate_targets(&config).unwrap(), 1).unwrap();
        assert_eq!(a.dataset.curves(), b.dataset.curves());
        assert_eq!(a.target_curves, b.target_curves);
        let c = generate_dgp(&config, &targets, 0).unwrap();
        assert_ne!(a.dataset.curves(), c.dataset.curves());
    }
}

#[test]
fn targets_do_not_depend_on_replication() {
    let config = DgpConfig::new(DgpId::Two, 20, 10, 5, 3);
    let targets = generate_targets(&config).unwrap();
    let a = generate_dgp(&config, &targets, 0).unwrap();
    let b = generate_dgp(&config, &targets, 2).unwrap();
    assert_eq!(a.target_curves, b.target_curves);
    for t in &targets {
        assert!(t.fragment.lo > 0.0 || t.fragment.hi < 1.0, "targets always have a missing part");
    }
}

#[test]
fn dgp1_and_dgp2_share_everything_but_the_noise() {
    let seed = 17;
    let one = DgpConfig::new(DgpId::One, 40, 12, seed, 1);
    let two = DgpConfig::new(DgpId::Two, 40, 12, seed, 1);
    let mut clean = one.clone();
    clean.process.noise_variance = 0.0;
    let data = |c: &DgpConfig| generate_dgp(c, &generate_targets(c).unwrap(), 0).unwrap();
    let (d1, d2, d0) = (data(&one), data(&two), data(&clean));
    let ratio = (0.125f64 / 0.0125).sqrt();
    for ((c1, c2), c0) in d1.dataset.curves().iter().zip(d2.dataset.curves()).zip(d0.dataset.curves()) {
        for ((p1, p2), p0) in c1.points().iter().zip(c2.points()).zip(c0.points()) {
            assert_eq!(p1.u, p2.u);
            assert_eq!(p1.u, p0.u);
            // Same standard normal draws scaled by the two noise levels.
            assert!(((p2.y - p0.y) - ratio * (p1.y - p0.y)).abs() < 1e-9);
        }
    }
}

/// With the true mean and covariance, the reconstruction operator recovers a
/// finite-rank process exactly. Only the CE-type scores are exact for
/// noiseless data; integral scores carry a Riemann error that the small
/// trailing eigenvalues of short fragments amplify.
#[test]
fn zero_noise_rank_three_process_is_recovered() {
    let mut config = DgpConfig::new(DgpId::One, 100, 40, 2, 4);
    config.process.components = 3;
    config.process.noise_variance = 0.0;
    config.n_targets = 10;
    let process = config.process.clone();
    let fit = |d: &FunctionalDataset| {
        let grid = d.grid().clone();
        let mean = MeanEstimate::from_values(grid.clone(), grid.points().iter().map(|&u| process.mean(u)).collect(), 0.05);
        let cov = CovarianceEstimate::from_fn(&grid, |u, v| process.covariance(u, v));
        let complete = classify_complete(d, DEFAULT_COMPLETE_MARGIN)
            .into_iter()
            .map(|i| d.curves()[i].clone())
            .collect();
        let bw = Bandwidths {
            h_x: 0.1,
            h_mu: 0.05,
            h_gamma: 0.05,
        };
        ReconstructionModel::from_parts(mean, cov, NoiseVariance { sigma2: 0.0 }, bw, complete, ModelConfig::default())
    };
    let report = run_study_with(&config, &[Method::AnoCe, Method::Pace], &fit).unwrap();
    for row in &report.rows {
        assert!(row.mse < 1e-3, "{}: {}", row.method.label(), row.mse);
    }
}

fn small_study(dgp: DgpId, methods: &[Method]) -> fdrecon::simulation::StudyReport {
    let mut config = DgpConfig::new(dgp, 40, 12, 3, 3);
    config.n_targets = 8;
    run_study(&config, methods).unwrap()
}

#[test]
fn single_method_has_unit_ratio() {
    let report = small_study(DgpId::One, &[Method::Ayes]);
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].mse_ratio, 1.0);
}

#[test]
fn rows_decompose_and_are_ranked() {
    let report = small_study(DgpId::Two, &[Method::Ano, Method::Ayes, Method::AyesCe]);
    for row in &report.rows {
        assert!((row.mse - row.bias2 - row.var).abs() < 1e-10);
        assert!(row.mse_ratio >= 1.0);
    }
    assert!(report.rows.windows(2).all(|w| w[0].mse <= w[1].mse));
    // Squared bias recomputed from the per-target mean reconstructions.
    for row in &report.rows {
        let sums: Vec<f64> = report
            .target_summaries
            .iter()
            .filter(|s| s.method == row.method)
            .map(|s| {
                let truth = &report.targets[s.target].truth;
                let sq: Vec<f64> = s.mean_reconstruction.iter().zip(truth).map(|(m, x)| (m - x).powi(2)).collect();
                integrate(&report.grid, &sq)
            })
            .collect();
        let bias2 = sums.iter().sum::<f64>() / sums.len() as f64;
        assert!((bias2 - row.bias2).abs() < 1e-12 * (1.0 + bias2));
    }
}

#[test]
fn study_is_deterministic_across_thread_counts() {
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| small_study(DgpId::Three, &[Method::Ayes, Method::Kraus]))
    };
    let (a, b) = (run(1), run(3));
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        assert_eq!(ra.method, rb.method);
        assert_eq!(ra.mse.to_bits(), rb.mse.to_bits());
        assert_eq!(ra.var.to_bits(), rb.var.to_bits());
    }
}

#[test]
fn table_csv_layout() {
    let report = small_study(DgpId::One, &[Method::Ano, Method::Ayes]);
    let mut buf = Vec::new();
    report.write_csv(&mut buf, Some("config: dgp=1")).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# config: dgp=1");
    assert_eq!(lines[1], "Method,MSE_ratio,MSE,Bias2,Var");
    assert_eq!(lines.len(), 4);
    assert!(lines[2].split(',').nth(1).unwrap().parse::<f64>().unwrap() == 1.0);
}

#[test]
fn invalid_configurations_are_rejected() {
    assert!(DgpId::from_number(5).is_err());
    let mut config = DgpConfig::new(DgpId::One, 1, 10, 0, 1);
    assert!(run_study(&config, &[Method::Ano]).is_err());
    config.n = 10;
    assert!(run_study(&config, &[]).is_err());
    config.process.design = Design::Uniform {
        m: 1,
        partial: 0.5,
        a_max: 0.45,
        b_min: 0.55,
    };
    assert!(run_study(&config, &[Method::Ano]).is_err());
}
