mod common;

use common::*;
use fdrecon::eigen::{EigenSystem, Subdomain, DEFAULT_LAMBDA_REL_FLOOR};
use fdrecon::grid::Interval;
use fdrecon::scores::{ce_scores, integral_scores, pace_scores, Quadrature};
use fdrecon::simulation::{DgpId, ScoreDraw};
use fdrecon::{Curve, CovarianceEstimate, DomainGrid, Error, MeanEstimate, NoiseVariance, ObservationPair};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn zero_mean(g: &DomainGrid) -> MeanEstimate {
    MeanEstimate::from_values(g.clone(), vec![0.0; g.len()], 0.1)
}

fn full_eig(g: &DomainGrid, cov: &CovarianceEstimate) -> EigenSystem {
    EigenSystem::fit(cov, &Subdomain::full(g), DEFAULT_LAMBDA_REL_FLOOR).unwrap()
}

fn uniform(m: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..m).map(|j| lo + (hi - lo) * j as f64 / (m - 1) as f64).collect()
}

#[test]
fn curve_on_the_mean_has_zero_scores() {
    let g = unit_grid(51);
    let proc = FiniteRank {
        lambdas: vec![1.0, 0.3],
    };
    let cov = CovarianceEstimate::from_fn(&g, |u, v| proc.cov(u, v));
    let eig = full_eig(&g, &cov);
    let mu = |u: f64| 2.0 + u.sin();
    let mean = MeanEstimate::from_values(g.clone(), g.points().iter().map(|&u| mu(u)).collect(), 0.1);
    // Grid abscissae keep the interpolated mean exact.
    let curve = sampled("c", &g.points()[5..40], mu);
    let s = integral_scores(&curve, &eig, &mean, 2, Quadrature::Backward).unwrap();
    assert!(s.values.iter().all(|v| v.abs() < 1e-12), "{:?}", s.values);
    let s = ce_scores(&curve, &eig, &cov, NoiseVariance { sigma2: 0.1 }, &mean, 2).unwrap();
    assert!(s.values.iter().all(|v| v.abs() < 1e-12), "{:?}", s.values);
    let s = pace_scores(&curve, &eig, &cov, NoiseVariance { sigma2: 0.1 }, &mean, 2).unwrap();
    assert!(s.values.iter().all(|v| v.abs() < 1e-12), "{:?}", s.values);
}

#[test]
fn integral_score_of_scaled_eigenfunction() {
    let g = unit_grid(101);
    let cov = CovarianceEstimate::from_fn(&g, |u, v| sine(1, u) * sine(1, v));
    let eig = full_eig(&g, &cov);
    let curve = sampled("c", &uniform(200, 0.0, 1.0), |u| 2.0 * sine(1, u));
    let s = integral_scores(&curve, &eig, &zero_mean(&g), 1, Quadrature::Backward).unwrap();
    assert!((s.values[0] - 2.0).abs() < 0.05, "{}", s.values[0]);
}

#[test]
fn single_point_segment_is_flagged() {
    let g = unit_grid(51);
    let cov = CovarianceEstimate::from_fn(&g, |u, v| sine(1, u) * sine(1, v));
    let eig = full_eig(&g, &cov);
    let pts = vec![
        ObservationPair::new(0.1, 1.0),
        ObservationPair::new(0.6, 1.0),
        ObservationPair::new(0.7, 1.0),
    ];
    let segs = vec![Interval::new(0.0, 0.2).unwrap(), Interval::new(0.5, 0.8).unwrap()];
    let curve = Curve::new("c", pts).unwrap().with_segments(segs).unwrap();
    let s = integral_scores(&curve, &eig, &zero_mean(&g), 1, Quadrature::Backward).unwrap();
    assert!(s.diagnostics.insufficient_points);
    // Only the second segment contributes: φ(0.7)·1·0.1.
    let expect = eig.basis_at(0, 0.7) * 0.1;
    assert!((s.values[0] - expect).abs() < 1e-12);
}

#[test]
fn too_many_components_names_both_counts() {
    let g = unit_grid(51);
    let cov = CovarianceEstimate::from_fn(&g, |u, v| sine(1, u) * sine(1, v));
    let eig = full_eig(&g, &cov);
    let curve = sampled("c", &uniform(10, 0.0, 1.0), |u| u);
    let err = integral_scores(&curve, &eig, &zero_mean(&g), 3, Quadrature::Backward).unwrap_err();
    assert_eq!(
        err,
        Error::TooManyComponents {
            requested: 3,
            available: 1
        }
    );
    assert!(err.to_string().contains('3') && err.to_string().contains('1'));
}

#[test]
fn ce_two_point_system_matches_direct_solve() {
    let g = unit_grid(101);
    let cov = CovarianceEstimate::from_fn(&g, |u, v| 0.8 * sine(1, u) * sine(1, v));
    let eig = full_eig(&g, &cov);
    assert_eq!(eig.k_available(), 1);
    let sigma2 = 0.05;
    let (u1, u2, y1, y2) = (0.23, 0.61, 0.7, -0.2);
    let curve = Curve::new("c", vec![ObservationPair::new(u1, y1), ObservationPair::new(u2, y2)]).unwrap();
    let s = ce_scores(&curve, &eig, &cov, NoiseVariance { sigma2 }, &zero_mean(&g), 1).unwrap();

    let l = eig.eigenvalues[0];
    let (p1, p2) = (eig.basis_at(0, u1), eig.basis_at(0, u2));
    let (a, b, d) = (l * p1 * p1 + sigma2, l * p1 * p2, l * p2 * p2 + sigma2);
    let det = a * d - b * b;
    let x1 = (d * y1 - b * y2) / det;
    let x2 = (a * y2 - b * y1) / det;
    let expect = l * (p1 * x1 + p2 * x2);
    assert!((s.values[0] - expect).abs() < 1e-10, "{} vs {expect}", s.values[0]);
    assert!(!s.diagnostics.jitter_applied);
}

#[test]
fn singular_ce_system_tends_to_least_squares_projection() {
    let g = unit_grid(101);
    let proc = FiniteRank {
        lambdas: vec![1.0, 0.5],
    };
    let cov = CovarianceEstimate::from_fn(&g, |u, v| proc.cov(u, v));
    let eig = full_eig(&g, &cov);
    assert_eq!(eig.k_available(), 2);
    let us = [0.05, 0.2, 0.35, 0.5, 0.7, 0.9];
    let ys = [0.3, -0.1, 0.8, 0.2, -0.5, 0.4];
    let curve = Curve::new("c", us.iter().zip(&ys).map(|(&u, &y)| ObservationPair::new(u, y)).collect()).unwrap();
    let s = ce_scores(&curve, &eig, &cov, NoiseVariance { sigma2: 0.0 }, &zero_mean(&g), 2).unwrap();
    assert!(s.diagnostics.jitter_applied);

    let phi = DMatrix::from_fn(us.len(), 2, |i, k| eig.basis_at(k, us[i]));
    let y = DVector::from_column_slice(&ys);
    let ls = (phi.transpose() * &phi).lu().solve(&(phi.transpose() * y)).unwrap();
    for k in 0..2 {
        assert!((s.values[k] - ls[k]).abs() < 1e-4, "k={k}: {} vs {}", s.values[k], ls[k]);
    }
}

#[test]
fn ce_and_integral_agree_on_dense_noiseless_finite_rank() {
    let g = unit_grid(101);
    let proc = FiniteRank {
        lambdas: vec![1.0, 0.5],
    };
    let cov = CovarianceEstimate::from_fn(&g, |u, v| proc.cov(u, v));
    let eig = full_eig(&g, &cov);
    let mean = zero_mean(&g);
    let us = uniform(200, 0.0, 1.0);
    let du = us[1] - us[0];
    let mut r = rng(3);
    for i in 0..5 {
        let xi = proc.draw(&mut r);
        let curve = sampled(&i.to_string(), &us, |u| proc.eval(&xi, u));
        let a = integral_scores(&curve, &eig, &mean, 2, Quadrature::Backward).unwrap();
        let b = ce_scores(&curve, &eig, &cov, NoiseVariance { sigma2: 0.0 }, &mean, 2).unwrap();
        for k in 0..2 {
            // A one-sided Riemann sum errs by at most Δ times the total
            // variation of the integrand.
            let f: Vec<f64> = us.iter().map(|&u| eig.basis_at(k, u) * proc.eval(&xi, u)).collect();
            let tv: f64 = f.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
            let tol = du * tv + 1e-4;
            assert!((a.values[k] - b.values[k]).abs() < tol, "k={k}: {} vs {} (tol {tol})", a.values[k], b.values[k]);
        }
    }
}

#[test]
fn pace_equals_ce_for_complete_curve() {
    let g = unit_grid(51);
    let proc = FiniteRank {
        lambdas: vec![1.0, 0.5, 0.2],
    };
    let cov = CovarianceEstimate::from_fn(&g, |u, v| proc.cov(u, v));
    let eig = full_eig(&g, &cov);
    let curve = sampled("c", &uniform(15, 0.0, 1.0), |u| (3.0 * u).cos());
    let s2 = NoiseVariance { sigma2: 0.02 };
    let a = ce_scores(&curve, &eig, &cov, s2, &zero_mean(&g), 3).unwrap();
    let b = pace_scores(&curve, &eig, &cov, s2, &zero_mean(&g), 3).unwrap();
    assert_eq!(a.values, b.values);
}

#[test]
fn pace_rejects_partial_eigensystem() {
    let g = unit_grid(51);
    let cov = CovarianceEstimate::from_fn(&g, f64::min);
    let sub = Subdomain::single(Interval::new(0.0, 0.5).unwrap(), &g).unwrap();
    let eig = EigenSystem::fit(&cov, &sub, DEFAULT_LAMBDA_REL_FLOOR).unwrap();
    let curve = sampled("c", &uniform(5, 0.0, 0.5), |u| u);
    let err = pace_scores(&curve, &eig, &cov, NoiseVariance { sigma2: 0.1 }, &zero_mean(&g), 1).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn pace_on_short_fragment_with_tiny_noise_is_flagged() {
    let proc = DgpId::Four.process(0, ScoreDraw::PerComponent);
    let g = unit_grid(51);
    let cov = CovarianceEstimate::from_fn(&g, |u, v| proc.covariance(u, v));
    let eig = full_eig(&g, &cov);
    // DGP4 fragment: grid abscissae j/51 on an interval of width 1/3.
    let us: Vec<f64> = (1..=51).map(|j| j as f64 / 51.0).filter(|&u| (0.4..=0.4 + 1.0 / 3.0).contains(&u)).collect();
    let curve = sampled("c", &us, |u| (2.0 * u).sin());
    let k = eig.k_available();
    match pace_scores(&curve, &eig, &cov, NoiseVariance { sigma2: 1e-10 }, &zero_mean(&g), k) {
        Ok(s) => assert!(
            s.diagnostics.ill_conditioned,
            "condition {:?}",
            s.diagnostics.condition
        ),
        Err(e) => assert!(matches!(e, Error::IllConditioned { .. }), "{e}"),
    }
}

fn fixture() -> (DomainGrid, CovarianceEstimate, EigenSystem) {
    let g = unit_grid(51);
    let proc = FiniteRank {
        lambdas: vec![1.0, 0.4, 0.2],
    };
    let cov = CovarianceEstimate::from_fn(&g, |u, v| proc.cov(u, v));
    let eig = full_eig(&g, &cov);
    (g, cov, eig)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scores_are_linear_in_the_observations(
        us in prop::collection::btree_set(0u32..=1000, 4..20),
        ys in prop::collection::vec(-2.0f64..2.0, 20),
        zs in prop::collection::vec(-2.0f64..2.0, 20),
        c in -3.0f64..3.0,
    ) {
        let (g, cov, eig) = fixture();
        let mean = zero_mean(&g);
        let us: Vec<f64> = us.into_iter().map(|u| u as f64 / 1000.0).collect();
        let make = |f: &dyn Fn(usize) -> f64| {
            Curve::new("c", us.iter().enumerate().map(|(i, &u)| ObservationPair::new(u, f(i))).collect()).unwrap()
        };
        let y = make(&|i| ys[i]);
        let z = make(&|i| zs[i]);
        let yz = make(&|i| ys[i] + c * zs[i]);
        let s2 = NoiseVariance { sigma2: 0.05 };
        let ce = |curve: &Curve| ce_scores(curve, &eig, &cov, s2, &mean, 3).unwrap().values;
        let int = |curve: &Curve| integral_scores(curve, &eig, &mean, 3, Quadrature::Backward).unwrap().values;
        for f in [&ce as &dyn Fn(&Curve) -> Vec<f64>, &int] {
            let (a, b, ab) = (f(&y), f(&z), f(&yz));
            for k in 0..3 {
                prop_assert!((ab[k] - a[k] - c * b[k]).abs() < 1e-8 * (1.0 + ab[k].abs()));
            }
        }
    }

    #[test]
    fn scores_do_not_depend_on_input_order(
        pairs in prop::collection::btree_map(0u32..=1000, -2.0f64..2.0, 3..15),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let (g, cov, eig) = fixture();
        let mean = zero_mean(&g);
        let pts: Vec<ObservationPair> = pairs.iter().map(|(&u, &y)| ObservationPair::new(u as f64 / 1000.0, y)).collect();
        let mut shuffled = pts.clone();
        shuffled.shuffle(&mut rng(seed));
        let a = Curve::new("c", pts).unwrap();
        let b = Curve::new("c", shuffled).unwrap();
        let s2 = NoiseVariance { sigma2: 0.05 };
        prop_assert_eq!(
            ce_scores(&a, &eig, &cov, s2, &mean, 3).unwrap().values,
            ce_scores(&b, &eig, &cov, s2, &mean, 3).unwrap().values
        );
        prop_assert_eq!(
            integral_scores(&a, &eig, &mean, 3, Quadrature::Backward).unwrap().values,
            integral_scores(&b, &eig, &mean, 3, Quadrature::Backward).unwrap().values
        );
    }
}
