use proptest::prelude::*;

use subcrit_lab::bps::Normalization;
use subcrit_lab::limits::{
    clt_covariance, lambda_measure, ldp_rate_scalar, mdp_rate_path, quadratic_forms, SteadyCumulant,
};
use subcrit_lab::model::{
    approx_level_params, chi_of_measure, derive_constants, BranchingParams, MeasureOnUnit, Model, PathSample,
    TestFunction,
};
use subcrit_lab::motion::MotionModel;
use subcrit_lab::pde::{steady_state, Problem, SteadyOptions};
use subcrit_lab::stats::{dyadic_l, jackknife, log_mean_exp, variance};

fn params() -> impl Strategy<Value = BranchingParams> {
    (0.1f64..5.0, 0.01f64..0.49, 0.1f64..3.0).prop_map(|(v, q, h)| BranchingParams::new(v, q, h).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn approximation_keeps_intensity_of_dying(p in params(), n in 1u32..200) {
        // Levels below (1 - 2q)/(2q) would need a negative branching probability.
        if (n as f64) < (1.0 - 2.0 * p.q()) / (2.0 * p.q()) {
            prop_assert!(approx_level_params(&p, n).is_err());
            return Ok(());
        }
        let a = approx_level_params(&p, n).unwrap();
        prop_assert_eq!(a.death_rate, p.death_rate());
        let rebuilt = a.lifetime_rate * (1.0 - 2.0 * a.branch_prob);
        prop_assert!((rebuilt - p.death_rate()).abs() <= 1e-12 * p.death_rate());
        prop_assert!((0.0..0.5).contains(&a.branch_prob));
        prop_assert!((a.mass * a.immigration - p.h()).abs() <= 1e-12 * p.h());
    }

    #[test]
    fn thresholds_are_ordered(p in params()) {
        let d = derive_constants(&p);
        prop_assert!(d.q0_branching > 0.0);
        prop_assert!(d.q0_branching <= d.death_rate * (1.0 + 1e-12));
        prop_assert!(d.q0_branching <= d.q0_super * (1.0 + 1e-12));
        // Q0^B is the smaller root of (Q - theta)^2 = 4 V q theta.
        let gap = (d.death_rate - d.q0_branching).powi(2) - 4.0 * p.vq() * d.q0_branching;
        prop_assert!(gap.abs() <= 1e-10 * d.death_rate.powi(2));
    }

    #[test]
    fn chi_is_locally_constant(
        atoms in prop::collection::vec((0.0f64..=1.0, -2.0f64..2.0), 1..6),
        s in 0.0f64..1.0,
    ) {
        let nu = MeasureOnUnit::new(atoms.clone()).unwrap();
        let gap = atoms.iter().map(|(t, _)| t - s).filter(|d| *d > 0.0).fold(1.0 - s, f64::min);
        prop_assume!(gap > 1e-9 && atoms.iter().all(|(t, _)| *t != s));
        let here = chi_of_measure(&nu, s);
        prop_assert!((chi_of_measure(&nu, s + 0.5 * gap) - here).abs() < 1e-12);
        prop_assert_eq!(chi_of_measure(&nu, 1.0), 0.0);
    }

    #[test]
    fn linear_path_has_unit_slope_norm(a in -5.0f64..5.0, m in 1usize..200) {
        let f = PathSample::from_fn(m, |t| a * t).unwrap();
        prop_assert!((f.h1_seminorm() - a.abs()).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn point_steady_states_match_quadratic_roots(p in params(), frac in -1.0f64..0.95) {
        let (q, vq) = (p.death_rate(), p.vq());
        let d = derive_constants(&p);
        let t = frac * d.q0_super;
        let s = steady_state(&Problem::point(Model::Super, p), t, &SteadyOptions::default()).unwrap();
        let root = (q - (q * q - 4.0 * vq * t).sqrt()) / (2.0 * vq);
        prop_assert!((s.values[0] - root).abs() <= 1e-8 * (1.0 + root.abs()));
        let t = frac * d.q0_branching;
        let b = steady_state(&Problem::point(Model::Branching, p), t, &SteadyOptions::default()).unwrap();
        let r = ((q - t) - ((q - t).powi(2) - 4.0 * vq * t).sqrt()) / (2.0 * vq);
        prop_assert!((b.values[0] - r).abs() <= 1e-8 * (1.0 + r.abs()));
    }

    #[test]
    fn scalar_rate_is_nonnegative(p in params(), k in 0.0f64..3.0) {
        let c = SteadyCumulant::new(Problem::point(Model::Super, p));
        let x = k * p.h() / p.death_rate();
        let r = ldp_rate_scalar(&c, x).unwrap();
        prop_assert!(r.value >= 0.0);
    }

    #[test]
    fn log_mean_exp_shifts(z in prop::collection::vec(-30.0f64..30.0, 2..50), c in -100.0f64..100.0) {
        let (a, ess) = log_mean_exp(&z);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let (b, ess2) = log_mean_exp(&shifted);
        prop_assert!((b - a - c).abs() <= 1e-9 * (1.0 + c.abs()));
        prop_assert!(ess <= z.len() as f64 + 1e-9 && ess >= 1.0 - 1e-9);
        prop_assert!((ess - ess2).abs() <= 1e-6 * ess);
    }

    #[test]
    fn suprema_inequality_on_dyadic_paths(steps in prop::collection::vec(-1.0f64..1.0, 16)) {
        let mut v = vec![0.0];
        for s in &steps {
            v.push(v.last().unwrap() + s);
        }
        let sup = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let bound = 2.0 * (1..=4).map(|k| dyadic_l(&v, k)).sum::<f64>() + v[16].abs();
        prop_assert!(sup <= bound + 1e-12);
    }

    #[test]
    fn jackknife_variance_is_nonnegative(v in prop::collection::vec(-10.0f64..10.0, 4..60)) {
        let (_, se) = jackknife(v.len(), 10, &|idx: &[usize]| {
            let sub: Vec<f64> = idx.iter().map(|i| v[*i]).collect();
            variance(&sub)
        });
        prop_assert!(se >= 0.0);
    }

    #[test]
    fn normalisations_order(t in 1.5f64..1e4, alpha in 0.01f64..0.99) {
        let sqrt = Normalization::Sqrt.factor(t);
        let moderate = Normalization::Moderate { alpha }.factor(t);
        let linear = Normalization::Linear.factor(t);
        prop_assert!(sqrt < moderate && moderate < linear);
    }
}

#[test]
fn mdp_rate_is_quadratic_and_matches_clt() {
    let p = BranchingParams::new(1.0, 0.25, 1.0).unwrap();
    let phi = TestFunction::gaussian_bump(vec![0.0], 1.0, 1.0).unwrap();
    for motion in [MotionModel::degenerate(1), MotionModel::brownian(1.0, 1).unwrap()] {
        let forms = quadratic_forms(&motion, p.death_rate(), &phi, None).unwrap();
        for model in [Model::Branching, Model::Super] {
            let f = PathSample::from_fn(32, |t| (3.0 * t).sin()).unwrap();
            let g = PathSample::from_fn(32, |t| 2.0 * (3.0 * t).sin()).unwrap();
            let a = mdp_rate_path(model, &p, &forms, &f).unwrap().value;
            let b = mdp_rate_path(model, &p, &forms, &g).unwrap().value;
            assert!((b - 4.0 * a).abs() <= 1e-12 * b);
            let unit = PathSample::from_fn(8, |t| t).unwrap();
            let r = mdp_rate_path(model, &p, &forms, &unit).unwrap().value;
            let cov = clt_covariance(model, &p, 1.0, 1.0, &forms).unwrap();
            assert!((1.0 / r - 4.0 * cov).abs() <= 1e-12 * 4.0 * cov);
        }
    }
}

#[test]
fn lambda_is_additive_over_disjoint_levels() {
    let p = BranchingParams::new(1.0, 0.25, 1.0).unwrap();
    let prob = Problem::point(Model::Branching, p);
    let theta = 0.08;
    let whole = lambda_measure(&prob, &MeasureOnUnit::dirac(1.0, theta).unwrap()).unwrap();
    let first = lambda_measure(&prob, &MeasureOnUnit::dirac(0.5, theta).unwrap()).unwrap();
    let second = lambda_measure(&prob, &MeasureOnUnit::new(vec![(1.0, theta), (0.5, -theta)]).unwrap()).unwrap();
    assert!((first + second - whole).abs() < 1e-12);
    assert!((2.0 * first - whole).abs() < 1e-12);
}
