use mmlqg::linalg::{is_hurwitz, min_sym_eigenvalue, Mat, Vector};
use mmlqg::model::{ExtendedSystem, Role};
use mmlqg::riccati::*;
use mmlqg::{solve_fixed_point, FixedPointOptions, GameParameters64, MfgError};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn care(a: Mat<f64>, b: Mat<f64>, r: Mat<f64>, q: Mat<f64>, rho: f64) -> CareSolution<f64> {
    let p = DiscountedCareProblem::new(a, b, r, q, rho).unwrap();
    solve_discounted_care(&p, 1e-9, 50).unwrap()
}

/// Residual bound proportional to the size of the terms of the equation.
fn scaled_tolerance(p: &DiscountedCareProblem<f64>, pi: &Mat<f64>) -> f64 {
    let s = &p.b * p.r.clone().try_inverse().unwrap() * p.b.transpose();
    let scale = p.q.norm() + 2.0 * (pi * &p.a).norm() + (pi * s * pi).norm() + p.rho * pi.norm();
    1e-12 * (1.0 + scale)
}

fn care_scaled(a: Mat<f64>, b: Mat<f64>, r: Mat<f64>, q: Mat<f64>, rho: f64) -> CareSolution<f64> {
    let p = DiscountedCareProblem::new(a, b, r, q, rho).unwrap();
    let rough = solve_discounted_care(&p, f64::INFINITY, 0).unwrap();
    let s = solve_discounted_care(&p, scaled_tolerance(&p, &rough.pi), 50).unwrap();
    assert!(s.residual_norm <= scaled_tolerance(&p, &s.pi));
    s
}

/// Integrates `dΠ/dτ = ΠÂ + ÂᵀΠ − ΠBR⁻¹BᵀΠ + Q` with `Â = A − ρ/2·I` from
/// `Π = 0` by classical RK4 until the increment is negligible.
fn riccati_ode_oracle(a: &Mat<f64>, b: &Mat<f64>, r: &Mat<f64>, q: &Mat<f64>, rho: f64) -> Mat<f64> {
    let n = a.nrows();
    let ah = a - DMatrix::identity(n, n) * (rho / 2.0);
    let s = b * r.clone().try_inverse().unwrap() * b.transpose();
    let f = |p: &Mat<f64>| p * &ah + ah.transpose() * p - p * &s * p + q;
    let mut p = DMatrix::zeros(n, n);
    let h = 1e-3;
    for i in 0..2_000_000 {
        let k1 = f(&p);
        let k2 = f(&(&p + &k1 * (h / 2.0)));
        let k3 = f(&(&p + &k2 * (h / 2.0)));
        let k4 = f(&(&p + &k3 * h));
        let dp = (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        p += &dp;
        if i > 1000 && dp.norm() < 1e-15 * (1.0 + p.norm()) {
            break;
        }
    }
    p
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * (rng.random::<f64>() * 2.0 - 1.0))
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Mat<f64> {
    let g = random_matrix(rng, n, n, 1.0);
    &g * g.transpose() + DMatrix::identity(n, n) * floor
}

#[test]
fn scalar_undiscounted_root() {
    let s = care(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), DMatrix::identity(1, 1), DMatrix::identity(1, 1), 0.0);
    assert!((s.pi[(0, 0)] - 1.0).abs() < 1e-12);
    assert!(s.stabilizing);
}

#[test]
fn zero_weight_zero_solution() {
    let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -2.0]);
    let s = care(a, DMatrix::from_row_slice(2, 1, &[1.0, 0.0]), DMatrix::identity(1, 1), DMatrix::zeros(2, 2), 0.5);
    assert!(s.pi.amax() < 1e-12);
}

#[test]
fn scalar_discounted_matches_ode_oracle() {
    let one = DMatrix::identity(1, 1);
    let s = care(DMatrix::zeros(1, 1), one.clone(), one.clone(), one.clone(), 0.9);
    let oracle = riccati_ode_oracle(&DMatrix::zeros(1, 1), &one, &one, &one, 0.9);
    let closed_form = (-0.9 + (0.81f64 + 4.0).sqrt()) / 2.0;
    assert!((s.pi[(0, 0)] - oracle[(0, 0)]).abs() < 1e-10);
    assert!((s.pi[(0, 0)] - closed_form).abs() < 1e-12);
}

#[test]
fn scalar_f32_runs_at_loose_tolerance() {
    let one = DMatrix::<f32>::identity(1, 1);
    let p = DiscountedCareProblem::new(DMatrix::zeros(1, 1), one.clone(), one.clone(), one, 0.9f32).unwrap();
    let s = solve_discounted_care(&p, 1e-5, 50).unwrap();
    let closed_form = (-0.9f32 + 4.81f32.sqrt()) / 2.0;
    assert!((s.pi[(0, 0)] - closed_form).abs() < 1e-5);
}

#[test]
fn unstabilizable_pair_rejected() {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
    let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
    let p = DiscountedCareProblem::new(a, b, DMatrix::identity(1, 1), DMatrix::identity(2, 2), 0.0).unwrap();
    assert!(matches!(solve_discounted_care(&p, 1e-10, 50), Err(MfgError::NonStabilizable(_))));
}

#[test]
fn dimension_mismatch_reported() {
    let r = DiscountedCareProblem::new(
        DMatrix::<f64>::zeros(2, 2),
        DMatrix::zeros(3, 1),
        DMatrix::identity(1, 1),
        DMatrix::identity(2, 2),
        0.0,
    );
    assert!(matches!(r, Err(MfgError::DimensionMismatch { .. })));
}

#[test]
fn offset_examples() {
    let f = DMatrix::from_element(1, 1, -1.0);
    let s = solve_offset(&f, &DMatrix::identity(1, 1), &Vector::from_element(1, 1.0), &Vector::zeros(1), 0.9).unwrap();
    assert!((s[0] - 1.0_f64 / 1.9).abs() < 1e-15);
    let z = solve_offset(&f, &DMatrix::identity(1, 1), &Vector::zeros(1), &Vector::zeros(1), 0.9).unwrap();
    assert_eq!(z[0], 0.0);
    let sing = solve_offset(&DMatrix::from_element(1, 1, 0.9), &DMatrix::identity(1, 1), &Vector::zeros(1), &Vector::zeros(1), 0.9);
    assert!(matches!(sing, Err(MfgError::SingularSystem { .. })));
}

#[test]
fn scenario_minor_offset_matches_ode_oracle() {
    let p = GameParameters64::reference_scenario();
    let sol = solve_fixed_point(&p, &FixedPointOptions::default(), None).unwrap();
    let coeffs = &sol.coefficients;
    let major = mmlqg::model::build_major_extended(&p, coeffs).unwrap();
    let k0 = DMatrix::zeros(major.dim(), p.p0());
    let cl = mmlqg::model::build_major_closed_loop(&p, coeffs, &sol.pi0, &sol.s0, &k0).unwrap();
    let minor = mmlqg::model::build_minor_extended(&p, 0, coeffs, &cl).unwrap();
    let rinv = p.r.clone().try_inverse().unwrap();
    let pik = &sol.pik[0];
    let f = &minor.drift - &minor.control * &rinv * minor.control.transpose() * pik;
    let eta_bar = p.minor_eta_bar();
    let source = pik * &minor.offset - &eta_bar;
    let mut s = Vector::zeros(f.nrows());
    let h = 1e-3;
    let g = |s: &Vector<f64>| f.transpose() * s + &source - s * p.rho;
    for _ in 0..200_000 {
        let k1 = g(&s);
        let k2 = g(&(&s + &k1 * (h / 2.0)));
        let k3 = g(&(&s + &k2 * (h / 2.0)));
        let k4 = g(&(&s + &k3 * h));
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    assert!((&s - &sol.sk[0]).amax() < 1e-8, "{} vs {}", s, sol.sk[0]);
}

fn scalar_system(a: f64, l: f64, rv: f64, q: f64) -> ExtendedSystem<f64> {
    ExtendedSystem {
        role: Role::Major,
        drift: DMatrix::from_element(1, 1, a),
        control: DMatrix::zeros(1, 0),
        offset: Vector::zeros(1),
        diffusion: DMatrix::from_element(1, 1, q.sqrt()),
        noise_weight: DMatrix::identity(1, 1),
        error_injection: DMatrix::zeros(1, 1),
        observation: DMatrix::from_element(1, 1, l),
        measurement_noise_cov: DMatrix::from_element(1, 1, rv),
    }
}

fn zero_error_system() -> ExtendedSystem<f64> {
    ExtendedSystem {
        role: Role::ErrorStack,
        drift: DMatrix::from_element(1, 1, -1.0),
        control: DMatrix::zeros(1, 0),
        offset: Vector::zeros(1),
        diffusion: DMatrix::zeros(1, 1),
        noise_weight: DMatrix::zeros(1, 1),
        error_injection: DMatrix::zeros(1, 1),
        observation: DMatrix::zeros(0, 1),
        measurement_noise_cov: DMatrix::zeros(0, 0),
    }
}

#[test]
fn decoupled_scalar_filter_reaches_quadratic_root() {
    let (a, l, rv, q) = (0.4, 2.0, 0.5, 0.3);
    let major = scalar_system(a, l, rv, q);
    let (v0, vb) = integrate_coupled_covariances(
        &major,
        &zero_error_system(),
        &DMatrix::zeros(1, 1),
        &DMatrix::zeros(1, 1),
        0.001,
        20.0,
    )
    .unwrap();
    let root = (a * rv + (a * a * rv * rv + q * rv * l * l).sqrt()) / (l * l);
    assert!((v0.last()[(0, 0)] - root).abs() < 1e-9);
    assert!(vb.values.iter().all(|v| v[(0, 0)] == 0.0));
    let stat = solve_filter_are(&major.drift, &major.observation, &major.measurement_noise_cov, &major.process_forcing()).unwrap();
    assert!((stat[(0, 0)] - root).abs() < 1e-12);
}

#[test]
fn grid_mismatch_rejected() {
    let major = scalar_system(-1.0, 1.0, 1.0, 1.0);
    let vb = CovarianceTrajectory::constant(&DMatrix::zeros(1, 1), 5, 0.1);
    let r = integrate_minor_filter_riccati(&major, &vb, &DMatrix::zeros(1, 1), 0.1, 1.0);
    assert!(matches!(r, Err(MfgError::GridMismatch(_))));
    assert!(matches!(step_count(0.3, 1.0), Err(MfgError::GridMismatch(_))));
}

#[test]
fn zero_noise_keeps_minor_covariance_zero() {
    let sys = scalar_system(-0.5, 1.0, 1.0, 0.0);
    let vb = CovarianceTrajectory::constant(&DMatrix::zeros(1, 1), 100, 0.01);
    let v = integrate_minor_filter_riccati(&sys, &vb, &DMatrix::zeros(1, 1), 0.01, 1.0).unwrap();
    assert!(v.values.iter().all(|m| m[(0, 0)] == 0.0));
}

#[test]
fn scenario_covariances_converge_and_refine() {
    let p = GameParameters64::reference_scenario();
    let sol = solve_fixed_point(&p, &FixedPointOptions::default(), None).unwrap();
    let coarse = integrate_filter_covariances(&p, &sol, 0.01, 25.0).unwrap();
    let fine = integrate_filter_covariances(&p, &sol, 0.001, 25.0).unwrap();
    for (i, v) in coarse.v0.values.iter().enumerate() {
        assert!((v - v.transpose()).amax() <= 1e-9);
        assert!(min_sym_eigenvalue(v) >= -1e-9);
        let fv = &fine.v0.values[i * 10];
        assert!((v - fv).norm() < 1e-5);
        let t = i as f64 * 0.01;
        if t >= 15.0 && i + 100 < coarse.v0.len() {
            assert!((&coarse.v0.values[i + 100] - v).norm() < 1e-6);
        }
    }
    for (c, f) in coarse.vk[0].values.iter().zip(fine.vk[0].values.iter().step_by(10)) {
        assert!((c - f).norm() < 1e-5);
        assert!(min_sym_eigenvalue(c) >= -1e-9);
    }
    let st = stationary_covariances(&p, &sol, 1e-13, 500).unwrap();
    assert!((coarse.vk[0].last() - &st.vk[0]).norm() < 1e-6);
    assert!((coarse.v0.last() - &st.v0).norm() < 1e-6);
}

/// Random instances with a controllability margin, so that the stabilizing
/// solution stays small enough for an absolute residual bound to be
/// attainable in double precision.
fn random_stabilizable(seed: u64, n: usize, m: usize) -> (Mat<f64>, Mat<f64>, Mat<f64>, Mat<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let a = random_matrix(&mut rng, n, n, 1.5);
        let b = random_matrix(&mut rng, n, m, 1.0);
        let r = random_spd(&mut rng, m, 0.5);
        let q = random_spd(&mut rng, n, 0.1);
        let rho = rng.random::<f64>() * 1.5;
        let mut ctrb = DMatrix::zeros(n, n * m);
        let mut power = b.clone();
        for j in 0..n {
            ctrb.view_mut((0, j * m), (n, m)).copy_from(&power);
            power = &a * power;
        }
        let sv = ctrb.svd(false, false).singular_values;
        if sv.min() >= 0.05 * sv.max().max(1.0) {
            return (a, b, r, q, rho);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_care_matches_ode_oracle(seed in any::<u64>(), n in 1usize..=4, m in 1usize..=2) {
        let (a, b, r, q, rho) = random_stabilizable(seed, n, m);
        let prob = DiscountedCareProblem::new(a.clone(), b.clone(), r.clone(), q.clone(), rho).unwrap();
        let s = care_scaled(a.clone(), b.clone(), r.clone(), q.clone(), rho);
        prop_assert!(care_residual(&prob, &s.pi).unwrap() <= scaled_tolerance(&prob, &s.pi));
        prop_assert!((&s.pi - s.pi.transpose()).amax() <= 1e-10);
        prop_assert!(s.stabilizing);
        let shifted = &a - DMatrix::identity(n, n) * (rho / 2.0) - &b * r.clone().try_inverse().unwrap() * b.transpose() * &s.pi;
        prop_assert!(is_hurwitz(&shifted));
        let oracle = riccati_ode_oracle(&a, &b, &r, &q, rho);
        prop_assert!((&s.pi - &oracle).amax() <= 1e-7 * (1.0 + oracle.amax()));
    }

    #[test]
    fn discount_equals_shifted_drift(seed in any::<u64>(), n in 1usize..=4) {
        let (a, b, r, q, rho) = random_stabilizable(seed, n, 1);
        let s1 = care_scaled(a.clone(), b.clone(), r.clone(), q.clone(), rho);
        let s2 = care_scaled(&a - DMatrix::identity(n, n) * (rho / 2.0), b, r, q, 0.0);
        prop_assert!((&s1.pi - &s2.pi).amax() <= 1e-9 * (1.0 + s1.pi.amax()));
    }

    #[test]
    fn larger_weight_never_shrinks_solution(seed in any::<u64>(), big in proptest::bool::ANY) {
        let n = if big { 4 } else { 2 };
        let (a, b, r, q, rho) = random_stabilizable(seed, n, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5555);
        let extra = random_spd(&mut rng, n, 0.0);
        let s1 = care_scaled(a.clone(), b.clone(), r.clone(), q.clone(), rho);
        let s2 = care_scaled(a, b, r, &q + extra, rho);
        prop_assert!(min_sym_eigenvalue(&(&s2.pi - &s1.pi)) >= -1e-9 * (1.0 + s2.pi.amax()));
    }

    #[test]
    fn offset_residual_small(seed in any::<u64>(), n in 1usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_matrix(&mut rng, n, n, 1.0) - DMatrix::identity(n, n) * 3.0;
        let pi = random_spd(&mut rng, n, 0.1);
        let m = Vector::from_fn(n, |_, _| rng.random::<f64>());
        let eta = Vector::from_fn(n, |_, _| rng.random::<f64>());
        let rho = 0.9;
        let s = solve_offset(&f, &pi, &m, &eta, rho).unwrap();
        let res = &s * rho - f.transpose() * &s - &pi * &m + &eta;
        prop_assert!(res.norm() <= 1e-10 * (1.0 + s.norm()));
    }
}
