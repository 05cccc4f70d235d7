mod common;

use common::{dense_game, random_coefficients, random_game};
use mmlqg::linalg::{is_hurwitz, Mat};
use mmlqg::model::*;
use mmlqg::riccati::{filter_gain, stationary_covariances};
use mmlqg::{solve_fixed_point, FixedPointOptions, GameParameters64, MfgError};
use nalgebra::{Complex, DMatrix};
use proptest::prelude::*;

/// Half-open row and column ranges of a block.
type Block = (std::ops::Range<usize>, std::ops::Range<usize>);

fn assert_zero(m: &Mat<f64>, (rows, cols): Block, what: &str) {
    for i in rows.clone() {
        for j in cols.clone() {
            assert_eq!(m[(i, j)], 0.0, "{what}: entry ({i},{j}) should be zero");
        }
    }
}

fn assert_block(m: &Mat<f64>, (rows, cols): Block, expected: &Mat<f64>, what: &str) {
    let got = m.view((rows.start, cols.start), (rows.len(), cols.len())).into_owned();
    assert_eq!(&got, expected, "{what}");
}

/// Every zero block of each assembled matrix, written out from the block
/// formulas independently of the builders.
fn check_block_table(n: usize, k: usize, seed: u64) {
    let p = dense_game(seed, n, k);
    let mf = random_coefficients(seed ^ 7, n, k);
    let nk = n * k;
    let nz = n + nk;
    let d = 3 * n + 2 * nk;
    let r = p.r_dim();
    let m = p.m();
    let p0 = p.p0();

    let major = build_major_extended(&p, &mf).unwrap();
    assert_block(&major.drift, (0..n, 0..n), &p.a0, "major drift A0");
    assert_zero(&major.drift, (0..n, n..nz), "major drift top-right");
    assert_block(&major.drift, (n..nz, 0..n), &(&mf.gbar + &mf.hbar), "major drift Gbar+Hbar");
    assert_block(&major.drift, (n..nz, n..nz), &(&mf.abar + &mf.lbar), "major drift Abar+Lbar");
    assert_block(&major.control, (0..n, 0..m), &p.b0, "major control");
    assert_zero(&major.control, (n..nz, 0..m), "major control lower");
    assert!(major.offset.rows(0, n).iter().all(|&x| x == 0.0));
    assert_eq!(major.offset.rows(n, nk).into_owned(), mf.mbar);
    assert_eq!(major.diffusion.shape(), (nz, r + r * k));
    assert_block(&major.diffusion, (0..n, 0..r), &p.d0, "major diffusion D0");
    assert_zero(&major.diffusion, (0..n, r..r + r * k), "major diffusion top-right");
    assert_zero(&major.diffusion, (n..nz, 0..r + r * k), "major diffusion lower");
    assert_zero(&major.error_injection, (0..n, 0..d * k), "major error injection top");
    assert_block(&major.error_injection, (n..nz, 0..d * k), &mf.jbar, "major error injection Jbar");
    assert_block(&major.observation, (0..p0, 0..n), &p.l0, "major observation");
    assert_zero(&major.observation, (0..p0, n..nz), "major observation padding");

    let k0 = common::nonzero(&mut common::rng(seed ^ 11), nz, p0);
    let pi0 = common::nonzero(&mut common::rng(seed ^ 13), nz, nz);
    let s0 = mmlqg::Vector::from_element(nz, 0.3);
    let cl = build_major_closed_loop(&p, &mf, &pi0, &s0, &k0).unwrap();
    assert_eq!(cl.drift.shape(), (2 * nz, 2 * nz));
    assert_block(&cl.drift, (0..n, 0..n), &p.a0, "closed loop A0");
    assert_zero(&cl.drift, (0..n, n..nz), "closed loop top zero");
    assert_block(&cl.drift, (n..nz, 0..n), &mf.gbar, "closed loop Gbar");
    assert_block(&cl.drift, (n..nz, n..nz), &mf.abar, "closed loop Abar");
    let r0inv = p.r0.clone().try_inverse().unwrap();
    let bb = DMatrix::from_fn(nz, m, |i, j| if i < n { p.b0[(i, j)] } else { 0.0 });
    let fb = -&p.b0 * &r0inv * bb.transpose() * &pi0;
    assert!((cl.drift.view((0, nz), (n, nz)) - &fb).amax() < 1e-14, "closed loop feedback row");
    assert_block(&cl.drift, (n..nz, nz..nz + n), &mf.hbar, "closed loop Hbar");
    assert_block(&cl.drift, (n..nz, nz + n..2 * nz), &mf.lbar, "closed loop Lbar");
    assert_zero(&cl.drift, (nz..2 * nz, 0..nz), "closed loop lower-left");
    let lr = &major.drift - &bb * &r0inv * bb.transpose() * &pi0;
    assert!((cl.drift.view((nz, nz), (nz, nz)) - &lr).amax() < 1e-14, "closed loop lower-right");
    assert_zero(&cl.error_injection, (nz..2 * nz, 0..d * k), "closed loop error injection lower");
    assert_block(&cl.error_injection, (0..nz, 0..d * k), &major.error_injection, "closed loop error injection upper");
    assert_eq!(cl.diffusion.shape(), (2 * nz, r + r * k + p0));
    assert_zero(&cl.diffusion, (0..nz, r + r * k..r + r * k + p0), "closed loop diffusion top-right");
    assert_zero(&cl.diffusion, (nz..2 * nz, 0..r + r * k), "closed loop diffusion lower-left");
    assert_block(&cl.diffusion, (nz..2 * nz, r + r * k..r + r * k + p0), &k0, "closed loop diffusion K0");
    assert_eq!(cl.offset.rows(0, nz), cl.offset.rows(nz, nz));

    let mut minors = Vec::new();
    for kk in 0..k {
        let sys = build_minor_extended(&p, kk, &mf, &cl).unwrap();
        let ty = &p.types[kk];
        assert_eq!(sys.dim(), d);
        assert_block(&sys.drift, (0..n, 0..n), &ty.a, "minor drift A_k");
        assert_block(&sys.drift, (0..n, n..2 * n), &p.g, "minor drift G on the major state");
        assert_zero(&sys.drift, (0..n, 2 * n..d), "minor drift first row padding");
        assert_zero(&sys.drift, (n..d, 0..n), "minor drift lower-left");
        assert_block(&sys.drift, (n..d, n..d), &cl.drift, "minor drift embeds closed loop");
        assert_block(&sys.control, (0..n, 0..m), &ty.b, "minor control");
        assert_zero(&sys.control, (n..d, 0..m), "minor control lower");
        assert!(sys.offset.rows(0, n).iter().all(|&x| x == 0.0));
        assert_eq!(sys.offset.rows(n, d - n).into_owned(), cl.offset);
        assert_zero(&sys.error_injection, (0..n, 0..d * k), "minor error injection top");
        assert_block(&sys.error_injection, (n..d, 0..d * k), &cl.error_injection, "minor error injection");
        let pp = p.p();
        assert_block(&sys.observation, (0..pp, 0..n), &ty.l1, "minor observation l1");
        assert_block(&sys.observation, (0..pp, n..2 * n), &ty.l2, "minor observation l2");
        assert_zero(&sys.observation, (0..pp, 2 * n..d), "minor observation padding");
        let wd = 2 * r + r * k + p0;
        assert_eq!(sys.diffusion.shape(), (d, wd));
        assert_block(&sys.diffusion, (0..n, 0..r), &p.d, "minor diffusion D");
        assert_zero(&sys.diffusion, (0..n, r..wd), "minor diffusion top-right");
        assert_zero(&sys.diffusion, (n..d, 0..r), "own noise never drives other blocks");
        assert_block(&sys.diffusion, (n..d, r..wd), &cl.diffusion, "minor diffusion embeds closed loop");
        minors.push(sys);
    }

    let gains: Vec<Mat<f64>> = (0..k)
        .map(|j| common::nonzero(&mut common::rng(seed ^ (100 + j as u64)), d, p.p()))
        .collect();
    let v0 = DMatrix::identity(nz, nz);
    let stack = build_error_stack(&p, &minors, &gains, &v0).unwrap();
    assert_eq!(stack.drift.shape(), (d * k, d * k));
    for a in 0..k {
        for b in 0..k {
            let blk = stack.drift.view((a * d, b * d), (d, d)).into_owned();
            let mut expected = minors[a].error_injection.view((0, b * d), (d, d)).into_owned();
            if a == b {
                expected += &minors[a].drift - &gains[a] * &minors[a].observation;
            }
            assert!((blk - expected).amax() < 1e-13, "error stack block ({a},{b})");
        }
        assert_block(&stack.diffusion, (a * d..(a + 1) * d, 0..stack.diffusion.ncols()), &minors[0].diffusion, "error stack diffusion copy");
    }
}

#[test]
fn block_table_single_type() {
    check_block_table(2, 1, 1);
}

#[test]
fn block_table_two_types() {
    check_block_table(2, 2, 2);
    check_block_table(3, 2, 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn block_table_random(n in 1usize..=3, k in 1usize..=3, seed in any::<u64>()) {
        check_block_table(n, k, seed);
    }

    #[test]
    fn dimension_formulas(n in 1usize..=4, k in 1usize..=3, seed in any::<u64>()) {
        let p = random_game(seed, n, k);
        let mf = random_coefficients(seed, n, k);
        prop_assert_eq!(p.major_dim(), n + n * k);
        prop_assert_eq!(p.minor_dim(), 3 * n + 2 * n * k);
        let major = build_major_extended(&p, &mf).unwrap();
        prop_assert_eq!(major.dim(), n + n * k);
        let nz = major.dim();
        let cl = build_major_closed_loop(&p, &mf, &DMatrix::zeros(nz, nz), &mmlqg::Vector::zeros(nz), &DMatrix::zeros(nz, p.p0())).unwrap();
        prop_assert_eq!(cl.drift.nrows(), 2 * (n + n * k));
        let minors: Vec<_> = (0..k).map(|j| build_minor_extended(&p, j, &mf, &cl).unwrap()).collect();
        prop_assert!(minors.iter().all(|s| s.dim() == 3 * n + 2 * n * k));
        let gains: Vec<Mat<f64>> = (0..k).map(|_| DMatrix::zeros(p.minor_dim(), p.p())).collect();
        let stack = build_error_stack(&p, &minors, &gains, &DMatrix::zeros(nz, nz)).unwrap();
        prop_assert_eq!(stack.dim(), (3 * n + 2 * n * k) * k);
    }

    #[test]
    fn selectors_extract_blocks(n in 1usize..=3, k in 1usize..=3) {
        let sel = SelectorMatrices::<f64>::new(n, k);
        let d = 3 * n + 2 * n * k;
        let stacked = mmlqg::Vector::from_fn(d * k, |i, _| i as f64 + 1.0);
        for j in 0..k {
            let out = &sel.e_tilde[j] * &stacked;
            prop_assert_eq!(out, stacked.rows(j * d, d).into_owned());
            let short = mmlqg::Vector::from_fn(n * k, |i, _| i as f64);
            prop_assert_eq!(&sel.e_bar[j] * &short, short.rows(j * n, n).into_owned());
            prop_assert_eq!(sel.e_tilde[j].iter().filter(|&&x| x != 0.0).count(), d);
        }
        let dd = DMatrix::from_fn(d, 3, |i, j| (i * 3 + j) as f64);
        let stackd = &sel.one_tilde * &dd;
        for j in 0..k {
            prop_assert_eq!(stackd.view((j * d, 0), (d, 3)).into_owned(), dd.clone());
        }
    }
}

#[test]
fn trivial_major_blocks_with_zero_coefficients() {
    let p = GameParameters64::reference_scenario();
    let mf = mmlqg::MeanFieldCoefficients::zeros(2, 1);
    let major = build_major_extended(&p, &mf).unwrap();
    let mut expected = DMatrix::zeros(4, 4);
    expected.view_mut((0, 0), (2, 2)).copy_from(&p.a0);
    assert_eq!(major.drift, expected);
    let cl = build_major_closed_loop(&p, &mf, &DMatrix::zeros(4, 4), &mmlqg::Vector::zeros(4), &DMatrix::zeros(4, 2)).unwrap();
    assert_eq!(cl.offset.amax(), 0.0);
}

fn independent_pbh(a: &Mat<f64>, b: &Mat<f64>, only_unstable: bool) -> bool {
    let n = a.nrows();
    let eig = a.clone().complex_eigenvalues();
    eig.iter().filter(|l| !only_unstable || l.re >= -1e-8).all(|&lam| {
        let mut m = DMatrix::<Complex<f64>>::zeros(n, n + b.ncols());
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = Complex::new(a[(i, j)], 0.0) - if i == j { lam } else { Complex::new(0.0, 0.0) };
            }
            for j in 0..b.ncols() {
                m[(i, n + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        let sv = m.svd(false, false).singular_values;
        let tol = 1e-8 * sv[0].max(1.0);
        sv.iter().filter(|&&s| s > tol).count() == n
    })
}

#[test]
fn scenario_passes_every_checkable_assumption() {
    let p = GameParameters64::reference_scenario();
    let rep = validate(&p).unwrap();
    assert!(rep.all_passed(), "{rep}");
    assert!(independent_pbh(&p.a0, &p.b0, true));
    assert!(independent_pbh(&p.types[0].a, &p.types[0].b, true));
    assert!(independent_pbh(&p.a0.transpose(), &p.l0.transpose(), true));

    let sol = solve_fixed_point(&p, &FixedPointOptions::default(), None).unwrap();
    let st = stationary_covariances(&p, &sol, 1e-13, 500).unwrap();
    let major = build_major_extended(&p, &sol.coefficients).unwrap();
    let k0 = filter_gain(&st.v0, &major.observation, &major.measurement_noise_cov);
    let cl = build_major_closed_loop(&p, &sol.coefficients, &sol.pi0, &sol.s0, &k0).unwrap();
    let minor = build_minor_extended(&p, 0, &sol.coefficients, &cl).unwrap();
    let kk = filter_gain(&st.vk[0], &minor.observation, &minor.measurement_noise_cov);
    let rep2 = validate_solution(&p, &sol, &k0, std::slice::from_ref(&kk), &st.v0).unwrap();
    assert!(rep2.blocking_failures().is_empty(), "{rep2}");
    assert!(independent_pbh(&major.drift.transpose(), &major.observation.transpose(), true));

    let lower_right = cl.drift.view((4, 4), (4, 4)).into_owned() - DMatrix::identity(4, 4) * (p.rho / 2.0);
    assert!(is_hurwitz(&lower_right));
    let stack = build_error_stack(&p, &[minor], &[kk], &st.v0).unwrap();
    assert!(is_hurwitz(&stack.drift));

    // With G = 0 the averaged own-state error receives no common noise, so
    // the literal controllability test fails; both implementations agree.
    let w = stack.noise_weight.clone().symmetric_eigen();
    let root = DMatrix::from_diagonal(&w.eigenvalues.map(|x| x.max(0.0).sqrt()));
    let qt = &stack.diffusion * &w.eigenvectors * root * w.eigenvectors.transpose();
    let oracle = independent_pbh(&stack.drift, &qt, false);
    let ours = rep2.checks.iter().find(|c| c.name.contains("controllable")).unwrap();
    assert!(!oracle);
    assert!(matches!(ours.status, mmlqg::CheckStatus::Fail(_)));
    assert!(!ours.blocking);
}

#[test]
fn failing_assumptions_are_named() {
    let mut p = GameParameters64::reference_scenario();
    p.r0 = DMatrix::zeros(1, 1);
    let rep = validate(&p).unwrap();
    let names: Vec<_> = rep.failures().iter().map(|c| c.name.clone()).collect();
    assert_eq!(names.len(), 1);
    assert!(names[0].contains("R0"));

    let mut p = GameParameters64::reference_scenario();
    p.types.push(p.types[0].clone());
    p.pi = vec![0.5, 0.6];
    let rep = validate(&p).unwrap();
    assert!(rep.failures().iter().any(|c| c.name.contains("simplex")));
}

#[test]
fn dimension_errors_name_the_field() {
    let mut p = GameParameters64::reference_scenario();
    p.h1 = DMatrix::zeros(3, 2);
    match validate(&p) {
        Err(MfgError::DimensionMismatch { field, .. }) => assert_eq!(field, "H1"),
        other => panic!("unexpected {other:?}"),
    }
    let mut p = GameParameters64::reference_scenario();
    p.types[0].b = DMatrix::zeros(2, 3);
    assert!(matches!(validate(&p), Err(MfgError::DimensionMismatch { .. })));
}

#[test]
fn pbh_tests_on_known_pairs() {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
    assert!(is_stabilizable(&a, &DMatrix::from_row_slice(2, 1, &[1.0, 0.0])));
    assert!(!is_stabilizable(&a, &DMatrix::from_row_slice(2, 1, &[0.0, 1.0])));
    assert!(!is_controllable(&a, &DMatrix::from_row_slice(2, 1, &[1.0, 0.0])));
    assert!(is_controllable(&a, &DMatrix::from_row_slice(2, 1, &[1.0, 1.0])));
    assert!(is_detectable(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), &a));
}
