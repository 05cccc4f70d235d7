#![allow(dead_code)]

use mmlqg::linalg::{Mat, Vector};
use mmlqg::model::MinorType;
use mmlqg::{GameParameters64, MeanFieldCoefficients};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * (rng.random::<f64>() * 2.0 - 1.0))
}

/// Uniform entries bounded away from zero, so that any exact zero in an
/// assembled matrix comes from block placement.
pub fn nonzero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let x: f64 = rng.random::<f64>() + 0.5;
        if rng.random::<bool>() { x } else { -x }
    })
}

/// Shifts `a` left until its spectral abscissa is at most `-margin`.
pub fn make_hurwitz(a: DMatrix<f64>, margin: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let abscissa = a.clone().complex_eigenvalues().iter().map(|l| l.re).fold(f64::MIN, f64::max);
    if abscissa > -margin {
        a - DMatrix::identity(n, n) * (abscissa + margin)
    } else {
        a
    }
}

/// A random well-posed game: a Hurwitz major drift, stable-ish minor
/// drifts, weak couplings, full-rank noisy observations of own and major
/// states.
pub fn random_game(seed: u64, n: usize, k: usize) -> GameParameters64 {
    let mut r = rng(seed);
    let m = 1 + (r.random::<u32>() % 2) as usize;
    let eye = DMatrix::<f64>::identity(n, n);
    let p = 2 * n;
    let mut l1 = DMatrix::zeros(p, n);
    l1.view_mut((0, 0), (n, n)).copy_from(&eye);
    let mut l2 = DMatrix::zeros(p, n);
    l2.view_mut((n, 0), (n, n)).copy_from(&eye);
    let types = (0..k)
        .map(|_| MinorType {
            a: uniform(&mut r, n, n, 1.0) - &eye * 0.5,
            b: uniform(&mut r, n, m, 1.0) + DMatrix::from_element(n, m, 0.2),
            l1: l1.clone(),
            l2: l2.clone(),
        })
        .collect();
    let raw: Vec<f64> = (0..k).map(|_| 0.2 + r.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    GameParameters64 {
        a0: make_hurwitz(uniform(&mut r, n, n, 1.0) - &eye * 0.5, 0.2),
        b0: uniform(&mut r, n, m, 1.0) + DMatrix::from_element(n, m, 0.2),
        d0: &eye * 0.05,
        types,
        g: uniform(&mut r, n, n, 0.2),
        d: &eye * 0.05,
        q0: &eye * (0.5 + r.random::<f64>()),
        r0: DMatrix::identity(m, m),
        q: &eye * (0.5 + r.random::<f64>()),
        r: DMatrix::identity(m, m),
        h0: uniform(&mut r, n, n, 0.3),
        h1: uniform(&mut r, n, n, 0.3),
        h2: uniform(&mut r, n, n, 0.3),
        eta0: Vector::from_fn(n, |_, _| r.random::<f64>()),
        eta: Vector::from_fn(n, |_, _| r.random::<f64>()),
        rho: 0.2 + r.random::<f64>(),
        l0: eye.clone(),
        sigma_v0: &eye * 0.05,
        sigma_v: DMatrix::identity(p, p) * 0.05,
        pi: raw.iter().map(|x| x / total).collect(),
        sigma_init: DMatrix::zeros(n, n),
    }
}

/// Random mean field coefficients with every entry nonzero and the
/// block-diagonal pattern of the error-injection coefficient.
pub fn random_coefficients(seed: u64, n: usize, k: usize) -> MeanFieldCoefficients<f64> {
    let mut r = rng(seed);
    let nk = n * k;
    let d = 3 * n + 2 * n * k;
    let mut jbar = DMatrix::zeros(nk, d * k);
    for j in 0..k {
        jbar.view_mut((j * n, j * d), (n, d)).copy_from(&nonzero(&mut r, n, d));
    }
    MeanFieldCoefficients {
        abar: nonzero(&mut r, nk, nk),
        gbar: nonzero(&mut r, nk, n),
        hbar: nonzero(&mut r, nk, n),
        lbar: nonzero(&mut r, nk, nk),
        jbar,
        mbar: Vector::from_fn(nk, |_, _| r.random::<f64>() + 0.5),
    }
}

/// Game with every primitive entry nonzero, for block-placement checks.
pub fn dense_game(seed: u64, n: usize, k: usize) -> GameParameters64 {
    let mut g = random_game(seed, n, k);
    let mut r = rng(seed ^ 0xdead);
    let p = g.p();
    for ty in &mut g.types {
        ty.a = nonzero(&mut r, n, n);
        ty.b = nonzero(&mut r, n, g.b0.ncols());
        ty.l1 = nonzero(&mut r, p, n);
        ty.l2 = nonzero(&mut r, p, n);
    }
    g.a0 = nonzero(&mut r, n, n);
    g.b0 = nonzero(&mut r, n, g.b0.ncols());
    g.d0 = nonzero(&mut r, n, n);
    g.d = nonzero(&mut r, n, n);
    g.g = nonzero(&mut r, n, n);
    g.l0 = nonzero(&mut r, n, n);
    g
}
