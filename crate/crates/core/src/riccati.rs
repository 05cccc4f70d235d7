//! Discounted algebraic Riccati equations, the linear offset equation, and
//! the coupled filter Riccati / Lyapunov differential equations.

use crate::consistency::MeanFieldSolution;
use crate::error::{MfgError, Result};
use crate::linalg::{
    self, check_shape, check_square, condition_number, eye, is_hurwitz, max_abs,
    min_sym_eigenvalue, psd_pseudo_inverse, set_block, solve_lyapunov, spd_inverse, symmetrize,
    vstack, zeros, Mat, Vector,
};
use crate::model::{
    self, build_major_closed_loop, build_major_extended, build_minor_extended, error_noise_weight,
    minor_diffusion, ExtendedSystem, GameParameters, SelectorMatrices,
};
use crate::scalar::{lit, to_f64, Real};

/// `ρΠ = ΠA + AᵀΠ − ΠBR⁻¹BᵀΠ + Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscountedCareProblem<T: Real> {
    pub a: Mat<T>,
    pub b: Mat<T>,
    pub r: Mat<T>,
    pub q: Mat<T>,
    pub rho: T,
}

impl<T: Real> DiscountedCareProblem<T> {
    pub fn new(a: Mat<T>, b: Mat<T>, r: Mat<T>, q: Mat<T>, rho: T) -> Result<Self> {
        let p = DiscountedCareProblem { a, b, r, q, rho };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let n = check_square(&self.a, "A")?;
        let m = self.b.ncols();
        check_shape(&self.b, n, m, "B")?;
        check_shape(&self.r, m, m, "R")?;
        check_shape(&self.q, n, n, "Q")?;
        if self.r.clone().cholesky().is_none() || min_sym_eigenvalue(&self.r) <= T::zero() {
            return Err(MfgError::invalid("R", "not positive definite"));
        }
        let tol = (lit::<T>(1e4) * T::default_epsilon()).max(lit(1e-10)) * (T::one() + max_abs(&self.q));
        if linalg::asymmetry(&self.q) > tol || min_sym_eigenvalue(&self.q) < -tol
        {
            return Err(MfgError::invalid("Q", "not symmetric positive semidefinite"));
        }
        if !(self.rho >= T::zero()) {
            return Err(MfgError::invalid("rho", "must be nonnegative"));
        }
        Ok(())
    }

    /// `A − (ρ/2)I`.
    pub fn shifted_drift(&self) -> Mat<T> {
        &self.a - eye::<T>(self.a.nrows()) * (self.rho * lit::<T>(0.5))
    }

    fn control_gramian(&self) -> Result<Mat<T>> {
        Ok(&self.b * spd_inverse(&self.r, "R")? * self.b.transpose())
    }

    /// Closed-loop drift `A − BR⁻¹BᵀΠ` (unshifted).
    pub fn closed_loop(&self, pi: &Mat<T>) -> Result<Mat<T>> {
        Ok(&self.a - self.control_gramian()? * pi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CareSolution<T: Real> {
    pub pi: Mat<T>,
    pub residual_norm: T,
    pub stabilizing: bool,
}

/// Frobenius norm of `ρΠ − ΠA − AᵀΠ + ΠBR⁻¹BᵀΠ − Q`.
pub fn care_residual<T: Real>(problem: &DiscountedCareProblem<T>, pi: &Mat<T>) -> Result<T> {
    Ok(care_residual_matrix(problem, pi)?.norm())
}

fn care_residual_matrix<T: Real>(problem: &DiscountedCareProblem<T>, pi: &Mat<T>) -> Result<Mat<T>> {
    let s = problem.control_gramian()?;
    Ok(pi * problem.rho - pi * &problem.a - problem.a.transpose() * pi + pi * s * pi - &problem.q)
}

const NEWTON_STALL_LIMIT: usize = 3;

/// Stabilizing solution of the discounted CARE.
///
/// The initial guess comes from the stable invariant subspace of the shifted
/// Hamiltonian (through its matrix sign); Newton steps on the correction then
/// polish it until the residual drops below `tol`.
pub fn solve_discounted_care<T: Real>(
    problem: &DiscountedCareProblem<T>,
    tol: T,
    max_iter: usize,
) -> Result<CareSolution<T>> {
    problem.validate()?;
    let n = problem.a.nrows();
    if n == 0 {
        return Ok(CareSolution {
            pi: zeros(0, 0),
            residual_norm: T::zero(),
            stabilizing: true,
        });
    }
    let a = problem.shifted_drift();
    if !model::is_stabilizable(&a, &problem.b) {
        return Err(MfgError::NonStabilizable(
            "discount-shifted pair (A - rho/2 I, B) is not stabilizable".into(),
        ));
    }
    let s = problem.control_gramian()?;
    let q = symmetrize(&problem.q);

    let mut h = zeros(2 * n, 2 * n);
    set_block(&mut h, 0, 0, &a);
    set_block(&mut h, 0, n, &-s.clone());
    set_block(&mut h, n, 0, &-q.clone());
    set_block(&mut h, n, n, &-a.transpose());
    let w = linalg::sign_function(&h)?;
    let w11 = w.view((0, 0), (n, n)).into_owned();
    let w12 = w.view((0, n), (n, n)).into_owned();
    let w21 = w.view((n, 0), (n, n)).into_owned();
    let w22 = w.view((n, n), (n, n)).into_owned();
    let lhs = vstack(&[&w12, &(w22 + eye::<T>(n))]);
    let rhs = -vstack(&[&(w11 + eye::<T>(n)), &w21]);
    let mut x = lhs
        .svd(true, true)
        .solve(&rhs, T::default_epsilon())
        .map_err(|e| MfgError::NonStabilizable(e.to_string()))?;
    x = symmetrize(&x);

    let mut residual = care_residual(problem, &x)?;
    let mut best = (x.clone(), residual);
    let mut iterations = 0;
    let mut stalled = 0;
    while best.1 > tol && iterations < max_iter && stalled < NEWTON_STALL_LIMIT {
        let ac = &a - &s * &x;
        if !is_hurwitz(&ac) {
            break;
        }
        let res = care_residual_matrix(problem, &x)?;
        let step = match solve_lyapunov(&ac.transpose(), &-res) {
            Ok(step) => step,
            Err(_) => break,
        };
        x = symmetrize(&(&x + step));
        residual = care_residual(problem, &x)?;
        iterations += 1;
        if residual < best.1 {
            best = (x.clone(), residual);
            stalled = 0;
        } else {
            stalled += 1;
        }
    }
    let (x, residual) = best;
    let stabilizing = is_hurwitz(&(&a - &s * &x));
    if !stabilizing {
        return Err(MfgError::NonStabilizable(
            "computed solution does not stabilize the shifted closed loop".into(),
        ));
    }
    if !(residual <= tol) {
        return Err(MfgError::NotConverged {
            what: "Riccati solve".into(),
            iterations,
            residual: to_f64(residual),
        });
    }
    Ok(CareSolution {
        pi: x,
        residual_norm: residual,
        stabilizing,
    })
}

/// Solves `ρs = Fᵀs + ΠM − η̄` by a direct linear solve.
pub fn solve_offset<T: Real>(
    closed_loop_drift: &Mat<T>,
    pi: &Mat<T>,
    m: &Vector<T>,
    eta_bar: &Vector<T>,
    rho: T,
) -> Result<Vector<T>> {
    let n = check_square(closed_loop_drift, "closed-loop drift")?;
    check_shape(pi, n, n, "Pi")?;
    if m.len() != n {
        return Err(MfgError::dims("M", n, m.len()));
    }
    if eta_bar.len() != n {
        return Err(MfgError::dims("eta_bar", n, eta_bar.len()));
    }
    let lhs = eye::<T>(n) * rho - closed_loop_drift.transpose();
    let cond = condition_number(&lhs);
    if !(cond <= lit(1e12)) {
        return Err(MfgError::SingularSystem {
            condition: to_f64(cond),
        });
    }
    let rhs = pi * m - eta_bar;
    lhs.lu().solve(&rhs).ok_or(MfgError::SingularSystem {
        condition: to_f64(cond),
    })
}

/// Stationary solution of the filter Riccati equation
/// `AV + VAᵀ − VLᵀR⁻¹LV + Q = 0`.
pub fn solve_filter_are<T: Real>(
    a: &Mat<T>,
    l: &Mat<T>,
    rv: &Mat<T>,
    qw: &Mat<T>,
) -> Result<Mat<T>> {
    let tol = lit::<T>(1e-12) * (T::one() + max_abs(qw));
    let dual = DiscountedCareProblem::new(
        a.transpose(),
        l.transpose(),
        rv.clone(),
        symmetrize(qw),
        T::zero(),
    )?;
    Ok(solve_discounted_care(&dual, tol, 50)?.pi)
}

/// Covariance values on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceTrajectory<T: Real> {
    pub grid: Vec<T>,
    pub values: Vec<Mat<T>>,
}

impl<T: Real> CovarianceTrajectory<T> {
    pub fn dt(&self) -> T {
        if self.grid.len() < 2 {
            T::zero()
        } else {
            self.grid[1] - self.grid[0]
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn last(&self) -> &Mat<T> {
        self.values.last().expect("nonempty trajectory")
    }

    /// A constant trajectory on the given grid.
    pub fn constant(value: &Mat<T>, steps: usize, dt: T) -> Self {
        CovarianceTrajectory {
            grid: make_grid(steps, dt),
            values: vec![value.clone(); steps + 1],
        }
    }
}

/// Number of steps of size `dt` spanning `horizon`, or an error when `dt`
/// does not divide it.
pub fn step_count<T: Real>(dt: T, horizon: T) -> Result<usize> {
    if !(dt > T::zero()) {
        return Err(MfgError::invalid("dt", "must be positive"));
    }
    if !(horizon >= T::zero()) {
        return Err(MfgError::invalid("horizon", "must be nonnegative"));
    }
    let ratio = to_f64(horizon) / to_f64(dt);
    let steps = ratio.round();
    if (ratio - steps).abs() > 1e-6 * ratio.max(1.0) {
        return Err(MfgError::GridMismatch(format!(
            "dt = {dt} does not divide horizon {horizon}"
        )));
    }
    Ok(steps as usize)
}

pub fn make_grid<T: Real>(steps: usize, dt: T) -> Vec<T> {
    (0..=steps).map(|i| dt * lit::<T>(i as f64)).collect()
}

const PSD_FLOOR: f64 = -1e-6;
const BLOWUP: f64 = 1e12;

fn check_step<T: Real>(v: &Mat<T>, t: T) -> Result<()> {
    let size = max_abs(v);
    if !size.is_finite() || size > lit(BLOWUP) {
        return Err(MfgError::StepTooLarge { t: to_f64(t) });
    }
    let min = min_sym_eigenvalue(v);
    if min < lit(PSD_FLOOR) {
        return Err(MfgError::NonPsdDrift {
            t: to_f64(t),
            min_eigenvalue: to_f64(min),
        });
    }
    Ok(())
}

/// Classical fourth-order Runge–Kutta over a tuple of symmetric matrices,
/// symmetrizing after every step. `rhs(stage_time, state)` returns the
/// derivative.
fn rk4_matrices<T: Real, F>(
    init: Vec<Mat<T>>,
    dt: T,
    steps: usize,
    mut rhs: F,
) -> Result<Vec<Vec<Mat<T>>>>
where
    F: FnMut(usize, T, &[Mat<T>]) -> Result<Vec<Mat<T>>>,
{
    let half = lit::<T>(0.5);
    let sixth = T::one() / lit::<T>(6.0);
    let two = lit::<T>(2.0);
    let mut out = Vec::with_capacity(steps + 1);
    let mut x: Vec<Mat<T>> = init.iter().map(symmetrize).collect();
    for v in &x {
        check_step(v, T::zero())?;
    }
    out.push(x.clone());
    let axpy = |x: &[Mat<T>], k: &[Mat<T>], h: T| -> Vec<Mat<T>> {
        x.iter().zip(k).map(|(a, b)| a + b * h).collect()
    };
    for i in 0..steps {
        let k1 = rhs(2 * i, T::zero(), &x)?;
        let k2 = rhs(2 * i + 1, half, &axpy(&x, &k1, dt * half))?;
        let k3 = rhs(2 * i + 1, half, &axpy(&x, &k2, dt * half))?;
        let k4 = rhs(2 * i + 2, T::one(), &axpy(&x, &k3, dt))?;
        let t = dt * lit::<T>((i + 1) as f64);
        for (j, v) in x.iter_mut().enumerate() {
            let inc = (&k1[j] + &k2[j] * two + &k3[j] * two + &k4[j]) * (dt * sixth);
            *v = symmetrize(&(&*v + inc));
            check_step(v, t)?;
        }
        out.push(x.clone());
    }
    Ok(out)
}

const SUBSTEP_REL_TOL: f64 = 1e-10;
const MAX_SUBSTEPS: usize = 1 << 16;

fn rk4_step<T: Real, F>(x: &[Mat<T>], h: T, rhs: &mut F) -> Result<Vec<Mat<T>>>
where
    F: FnMut(&[Mat<T>]) -> Result<Vec<Mat<T>>>,
{
    let half = lit::<T>(0.5);
    let two = lit::<T>(2.0);
    let axpy = |x: &[Mat<T>], k: &[Mat<T>], h: T| -> Vec<Mat<T>> {
        x.iter().zip(k).map(|(a, b)| a + b * h).collect()
    };
    let k1 = rhs(x)?;
    let k2 = rhs(&axpy(x, &k1, h * half))?;
    let k3 = rhs(&axpy(x, &k2, h * half))?;
    let k4 = rhs(&axpy(x, &k3, h))?;
    let sixth = h / lit::<T>(6.0);
    Ok(x.iter()
        .enumerate()
        .map(|(j, v)| symmetrize(&(v + (&k1[j] + &k2[j] * two + &k3[j] * two + &k4[j]) * sixth)))
        .collect())
}

fn rk4_span<T: Real, F>(x: &[Mat<T>], dt: T, m: usize, rhs: &mut F) -> Result<Vec<Mat<T>>>
where
    F: FnMut(&[Mat<T>]) -> Result<Vec<Mat<T>>>,
{
    let h = dt / lit::<T>(m as f64);
    let mut y = x.to_vec();
    for _ in 0..m {
        y = rk4_step(&y, h, rhs)?;
        if y.iter().any(|v| !max_abs(v).is_finite()) {
            break;
        }
    }
    Ok(y)
}

/// RK4 for an autonomous system sampled every `dt`, splitting each output
/// interval into as many equal substeps as step doubling requires. Stiff
/// transients such as a filter Riccati started far from its stationary
/// value with a tiny measurement noise are integrated without blowing up.
fn rk4_substepped<T: Real, F>(init: Vec<Mat<T>>, dt: T, steps: usize, mut rhs: F) -> Result<Vec<Vec<Mat<T>>>>
where
    F: FnMut(&[Mat<T>]) -> Result<Vec<Mat<T>>>,
{
    let mut x: Vec<Mat<T>> = init.iter().map(symmetrize).collect();
    for v in &x {
        check_step(v, T::zero())?;
    }
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x.clone());
    let tol = lit::<T>(SUBSTEP_REL_TOL).max(T::default_epsilon() * lit::<T>(100.0));
    let mut m = 1usize;
    for i in 0..steps {
        let t = dt * lit::<T>((i + 1) as f64);
        let mut coarse = rk4_span(&x, dt, m, &mut rhs)?;
        let next = loop {
            let fine = rk4_span(&x, dt, 2 * m, &mut rhs)?;
            let scale = fine.iter().map(max_abs).fold(T::zero(), |a, b| a.max(b)) * tol;
            let err = coarse
                .iter()
                .zip(&fine)
                .map(|(a, b)| max_abs(&(a - b)))
                .fold(T::zero(), |a, b| a.max(b));
            if err.is_finite() && err <= scale {
                if m > 1 && err * lit::<T>(64.0) <= scale {
                    m /= 2;
                }
                break fine;
            }
            if 2 * m >= MAX_SUBSTEPS {
                for v in &fine {
                    check_step(v, t)?;
                }
                break fine;
            }
            m *= 2;
            coarse = fine;
        };
        for v in &next {
            check_step(v, t)?;
        }
        x = next;
        out.push(x.clone());
    }
    Ok(out)
}

fn filter_rhs<T: Real>(
    a: &Mat<T>,
    v: &Mat<T>,
    l: &Mat<T>,
    rv_pinv: &Mat<T>,
    forcing: &Mat<T>,
) -> Mat<T> {
    let vl = v * l.transpose();
    a * v + v * a.transpose() - &vl * rv_pinv * vl.transpose() + forcing
}

/// Pointwise filter gain `K = V𝕃ᵀR⁻¹`; singular measurement noise maps to
/// zero gain along the singular directions.
pub fn filter_gain<T: Real>(v: &Mat<T>, observation: &Mat<T>, noise_cov: &Mat<T>) -> Mat<T> {
    v * observation.transpose() * psd_pseudo_inverse(noise_cov)
}

fn split<T: Real>(traj: Vec<Vec<Mat<T>>>, grid: &[T]) -> Vec<CovarianceTrajectory<T>> {
    let count = traj.first().map_or(0, |x| x.len());
    let mut out: Vec<CovarianceTrajectory<T>> = (0..count)
        .map(|_| CovarianceTrajectory {
            grid: grid.to_vec(),
            values: Vec::with_capacity(traj.len()),
        })
        .collect();
    for step in traj {
        for (j, v) in step.into_iter().enumerate() {
            out[j].values.push(v);
        }
    }
    out
}

fn innovation_weight<T: Real>(
    base: &Mat<T>,
    major: &ExtendedSystem<T>,
    v0: &Mat<T>,
) -> Mat<T> {
    let p0 = major.observation.nrows();
    let off = base.nrows() - p0;
    let mut w = base.clone();
    let nu = &major.observation * v0 * major.observation.transpose() + &major.measurement_noise_cov;
    set_block(&mut w, off, off, &nu);
    w
}

/// Integrates the major filter Riccati equation jointly with the Lyapunov
/// equation of the error stack, holding the error-stack drift fixed.
pub fn integrate_coupled_covariances<T: Real>(
    major_sys: &ExtendedSystem<T>,
    error_sys: &ExtendedSystem<T>,
    v0_init: &Mat<T>,
    vbar_init: &Mat<T>,
    dt: T,
    horizon: T,
) -> Result<(CovarianceTrajectory<T>, CovarianceTrajectory<T>)> {
    let steps = step_count(dt, horizon)?;
    let nz = major_sys.dim();
    let kd = error_sys.dim();
    check_shape(v0_init, nz, nz, "V0_init")?;
    check_shape(vbar_init, kd, kd, "Vbar_init")?;
    check_shape(&major_sys.error_injection, nz, kd, "major error injection")?;
    let rv0_pinv = psd_pseudo_inverse(&major_sys.measurement_noise_cov);
    let q0 = major_sys.process_forcing();
    let jm = &major_sys.error_injection;
    let traj = rk4_matrices(vec![v0_init.clone(), vbar_init.clone()], dt, steps, |_, _, x| {
        let (v0, vb) = (&x[0], &x[1]);
        let forcing0 = &q0 + jm * vb * jm.transpose();
        let dv0 = filter_rhs(&major_sys.drift, v0, &major_sys.observation, &rv0_pinv, &forcing0);
        let w = innovation_weight(&error_sys.noise_weight, major_sys, v0);
        let qt = &error_sys.diffusion * w * error_sys.diffusion.transpose();
        let a = &error_sys.drift;
        let dvb = a * vb + vb * a.transpose() + qt;
        Ok(vec![dv0, dvb])
    })?;
    let mut parts = split(traj, &make_grid(steps, dt)).into_iter();
    Ok((parts.next().unwrap(), parts.next().unwrap()))
}

/// Integrates one minor filter Riccati equation along a given error-stack
/// covariance trajectory.
pub fn integrate_minor_filter_riccati<T: Real>(
    minor_sys: &ExtendedSystem<T>,
    vbar_traj: &CovarianceTrajectory<T>,
    vk_init: &Mat<T>,
    dt: T,
    horizon: T,
) -> Result<CovarianceTrajectory<T>> {
    let steps = step_count(dt, horizon)?;
    let grid = make_grid(steps, dt);
    if vbar_traj.len() != grid.len()
        || vbar_traj
            .grid
            .iter()
            .zip(&grid)
            .any(|(a, b)| (*a - *b).abs() > dt * lit(1e-6))
    {
        return Err(MfgError::GridMismatch(format!(
            "error covariance trajectory has {} points, expected {}",
            vbar_traj.len(),
            grid.len()
        )));
    }
    let d = minor_sys.dim();
    check_shape(vk_init, d, d, "Vk_init")?;
    let rv_pinv = psd_pseudo_inverse(&minor_sys.measurement_noise_cov);
    let qw = minor_sys.process_forcing();
    let j = &minor_sys.error_injection;
    let half = lit::<T>(0.5);
    let traj = rk4_matrices(vec![vk_init.clone()], dt, steps, |stage, _, x| {
        let vb = if stage % 2 == 0 {
            vbar_traj.values[stage / 2].clone()
        } else {
            (&vbar_traj.values[stage / 2] + &vbar_traj.values[stage / 2 + 1]) * half
        };
        let forcing = &qw + j * vb * j.transpose();
        Ok(vec![filter_rhs(
            &minor_sys.drift,
            &x[0],
            &minor_sys.observation,
            &rv_pinv,
            &forcing,
        )])
    })?;
    Ok(split(traj, &grid).pop().unwrap())
}

/// Filter covariances of the major agent, the error stack and each minor
/// type, all on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterCovariances<T: Real> {
    pub v0: CovarianceTrajectory<T>,
    pub vbar: CovarianceTrajectory<T>,
    pub vk: Vec<CovarianceTrajectory<T>>,
}

impl<T: Real> FilterCovariances<T> {
    pub fn steps(&self) -> usize {
        self.v0.len().saturating_sub(1)
    }
}

/// Everything fixed by the equilibrium that the covariance equations need.
struct FilterStructure<T: Real> {
    major: ExtendedSystem<T>,
    minors: Vec<ExtendedSystem<T>>,
    major_diffusion: Mat<T>,
    rv0_pinv: Mat<T>,
    rv_pinv: Mat<T>,
    one_tilde: Mat<T>,
}

impl<T: Real> FilterStructure<T> {
    fn new(params: &GameParameters<T>, sol: &MeanFieldSolution<T>) -> Result<Self> {
        let major = build_major_extended(params, &sol.coefficients)?;
        let k0 = zeros(major.dim(), params.p0());
        let cl = build_major_closed_loop(params, &sol.coefficients, &sol.pi0, &sol.s0, &k0)?;
        let minors = (0..params.num_types())
            .map(|k| build_minor_extended(params, k, &sol.coefficients, &cl))
            .collect::<Result<Vec<_>>>()?;
        Ok(FilterStructure {
            rv0_pinv: psd_pseudo_inverse(&major.measurement_noise_cov),
            rv_pinv: psd_pseudo_inverse(&params.rv()),
            major_diffusion: major.diffusion.clone(),
            one_tilde: SelectorMatrices::<T>::new(params.n(), params.num_types()).one_tilde,
            major,
            minors,
        })
    }

    fn minor_diffusion(&self, params: &GameParameters<T>, k0: &Mat<T>) -> Mat<T> {
        minor_diffusion(params, &linalg::block_diag(&[&self.major_diffusion, k0]))
    }

    fn error_drift(&self, gains: &[Mat<T>]) -> Mat<T> {
        let d = self.minors[0].dim();
        let kt = self.minors.len();
        let mut a = zeros(d * kt, d * kt);
        for (k, (sys, g)) in self.minors.iter().zip(gains).enumerate() {
            let closed = &sys.drift - g * &sys.observation;
            set_block(&mut a, k * d, k * d, &closed);
            let rows = a.view((k * d, 0), (d, d * kt)).into_owned() + &sys.error_injection;
            set_block(&mut a, k * d, 0, &rows);
        }
        a
    }

    /// Right-hand sides of all covariance equations at one instant.
    fn rhs(&self, params: &GameParameters<T>, x: &[Mat<T>]) -> Vec<Mat<T>> {
        let (v0, vb) = (&x[0], &x[1]);
        let major = &self.major;
        let k0 = v0 * major.observation.transpose() * &self.rv0_pinv;
        let jm = &major.error_injection;
        let forcing0 = major.process_forcing() + jm * vb * jm.transpose();
        let dv0 = filter_rhs(&major.drift, v0, &major.observation, &self.rv0_pinv, &forcing0);

        let dm = self.minor_diffusion(params, &k0);
        let mut out = vec![dv0, zeros(vb.nrows(), vb.ncols())];
        let mut gains = Vec::with_capacity(self.minors.len());
        for (k, sys) in self.minors.iter().enumerate() {
            let vk = &x[2 + k];
            let j = &sys.error_injection;
            let forcing = &dm * &sys.noise_weight * dm.transpose() + j * vb * j.transpose();
            out.push(filter_rhs(&sys.drift, vk, &sys.observation, &self.rv_pinv, &forcing));
            gains.push(vk * sys.observation.transpose() * &self.rv_pinv);
        }
        let at = self.error_drift(&gains);
        let dt = &self.one_tilde * &dm;
        let qt = &dt * error_noise_weight(params, v0) * dt.transpose();
        out[1] = &at * vb + vb * at.transpose() + qt;
        out
    }
}

/// Initial covariances from the initial-state covariance: the true states
/// of the major and minor agents are uncertain, every estimate and the
/// mean field start known.
pub fn initial_covariances<T: Real>(params: &GameParameters<T>) -> (Mat<T>, Mat<T>, Mat<T>) {
    let n = params.n();
    let nz = params.major_dim();
    let d = params.minor_dim();
    let kt = params.num_types();
    let sig = &params.sigma_init;
    let mut v0 = zeros(nz, nz);
    set_block(&mut v0, 0, 0, sig);
    let mut vk = zeros(d, d);
    set_block(&mut vk, 0, 0, sig);
    set_block(&mut vk, n, n, sig);
    let mut vb = zeros(d * kt, d * kt);
    for a in 0..kt {
        for b in 0..kt {
            set_block(&mut vb, a * d + n, b * d + n, sig);
        }
    }
    (v0, vb, vk)
}

/// Integrates the major filter Riccati, every minor filter Riccati and the
/// error-stack Lyapunov equation as one system, so that the gains feeding
/// each equation are evaluated at the same instant.
pub fn integrate_filter_covariances<T: Real>(
    params: &GameParameters<T>,
    sol: &MeanFieldSolution<T>,
    dt: T,
    horizon: T,
) -> Result<FilterCovariances<T>> {
    let steps = step_count(dt, horizon)?;
    let st = FilterStructure::new(params, sol)?;
    let (v0, vb, vk) = initial_covariances(params);
    let mut init = vec![v0, vb];
    init.extend((0..params.num_types()).map(|_| vk.clone()));
    let traj = rk4_substepped(init, dt, steps, |x| Ok(st.rhs(params, x)))?;
    let mut parts = split(traj, &make_grid(steps, dt)).into_iter();
    let v0 = parts.next().unwrap();
    let vbar = parts.next().unwrap();
    Ok(FilterCovariances {
        v0,
        vbar,
        vk: parts.collect(),
    })
}

/// Steady-state covariances of the coupled filter equations.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryCovariances<T: Real> {
    pub v0: Mat<T>,
    pub vbar: Mat<T>,
    pub vk: Vec<Mat<T>>,
    pub iterations: usize,
}

/// Fixed point on `(V₀, V̄)`: algebraic filter Riccati solves for the major
/// and each minor type, then the error-stack Lyapunov equation.
pub fn stationary_covariances<T: Real>(
    params: &GameParameters<T>,
    sol: &MeanFieldSolution<T>,
    tol: T,
    max_iter: usize,
) -> Result<StationaryCovariances<T>> {
    let st = FilterStructure::new(params, sol)?;
    let major = &st.major;
    let kd = params.minor_dim() * params.num_types();
    let mut vb = zeros(kd, kd);
    let mut last: Option<(Mat<T>, Vec<Mat<T>>)> = None;
    for it in 1..=max_iter {
        let jm = &major.error_injection;
        let q0 = major.process_forcing() + jm * &vb * jm.transpose();
        let v0 = solve_filter_are(&major.drift, &major.observation, &major.measurement_noise_cov, &q0)?;
        let k0 = &v0 * major.observation.transpose() * &st.rv0_pinv;
        let dm = st.minor_diffusion(params, &k0);
        let mut vks = Vec::new();
        let mut gains = Vec::new();
        for sys in &st.minors {
            let j = &sys.error_injection;
            let qw = &dm * &sys.noise_weight * dm.transpose() + j * &vb * j.transpose();
            let vk = solve_filter_are(&sys.drift, &sys.observation, &sys.measurement_noise_cov, &qw)?;
            gains.push(&vk * sys.observation.transpose() * &st.rv_pinv);
            vks.push(vk);
        }
        let at = st.error_drift(&gains);
        let dt = &st.one_tilde * &dm;
        let qt = &dt * error_noise_weight(params, &v0) * dt.transpose();
        let next_vb = symmetrize(&solve_lyapunov(&at, &qt)?);
        let change = max_abs(&(&next_vb - &vb));
        let scale = T::one().max(max_abs(&next_vb));
        vb = next_vb;
        let done = change <= tol * scale;
        if let Some((pv0, pvk)) = &last {
            let c0 = max_abs(&(&v0 - pv0));
            let ck = pvk
                .iter()
                .zip(&vks)
                .fold(T::zero(), |acc, (a, b)| acc.max(max_abs(&(a - b))));
            if done && c0 <= tol && ck <= tol {
                return Ok(StationaryCovariances {
                    v0,
                    vbar: vb,
                    vk: vks,
                    iterations: it,
                });
            }
        }
        last = Some((v0, vks));
    }
    Err(MfgError::NotConverged {
        what: "stationary filter covariances".into(),
        iterations: max_iter,
        residual: f64::NAN,
    })
}
