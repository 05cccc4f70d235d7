//! Game parameters, checkable preconditions and the extended block systems
//! shared by the control, filtering and consistency computations.

use crate::consistency::{MeanFieldCoefficients, MeanFieldSolution};
use crate::error::{MfgError, Result};
use crate::linalg::{
    self, block_diag, check_shape, check_square, complex_rank, complexify, eigenvalues, eye,
    hstack, is_hurwitz, min_sym_eigenvalue, set_block, spd_inverse, vstack, zeros, Mat, Vector,
};
use crate::scalar::{lit, to_f64, Real};

/// Rank tolerance for the PBH tests.
pub const PBH_TOL: f64 = 1e-8;
/// Tolerance for positive semidefiniteness of cost weights.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct MinorType<T: Real> {
    pub a: Mat<T>,
    pub b: Mat<T>,
    /// Observation map on the agent's own state (p×n).
    pub l1: Mat<T>,
    /// Observation map on the major agent's state (p×n).
    pub l2: Mat<T>,
}

/// All primitives of the game. Dimensions are read off the matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct GameParameters<T: Real> {
    pub a0: Mat<T>,
    pub b0: Mat<T>,
    pub d0: Mat<T>,
    pub types: Vec<MinorType<T>>,
    pub g: Mat<T>,
    pub d: Mat<T>,
    pub q0: Mat<T>,
    pub r0: Mat<T>,
    pub q: Mat<T>,
    pub r: Mat<T>,
    pub h0: Mat<T>,
    pub h1: Mat<T>,
    pub h2: Mat<T>,
    pub eta0: Vector<T>,
    pub eta: Vector<T>,
    pub rho: T,
    pub l0: Mat<T>,
    pub sigma_v0: Mat<T>,
    pub sigma_v: Mat<T>,
    pub pi: Vec<T>,
    pub sigma_init: Mat<T>,
}

fn mat<T: Real>(rows: usize, cols: usize, data: &[f64]) -> Mat<T> {
    Mat::from_row_slice(rows, cols, &data.iter().map(|&x| lit(x)).collect::<Vec<T>>())
}

fn scaled_eye<T: Real>(n: usize, s: f64) -> Mat<T> {
    eye::<T>(n) * lit::<T>(s)
}

impl<T: Real> GameParameters<T> {
    /// The two-dimensional single-type scenario with a major agent and
    /// identity observation maps.
    pub fn reference_scenario() -> Self {
        let n = 2;
        let sigma_w = 0.009;
        let sigma_v = 0.0003;
        let l1 = vstack(&[&eye::<T>(n), &zeros(n, n)]);
        let l2 = vstack(&[&zeros(n, n), &eye::<T>(n)]);
        GameParameters {
            a0: mat(2, 2, &[-1.0, -1.0, 1.0, 0.0]),
            b0: mat(2, 1, &[1.0, 0.0]),
            d0: scaled_eye(n, sigma_w),
            types: vec![MinorType {
                a: mat(2, 2, &[-0.05, -2.0, 1.0, 0.0]),
                b: mat(2, 1, &[1.0, 0.0]),
                l1,
                l2,
            }],
            g: zeros(n, n),
            d: scaled_eye(n, sigma_w),
            q0: eye(n),
            r0: eye(1),
            q: eye(n),
            r: eye(1),
            h0: scaled_eye(n, 0.6),
            h1: scaled_eye(n, 0.6),
            h2: scaled_eye(n, 0.6),
            eta0: Vector::from_element(n, lit(0.25)),
            eta: Vector::from_element(n, lit(0.25)),
            rho: lit(0.9),
            l0: eye(n),
            sigma_v0: scaled_eye(n, sigma_v),
            sigma_v: scaled_eye(2 * n, sigma_v),
            pi: vec![T::one()],
            sigma_init: zeros(n, n),
        }
    }

    pub fn n(&self) -> usize {
        self.a0.nrows()
    }
    pub fn m(&self) -> usize {
        self.b0.ncols()
    }
    /// Process noise dimension.
    pub fn r_dim(&self) -> usize {
        self.d0.ncols()
    }
    /// Major observation dimension.
    pub fn p0(&self) -> usize {
        self.l0.nrows()
    }
    /// Minor observation dimension.
    pub fn p(&self) -> usize {
        self.sigma_v.nrows()
    }
    pub fn num_types(&self) -> usize {
        self.types.len()
    }
    /// Dimension of the major extended state `[x₀, x̄]`.
    pub fn major_dim(&self) -> usize {
        self.n() * (1 + self.num_types())
    }
    /// Dimension of the minor extended state.
    pub fn minor_dim(&self) -> usize {
        3 * self.n() + 2 * self.n() * self.num_types()
    }

    pub fn rv0(&self) -> Mat<T> {
        &self.sigma_v0 * self.sigma_v0.transpose()
    }
    pub fn rv(&self) -> Mat<T> {
        &self.sigma_v * self.sigma_v.transpose()
    }

    /// `[π₁H, …, π_K H]`.
    pub fn weighted_row(&self, h: &Mat<T>) -> Mat<T> {
        let blocks: Vec<Mat<T>> = self.pi.iter().map(|&w| h * w).collect();
        hstack(&blocks.iter().collect::<Vec<_>>())
    }

    /// Selector `[I, −H₀^π]` mapping `[x₀, x̄]` to the major tracking error.
    pub fn major_cost_selector(&self) -> Mat<T> {
        hstack(&[&eye(self.n()), &-self.weighted_row(&self.h0)])
    }

    /// Selector `[I, −H₁, −H₂^π, 0]` mapping the minor extended state to
    /// the minor tracking error.
    pub fn minor_cost_selector(&self) -> Mat<T> {
        let n = self.n();
        hstack(&[
            &eye(n),
            &-self.h1.clone(),
            &-self.weighted_row(&self.h2),
            &zeros(n, self.major_dim()),
        ])
    }

    pub fn major_state_weight(&self) -> Mat<T> {
        let s = self.major_cost_selector();
        s.transpose() * &self.q0 * s
    }
    pub fn major_eta_bar(&self) -> Vector<T> {
        self.major_cost_selector().transpose() * (&self.q0 * &self.eta0)
    }
    pub fn minor_state_weight(&self) -> Mat<T> {
        let s = self.minor_cost_selector();
        s.transpose() * &self.q * s
    }
    pub fn minor_eta_bar(&self) -> Vector<T> {
        self.minor_cost_selector().transpose() * (&self.q * &self.eta)
    }

    /// Checks that all matrices have mutually consistent shapes.
    pub fn check_dimensions(&self) -> Result<()> {
        let n = check_square(&self.a0, "A0")?;
        if n == 0 {
            return Err(MfgError::invalid("A0", "state dimension must be positive"));
        }
        let m = self.b0.ncols();
        let r = self.d0.ncols();
        check_shape(&self.b0, n, m, "B0")?;
        check_shape(&self.d0, n, r, "D0")?;
        if self.types.is_empty() {
            return Err(MfgError::invalid("types", "at least one minor type required"));
        }
        let p = self.sigma_v.nrows();
        for (k, ty) in self.types.iter().enumerate() {
            check_shape(&ty.a, n, n, &format!("types[{k}].A"))?;
            check_shape(&ty.b, n, m, &format!("types[{k}].B"))?;
            check_shape(&ty.l1, p, n, &format!("types[{k}].l1"))?;
            check_shape(&ty.l2, p, n, &format!("types[{k}].l2"))?;
        }
        check_shape(&self.g, n, n, "G")?;
        check_shape(&self.d, n, r, "D")?;
        check_shape(&self.q0, n, n, "Q0")?;
        check_shape(&self.r0, m, m, "R0")?;
        check_shape(&self.q, n, n, "Q")?;
        check_shape(&self.r, m, m, "R")?;
        check_shape(&self.h0, n, n, "H0")?;
        check_shape(&self.h1, n, n, "H1")?;
        check_shape(&self.h2, n, n, "H2")?;
        if self.eta0.len() != n {
            return Err(MfgError::dims("eta0", n, self.eta0.len()));
        }
        if self.eta.len() != n {
            return Err(MfgError::dims("eta", n, self.eta.len()));
        }
        if self.l0.ncols() != n {
            return Err(MfgError::dims("l0", format!("{}x{n}", self.l0.nrows()), format!("{}x{}", self.l0.nrows(), self.l0.ncols())));
        }
        if self.sigma_v0.nrows() != self.l0.nrows() {
            return Err(MfgError::dims("sigma_v0", format!("{} rows", self.l0.nrows()), self.sigma_v0.nrows()));
        }
        if self.pi.len() != self.types.len() {
            return Err(MfgError::dims("pi", self.types.len(), self.pi.len()));
        }
        check_shape(&self.sigma_init, n, n, "Sigma_init")?;
        Ok(())
    }
}

/// Outcome of one precondition check.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckStatus {
    Pass,
    Fail(String),
    /// Not decided by a numerical test.
    Deferred(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionCheck {
    pub name: String,
    pub status: CheckStatus,
    /// A failed blocking check invalidates the computed equilibrium; a
    /// failed non-blocking one only weakens a property of it.
    pub blocking: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    fn push(&mut self, name: impl Into<String>, status: CheckStatus) {
        self.checks.push(AssumptionCheck {
            name: name.into(),
            status,
            blocking: true,
        });
    }

    fn check(&mut self, name: impl Into<String>, ok: bool, why: impl FnOnce() -> String) {
        let status = if ok {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail(why())
        };
        self.push(name, status);
    }

    fn advisory(&mut self, name: impl Into<String>, ok: bool, why: impl FnOnce() -> String) {
        self.check(name, ok, why);
        if let Some(last) = self.checks.last_mut() {
            last.blocking = false;
        }
    }

    /// Failed checks that invalidate the result.
    pub fn blocking_failures(&self) -> Vec<&AssumptionCheck> {
        self.checks
            .iter()
            .filter(|c| c.blocking && matches!(c.status, CheckStatus::Fail(_)))
            .collect()
    }

    pub fn all_passed(&self) -> bool {
        self.checks
            .iter()
            .all(|c| !matches!(c.status, CheckStatus::Fail(_)))
    }

    pub fn failures(&self) -> Vec<&AssumptionCheck> {
        self.checks
            .iter()
            .filter(|c| matches!(c.status, CheckStatus::Fail(_)))
            .collect()
    }

    pub fn merge(mut self, other: AssumptionReport) -> Self {
        self.checks.extend(other.checks);
        self
    }
}

impl std::fmt::Display for AssumptionReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            match &c.status {
                CheckStatus::Pass => writeln!(f, "PASS  {}", c.name)?,
                CheckStatus::Fail(why) if c.blocking => writeln!(f, "FAIL  {}: {why}", c.name)?,
                CheckStatus::Fail(why) => writeln!(f, "FAIL  {} (non-blocking): {why}", c.name)?,
                CheckStatus::Deferred(why) => writeln!(f, "SKIP  {}: {why}", c.name)?,
            }
        }
        Ok(())
    }
}

fn is_pd<T: Real>(m: &Mat<T>) -> bool {
    m.nrows() > 0 && m.clone().cholesky().is_some() && min_sym_eigenvalue(m) > T::zero()
}

fn is_psd<T: Real>(m: &Mat<T>, tol: f64) -> bool {
    linalg::asymmetry(m) <= lit(tol.max(1e-12) * 1e2) && min_sym_eigenvalue(m) >= -lit::<T>(tol)
}

/// PBH test: every eigenvalue λ of `a` with `Re λ ≥ 0` has
/// `rank [a − λI, b] = dim`.
pub fn is_stabilizable<T: Real>(a: &Mat<T>, b: &Mat<T>) -> bool {
    let n = a.nrows();
    let tol = lit::<T>(PBH_TOL);
    let ac = complexify(a);
    let bc = complexify(b);
    eigenvalues(a)
        .into_iter()
        .filter(|lam| lam.re >= -tol)
        .all(|lam| {
            let mut m = nalgebra::DMatrix::zeros(n, n + b.ncols());
            let shifted = &ac - nalgebra::DMatrix::identity(n, n) * lam;
            m.view_mut((0, 0), (n, n)).copy_from(&shifted);
            m.view_mut((0, n), (n, b.ncols())).copy_from(&bc);
            complex_rank(&m, tol) == n
        })
}

/// Detectability of `(c, a)` as stabilizability of the dual pair.
pub fn is_detectable<T: Real>(c: &Mat<T>, a: &Mat<T>) -> bool {
    is_stabilizable(&a.transpose(), &c.transpose())
}

/// PBH controllability test at every eigenvalue.
pub fn is_controllable<T: Real>(a: &Mat<T>, b: &Mat<T>) -> bool {
    let n = a.nrows();
    let tol = lit::<T>(PBH_TOL);
    let ac = complexify(a);
    let bc = complexify(b);
    eigenvalues(a).into_iter().all(|lam| {
        let mut m = nalgebra::DMatrix::zeros(n, n + b.ncols());
        let shifted = &ac - nalgebra::DMatrix::identity(n, n) * lam;
        m.view_mut((0, 0), (n, n)).copy_from(&shifted);
        m.view_mut((0, n), (n, b.ncols())).copy_from(&bc);
        complex_rank(&m, tol) == n
    })
}

/// Symmetric PSD square root via the eigendecomposition.
pub fn psd_sqrt<T: Real>(m: &Mat<T>) -> Mat<T> {
    let e = nalgebra::SymmetricEigen::new(linalg::symmetrize(m));
    let d = e.eigenvalues.map(|x| x.max(T::zero()).sqrt());
    &e.eigenvectors * Mat::from_diagonal(&d) * e.eigenvectors.transpose()
}

/// Checks everything decidable from the primitives alone.
pub fn validate<T: Real>(params: &GameParameters<T>) -> Result<AssumptionReport> {
    params.check_dimensions()?;
    let mut rep = AssumptionReport::default();
    rep.check("R0 positive definite", is_pd(&params.r0), || {
        "R0 is not positive definite".into()
    });
    rep.check("R positive definite", is_pd(&params.r), || {
        "R is not positive definite".into()
    });
    rep.check("Q0 positive semidefinite", is_psd(&params.q0, PSD_TOL), || {
        "Q0 is not positive semidefinite".into()
    });
    rep.check("Q positive semidefinite", is_psd(&params.q, PSD_TOL), || {
        "Q is not positive semidefinite".into()
    });
    rep.check("rho nonnegative", params.rho >= T::zero(), || {
        format!("rho = {} is negative", params.rho)
    });
    let sum = params.pi.iter().fold(T::zero(), |a, &b| a + b);
    let simplex = params.pi.iter().all(|&w| w >= T::zero())
        && (sum - T::one()).abs() <= lit(1e-12);
    rep.check("pi on the probability simplex", simplex, || {
        format!("pi entries must be nonnegative and sum to 1 (sum is {sum})")
    });
    rep.check(
        "Sigma_init positive semidefinite",
        is_psd(&params.sigma_init, 1e-12),
        || "Sigma_init is not positive semidefinite".into(),
    );
    rep.check(
        "Q0^pi, Q^pi positive semidefinite",
        is_psd(&params.major_state_weight(), PSD_TOL) && is_psd(&params.minor_state_weight(), PSD_TOL),
        || "extended tracking weights are not positive semidefinite".into(),
    );
    rep.push(
        "independent noises and initial states",
        CheckStatus::Deferred("holds by construction of the simulator".into()),
    );
    Ok(rep)
}

/// Checks that depend on a solved equilibrium: filter stabilizability and
/// detectability, controllability of the error stack, and the
/// discount-shifted control conditions.
pub fn validate_solution<T: Real>(
    params: &GameParameters<T>,
    sol: &MeanFieldSolution<T>,
    k0: &Mat<T>,
    gains: &[Mat<T>],
    v0: &Mat<T>,
) -> Result<AssumptionReport> {
    let mut rep = AssumptionReport::default();
    let coeffs = &sol.coefficients;
    let major = build_major_extended(params, coeffs)?;
    let half_rho = params.rho * lit::<T>(0.5);
    rep.check(
        "major filter: (A0ext, D0ext) stabilizable and (L0ext, A0ext) detectable",
        is_stabilizable(&major.drift, &major.diffusion)
            && is_detectable(&major.observation, &major.drift),
        || "major extended filter pair fails the PBH test".into(),
    );
    let cl = build_major_closed_loop(params, coeffs, &sol.pi0, &sol.s0, k0)?;
    let mut minors = Vec::new();
    for k in 0..params.num_types() {
        let sys = build_minor_extended(params, k, coeffs, &cl)?;
        let dw = &sys.diffusion * psd_sqrt(&sys.noise_weight);
        rep.check(
            format!("minor type {k} filter: stabilizable and detectable"),
            is_stabilizable(&sys.drift, &dw) && is_detectable(&sys.observation, &sys.drift),
            || format!("minor type {k} extended filter pair fails the PBH test"),
        );
        minors.push(sys);
    }
    let stack = build_error_stack(params, &minors, gains, v0)?;
    let qt = &stack.diffusion * psd_sqrt(&stack.noise_weight);
    rep.advisory(
        "error stack (A~, Q~) controllable",
        is_controllable(&stack.drift, &qt),
        || "error stack is not controllable from its noise; its stationary covariance is singular".into(),
    );
    rep.check(
        "error stack drift A~ Hurwitz",
        is_hurwitz(&stack.drift),
        || "error stack drift has an eigenvalue with nonnegative real part".into(),
    );
    let la = psd_sqrt(&params.q0) * params.major_cost_selector();
    let shifted0 = &major.drift - eye::<T>(major.dim()) * half_rho;
    rep.check(
        "major control: discount-shifted detectability and stabilizability",
        is_detectable(&la, &shifted0) && is_stabilizable(&shifted0, &major.control),
        || "major discount-shifted pair fails the PBH test".into(),
    );
    let lb = psd_sqrt(&params.q) * params.minor_cost_selector();
    for (k, sys) in minors.iter().enumerate() {
        let shifted = &sys.drift - eye::<T>(sys.dim()) * half_rho;
        rep.check(
            format!("minor type {k} control: discount-shifted detectability and stabilizability"),
            is_detectable(&lb, &shifted) && is_stabilizable(&shifted, &sys.control),
            || format!("minor type {k} discount-shifted pair fails the PBH test"),
        );
    }
    let status = if sol.converged {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail(format!(
            "fixed point not converged (residual {:e})",
            to_f64(sol.residual)
        ))
    };
    rep.push("mean field fixed point exists (checked by solver convergence)", status);
    Ok(rep)
}

/// Which agent an extended system describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Major,
    Minor(usize),
    ErrorStack,
}

/// Assembled block matrices of an extended state model. The process
/// forcing per unit time is `diffusion · noise_weight · diffusionᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedSystem<T: Real> {
    pub role: Role,
    pub drift: Mat<T>,
    pub control: Mat<T>,
    pub offset: Vector<T>,
    pub diffusion: Mat<T>,
    pub noise_weight: Mat<T>,
    pub error_injection: Mat<T>,
    pub observation: Mat<T>,
    pub measurement_noise_cov: Mat<T>,
}

impl<T: Real> ExtendedSystem<T> {
    pub fn dim(&self) -> usize {
        self.drift.nrows()
    }

    pub fn process_forcing(&self) -> Mat<T> {
        &self.diffusion * &self.noise_weight * self.diffusion.transpose()
    }
}

/// Closed-loop dynamics of the major agent jointly with its filter, on the
/// stacked state `[x₀, x̄, x̂₀, x̄̂]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopMajor<T: Real> {
    pub drift: Mat<T>,
    pub error_injection: Mat<T>,
    pub offset: Vector<T>,
    pub diffusion: Mat<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorMatrices<T: Real> {
    pub e_bar: Vec<Mat<T>>,
    pub e_tilde: Vec<Mat<T>>,
    pub one_tilde: Mat<T>,
}

impl<T: Real> SelectorMatrices<T> {
    pub fn new(n: usize, k: usize) -> Self {
        let d = 3 * n + 2 * n * k;
        let e_bar = (0..k)
            .map(|j| {
                let mut e = zeros(n, n * k);
                set_block(&mut e, 0, j * n, &eye(n));
                e
            })
            .collect();
        let e_tilde = (0..k)
            .map(|j| {
                let mut e = zeros(d, d * k);
                set_block(&mut e, 0, j * d, &eye(d));
                e
            })
            .collect();
        let blocks: Vec<Mat<T>> = (0..k).map(|_| eye(d)).collect();
        let one_tilde = vstack(&blocks.iter().collect::<Vec<_>>());
        SelectorMatrices {
            e_bar,
            e_tilde,
            one_tilde,
        }
    }
}

fn check_coefficients<T: Real>(params: &GameParameters<T>, mf: &MeanFieldCoefficients<T>) -> Result<()> {
    let n = params.n();
    let nk = n * params.num_types();
    let kd = params.minor_dim() * params.num_types();
    check_shape(&mf.abar, nk, nk, "Abar")?;
    check_shape(&mf.gbar, nk, n, "Gbar")?;
    check_shape(&mf.hbar, nk, n, "Hbar")?;
    check_shape(&mf.lbar, nk, nk, "Lbar")?;
    check_shape(&mf.jbar, nk, kd, "Jbar")?;
    if mf.mbar.len() != nk {
        return Err(MfgError::dims("mbar", nk, mf.mbar.len()));
    }
    Ok(())
}

/// Major extended system on `[x₀, x̄]`.
pub fn build_major_extended<T: Real>(
    params: &GameParameters<T>,
    mf: &MeanFieldCoefficients<T>,
) -> Result<ExtendedSystem<T>> {
    check_coefficients(params, mf)?;
    let n = params.n();
    let nk = n * params.num_types();
    let nz = n + nk;
    let r = params.r_dim();
    let kd = params.minor_dim() * params.num_types();

    let mut drift = zeros(nz, nz);
    set_block(&mut drift, 0, 0, &params.a0);
    set_block(&mut drift, n, 0, &(&mf.gbar + &mf.hbar));
    set_block(&mut drift, n, n, &(&mf.abar + &mf.lbar));

    let control = vstack(&[&params.b0, &zeros(nk, params.m())]);
    let mut offset = Vector::zeros(nz);
    offset.rows_mut(n, nk).copy_from(&mf.mbar);

    let mut diffusion = zeros(nz, r + r * params.num_types());
    set_block(&mut diffusion, 0, 0, &params.d0);

    let error_injection = vstack(&[&zeros(n, kd), &mf.jbar]);
    let observation = hstack(&[&params.l0, &zeros(params.p0(), nk)]);

    Ok(ExtendedSystem {
        role: Role::Major,
        drift,
        control,
        offset,
        noise_weight: eye(diffusion.ncols()),
        diffusion,
        error_injection,
        observation,
        measurement_noise_cov: params.rv0(),
    })
}

/// Joint closed loop of the major agent and its filter.
pub fn build_major_closed_loop<T: Real>(
    params: &GameParameters<T>,
    mf: &MeanFieldCoefficients<T>,
    pi0: &Mat<T>,
    s0: &Vector<T>,
    k0: &Mat<T>,
) -> Result<ClosedLoopMajor<T>> {
    let major = build_major_extended(params, mf)?;
    let n = params.n();
    let nz = major.dim();
    check_shape(pi0, nz, nz, "Pi0")?;
    if s0.len() != nz {
        return Err(MfgError::dims("s0", nz, s0.len()));
    }
    check_shape(k0, nz, params.p0(), "K0")?;
    let r0inv = spd_inverse(&params.r0, "R0")?;
    let gain_row = &r0inv * major.control.transpose();
    let feedback = &major.control * &gain_row * pi0;
    let kd = major.error_injection.ncols();

    let mut drift = zeros(2 * nz, 2 * nz);
    set_block(&mut drift, 0, 0, &params.a0);
    set_block(&mut drift, n, 0, &mf.gbar);
    set_block(&mut drift, n, n, &mf.abar);
    set_block(&mut drift, 0, nz, &(-&params.b0 * &gain_row * pi0));
    set_block(&mut drift, n, nz, &hstack(&[&mf.hbar, &mf.lbar]));
    set_block(&mut drift, nz, nz, &(&major.drift - feedback));

    let error_injection = vstack(&[&major.error_injection, &zeros(nz, kd)]);
    let half = &major.offset - &major.control * (&gain_row * s0);
    let mut offset = Vector::zeros(2 * nz);
    offset.rows_mut(0, nz).copy_from(&half);
    offset.rows_mut(nz, nz).copy_from(&half);

    let diffusion = block_diag(&[&major.diffusion, k0]);
    Ok(ClosedLoopMajor {
        drift,
        error_injection,
        offset,
        diffusion,
    })
}

/// Minor diffusion `[[D, 0], [0, 𝐃₀]]` acting on `[dwᵢ, dw₀, 0, dν₀]`.
pub fn minor_diffusion<T: Real>(params: &GameParameters<T>, major_diffusion: &Mat<T>) -> Mat<T> {
    block_diag(&[&params.d, major_diffusion])
}

/// Intensity of the minor noise vector `[dwᵢ, dw₀, 0, dν₀]`: unit for the
/// Wiener increments, and `R_v0` for the major innovation.
pub fn minor_noise_weight<T: Real>(params: &GameParameters<T>) -> Mat<T> {
    let r = params.r_dim();
    let k = params.num_types();
    block_diag(&[&eye(2 * r), &zeros(r * k, r * k), &params.rv0()])
}

/// Minor extended system on `[xᵢ, x₀, x̄, x̂₀, x̄̂]` for type `k`.
pub fn build_minor_extended<T: Real>(
    params: &GameParameters<T>,
    k: usize,
    mf: &MeanFieldCoefficients<T>,
    major_cl: &ClosedLoopMajor<T>,
) -> Result<ExtendedSystem<T>> {
    check_coefficients(params, mf)?;
    let ty = params
        .types
        .get(k)
        .ok_or_else(|| MfgError::invalid("type index", format!("{k} out of range")))?;
    let n = params.n();
    let d = params.minor_dim();
    let nz2 = 2 * params.major_dim();
    check_shape(&major_cl.drift, nz2, nz2, "closed-loop major drift")?;

    let mut drift = zeros(d, d);
    set_block(&mut drift, 0, 0, &ty.a);
    set_block(&mut drift, 0, n, &params.g);
    set_block(&mut drift, n, n, &major_cl.drift);

    let control = vstack(&[&ty.b, &zeros(d - n, params.m())]);
    let mut offset = Vector::zeros(d);
    offset.rows_mut(n, nz2).copy_from(&major_cl.offset);

    let kd = major_cl.error_injection.ncols();
    let error_injection = vstack(&[&zeros(n, kd), &major_cl.error_injection]);
    let observation = hstack(&[&ty.l1, &ty.l2, &zeros(params.p(), d - 2 * n)]);

    Ok(ExtendedSystem {
        role: Role::Minor(k),
        drift,
        control,
        offset,
        diffusion: minor_diffusion(params, &major_cl.diffusion),
        noise_weight: minor_noise_weight(params),
        error_injection,
        observation,
        measurement_noise_cov: params.rv(),
    })
}

/// Intensity of the error-stack noise `[0, dw₀, 0, dν₀]`, where the
/// innovation block carries `𝕃₀V₀𝕃₀ᵀ + R_v0`.
pub fn error_noise_weight<T: Real>(params: &GameParameters<T>, v0: &Mat<T>) -> Mat<T> {
    let r = params.r_dim();
    let k = params.num_types();
    let l0 = hstack(&[&params.l0, &zeros(params.p0(), params.n() * k)]);
    let nu = &l0 * v0 * l0.transpose() + params.rv0();
    block_diag(&[&zeros(r, r), &eye(r), &zeros(r * k, r * k), &nu])
}

/// Stacked dynamics of the per-type average estimation errors.
pub fn build_error_stack<T: Real>(
    params: &GameParameters<T>,
    minor_systems: &[ExtendedSystem<T>],
    gains: &[Mat<T>],
    v0: &Mat<T>,
) -> Result<ExtendedSystem<T>> {
    let kt = params.num_types();
    if minor_systems.len() != kt {
        return Err(MfgError::dims("minor systems", kt, minor_systems.len()));
    }
    if gains.len() != kt {
        return Err(MfgError::dims("gains", kt, gains.len()));
    }
    let d = params.minor_dim();
    check_shape(v0, params.major_dim(), params.major_dim(), "V0")?;
    let mut drift = zeros(d * kt, d * kt);
    for (k, (sys, gain)) in minor_systems.iter().zip(gains).enumerate() {
        check_shape(gain, d, params.p(), &format!("gain[{k}]"))?;
        let closed = &sys.drift - gain * &sys.observation;
        set_block(&mut drift, k * d, k * d, &closed);
        let rows = drift.view((k * d, 0), (d, d * kt)).into_owned() + &sys.error_injection;
        set_block(&mut drift, k * d, 0, &rows);
    }
    let sel = SelectorMatrices::<T>::new(params.n(), kt);
    let diffusion = &sel.one_tilde * &minor_systems[0].diffusion;
    Ok(ExtendedSystem {
        role: Role::ErrorStack,
        drift,
        control: zeros(d * kt, 0),
        offset: Vector::zeros(d * kt),
        noise_weight: error_noise_weight(params, v0),
        diffusion,
        error_injection: zeros(d * kt, d * kt),
        observation: zeros(0, d * kt),
        measurement_noise_cov: zeros(0, 0),
    })
}
