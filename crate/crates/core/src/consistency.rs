//! The mean field fixed point: consistency equations coupled with the major
//! and minor control Riccati and offset equations.

use crate::error::{MfgError, Result};
use crate::linalg::{block, check_shape, eye, max_abs, set_block, spd_inverse, zeros, Mat, Vector};
use crate::model::{
    build_major_closed_loop, build_major_extended, build_minor_extended, GameParameters,
};
use crate::riccati::{solve_discounted_care, solve_offset, DiscountedCareProblem};
use crate::scalar::{lit, to_f64, Real};

/// Coefficients of the mean field equation
/// `dx̄ = (Āx̄ + Ḡx₀ + H̄x̂₀ + L̄x̄̂ + J̄x̄̃ + m̄)dt`, stacked over types.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldCoefficients<T: Real> {
    pub abar: Mat<T>,
    pub gbar: Mat<T>,
    pub hbar: Mat<T>,
    pub lbar: Mat<T>,
    pub jbar: Mat<T>,
    pub mbar: Vector<T>,
}

impl<T: Real> MeanFieldCoefficients<T> {
    pub fn zeros(n: usize, k: usize) -> Self {
        let nk = n * k;
        let d = 3 * n + 2 * nk;
        MeanFieldCoefficients {
            abar: zeros(nk, nk),
            gbar: zeros(nk, n),
            hbar: zeros(nk, n),
            lbar: zeros(nk, nk),
            jbar: zeros(nk, d * k),
            mbar: Vector::zeros(nk),
        }
    }

    /// Elementwise sup-norm of the difference over all coefficient arrays.
    pub fn max_change(&self, other: &Self) -> T {
        [
            max_abs(&(&self.abar - &other.abar)),
            max_abs(&(&self.gbar - &other.gbar)),
            max_abs(&(&self.hbar - &other.hbar)),
            max_abs(&(&self.lbar - &other.lbar)),
            max_abs(&(&self.jbar - &other.jbar)),
            self.mbar.iter().zip(other.mbar.iter()).fold(T::zero(), |a, (x, y)| a.max((*x - *y).abs())),
        ]
        .into_iter()
        .fold(T::zero(), |a, b| a.max(b))
    }

    pub fn max_norm(&self) -> T {
        [
            max_abs(&self.abar),
            max_abs(&self.gbar),
            max_abs(&self.hbar),
            max_abs(&self.lbar),
            max_abs(&self.jbar),
            self.mbar.amax(),
        ]
        .into_iter()
        .fold(T::zero(), |a, b| a.max(b))
    }

    /// `(1 − γ)·self + γ·other`.
    pub fn blend(&self, other: &Self, gamma: T) -> Self {
        let keep = T::one() - gamma;
        MeanFieldCoefficients {
            abar: &self.abar * keep + &other.abar * gamma,
            gbar: &self.gbar * keep + &other.gbar * gamma,
            hbar: &self.hbar * keep + &other.hbar * gamma,
            lbar: &self.lbar * keep + &other.lbar * gamma,
            jbar: &self.jbar * keep + &other.jbar * gamma,
            mbar: &self.mbar * keep + &other.mbar * gamma,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.max_norm().is_finite()
    }
}

/// Top two block rows of `Π_k`, split by the widths `n, n, nK, n, nK`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiBlocks<T: Real> {
    pub row1: [Mat<T>; 5],
    pub row2: [Mat<T>; 5],
}

impl<T: Real> PiBlocks<T> {
    /// Column offsets of the five blocks.
    pub fn offsets(n: usize, k: usize) -> [usize; 5] {
        [0, n, 2 * n, 2 * n + n * k, 3 * n + n * k]
    }

    pub fn widths(n: usize, k: usize) -> [usize; 5] {
        [n, n, n * k, n, n * k]
    }
}

pub fn extract_pi_blocks<T: Real>(pik: &Mat<T>, n: usize, k: usize) -> Result<PiBlocks<T>> {
    let d = 3 * n + 2 * n * k;
    check_shape(pik, d, d, "Pi_k")?;
    let off = PiBlocks::<T>::offsets(n, k);
    let w = PiBlocks::<T>::widths(n, k);
    let row = |r: usize| -> [Mat<T>; 5] { std::array::from_fn(|j| block(pik, r, off[j], n, w[j])) };
    Ok(PiBlocks {
        row1: row(0),
        row2: row(n),
    })
}

/// Closed-form consistency map from the minor Riccati and offset solutions
/// to the mean field coefficients.
pub fn apply_consistency_map<T: Real>(
    params: &GameParameters<T>,
    pik: &[Mat<T>],
    sk: &[Vector<T>],
) -> Result<MeanFieldCoefficients<T>> {
    let n = params.n();
    let kt = params.num_types();
    let d = params.minor_dim();
    if pik.len() != kt {
        return Err(MfgError::dims("Pi_k list", kt, pik.len()));
    }
    if sk.len() != kt {
        return Err(MfgError::dims("s_k list", kt, sk.len()));
    }
    let rinv = spd_inverse(&params.r, "R")?;
    let mut out = MeanFieldCoefficients::zeros(n, kt);
    for (k, ty) in params.types.iter().enumerate() {
        if sk[k].len() != d {
            return Err(MfgError::dims(format!("s_{k}"), d, sk[k].len()));
        }
        let blocks = extract_pi_blocks(&pik[k], n, kt)?;
        let gain = &ty.b * &rinv;
        let s = &gain * ty.b.transpose();
        let [p11, p12, p13, p14, p15] = &blocks.row1;
        let mut abar_row = -(&s * p13);
        let own = &ty.a - &s * p11;
        let cur = block(&abar_row, 0, k * n, n, n) + own;
        set_block(&mut abar_row, 0, k * n, &cur);
        set_block(&mut out.abar, k * n, 0, &abar_row);
        set_block(&mut out.gbar, k * n, 0, &(&params.g - &s * p12));
        set_block(&mut out.hbar, k * n, 0, &-(&s * p14));
        set_block(&mut out.lbar, k * n, 0, &-(&s * p15));
        let top = pik[k].rows(0, n).into_owned();
        set_block(&mut out.jbar, k * n, k * d, &(&s * top));
        let m = -(&gain * (ty.b.transpose() * sk[k].rows(0, n)));
        out.mbar.rows_mut(k * n, n).copy_from(&m);
    }
    Ok(out)
}

/// Control Riccati and offset solutions for given mean field coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSolves<T: Real> {
    pub pi0: Mat<T>,
    pub s0: Vector<T>,
    pub pik: Vec<Mat<T>>,
    pub sk: Vec<Vector<T>>,
    pub max_residual: T,
}

/// Solves the major then every minor control problem for the held
/// coefficients.
pub fn solve_control_problems<T: Real>(
    params: &GameParameters<T>,
    coeffs: &MeanFieldCoefficients<T>,
    care_tol: T,
    care_max_iter: usize,
) -> Result<ControlSolves<T>> {
    let major = build_major_extended(params, coeffs)?;
    let prob0 = DiscountedCareProblem::new(
        major.drift.clone(),
        major.control.clone(),
        params.r0.clone(),
        params.major_state_weight(),
        params.rho,
    )?;
    let sol0 = solve_discounted_care(&prob0, care_tol, care_max_iter)?;
    let f0 = prob0.closed_loop(&sol0.pi)?;
    let s0 = solve_offset(&f0, &sol0.pi, &major.offset, &params.major_eta_bar(), params.rho)?;
    // The filter gain only enters the closed-loop diffusion, which the
    // control problems never read.
    let k0 = zeros(major.dim(), params.p0());
    let cl = build_major_closed_loop(params, coeffs, &sol0.pi, &s0, &k0)?;

    let mut max_residual = sol0.residual_norm;
    let mut pik = Vec::with_capacity(params.num_types());
    let mut sk = Vec::with_capacity(params.num_types());
    let qpi = params.minor_state_weight();
    let eta_bar = params.minor_eta_bar();
    for k in 0..params.num_types() {
        let sys = build_minor_extended(params, k, coeffs, &cl)?;
        let prob = DiscountedCareProblem::new(
            sys.drift.clone(),
            sys.control.clone(),
            params.r.clone(),
            qpi.clone(),
            params.rho,
        )?;
        let sol = solve_discounted_care(&prob, care_tol, care_max_iter)?;
        let f = prob.closed_loop(&sol.pi)?;
        sk.push(solve_offset(&f, &sol.pi, &sys.offset, &eta_bar, params.rho)?);
        max_residual = max_residual.max(sol.residual_norm);
        pik.push(sol.pi);
    }
    Ok(ControlSolves {
        pi0: sol0.pi,
        s0,
        pik,
        sk,
        max_residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions<T: Real> {
    pub damping: T,
    pub tol: T,
    pub max_iter: usize,
    pub care_tol: T,
    pub care_max_iter: usize,
}

impl<T: Real> Default for FixedPointOptions<T> {
    fn default() -> Self {
        FixedPointOptions {
            damping: lit(0.5),
            tol: lit(1e-11),
            max_iter: 500,
            care_tol: lit(1e-10),
            care_max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldSolution<T: Real> {
    pub coefficients: MeanFieldCoefficients<T>,
    pub pi0: Mat<T>,
    pub s0: Vector<T>,
    pub pik: Vec<Mat<T>>,
    pub sk: Vec<Vector<T>>,
    pub pi_blocks: Vec<PiBlocks<T>>,
    pub iterations: usize,
    pub residual: T,
    pub converged: bool,
}

impl<T: Real> MeanFieldSolution<T> {
    pub fn ensure_converged(&self) -> Result<&Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(MfgError::NotConverged {
                what: "mean field fixed point".into(),
                iterations: self.iterations,
                residual: to_f64(self.residual),
            })
        }
    }

    /// Assembles a solution from held coefficients and their control solves.
    pub fn from_parts(
        params: &GameParameters<T>,
        coefficients: MeanFieldCoefficients<T>,
        solves: ControlSolves<T>,
        iterations: usize,
        residual: T,
        converged: bool,
    ) -> Result<Self> {
        let pi_blocks = solves
            .pik
            .iter()
            .map(|p| extract_pi_blocks(p, params.n(), params.num_types()))
            .collect::<Result<Vec<_>>>()?;
        Ok(MeanFieldSolution {
            coefficients,
            pi0: solves.pi0,
            s0: solves.s0,
            pik: solves.pik,
            sk: solves.sk,
            pi_blocks,
            iterations,
            residual,
            converged,
        })
    }
}

const DIVERGENCE_NORM: f64 = 1e8;

/// Damped Picard iteration on the mean field coefficients. An unconverged
/// run returns its last iterate with `converged = false`.
pub fn solve_fixed_point<T: Real>(
    params: &GameParameters<T>,
    opts: &FixedPointOptions<T>,
    init: Option<&MeanFieldCoefficients<T>>,
) -> Result<MeanFieldSolution<T>> {
    if !(opts.damping > T::zero() && opts.damping <= T::one()) {
        return Err(MfgError::invalid("damping", "must lie in (0, 1]"));
    }
    params.check_dimensions()?;
    let mut coeffs = match init {
        Some(c) => c.clone(),
        None => MeanFieldCoefficients::zeros(params.n(), params.num_types()),
    };
    let mut solves = solve_control_problems(params, &coeffs, opts.care_tol, opts.care_max_iter)?;
    let mut mapped = apply_consistency_map(params, &solves.pik, &solves.sk)?;
    if init.is_none() {
        // Start from the first image of zero so that Ā_k begins at A_k ē_k.
        coeffs = mapped;
        solves = solve_control_problems(params, &coeffs, opts.care_tol, opts.care_max_iter)?;
        mapped = apply_consistency_map(params, &solves.pik, &solves.sk)?;
    }
    for it in 1..=opts.max_iter {
        let residual = coeffs.max_change(&mapped);
        if !mapped.is_finite() || mapped.max_norm() > lit(DIVERGENCE_NORM) {
            return Err(MfgError::DivergenceDetected {
                iteration: it,
                norm: to_f64(mapped.max_norm()),
            });
        }
        if residual < opts.tol {
            return MeanFieldSolution::from_parts(params, coeffs, solves, it, residual, true);
        }
        coeffs = coeffs.blend(&mapped, opts.damping);
        solves = solve_control_problems(params, &coeffs, opts.care_tol, opts.care_max_iter)?;
        mapped = apply_consistency_map(params, &solves.pik, &solves.sk)?;
    }
    let residual = coeffs.max_change(&mapped);
    let converged = residual < opts.tol;
    MeanFieldSolution::from_parts(params, coeffs, solves, opts.max_iter, residual, converged)
}

/// Sup-norm mismatch between the coefficients of a solution and the
/// consistency map applied to freshly solved control problems.
pub fn fixed_point_residual<T: Real>(
    params: &GameParameters<T>,
    sol: &MeanFieldSolution<T>,
) -> Result<T> {
    let opts = FixedPointOptions::<T>::default();
    let solves = solve_control_problems(params, &sol.coefficients, opts.care_tol, opts.care_max_iter)?;
    Ok(apply_consistency_map(params, &solves.pik, &solves.sk)?.max_change(&sol.coefficients))
}

/// Selector `ē_k` placing type block `k` of a stacked `nK` vector.
pub fn e_bar<T: Real>(n: usize, kt: usize, k: usize) -> Mat<T> {
    let mut e = zeros(n, n * kt);
    set_block(&mut e, 0, k * n, &eye(n));
    e
}
