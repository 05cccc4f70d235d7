//! Kalman filters over the extended states of the major and minor agents,
//! including the estimates-of-estimates filter.

use crate::error::{MfgError, Result};
use crate::linalg::{check_shape, hstack, psd_pseudo_inverse, set_block, zeros, Mat, Vector};
use crate::model::ExtendedSystem;
use crate::riccati::{filter_gain, CovarianceTrajectory};
use crate::scalar::{lit, to_f64, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterRole {
    Major,
    Minor { k: usize, agent: usize },
}

/// Filter state of one agent: extended estimate, covariance and gain at
/// time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentFilterState<T: Real> {
    pub role: FilterRole,
    pub xhat: Vector<T>,
    pub v: Mat<T>,
    pub k: Mat<T>,
    pub t: T,
}

impl<T: Real> AgentFilterState<T> {
    pub fn new(role: FilterRole, xhat: Vector<T>, v: Mat<T>, sys: &ExtendedSystem<T>, t: T) -> Self {
        let k = filter_gain(&v, &sys.observation, &sys.measurement_noise_cov);
        AgentFilterState { role, xhat, v, k, t }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Innovation<T: Real> {
    pub dnu: Vector<T>,
    pub t: T,
}

/// `dν = dy − 𝕃x̂ dt`.
pub fn innovation<T: Real>(observation: &Mat<T>, xhat: &Vector<T>, dy: &Vector<T>, dt: T, t: T) -> Innovation<T> {
    Innovation {
        dnu: dy - observation * xhat * dt,
        t,
    }
}

/// Where filter covariances come from: an integrated trajectory or one
/// stationary matrix.
#[derive(Debug, Clone, Copy)]
pub enum GainSchedule<'a, T: Real> {
    Trajectory(&'a CovarianceTrajectory<T>),
    Stationary(&'a Mat<T>),
}

impl<'a, T: Real> GainSchedule<'a, T> {
    /// Covariance for time `t`, failing with `StaleGain` when `t` is not
    /// within half a step of a grid point.
    pub fn covariance_at(&self, t: T, dt: T) -> Result<&'a Mat<T>> {
        match self {
            GainSchedule::Stationary(v) => Ok(v),
            GainSchedule::Trajectory(traj) => {
                let step = traj.dt();
                let idx = if step > T::zero() {
                    to_f64(t / step).round().max(0.0) as usize
                } else {
                    0
                };
                let idx = idx.min(traj.len() - 1);
                let gt = traj.grid[idx];
                if (gt - t).abs() > dt * lit(0.5) {
                    return Err(MfgError::StaleGain {
                        state_t: to_f64(t),
                        gain_t: to_f64(gt),
                    });
                }
                Ok(&traj.values[idx])
            }
        }
    }
}

/// Affine feedback `u = −R⁻¹𝔹ᵀ(Πx̂ + s)` in the form `u = F x̂ + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackLaw<T: Real> {
    pub gain: Mat<T>,
    pub offset: Vector<T>,
}

impl<T: Real> FeedbackLaw<T> {
    pub fn new(control: &Mat<T>, rinv: &Mat<T>, pi: &Mat<T>, s: &Vector<T>) -> Self {
        let row = -(rinv * control.transpose());
        FeedbackLaw {
            gain: &row * pi,
            offset: row * s,
        }
    }

    pub fn apply(&self, xhat: &Vector<T>) -> Vector<T> {
        &self.gain * xhat + &self.offset
    }

    /// Applies the law column-wise to a batch of estimates.
    pub fn apply_batch(&self, xhat: &Mat<T>) -> Mat<T> {
        let mut u = &self.gain * xhat;
        for mut col in u.column_iter_mut() {
            col += &self.offset;
        }
        u
    }
}

/// One explicit step of `dx̂ = (𝔸x̂ + 𝔹u + 𝕄)dt + K dν` applied to a batch of
/// estimates stored as columns. Innovations use the pre-step estimates and
/// are returned.
pub fn propagate_estimates<T: Real>(
    xhat: &mut Mat<T>,
    sys: &ExtendedSystem<T>,
    u: &Mat<T>,
    gain: &Mat<T>,
    dy: &Mat<T>,
    dt: T,
) -> Mat<T> {
    let mut dnu = dy.clone();
    dnu.gemm(-dt, &sys.observation, &*xhat, T::one());
    let mut next = xhat.clone();
    next.gemm(dt, &sys.drift, &*xhat, T::one());
    next.gemm(dt, &sys.control, u, T::one());
    next.gemm(T::one(), gain, &dnu, T::one());
    let shift = &sys.offset * dt;
    for mut col in next.column_iter_mut() {
        col += &shift;
    }
    *xhat = next;
    dnu
}

fn filter_step<T: Real>(
    state: &AgentFilterState<T>,
    u: &Vector<T>,
    dy: &Vector<T>,
    dt: T,
    sys: &ExtendedSystem<T>,
    schedule: GainSchedule<'_, T>,
) -> Result<(AgentFilterState<T>, Innovation<T>)> {
    let v = schedule.covariance_at(state.t, dt)?;
    let k = filter_gain(v, &sys.observation, &sys.measurement_noise_cov);
    let mut x = Mat::from_column_slice(state.xhat.len(), 1, state.xhat.as_slice());
    let um = Mat::from_column_slice(u.len(), 1, u.as_slice());
    let dym = Mat::from_column_slice(dy.len(), 1, dy.as_slice());
    let dnu = propagate_estimates(&mut x, sys, &um, &k, &dym, dt);
    let t_next = state.t + dt;
    let v_next = match schedule {
        GainSchedule::Stationary(v) => v.clone(),
        GainSchedule::Trajectory(traj) => {
            let idx = (to_f64(t_next / traj.dt()).round() as usize).min(traj.len() - 1);
            traj.values[idx].clone()
        }
    };
    let k_next = filter_gain(&v_next, &sys.observation, &sys.measurement_noise_cov);
    Ok((
        AgentFilterState {
            role: state.role,
            xhat: x.column(0).into_owned(),
            v: v_next,
            k: k_next,
            t: t_next,
        },
        Innovation {
            dnu: dnu.column(0).into_owned(),
            t: state.t,
        },
    ))
}

/// Advances the major agent's extended filter by one step of size `dt`
/// under its own control `û₀ = −R₀⁻¹𝔹₀ᵀ(Π₀x̂ + s₀)`.
pub fn major_filter_step<T: Real>(
    state: &AgentFilterState<T>,
    dy0: &Vector<T>,
    dt: T,
    sys: &ExtendedSystem<T>,
    law: &FeedbackLaw<T>,
    schedule: GainSchedule<'_, T>,
) -> Result<(AgentFilterState<T>, Innovation<T>)> {
    if state.role != FilterRole::Major {
        return Err(MfgError::invalid("role", "major filter step needs the major role"));
    }
    let u = law.apply(&state.xhat);
    filter_step(state, &u, dy0, dt, sys, schedule)
}

/// Advances a minor agent's extended filter by one step under its control
/// `u`, which the caller computes from the pre-step estimate.
pub fn minor_filter_step<T: Real>(
    state: &AgentFilterState<T>,
    dyi: &Vector<T>,
    u: &Vector<T>,
    dt: T,
    sys: &ExtendedSystem<T>,
    schedule: GainSchedule<'_, T>,
) -> Result<(AgentFilterState<T>, Innovation<T>)> {
    if !matches!(state.role, FilterRole::Minor { .. }) {
        return Err(MfgError::invalid("role", "minor filter step needs a minor role"));
    }
    filter_step(state, u, dyi, dt, sys, schedule)
}

/// The minor agent's estimate of the major agent's control, read from the
/// iterated-estimate blocks of its extended estimate.
pub fn estimate_major_control<T: Real>(
    minor_xhat: &Vector<T>,
    major_law: &FeedbackLaw<T>,
    n: usize,
) -> Vector<T> {
    let nz = major_law.gain.ncols();
    let iterated = minor_xhat.rows(n + nz, nz).into_owned();
    major_law.apply(&iterated)
}

/// Inputs of the estimates-of-estimates filter: a major agent with linear
/// dynamics `dx₀ = (A₀x₀ + Bu₀)dt`, feedback `u₀ = −L x̂₀`, its own filter
/// gain `K₀` on observations `H₀x₀`, and a minor agent observing `Hᵢx₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatesOfEstimates<T: Real> {
    pub a0: Mat<T>,
    pub b: Mat<T>,
    pub l: Mat<T>,
    pub h0: Mat<T>,
    pub hi: Mat<T>,
    pub k0: Mat<T>,
    pub ki: Mat<T>,
}

impl<T: Real> EstimatesOfEstimates<T> {
    pub fn check(&self) -> Result<usize> {
        let n = crate::linalg::check_square(&self.a0, "A0")?;
        let m = self.b.ncols();
        check_shape(&self.b, n, m, "B")?;
        check_shape(&self.l, m, n, "L")?;
        check_shape(&self.h0, self.h0.nrows(), n, "H0")?;
        check_shape(&self.k0, n, self.h0.nrows(), "K0")?;
        check_shape(&self.hi, self.hi.nrows(), n, "Hi")?;
        check_shape(&self.ki, 2 * n, self.hi.nrows(), "Ki")?;
        Ok(n)
    }

    /// Drift `[[A₀, −BL], [K₀H₀, A₀ − BL − K₀H₀]]` of `[x₀; x̂₀]`.
    pub fn stacked_drift(&self) -> Mat<T> {
        let n = self.a0.nrows();
        let bl = &self.b * &self.l;
        let kh = &self.k0 * &self.h0;
        let mut f = zeros(2 * n, 2 * n);
        set_block(&mut f, 0, 0, &self.a0);
        set_block(&mut f, 0, n, &-bl.clone());
        set_block(&mut f, n, 0, &kh);
        set_block(&mut f, n, n, &(&self.a0 - bl - kh));
        f
    }

    pub fn stacked_observation(&self) -> Mat<T> {
        hstack(&[&self.hi, &zeros(self.hi.nrows(), self.a0.nrows())])
    }
}

/// Runs the estimates-of-estimates filter on minor observation increments,
/// returning the stacked estimate `[x̂₀|ᵢ; (x̂₀|₀)|ᵢ]` at every grid point.
pub fn estimates_of_estimates_filter<T: Real>(
    sys: &EstimatesOfEstimates<T>,
    init: &Vector<T>,
    dy: &[Vector<T>],
    dt: T,
) -> Result<Vec<Vector<T>>> {
    let n = sys.check()?;
    if init.len() != 2 * n {
        return Err(MfgError::dims("initial estimate", 2 * n, init.len()));
    }
    let f = sys.stacked_drift();
    let c = sys.stacked_observation();
    let mut out = Vec::with_capacity(dy.len() + 1);
    let mut x = init.clone();
    out.push(x.clone());
    for (i, inc) in dy.iter().enumerate() {
        if inc.len() != c.nrows() {
            return Err(MfgError::dims(format!("dy[{i}]"), c.nrows(), inc.len()));
        }
        let dnu = inc - &c * &x * dt;
        x = &x + &f * &x * dt + &sys.ki * dnu;
        out.push(x.clone());
    }
    Ok(out)
}

/// Gain `V𝕃ᵀR⁺` from a covariance, for callers holding raw matrices.
pub fn gain_from_covariance<T: Real>(v: &Mat<T>, observation: &Mat<T>, noise_cov: &Mat<T>) -> Mat<T> {
    v * observation.transpose() * psd_pseudo_inverse(noise_cov)
}
