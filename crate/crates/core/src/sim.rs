//! Finite-population Monte Carlo: populations, closed-loop simulation under
//! the mean field control laws, discounted costs, Nash gaps and stability
//! statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::consistency::MeanFieldSolution;
use crate::error::{MfgError, Result};
use crate::filters::{propagate_estimates, FeedbackLaw};
use crate::linalg::{max_abs, spd_inverse, zeros, Mat, Vector};
use crate::model::{
    build_error_stack, build_major_closed_loop, build_major_extended, build_minor_extended,
    psd_sqrt, ExtendedSystem, GameParameters,
};
use crate::riccati::{
    filter_gain, integrate_filter_covariances, make_grid, stationary_covariances, step_count,
    CovarianceTrajectory, FilterCovariances,
};
use crate::scalar::{lit, to_f64, Real};

/// Independent noise sources of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseSource {
    Process = 0,
    Measurement = 1,
    Initial = 2,
    Population = 3,
}

/// Agent id used for RNG streams: 0 is the major agent, minor `i` is `i + 1`.
pub fn agent_stream_id(minor: Option<usize>) -> u64 {
    minor.map_or(0, |i| i as u64 + 1)
}

/// Deterministic generator for one `(seed, path, agent, source)` tuple.
/// Streams of distinct tuples never overlap, and an agent's stream does not
/// depend on how many other agents exist.
pub fn substream(seed: u64, path: u64, agent: u64, source: NoiseSource) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&path.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream((agent << 8) | source as u64);
    rng
}

fn normals<T: Real>(rng: &mut ChaCha8Rng, out: &mut [T], scale: T) {
    for x in out {
        let z: f64 = rng.sample(StandardNormal);
        *x = lit::<T>(z) * scale;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopulationMode {
    Sampled,
    Proportional,
}

/// Type assignment of a finite population of minor agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub type_of: Vec<usize>,
    pub empirical_pi: Vec<f64>,
    members: Vec<Vec<usize>>,
}

impl Population {
    pub fn from_types(type_of: Vec<usize>, num_types: usize) -> Result<Self> {
        if type_of.is_empty() {
            return Err(MfgError::invalid("N", "population must be nonempty"));
        }
        let mut members = vec![Vec::new(); num_types];
        for (i, &k) in type_of.iter().enumerate() {
            members
                .get_mut(k)
                .ok_or_else(|| MfgError::invalid("type_of", format!("type {k} out of range")))?
                .push(i);
        }
        let n = type_of.len() as f64;
        let empirical_pi = members.iter().map(|m| m.len() as f64 / n).collect();
        Ok(Population {
            type_of,
            empirical_pi,
            members,
        })
    }

    pub fn size(&self) -> usize {
        self.type_of.len()
    }

    /// Global agent indices of type `k`, in increasing order.
    pub fn members(&self, k: usize) -> &[usize] {
        &self.members[k]
    }

    /// `(type, position within type)` of a global agent index.
    pub fn locate(&self, agent: usize) -> Option<(usize, usize)> {
        let k = *self.type_of.get(agent)?;
        let j = self.members[k].binary_search(&agent).ok()?;
        Some((k, j))
    }
}

pub fn generate_population<T: Real>(
    params: &GameParameters<T>,
    n: usize,
    mode: PopulationMode,
    seed: u64,
) -> Result<Population> {
    if n == 0 {
        return Err(MfgError::invalid("N", "must be at least 1"));
    }
    let pi: Vec<f64> = params.pi.iter().map(|&w| to_f64(w)).collect();
    let kt = pi.len();
    let type_of = match mode {
        PopulationMode::Sampled => {
            let mut rng = substream(seed, 0, 0, NoiseSource::Population);
            (0..n)
                .map(|_| {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    for (k, &w) in pi.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            return k;
                        }
                    }
                    kt - 1
                })
                .collect()
        }
        PopulationMode::Proportional => {
            let raw: Vec<f64> = pi.iter().map(|w| w * n as f64).collect();
            let mut counts: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
            let assigned: usize = counts.iter().sum();
            let mut order: Vec<usize> = (0..kt).collect();
            order.sort_by(|&a, &b| {
                let fa = raw[a] - raw[a].floor();
                let fb = raw[b] - raw[b].floor();
                fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
            });
            for &k in order.iter().take(n.saturating_sub(assigned)) {
                counts[k] += 1;
            }
            counts
                .iter()
                .enumerate()
                .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
                .collect()
        }
    };
    Population::from_types(type_of, kt)
}

/// A unilateral deviation of one minor agent from its equilibrium law:
/// `u = gain_scale·F x̂ + c + offset_shift·1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Deviation<T: Real> {
    pub agent: usize,
    pub gain_scale: T,
    pub offset_shift: T,
}

impl<T: Real> Deviation<T> {
    pub fn describe(&self) -> String {
        format!(
            "agent {} gain x{} shift {:+}",
            self.agent,
            to_f64(self.gain_scale),
            to_f64(self.offset_shift)
        )
    }

    pub fn is_identity(&self) -> bool {
        self.gain_scale == T::one() && self.offset_shift == T::zero()
    }
}

/// Gain scalings and offset shifts applied to agent `agent`.
pub fn deviation_family<T: Real>(agent: usize, scales: &[f64], shifts: &[f64]) -> Vec<Deviation<T>> {
    let mut out: Vec<Deviation<T>> = scales
        .iter()
        .map(|&s| Deviation {
            agent,
            gain_scale: lit(s),
            offset_shift: T::zero(),
        })
        .collect();
    out.extend(shifts.iter().map(|&d| Deviation {
        agent,
        gain_scale: T::one(),
        offset_shift: lit(d),
    }));
    out
}

/// Read-only data shared by every simulated path: the solved equilibrium,
/// its feedback laws and the per-step filter gains.
#[derive(Debug, Clone)]
pub struct Equilibrium<T: Real> {
    pub params: GameParameters<T>,
    pub solution: MeanFieldSolution<T>,
    pub dt: T,
    pub steps: usize,
    pub stationary_gains: bool,
    pub major: ExtendedSystem<T>,
    pub minors: Vec<ExtendedSystem<T>>,
    pub major_law: FeedbackLaw<T>,
    pub minor_laws: Vec<FeedbackLaw<T>>,
    pub covariances: FilterCovariances<T>,
    pub k0: Vec<Mat<T>>,
    pub kk: Vec<Vec<Mat<T>>>,
    pub error_drift: Vec<Mat<T>>,
    pub error_diffusion: Vec<Mat<T>>,
    init_sqrt: Mat<T>,
}

impl<T: Real> Equilibrium<T> {
    pub fn prepare(
        params: &GameParameters<T>,
        solution: &MeanFieldSolution<T>,
        dt: T,
        horizon: T,
        stationary_gains: bool,
    ) -> Result<Self> {
        solution.ensure_converged()?;
        let steps = step_count(dt, horizon)?;
        let covariances = if stationary_gains {
            let st = stationary_covariances(params, solution, lit(1e-12), 200)?;
            FilterCovariances {
                v0: CovarianceTrajectory::constant(&st.v0, steps, dt),
                vbar: CovarianceTrajectory::constant(&st.vbar, steps, dt),
                vk: st
                    .vk
                    .iter()
                    .map(|v| CovarianceTrajectory::constant(v, steps, dt))
                    .collect(),
            }
        } else {
            integrate_filter_covariances(params, solution, dt, horizon)?
        };
        let coeffs = &solution.coefficients;
        let major = build_major_extended(params, coeffs)?;
        let r0inv = spd_inverse(&params.r0, "R0")?;
        let rinv = spd_inverse(&params.r, "R")?;
        let major_law = FeedbackLaw::new(&major.control, &r0inv, &solution.pi0, &solution.s0);

        let mut k0 = Vec::with_capacity(steps + 1);
        let mut kk = vec![Vec::with_capacity(steps + 1); params.num_types()];
        let mut error_drift = Vec::with_capacity(steps + 1);
        let mut error_diffusion = Vec::with_capacity(steps + 1);
        let mut minors = Vec::new();
        for i in 0..=steps {
            let v0 = &covariances.v0.values[i];
            let g0 = filter_gain(v0, &major.observation, &major.measurement_noise_cov);
            let cl = build_major_closed_loop(params, coeffs, &solution.pi0, &solution.s0, &g0)?;
            let sys: Vec<ExtendedSystem<T>> = (0..params.num_types())
                .map(|k| build_minor_extended(params, k, coeffs, &cl))
                .collect::<Result<_>>()?;
            let gains: Vec<Mat<T>> = sys
                .iter()
                .zip(&covariances.vk)
                .map(|(s, vk)| filter_gain(&vk.values[i], &s.observation, &s.measurement_noise_cov))
                .collect();
            let stack = build_error_stack(params, &sys, &gains, v0)?;
            error_drift.push(stack.drift);
            error_diffusion.push(stack.diffusion);
            for (k, g) in gains.into_iter().enumerate() {
                kk[k].push(g);
            }
            k0.push(g0);
            if i == 0 {
                minors = sys;
            }
        }
        let minor_laws = minors
            .iter()
            .zip(&solution.pik)
            .zip(&solution.sk)
            .map(|((sys, pi), s)| FeedbackLaw::new(&sys.control, &rinv, pi, s))
            .collect();
        Ok(Equilibrium {
            init_sqrt: psd_sqrt(&params.sigma_init),
            params: params.clone(),
            solution: solution.clone(),
            dt,
            steps,
            stationary_gains,
            major,
            minors,
            major_law,
            minor_laws,
            covariances,
            k0,
            kk,
            error_drift,
            error_diffusion,
        })
    }

    pub fn horizon(&self) -> T {
        self.dt * lit::<T>(self.steps as f64)
    }

    pub fn grid(&self) -> Vec<T> {
        make_grid(self.steps, self.dt)
    }
}

/// Filters and controllers of all agents. They see observation increments
/// only; no method accepts a true state.
#[derive(Debug, Clone)]
pub struct ControllerBank<'a, T: Real> {
    eq: &'a Equilibrium<T>,
    pub z0: Vector<T>,
    pub z: Vec<Mat<T>>,
    deviation: Option<(usize, usize, Deviation<T>)>,
}

impl<'a, T: Real> ControllerBank<'a, T> {
    pub fn new(eq: &'a Equilibrium<T>, pop: &Population, deviation: Option<&Deviation<T>>) -> Result<Self> {
        let d = eq.params.minor_dim();
        let deviation = match deviation {
            Some(dev) if !dev.is_identity() => {
                let (k, j) = pop.locate(dev.agent).ok_or_else(|| {
                    MfgError::invalid("deviation agent", format!("{} not in population", dev.agent))
                })?;
                Some((k, j, dev.clone()))
            }
            _ => None,
        };
        Ok(ControllerBank {
            eq,
            z0: Vector::zeros(eq.params.major_dim()),
            z: (0..eq.params.num_types())
                .map(|k| zeros(d, pop.members(k).len()))
                .collect(),
            deviation,
        })
    }

    /// Controls from the current estimates.
    pub fn controls(&self) -> (Vector<T>, Vec<Mat<T>>) {
        let u0 = self.eq.major_law.apply(&self.z0);
        let mut u: Vec<Mat<T>> = self
            .z
            .iter()
            .zip(&self.eq.minor_laws)
            .map(|(z, law)| law.apply_batch(z))
            .collect();
        if let Some((k, j, dev)) = &self.deviation {
            let law = &self.eq.minor_laws[*k];
            let zj = self.z[*k].column(*j);
            let uj = &law.gain * zj * dev.gain_scale + &law.offset
                + Vector::from_element(law.offset.len(), dev.offset_shift);
            u[*k].set_column(*j, &uj);
        }
        (u0, u)
    }

    /// Filter update over step `step` given the observation increments and
    /// the controls actually applied; returns the innovations.
    pub fn update(
        &mut self,
        step: usize,
        dy0: &Vector<T>,
        dy: &[Mat<T>],
        u0: &Vector<T>,
        u: &[Mat<T>],
    ) -> (Vector<T>, Vec<Mat<T>>) {
        let dt = self.eq.dt;
        let mut z0 = Mat::from_column_slice(self.z0.len(), 1, self.z0.as_slice());
        let u0m = Mat::from_column_slice(u0.len(), 1, u0.as_slice());
        let dy0m = Mat::from_column_slice(dy0.len(), 1, dy0.as_slice());
        let dnu0 = propagate_estimates(&mut z0, &self.eq.major, &u0m, &self.eq.k0[step], &dy0m, dt);
        self.z0 = z0.column(0).into_owned();
        let dnu = self
            .z
            .iter_mut()
            .enumerate()
            .map(|(k, z)| propagate_estimates(z, &self.eq.minors[k], &u[k], &self.eq.kk[k][step], &dy[k], dt))
            .collect();
        (dnu0.column(0).into_owned(), dnu)
    }
}

/// Everything visible at one grid point of a path.
pub struct StepView<'v, T: Real> {
    pub step: usize,
    pub t: T,
    pub pop: &'v Population,
    pub x0: &'v Vector<T>,
    pub z0: &'v Vector<T>,
    pub u0: &'v Vector<T>,
    pub x: &'v [Mat<T>],
    pub z: &'v [Mat<T>],
    pub u: &'v [Mat<T>],
    /// Empirical average over all minor agents.
    pub xn: &'v Vector<T>,
    /// Empirical averages stacked by type.
    pub xn_types: &'v Vector<T>,
    /// Mean field state integrated alongside the population.
    pub xbar: &'v Vector<T>,
    /// Average estimation error stack integrated alongside.
    pub xtilde: &'v Vector<T>,
}

impl<'v, T: Real> StepView<'v, T> {
    /// True minor extended states `[xᵢ, x₀, x^(N) by type, x̂₀, x̄̂]` minus
    /// the estimates, for type `k`.
    pub fn minor_errors(&self, k: usize) -> Mat<T> {
        self.minor_errors_against(k, self.xn_types)
    }

    /// As [`StepView::minor_errors`] with `mean` standing in for the
    /// mean field block of the true state.
    pub fn minor_errors_against(&self, k: usize, mean: &Vector<T>) -> Mat<T> {
        let n = self.x0.len();
        let nk = self.xn_types.len();
        let nz = self.z0.len();
        let mut e = -self.z[k].clone();
        for (j, mut col) in e.column_iter_mut().enumerate() {
            let mut r = col.rows_mut(0, n);
            r += self.x[k].column(j);
            let mut r = col.rows_mut(n, n);
            r += self.x0;
            let mut r = col.rows_mut(2 * n, nk);
            r += mean;
            let mut r = col.rows_mut(2 * n + nk, nz);
            r += self.z0;
        }
        e
    }

    /// Major extended error `[x₀, x^(N) by type] − [x̂₀, x̄̂]`.
    pub fn major_error(&self) -> Vector<T> {
        let n = self.x0.len();
        let mut truth = Vector::zeros(self.z0.len());
        truth.rows_mut(0, n).copy_from(self.x0);
        truth.rows_mut(n, self.xn_types.len()).copy_from(self.xn_types);
        truth - self.z0
    }
}

/// Per-step callbacks of a simulated path.
pub trait Observer<T: Real> {
    fn observe(&mut self, view: &StepView<'_, T>);

    /// Innovations of the step starting at grid point `step`.
    fn innovations(&mut self, _step: usize, _dnu0: &Vector<T>, _dnu: &[Mat<T>]) {}
}

impl<T: Real, A: Observer<T>, B: Observer<T>> Observer<T> for (A, B) {
    fn observe(&mut self, view: &StepView<'_, T>) {
        self.0.observe(view);
        self.1.observe(view);
    }
    fn innovations(&mut self, step: usize, dnu0: &Vector<T>, dnu: &[Mat<T>]) {
        self.0.innovations(step, dnu0, dnu);
        self.1.innovations(step, dnu0, dnu);
    }
}

const BLOWUP_NORM: f64 = 1e9;

fn blowup_check<T: Real>(step: usize, x0: &Vector<T>, x: &[Mat<T>], z: &[Mat<T>], pop: &Population) -> Result<()> {
    let lim = lit::<T>(BLOWUP_NORM);
    if !(x0.amax() <= lim) {
        return Err(MfgError::NumericalBlowup {
            step,
            agent: "major".into(),
            norm: to_f64(x0.norm()),
        });
    }
    for (k, (xk, zk)) in x.iter().zip(z).enumerate() {
        if max_abs(xk) <= lim && max_abs(zk) <= lim {
            continue;
        }
        for j in 0..xk.ncols() {
            let norm = xk.column(j).norm().max(zk.column(j).norm());
            if !(norm <= lim) {
                return Err(MfgError::NumericalBlowup {
                    step,
                    agent: format!("minor {}", pop.members(k)[j]),
                    norm: to_f64(norm),
                });
            }
        }
    }
    Ok(())
}

/// Simulates one path of the closed-loop game, reporting every grid point
/// to `obs`. Path `path` of seed `seed` always sees the same noise.
pub fn simulate_path<T: Real, O: Observer<T>>(
    eq: &Equilibrium<T>,
    pop: &Population,
    seed: u64,
    path: u64,
    deviation: Option<&Deviation<T>>,
    obs: &mut O,
) -> Result<()> {
    let p = &eq.params;
    let n = p.n();
    let kt = p.num_types();
    let r = p.r_dim();
    let dt = eq.dt;
    let sq = dt.sqrt();
    let l0n = p.sigma_v0.ncols();
    let ln = p.sigma_v.ncols();
    let nn = lit::<T>(pop.size() as f64);
    let coeffs = &eq.solution.coefficients;
    let mut bank = ControllerBank::new(eq, pop, deviation)?;

    let minor_ids: Vec<Vec<u64>> = (0..kt)
        .map(|k| pop.members(k).iter().map(|&i| agent_stream_id(Some(i))).collect())
        .collect();
    let mut w_rng: Vec<Vec<ChaCha8Rng>> = minor_ids
        .iter()
        .map(|ids| ids.iter().map(|&a| substream(seed, path, a, NoiseSource::Process)).collect())
        .collect();
    let mut v_rng: Vec<Vec<ChaCha8Rng>> = minor_ids
        .iter()
        .map(|ids| ids.iter().map(|&a| substream(seed, path, a, NoiseSource::Measurement)).collect())
        .collect();
    let mut w0_rng = substream(seed, path, 0, NoiseSource::Process);
    let mut v0_rng = substream(seed, path, 0, NoiseSource::Measurement);

    let draw_initial = |agent: u64| -> Vector<T> {
        let mut rng = substream(seed, path, agent, NoiseSource::Initial);
        let mut xi = vec![T::zero(); n];
        normals(&mut rng, &mut xi, T::one());
        &eq.init_sqrt * Vector::from_vec(xi)
    };
    let mut x0 = draw_initial(0);
    let mut x: Vec<Mat<T>> = minor_ids
        .iter()
        .map(|ids| {
            let mut m = zeros(n, ids.len());
            for (j, &a) in ids.iter().enumerate() {
                m.set_column(j, &draw_initial(a));
            }
            m
        })
        .collect();

    let d = p.minor_dim();
    let nz = p.major_dim();
    let mut xbar = Vector::zeros(n * kt);
    let mut xtilde = Vector::zeros(d * kt);
    for k in 0..kt {
        xtilde.rows_mut(k * d + n, n).copy_from(&x0);
    }

    let mut dw0 = vec![T::zero(); r];
    let mut dv0 = vec![T::zero(); l0n];
    let mut dw: Vec<Mat<T>> = (0..kt).map(|k| zeros(r, pop.members(k).len())).collect();
    let mut dv: Vec<Mat<T>> = (0..kt).map(|k| zeros(ln, pop.members(k).len())).collect();

    for step in 0..=eq.steps {
        let t = dt * lit::<T>(step as f64);
        let (u0, u) = bank.controls();
        let mut xn_types = Vector::zeros(n * kt);
        let mut xn = Vector::zeros(n);
        for (k, xk) in x.iter().enumerate() {
            let sum = xk.column_sum();
            xn += &sum;
            if xk.ncols() > 0 {
                xn_types.rows_mut(k * n, n).copy_from(&(sum / lit::<T>(xk.ncols() as f64)));
            }
        }
        xn /= nn;
        obs.observe(&StepView {
            step,
            t,
            pop,
            x0: &x0,
            z0: &bank.z0,
            u0: &u0,
            x: &x,
            z: &bank.z,
            u: &u,
            xn: &xn,
            xn_types: &xn_types,
            xbar: &xbar,
            xtilde: &xtilde,
        });
        if step == eq.steps {
            break;
        }

        normals(&mut w0_rng, &mut dw0, sq);
        normals(&mut v0_rng, &mut dv0, sq);
        for k in 0..kt {
            for (j, (wr, vr)) in w_rng[k].iter_mut().zip(v_rng[k].iter_mut()).enumerate() {
                normals(wr, dw[k].column_mut(j).as_mut_slice(), sq);
                normals(vr, dv[k].column_mut(j).as_mut_slice(), sq);
            }
        }
        let dw0v = Vector::from_column_slice(&dw0);
        let dv0v = Vector::from_column_slice(&dv0);

        let dy0 = &p.l0 * &x0 * dt + &p.sigma_v0 * &dv0v;
        let dy: Vec<Mat<T>> = (0..kt)
            .map(|k| {
                let ty = &p.types[k];
                let mut obs_k = &ty.l1 * &x[k] * dt + &p.sigma_v * &dv[k];
                let common = &ty.l2 * &x0 * dt;
                for mut col in obs_k.column_iter_mut() {
                    col += &common;
                }
                obs_k
            })
            .collect();

        let z0_pre = bank.z0.clone();
        let (dnu0, dnu) = bank.update(step, &dy0, &dy, &u0, &u);
        obs.innovations(step, &dnu0, &dnu);

        let xhat0 = z0_pre.rows(0, n);
        let xbar_hat = z0_pre.rows(n, n * kt);
        let dxbar = (&coeffs.abar * &xbar
            + &coeffs.gbar * &x0
            + &coeffs.hbar * xhat0
            + &coeffs.lbar * xbar_hat
            + &coeffs.jbar * &xtilde
            + &coeffs.mbar)
            * dt;
        let mut xi = Vector::zeros(eq.error_diffusion[step].ncols());
        xi.rows_mut(r, r).copy_from(&dw0v);
        let off = xi.len() - dnu0.len();
        xi.rows_mut(off, dnu0.len()).copy_from(&dnu0);
        let dxt = &eq.error_drift[step] * &xtilde * dt + &eq.error_diffusion[step] * xi;
        xbar += dxbar;
        xtilde += dxt;
        debug_assert_eq!(z0_pre.len(), nz);

        let x0_next = &x0 + (&p.a0 * &x0 + &p.b0 * &u0) * dt + &p.d0 * &dw0v;
        for k in 0..kt {
            let ty = &p.types[k];
            let mut drift = &ty.a * &x[k] + &ty.b * &u[k];
            let common = &p.g * &x0;
            for mut col in drift.column_iter_mut() {
                col += &common;
            }
            x[k] += drift * dt + &p.d * &dw[k];
        }
        x0 = x0_next;
        blowup_check(step + 1, &x0, &x, &bank.z, pop)?;
    }
    Ok(())
}

fn global_matrix<T: Real>(blocks: &[Mat<T>], pop: &Population, rows: usize) -> Mat<T> {
    let mut out = zeros(rows, pop.size());
    for (k, b) in blocks.iter().enumerate() {
        for (j, &i) in pop.members(k).iter().enumerate() {
            out.set_column(i, &b.column(j));
        }
    }
    out
}

/// Full record of one simulated path. Minor quantities are stored as
/// matrices with one column per agent in global order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRun<T: Real> {
    pub seed: u64,
    pub path: u64,
    pub dt: T,
    pub grid: Vec<T>,
    pub population: Population,
    pub x0: Vec<Vector<T>>,
    pub z0: Vec<Vector<T>>,
    pub u0: Vec<Vector<T>>,
    pub x: Vec<Mat<T>>,
    pub z: Vec<Mat<T>>,
    pub u: Vec<Mat<T>>,
    pub xn: Vec<Vector<T>>,
    pub xn_types: Vec<Vector<T>>,
    pub xbar: Vec<Vector<T>>,
    pub xtilde: Vec<Vector<T>>,
    pub minor_errors: Vec<Mat<T>>,
    pub major_errors: Vec<Vector<T>>,
    pub dnu0: Vec<Vector<T>>,
    pub dnu: Vec<Mat<T>>,
}

impl<T: Real> SimulationRun<T> {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        let l = self.grid.len();
        l > 0
            && [self.x0.len(), self.z0.len(), self.u0.len(), self.x.len(), self.z.len(), self.u.len(), self.xn.len()]
                .iter()
                .all(|&m| m == l)
    }
}

struct Recorder<T: Real> {
    run: SimulationRun<T>,
    d: usize,
    p: usize,
}

impl<T: Real> Observer<T> for Recorder<T> {
    fn observe(&mut self, v: &StepView<'_, T>) {
        let n = v.x0.len();
        let m = v.u0.len();
        let run = &mut self.run;
        run.grid.push(v.t);
        run.x0.push(v.x0.clone());
        run.z0.push(v.z0.clone());
        run.u0.push(v.u0.clone());
        run.x.push(global_matrix(v.x, v.pop, n));
        run.z.push(global_matrix(v.z, v.pop, self.d));
        run.u.push(global_matrix(v.u, v.pop, m));
        run.xn.push(v.xn.clone());
        run.xn_types.push(v.xn_types.clone());
        run.xbar.push(v.xbar.clone());
        run.xtilde.push(v.xtilde.clone());
        let errs: Vec<Mat<T>> = (0..v.z.len()).map(|k| v.minor_errors(k)).collect();
        run.minor_errors.push(global_matrix(&errs, v.pop, self.d));
        run.major_errors.push(v.major_error());
    }

    fn innovations(&mut self, _step: usize, dnu0: &Vector<T>, dnu: &[Mat<T>]) {
        let pop = self.run.population.clone();
        self.run.dnu0.push(dnu0.clone());
        self.run.dnu.push(global_matrix(dnu, &pop, self.p));
    }
}

/// Simulates and records one path.
pub fn simulate<T: Real>(
    eq: &Equilibrium<T>,
    pop: &Population,
    seed: u64,
    path: u64,
    deviation: Option<&Deviation<T>>,
) -> Result<SimulationRun<T>> {
    let mut rec = Recorder {
        run: SimulationRun {
            seed,
            path,
            dt: eq.dt,
            grid: Vec::new(),
            population: pop.clone(),
            x0: Vec::new(),
            z0: Vec::new(),
            u0: Vec::new(),
            x: Vec::new(),
            z: Vec::new(),
            u: Vec::new(),
            xn: Vec::new(),
            xn_types: Vec::new(),
            xbar: Vec::new(),
            xtilde: Vec::new(),
            minor_errors: Vec::new(),
            major_errors: Vec::new(),
            dnu0: Vec::new(),
            dnu: Vec::new(),
        },
        d: eq.params.minor_dim(),
        p: eq.params.p(),
    };
    simulate_path(eq, pop, seed, path, deviation, &mut rec)?;
    Ok(rec.run)
}

/// Which agent a cost refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentId {
    Major,
    Minor(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate<T: Real> {
    pub value: T,
    /// Bound on the discounted integral beyond the horizon, assuming the
    /// integrand stays below its maximum over the last fifth of the run.
    pub tail_bound: T,
}

fn weighted_sq<T: Real>(v: &Vector<T>, w: &Mat<T>) -> T {
    (v.transpose() * w * v)[(0, 0)]
}

fn minor_integrand<T: Real>(p: &GameParameters<T>, x: &Vector<T>, u: &Vector<T>, x0: &Vector<T>, xn: &Vector<T>) -> T {
    let target = &p.h1 * x0 + &p.h2 * xn + &p.eta;
    weighted_sq(&(x - target), &p.q) + weighted_sq(u, &p.r)
}

fn major_integrand<T: Real>(p: &GameParameters<T>, x0: &Vector<T>, u0: &Vector<T>, xn: &Vector<T>) -> T {
    let target = &p.h0 * xn + &p.eta0;
    weighted_sq(&(x0 - target), &p.q0) + weighted_sq(u0, &p.r0)
}

fn trapezoid<T: Real>(values: &[T], dt: T) -> T {
    if values.len() < 2 {
        return T::zero();
    }
    let inner = values.iter().fold(T::zero(), |a, &b| a + b);
    (inner - (values[0] + values[values.len() - 1]) * lit::<T>(0.5)) * dt
}

fn tail_bound<T: Real>(undiscounted: &[T], rho: T, horizon: T) -> T {
    let start = undiscounted.len() * 4 / 5;
    let peak = undiscounted[start..].iter().fold(T::zero(), |a, &b| a.max(b));
    if rho > T::zero() {
        (-rho * horizon).exp() * peak / rho
    } else {
        T::max_value().unwrap()
    }
}

/// Discounted quadratic cost of one agent over the recorded grid.
pub fn evaluate_cost<T: Real>(run: &SimulationRun<T>, agent: AgentId, params: &GameParameters<T>) -> Result<CostEstimate<T>> {
    if !run.is_complete() {
        return Err(MfgError::IncompleteTrajectory("series lengths differ from the grid".into()));
    }
    if let AgentId::Minor(i) = agent {
        if i >= run.population.size() {
            return Err(MfgError::IncompleteTrajectory(format!("no trajectory for minor agent {i}")));
        }
    }
    let raw: Vec<T> = (0..run.len())
        .map(|s| match agent {
            AgentId::Major => major_integrand(params, &run.x0[s], &run.u0[s], &run.xn[s]),
            AgentId::Minor(i) => minor_integrand(
                params,
                &run.x[s].column(i).into_owned(),
                &run.u[s].column(i).into_owned(),
                &run.x0[s],
                &run.xn[s],
            ),
        })
        .collect();
    let disc: Vec<T> = raw
        .iter()
        .zip(&run.grid)
        .map(|(&f, &t)| f * (-params.rho * t).exp())
        .collect();
    let horizon = *run.grid.last().unwrap();
    Ok(CostEstimate {
        value: trapezoid(&disc, run.dt),
        tail_bound: tail_bound(&raw, params.rho, horizon),
    })
}

/// Accumulates discounted trapezoid costs of every agent along a path.
#[derive(Debug, Clone)]
pub struct CostObserver<T: Real> {
    rho: T,
    dt: T,
    last_step: usize,
    pub major: T,
    pub minors: Vec<T>,
}

impl<T: Real> CostObserver<T> {
    pub fn new(eq: &Equilibrium<T>, pop: &Population) -> Self {
        CostObserver {
            rho: eq.params.rho,
            dt: eq.dt,
            last_step: eq.steps,
            major: T::zero(),
            minors: vec![T::zero(); pop.size()],
        }
    }
}

struct CostContext<'a, T: Real>(&'a GameParameters<T>, CostObserver<T>);

impl<'a, T: Real> Observer<T> for CostContext<'a, T> {
    fn observe(&mut self, v: &StepView<'_, T>) {
        let p = self.0;
        let c = &mut self.1;
        let w = if v.step == 0 || v.step == c.last_step {
            lit::<T>(0.5)
        } else {
            T::one()
        } * c.dt
            * (-c.rho * v.t).exp();
        c.major += w * major_integrand(p, v.x0, v.u0, v.xn);
        let target = &p.h1 * v.x0 + &p.h2 * v.xn + &p.eta;
        for k in 0..v.x.len() {
            let mut res = v.x[k].clone();
            for mut col in res.column_iter_mut() {
                col -= &target;
            }
            let qres = &p.q * &res;
            let ru = &p.r * &v.u[k];
            for (j, &i) in v.pop.members(k).iter().enumerate() {
                let f = res.column(j).dot(&qres.column(j)) + v.u[k].column(j).dot(&ru.column(j));
                c.minors[i] += w * f;
            }
        }
    }
}

/// Discounted costs of all agents on one path without storing the path.
pub fn path_costs<T: Real>(
    eq: &Equilibrium<T>,
    pop: &Population,
    seed: u64,
    path: u64,
    deviation: Option<&Deviation<T>>,
) -> Result<CostObserver<T>> {
    let mut ctx = CostContext(&eq.params, CostObserver::new(eq, pop));
    simulate_path(eq, pop, seed, path, deviation, &mut ctx)?;
    Ok(ctx.1)
}

/// Runs `f` on every path index in parallel, keeping path order.
pub fn run_paths<R: Send, F>(paths: usize, f: F) -> Result<Vec<R>>
where
    F: Fn(u64) -> Result<R> + Sync,
{
    (0..paths as u64).into_par_iter().map(&f).collect()
}

/// Sample mean and standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return MeanSe { mean: f64::NAN, se: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        MeanSe { mean, se: (var / n).sqrt() }
    }

    pub fn ci95(&self) -> (f64, f64) {
        (self.mean - 1.96 * self.se, self.mean + 1.96 * self.se)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationGap {
    pub description: String,
    pub gap: MeanSe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NashGapReport {
    pub n: usize,
    pub paths: usize,
    pub equilibrium_cost: MeanSe,
    pub gaps: Vec<DeviationGap>,
    pub epsilon_hat: f64,
    /// Standard error of the deviation attaining the minimum gap.
    pub epsilon_se: f64,
    pub note: String,
}

impl NashGapReport {
    pub fn epsilon_ci95(&self) -> (f64, f64) {
        let worst = -self.epsilon_hat;
        (
            (-(worst + 1.96 * self.epsilon_se)).max(0.0),
            (-(worst - 1.96 * self.epsilon_se)).max(0.0),
        )
    }
}

/// Common-random-number estimate of `J(deviation) − J(equilibrium)` for the
/// deviating agent of every law in `family`.
pub fn estimate_nash_gap<T: Real>(
    eq: &Equilibrium<T>,
    pop: &Population,
    family: &[Deviation<T>],
    paths: usize,
    seed: u64,
) -> Result<NashGapReport> {
    if family.is_empty() {
        return Err(MfgError::invalid("deviation family", "must be nonempty"));
    }
    for dev in family {
        pop.locate(dev.agent).ok_or_else(|| {
            MfgError::invalid("deviation agent", format!("{} not in population", dev.agent))
        })?;
    }
    let per_path = run_paths(paths, |path| {
        let eq_costs = path_costs(eq, pop, seed, path, None)?.minors;
        let mut diffs = Vec::with_capacity(family.len());
        for dev in family {
            let c = if dev.is_identity() {
                eq_costs[dev.agent]
            } else {
                path_costs(eq, pop, seed, path, Some(dev))?.minors[dev.agent]
            };
            diffs.push(to_f64(c - eq_costs[dev.agent]));
        }
        Ok((to_f64(eq_costs[family[0].agent]), diffs))
    })?;
    let eq_cost = MeanSe::of(&per_path.iter().map(|p| p.0).collect::<Vec<_>>());
    let gaps: Vec<DeviationGap> = family
        .iter()
        .enumerate()
        .map(|(j, dev)| DeviationGap {
            description: dev.describe(),
            gap: MeanSe::of(&per_path.iter().map(|p| p.1[j]).collect::<Vec<_>>()),
        })
        .collect();
    let worst = gaps
        .iter()
        .min_by(|a, b| a.gap.mean.partial_cmp(&b.gap.mean).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap();
    Ok(NashGapReport {
        n: pop.size(),
        paths,
        equilibrium_cost: eq_cost,
        epsilon_hat: (-worst.gap.mean).max(0.0),
        epsilon_se: worst.gap.se,
        gaps,
        note: "infimum over the finite deviation family; a lower bound on the true gap".into(),
    })
}

/// Discounted second-moment envelope across agents and paths.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub grid: Vec<f64>,
    /// `e^{−ρt/2}·E‖x̂ᵉˣ‖²` per grid point, averaged over agents and paths.
    pub envelope: Vec<f64>,
    pub supremum: f64,
    pub argmax_t: f64,
    pub tail_max: f64,
    pub tail_start: f64,
    pub finite: bool,
    pub non_growing_tail: bool,
}

/// Squared norm of every minor extended estimate: own estimate, the
/// estimates of the major state and the mean field, and the iterated
/// estimates.
#[derive(Debug, Clone, Default)]
pub struct MomentObserver {
    pub sums: Vec<f64>,
    pub count: usize,
}

impl<T: Real> Observer<T> for MomentObserver {
    fn observe(&mut self, v: &StepView<'_, T>) {
        if self.sums.len() <= v.step {
            self.sums.resize(v.step + 1, 0.0);
        }
        let mut total = 0.0;
        let mut agents = 0;
        for z in v.z {
            total += to_f64(z.norm_squared());
            agents += z.ncols();
        }
        self.sums[v.step] += total / agents.max(1) as f64;
        if v.step == 0 {
            self.count += 1;
        }
    }
}

/// Envelope statistics from mean second moments on a grid.
pub fn stability_from_moments(grid: &[f64], moments: &[f64], rho: f64, tail_start: f64) -> StabilityReport {
    let envelope: Vec<f64> = grid
        .iter()
        .zip(moments)
        .map(|(&t, &m)| (-rho * t / 2.0).exp() * m)
        .collect();
    let (imax, &sup) = envelope
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |acc, x| if *x.1 > *acc.1 { x } else { acc });
    let tail: Vec<f64> = grid
        .iter()
        .zip(&envelope)
        .filter(|(t, _)| **t >= tail_start)
        .map(|(_, &e)| e)
        .collect();
    let tail_max = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let finite = envelope.iter().all(|e| e.is_finite());
    let non_growing_tail = match (tail.first(), tail.last()) {
        (Some(&a), Some(&b)) => b <= a * (1.0 + 1e-9) + 1e-300 && tail_max <= sup,
        _ => false,
    };
    StabilityReport {
        grid: grid.to_vec(),
        envelope,
        supremum: sup,
        argmax_t: grid.get(imax).copied().unwrap_or(f64::NAN),
        tail_max,
        tail_start,
        finite,
        non_growing_tail,
    }
}

/// Discounted second-moment envelope of a single recorded run.
pub fn stability_metrics<T: Real>(run: &SimulationRun<T>, rho: T) -> StabilityReport {
    let grid: Vec<f64> = run.grid.iter().map(|&t| to_f64(t)).collect();
    let moments: Vec<f64> = run
        .z
        .iter()
        .map(|z| to_f64(z.norm_squared()) / z.ncols().max(1) as f64)
        .collect();
    let tail_start = grid.last().copied().unwrap_or(0.0) * 0.8;
    stability_from_moments(&grid, &moments, to_f64(rho), tail_start)
}

/// Monte Carlo version of [`stability_metrics`] over `paths` paths.
pub fn stability_monte_carlo<T: Real>(
    eq: &Equilibrium<T>,
    pop: &Population,
    paths: usize,
    seed: u64,
    tail_start: f64,
) -> Result<StabilityReport> {
    let per_path = run_paths(paths, |path| {
        let mut m = MomentObserver::default();
        simulate_path(eq, pop, seed, path, None, &mut m)?;
        Ok(m)
    })?;
    let len = eq.steps + 1;
    let mut sums = vec![0.0; len];
    for m in &per_path {
        for (s, v) in sums.iter_mut().zip(&m.sums) {
            *s += v;
        }
    }
    let moments: Vec<f64> = sums.iter().map(|s| s / paths.max(1) as f64).collect();
    let grid: Vec<f64> = eq.grid().iter().map(|&t| to_f64(t)).collect();
    Ok(stability_from_moments(&grid, &moments, to_f64(eq.params.rho), tail_start))
}

/// Second moments of the minor extended estimation error at chosen grid
/// points, pooled over the agents of type 0, plus agent 0's innovations
/// around those points.
struct ErrorObserver {
    checkpoints: Vec<usize>,
    sums: Vec<Mat<f64>>,
    count: Vec<usize>,
    innov: Vec<(Vec<f64>, Vec<f64>)>,
    scale: Vec<f64>,
}

impl<T: Real> Observer<T> for ErrorObserver {
    fn observe(&mut self, v: &StepView<'_, T>) {
        if let Some(c) = self.checkpoints.iter().position(|&s| s == v.step) {
            let e = v.minor_errors(0).map(|x| to_f64(x));
            self.sums[c] += &e * e.transpose();
            self.count[c] += e.ncols();
        }
    }

    fn innovations(&mut self, step: usize, _dnu0: &Vector<T>, dnu: &[Mat<T>]) {
        for (c, &s) in self.checkpoints.iter().enumerate() {
            let col = if s == step + 1 {
                0
            } else if s == step {
                1
            } else {
                continue;
            };
            if dnu[0].ncols() == 0 {
                continue;
            }
            let v: Vec<f64> = dnu[0].column(0).iter().zip(&self.scale).map(|(&x, &sc)| to_f64(x) / sc).collect();
            let slot = &mut self.innov[c];
            if col == 0 {
                slot.0.extend(v);
            } else {
                slot.1.extend(v);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConsistencyPoint {
    pub step: usize,
    pub t: f64,
    pub sample: Mat<f64>,
    pub predicted: Mat<f64>,
    pub relative_frobenius: f64,
    /// Per innovation component: lag-one correlation of agent 0's
    /// normalized innovation across paths, and its standard error.
    pub lag1: Vec<(f64, f64)>,
}

/// Sample covariance of minor estimation errors against the integrated
/// filter covariance, and innovation whiteness, at the given grid points.
pub fn filter_consistency<T: Real>(
    eq: &Equilibrium<T>,
    pop: &Population,
    paths: usize,
    seed: u64,
    checkpoints: &[usize],
) -> Result<Vec<FilterConsistencyPoint>> {
    let d = eq.params.minor_dim();
    let p = eq.params.p();
    let rv = eq.params.rv();
    let scale: Vec<f64> = (0..p).map(|i| (to_f64(rv[(i, i)]) * to_f64(eq.dt)).sqrt().max(1e-300)).collect();
    let cps: Vec<usize> = checkpoints.iter().map(|&c| c.clamp(1, eq.steps.saturating_sub(1).max(1))).collect();
    let per_path = run_paths(paths, |path| {
        let mut o = ErrorObserver {
            checkpoints: cps.clone(),
            sums: vec![Mat::zeros(d, d); cps.len()],
            count: vec![0; cps.len()],
            innov: vec![(Vec::new(), Vec::new()); cps.len()],
            scale: scale.clone(),
        };
        simulate_path(eq, pop, seed, path, None, &mut o)?;
        Ok(o)
    })?;
    let mut out = Vec::new();
    for (c, &step) in checkpoints.iter().enumerate() {
        let mut sum = Mat::<f64>::zeros(d, d);
        let mut count = 0;
        let mut before: Vec<Vec<f64>> = vec![Vec::new(); p];
        let mut after: Vec<Vec<f64>> = vec![Vec::new(); p];
        for o in &per_path {
            sum += &o.sums[c];
            count += o.count[c];
            let (a, b) = &o.innov[c];
            if a.len() == p && b.len() == p {
                for i in 0..p {
                    before[i].push(a[i]);
                    after[i].push(b[i]);
                }
            }
        }
        let sample = sum / count.max(1) as f64;
        let predicted = eq.covariances.vk[0].values[step.min(eq.steps)].map(|x| to_f64(x));
        let rel = (&sample - &predicted).norm() / predicted.norm().max(1e-300);
        let lag1 = (0..p).map(|i| correlation(&before[i], &after[i])).collect();
        out.push(FilterConsistencyPoint {
            step,
            t: to_f64(eq.dt) * step as f64,
            sample,
            predicted,
            relative_frobenius: rel,
            lag1,
        });
    }
    Ok(out)
}

/// Pearson correlation about zero mean, with standard error `1/√n`.
fn correlation(a: &[f64], b: &[f64]) -> (f64, f64) {
    let n = a.len().min(b.len());
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|x| x * x).sum();
    (sab / (saa * sbb).sqrt().max(1e-300), 1.0 / (n as f64).sqrt())
}

/// Discounted average separated-cost summand `∫e^{−ρt} eᵀQ^π e dt` of the
/// minor estimation errors.
struct SeparatedCostObserver {
    weights: Vec<Mat<f64>>,
    rho: f64,
    dt: f64,
    last: usize,
    total: f64,
}

impl<T: Real> Observer<T> for SeparatedCostObserver {
    fn observe(&mut self, v: &StepView<'_, T>) {
        let w = if v.step == 0 || v.step == self.last { 0.5 } else { 1.0 } * self.dt * (-self.rho * to_f64(v.t)).exp();
        let mut s = 0.0;
        let mut count = 0;
        for k in 0..v.z.len() {
            let e = v.minor_errors(k).map(|x| to_f64(x));
            let we = &self.weights[k] * &e;
            s += e.component_mul(&we).sum();
            count += e.ncols();
        }
        self.total += w * s / count.max(1) as f64;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnLimitReport {
    pub n: usize,
    pub paths: usize,
    pub monte_carlo: MeanSe,
    pub deterministic: f64,
    pub relative_deviation: f64,
}

/// Monte Carlo separated-cost summand against `∫₀ᵀe^{−ρt}tr[Q^πV(t)]dt`.
pub fn estimate_en_limit<T: Real>(
    eq: &Equilibrium<T>,
    pop: &Population,
    paths: usize,
    seed: u64,
) -> Result<EnLimitReport> {
    let qpi = eq.params.minor_state_weight().map(|x| to_f64(x));
    let rho = to_f64(eq.params.rho);
    let dt = to_f64(eq.dt);
    let kt = eq.params.num_types();
    let per_path = run_paths(paths, |path| {
        let mut o = SeparatedCostObserver {
            weights: vec![qpi.clone(); kt],
            rho,
            dt,
            last: eq.steps,
            total: 0.0,
        };
        simulate_path(eq, pop, seed, path, None, &mut o)?;
        Ok(o.total)
    })?;
    let mc = MeanSe::of(&per_path);
    let det = deterministic_en(eq);
    Ok(EnLimitReport {
        n: pop.size(),
        paths,
        monte_carlo: mc,
        deterministic: det,
        relative_deviation: (mc.mean - det).abs() / det.abs().max(1e-300),
    })
}

/// `Σ_k π_k ∫₀ᵀ e^{−ρt} tr[Q^π V_k(t)] dt` by the trapezoid rule.
pub fn deterministic_en<T: Real>(eq: &Equilibrium<T>) -> f64 {
    let qpi = eq.params.minor_state_weight().map(|x| to_f64(x));
    let rho = to_f64(eq.params.rho);
    let dt = to_f64(eq.dt);
    let mut total = 0.0;
    for (k, traj) in eq.covariances.vk.iter().enumerate() {
        let vals: Vec<f64> = traj
            .values
            .iter()
            .zip(&traj.grid)
            .map(|(v, &t)| (-rho * to_f64(t)).exp() * (&qpi * v.map(|x| to_f64(x))).trace())
            .collect();
        total += to_f64(eq.params.pi[k]) * trapezoid(&vals, dt);
    }
    total
}

struct MeanFieldGapObserver {
    total: f64,
    count: usize,
}

impl<T: Real> Observer<T> for MeanFieldGapObserver {
    fn observe(&mut self, v: &StepView<'_, T>) {
        self.total += to_f64((v.xn_types - v.xbar).norm_squared());
        self.count += 1;
    }
}

/// Time-averaged RMS of `‖x^(N) − x̄‖` over paths.
pub fn mean_field_gap<T: Real>(eq: &Equilibrium<T>, pop: &Population, paths: usize, seed: u64) -> Result<MeanSe> {
    let per_path = run_paths(paths, |path| {
        let mut o = MeanFieldGapObserver { total: 0.0, count: 0 };
        simulate_path(eq, pop, seed, path, None, &mut o)?;
        Ok(o.total / o.count.max(1) as f64)
    })?;
    let ms = MeanSe::of(&per_path);
    let rms = ms.mean.max(0.0).sqrt();
    Ok(MeanSe {
        mean: rms,
        se: if rms > 0.0 { ms.se / (2.0 * rms) } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proportional_largest_remainder() {
        let mut p = GameParameters::<f64>::reference_scenario();
        p.types.push(p.types[0].clone());
        p.pi = vec![0.5, 0.5];
        let pop = generate_population(&p, 4, PopulationMode::Proportional, 0).unwrap();
        assert_eq!(pop.members(0).len(), 2);
        assert_eq!(pop.members(1).len(), 2);
        p.pi = vec![0.26, 0.74];
        let pop = generate_population(&p, 10, PopulationMode::Proportional, 0).unwrap();
        assert_eq!(pop.members(0).len() + pop.members(1).len(), 10);
        assert_eq!(pop.members(0).len(), 3);
    }

    #[test]
    fn substreams_are_distinct_and_stable() {
        let a: u64 = substream(1, 0, 5, NoiseSource::Process).random();
        let b: u64 = substream(1, 0, 5, NoiseSource::Process).random();
        let c: u64 = substream(1, 0, 5, NoiseSource::Measurement).random();
        let d: u64 = substream(1, 1, 5, NoiseSource::Process).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn mean_se_basic() {
        let m = MeanSe::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.se - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn trapezoid_exact_for_linear() {
        let vals: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        assert!((trapezoid(&vals, 0.1) - 0.5).abs() < 1e-14);
    }
}
