//! Trajectory-ensemble simulation of Ito SDEs and ensemble moment statistics.
//!
//! The simulator advances `dX = f(X) dt + g(X) dW` with the explicit
//! Euler scheme `X_j = X_{j-1} + f Δt + g ΔW` (an optional Milstein
//! correction for scalar noise is gated behind [`SimConfig::milstein_correction`]).
//! Ensembles of N trajectories from one initial state are reduced to
//! per-timestep mean vectors and population covariance matrices.
//!
//! Reproducibility contract: every trajectory draws its noise from an
//! independent counter-based stream selected by (seed, trajectory index),
//! so results are bit-identical regardless of how the work is scheduled
//! across threads.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::sync::Arc;

use crate::{Error, Result};

/// Velocity-reset rule applied when a trajectory crosses a guard surface
/// (a coordinate hitting zero from above): the crossing is located by
/// linear interpolation, the guarded coordinate is pinned to the surface,
/// the velocity coordinate is reflected as `v+ = -r v-`, and the
/// remainder of the step is completed from the post-impact state.
#[derive(Debug, Clone, Copy)]
pub struct ImpactRule {
    /// Index of the coordinate constrained to stay nonnegative.
    pub guard_coord: usize,
    /// Index of the velocity coordinate reset at impact.
    pub velocity_coord: usize,
    /// Restitution coefficient in (0, 1].
    pub restitution: f64,
}

type FieldFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// An n-dimensional Ito SDE `dX = f(X) dt + g(X) dW` with m noise
/// channels, plus an optional impact rule. Ground-truth benchmark systems
/// and learned surrogates both live behind this one interface.
#[derive(Clone)]
pub struct SdeModel {
    dim: usize,
    noise_dim: usize,
    drift: FieldFn,
    diffusion: FieldFn,
    event: Option<ImpactRule>,
}

impl SdeModel {
    /// `drift` fills an n-vector; `diffusion` fills a row-major n x m matrix.
    /// Both must be pure: same input, same output.
    pub fn new(
        dim: usize,
        noise_dim: usize,
        drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        assert!(dim > 0 && noise_dim > 0, "dimensions must be positive");
        Self {
            dim,
            noise_dim,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            event: None,
        }
    }

    pub fn with_event(mut self, event: ImpactRule) -> Self {
        assert!(event.guard_coord < self.dim && event.velocity_coord < self.dim);
        self.event = Some(event);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn event(&self) -> Option<ImpactRule> {
        self.event
    }

    /// Evaluate the drift field into `out` (length n).
    pub fn drift(&self, state: &[f64], out: &mut [f64]) {
        debug_assert_eq!(state.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        (self.drift)(state, out);
    }

    /// Evaluate the diffusion field into `out` (row-major n x m).
    pub fn diffusion(&self, state: &[f64], out: &mut [f64]) {
        debug_assert_eq!(state.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim * self.noise_dim);
        (self.diffusion)(state, out);
    }

    /// Drift as a freshly allocated vector (convenience for analysis code).
    pub fn drift_at(&self, state: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.drift(state, &mut out);
        out
    }

    /// Diffusion as a freshly allocated row-major n x m matrix.
    pub fn diffusion_at(&self, state: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.noise_dim];
        self.diffusion(state, &mut out);
        out
    }
}

/// Ensemble simulation settings. `dt * steps` is the training window.
/// Identical (config, initial state) pairs yield bit-identical ensembles.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub steps: usize,
    pub ensemble_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub milstein_correction: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.steps == 0 || self.ensemble_size == 0 {
            return Err(Error::Config("steps and ensemble_size must be positive".into()));
        }
        Ok(())
    }
}

/// N trajectories from one initial state, stored trajectory-major:
/// `states[traj * (steps+1) * dim + step * dim + coord]`.
/// Trajectories that blew up are excluded and counted in `discarded`.
#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble {
    pub initial_state: Vec<f64>,
    pub states: Vec<f64>,
    pub n_kept: usize,
    pub discarded: usize,
    pub dim: usize,
    pub config: SimConfig,
}

impl TrajectoryEnsemble {
    pub fn state(&self, traj: usize, step: usize) -> &[f64] {
        let stride = (self.config.steps + 1) * self.dim;
        let base = traj * stride + step * self.dim;
        &self.states[base..base + self.dim]
    }
}

/// Per-timestep first and second moments of an ensemble: mean vectors and
/// population covariance matrices (divisor N), symmetrized exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSeries {
    pub times: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl MomentSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }
}

/// Reusable buffers for [`euler_milstein_step_buffered`]; the Monte Carlo
/// loops step millions of times and must not allocate per step.
#[derive(Debug, Clone)]
pub struct StepBuffers {
    f: Vec<f64>,
    g: Vec<f64>,
    next: Vec<f64>,
    prev: Vec<f64>,
    dw_left: Vec<f64>,
    gp: Vec<f64>,
    gm: Vec<f64>,
    probe: Vec<f64>,
    correction: Vec<f64>,
}

impl StepBuffers {
    pub fn new(dim: usize, noise_dim: usize) -> Self {
        Self {
            f: vec![0.0; dim],
            g: vec![0.0; dim * noise_dim],
            next: vec![0.0; dim],
            prev: vec![0.0; dim],
            dw_left: vec![0.0; noise_dim],
            gp: vec![0.0; dim * noise_dim],
            gm: vec![0.0; dim * noise_dim],
            probe: vec![0.0; dim],
            correction: vec![0.0; dim],
        }
    }

    pub fn for_model(model: &SdeModel) -> Self {
        Self::new(model.dim(), model.noise_dim())
    }
}

/// One explicit step of `dX = f dt + g dW`. With `milstein` set and a
/// single noise channel, the strong-order-1 correction
/// `1/2 (sum_i g_i dg_j/dx_i)(dW^2 - dt)` is added, with the derivative
/// taken by central finite differences. Impact rules are resolved by
/// linear interpolation to the guard crossing; the remaining fraction of
/// the step re-evaluates the fields at the post-impact state and uses the
/// conditional mean `(1-theta) dW` of the remaining noise increment.
pub fn euler_milstein_step(
    model: &SdeModel,
    state: &[f64],
    dt: f64,
    noise_increment: &[f64],
    milstein: bool,
) -> Result<Vec<f64>> {
    let mut bufs = StepBuffers::for_model(model);
    euler_milstein_step_buffered(model, state, dt, noise_increment, milstein, &mut bufs)?;
    Ok(bufs.next.clone())
}

/// Allocation-free form of [`euler_milstein_step`]: the next state lands
/// in `bufs.next` (also returned as a slice).
pub fn euler_milstein_step_buffered<'b>(
    model: &SdeModel,
    state: &[f64],
    dt: f64,
    noise_increment: &[f64],
    milstein: bool,
    bufs: &'b mut StepBuffers,
) -> Result<&'b [f64]> {
    let n = model.dim();
    debug_assert_eq!(state.len(), n);
    debug_assert_eq!(noise_increment.len(), model.noise_dim());

    raw_step(model, state, dt, noise_increment, milstein, bufs);

    if let Some(rule) = model.event() {
        bufs.prev.copy_from_slice(state);
        let mut dt_left = dt;
        bufs.dw_left.copy_from_slice(noise_increment);
        // At most a couple of resolutions per step in practice; the guard
        // coordinate is pinned if the loop budget runs out.
        for _ in 0..4 {
            let g0 = bufs.prev[rule.guard_coord];
            let g1 = bufs.next[rule.guard_coord];
            if !(g0 >= 0.0 && g1 < 0.0) {
                break;
            }
            let theta = if g0 - g1 != 0.0 { g0 / (g0 - g1) } else { 0.0 };
            for i in 0..n {
                bufs.prev[i] += theta * (bufs.next[i] - bufs.prev[i]);
            }
            bufs.prev[rule.guard_coord] = 0.0;
            bufs.prev[rule.velocity_coord] = -rule.restitution * bufs.prev[rule.velocity_coord];
            dt_left *= 1.0 - theta;
            for w in bufs.dw_left.iter_mut() {
                *w *= 1.0 - theta;
            }
            if dt_left <= 0.0 {
                bufs.next.copy_from_slice(&bufs.prev);
                break;
            }
            let crossing = std::mem::take(&mut bufs.prev);
            let dw = std::mem::take(&mut bufs.dw_left);
            raw_step(model, &crossing, dt_left, &dw, milstein, bufs);
            bufs.prev = crossing;
            bufs.dw_left = dw;
        }
        if bufs.next[rule.guard_coord] < 0.0 {
            bufs.next[rule.guard_coord] = 0.0;
        }
    }

    if bufs.next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState(format!(
            "step from {:?} produced {:?}",
            state, bufs.next
        )));
    }
    Ok(&bufs.next)
}

fn raw_step(model: &SdeModel, state: &[f64], dt: f64, dw: &[f64], milstein: bool, bufs: &mut StepBuffers) {
    let n = model.dim();
    let m = model.noise_dim();
    model.drift(state, &mut bufs.f);
    model.diffusion(state, &mut bufs.g);

    for j in 0..n {
        let mut acc = state[j] + bufs.f[j] * dt;
        for l in 0..m {
            acc += bufs.g[j * m + l] * dw[l];
        }
        bufs.next[j] = acc;
    }

    if milstein && m == 1 {
        // 1/2 (L^1 g_j)(dW^2 - dt), L^1 = sum_i g_i d/dx_i, central differences.
        let h = 1e-6;
        let factor = 0.5 * (dw[0] * dw[0] - dt);
        bufs.probe.copy_from_slice(state);
        bufs.correction.fill(0.0);
        for i in 0..n {
            let hi = h * (1.0 + state[i].abs());
            bufs.probe[i] = state[i] + hi;
            model.diffusion(&bufs.probe, &mut bufs.gp);
            bufs.probe[i] = state[i] - hi;
            model.diffusion(&bufs.probe, &mut bufs.gm);
            bufs.probe[i] = state[i];
            for j in 0..n {
                bufs.correction[j] += bufs.g[i] * (bufs.gp[j] - bufs.gm[j]) / (2.0 * hi);
            }
        }
        for j in 0..n {
            bufs.next[j] += factor * bufs.correction[j];
        }
    }
}

/// Simulate `config.ensemble_size` independent trajectories from `x0`.
/// Trajectory `i` draws from stream `i` of a ChaCha generator seeded with
/// `config.seed`, so the ensemble is reproducible bit-for-bit and
/// independent of parallel execution order. Trajectories that produce a
/// non-finite state are discarded and counted; more than 1% discards
/// aborts the run.
pub fn simulate_ensemble(model: &SdeModel, x0: &[f64], config: &SimConfig) -> Result<TrajectoryEnsemble> {
    simulate_ensemble_perturbed(model, x0, config, 0.0)
}

/// Like [`simulate_ensemble`] but each trajectory starts from
/// `x0 + eta`, `eta ~ N(0, init_std^2 I)`, drawn from the trajectory's own
/// stream. With `init_std == 0` no perturbation draw is consumed and the
/// result is identical to the unperturbed ensemble.
pub fn simulate_ensemble_perturbed(
    model: &SdeModel,
    x0: &[f64],
    config: &SimConfig,
    init_std: f64,
) -> Result<TrajectoryEnsemble> {
    config.validate()?;
    if x0.len() != model.dim() {
        return Err(Error::Shape(format!(
            "initial state has {} coordinates, model dimension is {}",
            x0.len(),
            model.dim()
        )));
    }
    let n = model.dim();
    let m = model.noise_dim();
    let steps = config.steps;
    let stride = (steps + 1) * n;
    let total = config.ensemble_size;

    let runs: Vec<Option<Vec<f64>>> = (0..total)
        .into_par_iter()
        .map(|traj| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(traj as u64);
            let sqrt_dt = config.dt.sqrt();

            let mut start = x0.to_vec();
            if init_std > 0.0 {
                for s in start.iter_mut() {
                    let eta: f64 = StandardNormal.sample(&mut rng);
                    *s += init_std * eta;
                }
            }

            let mut path = vec![0.0; stride];
            path[..n].copy_from_slice(&start);
            let mut state = start;
            let mut dw = vec![0.0; m];
            let mut bufs = StepBuffers::for_model(model);
            for step in 1..=steps {
                for w in dw.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *w = sqrt_dt * z;
                }
                match euler_milstein_step_buffered(
                    model,
                    &state,
                    config.dt,
                    &dw,
                    config.milstein_correction,
                    &mut bufs,
                ) {
                    Ok(next) => {
                        path[step * n..(step + 1) * n].copy_from_slice(next);
                        state.copy_from_slice(next);
                    }
                    Err(_) => return None,
                }
            }
            Some(path)
        })
        .collect();

    let discarded = runs.iter().filter(|r| r.is_none()).count();
    if discarded as f64 > 0.01 * total as f64 {
        return Err(Error::TooManyBlowups {
            discarded,
            total,
            limit_percent: 1.0,
        });
    }

    let mut states = Vec::with_capacity((total - discarded) * stride);
    for run in runs.into_iter().flatten() {
        states.extend_from_slice(&run);
    }

    Ok(TrajectoryEnsemble {
        initial_state: x0.to_vec(),
        n_kept: total - discarded,
        discarded,
        dim: n,
        states,
        config: *config,
    })
}

/// Per-timestep ensemble mean and population covariance (divisor N),
/// `Sigma(t_k) = 1/N sum_n (x_n - mu)(x_n - mu)^T`, symmetrized by
/// averaging with the transpose.
pub fn compute_moments(ensemble: &TrajectoryEnsemble) -> Result<MomentSeries> {
    let n_traj = ensemble.n_kept;
    if n_traj == 0 {
        return Err(Error::Config("empty ensemble".into()));
    }
    let dim = ensemble.dim;
    let steps = ensemble.config.steps;
    let dt = ensemble.config.dt;

    let mut times = Vec::with_capacity(steps + 1);
    let mut means = Vec::with_capacity(steps + 1);
    let mut covs = Vec::with_capacity(steps + 1);

    for k in 0..=steps {
        let mut mu = DVector::zeros(dim);
        for traj in 0..n_traj {
            let s = ensemble.state(traj, k);
            for (i, v) in s.iter().enumerate() {
                mu[i] += v;
            }
        }
        mu /= n_traj as f64;

        let mut cov = DMatrix::zeros(dim, dim);
        for traj in 0..n_traj {
            let s = ensemble.state(traj, k);
            for i in 0..dim {
                let di = s[i] - mu[i];
                for j in i..dim {
                    cov[(i, j)] += di * (s[j] - mu[j]);
                }
            }
        }
        cov /= n_traj as f64;
        for i in 0..dim {
            for j in 0..i {
                cov[(i, j)] = cov[(j, i)];
            }
        }

        times.push(k as f64 * dt);
        means.push(mu);
        covs.push(cov);
    }

    Ok(MomentSeries {
        times,
        means,
        covariances: covs,
    })
}
