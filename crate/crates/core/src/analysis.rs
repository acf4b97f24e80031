//! Downstream validation of learned dynamics: first-escape probabilities
//! and stationary densities.
//!
//! Escape probability on an interval `[gamma1, gamma2]` solves the 1-D
//! Dirichlet problem `m P' + sigma^2/2 P'' = 0`, `P(gamma1) = 1`,
//! `P(gamma2) = 0`. Three routes are provided and cross-checked: the
//! quadrature form `P(x) = 1 - int_g1^x psi / int_g1^g2 psi` with
//! `psi = exp(-int 2 m / sigma^2)`, a central-difference boundary-value
//! solve, and direct Monte Carlo absorption counting.
//!
//! Stationary densities come from time-averaged occupancy histograms of
//! long trajectories after burn-in; the ring-versus-point shape statistic
//! (the P-bifurcation diagnostic) is the argmax radius of the
//! angular-averaged radial profile.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::sim::{euler_milstein_step_buffered, SdeModel, StepBuffers};
use crate::{Error, Result};

const TAG_ESCAPE: u64 = 0x61;
const TAG_DENSITY: u64 = 0x62;

/// Exponent clamp before `exp` in the quadrature route.
const EXP_CLAMP: f64 = 700.0;

/// A 1-D escape problem: starting inside `(gamma1, gamma2)`, what is the
/// probability of exiting through `gamma1` before `gamma2`?
pub struct EscapeProblem {
    pub model: SdeModel,
    pub gamma1: f64,
    pub gamma2: f64,
    pub queries: Vec<f64>,
}

impl EscapeProblem {
    pub fn new(model: SdeModel, gamma1: f64, gamma2: f64, queries: Vec<f64>) -> Result<Self> {
        if model.dim() != 1 || model.noise_dim() != 1 {
            return Err(Error::Config("escape analysis is one-dimensional".into()));
        }
        if !(gamma1 < gamma2) {
            return Err(Error::Config(format!("need gamma1 < gamma2, got [{gamma1}, {gamma2}]")));
        }
        for &q in &queries {
            if !(q > gamma1 && q < gamma2) {
                return Err(Error::Config(format!(
                    "query {q} not strictly inside ({gamma1}, {gamma2})"
                )));
            }
        }
        Ok(Self {
            model,
            gamma1,
            gamma2,
            queries,
        })
    }

    /// Evenly spaced interior query points.
    pub fn uniform_queries(model: SdeModel, gamma1: f64, gamma2: f64, count: usize) -> Result<Self> {
        let h = (gamma2 - gamma1) / (count + 1) as f64;
        let queries = (1..=count).map(|i| gamma1 + i as f64 * h).collect();
        Self::new(model, gamma1, gamma2, queries)
    }

    fn drift1(&self, x: f64) -> f64 {
        let mut out = [0.0];
        self.model.drift(&[x], &mut out);
        out[0]
    }

    fn sigma_sq(&self, x: f64) -> Result<f64> {
        let mut out = [0.0];
        self.model.diffusion(&[x], &mut out);
        let s2 = out[0] * out[0];
        if s2 <= 0.0 || !s2.is_finite() {
            return Err(Error::SingularDiffusion { location: x });
        }
        Ok(s2)
    }
}

/// Quadrature route: cumulative trapezoid of `-2 m / sigma^2` on a dense
/// uniform mesh (anchored at the interval midpoint, exponents clamped to
/// +-700), then `P(x) = 1 - I(x) / I(gamma2)`. Returns the values at the
/// problem's query points (linear interpolation between mesh nodes).
///
/// `P(gamma1) = 1` and `P(gamma2) = 0` hold exactly by construction, and
/// the result is monotone non-increasing because the integrand is
/// positive.
pub fn escape_probability_analytic(problem: &EscapeProblem, mesh_n: usize) -> Result<Vec<f64>> {
    let n = mesh_n.max(1000);
    let (g1, g2) = (problem.gamma1, problem.gamma2);
    let h = (g2 - g1) / n as f64;

    // H(x) = int_{g1}^{x} -2 m / sigma^2, cumulative trapezoid
    let mut integrand = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let x = g1 + i as f64 * h;
        integrand.push(-2.0 * problem.drift1(x) / problem.sigma_sq(x)?);
    }
    let mut big_h = vec![0.0; n + 1];
    for i in 1..=n {
        big_h[i] = big_h[i - 1] + 0.5 * h * (integrand[i - 1] + integrand[i]);
    }
    // anchor at the midpoint, then clamp: shifts cancel in the final ratio
    let anchor = big_h[n / 2];
    let psi: Vec<f64> = big_h
        .iter()
        .map(|v| (v - anchor).clamp(-EXP_CLAMP, EXP_CLAMP).exp())
        .collect();

    let mut cum = vec![0.0; n + 1];
    for i in 1..=n {
        cum[i] = cum[i - 1] + 0.5 * h * (psi[i - 1] + psi[i]);
    }
    let total = cum[n];
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::SingularDiffusion { location: g1 });
    }

    let value_at = |x: f64| -> f64 {
        let t = ((x - g1) / h).clamp(0.0, n as f64);
        let i = (t.floor() as usize).min(n - 1);
        let frac = t - i as f64;
        let c = cum[i] + frac * (cum[i + 1] - cum[i]);
        1.0 - c / total
    };
    Ok(problem.queries.iter().map(|&q| value_at(q)).collect())
}

/// Finite-difference route: central differences of
/// `m P' + sigma^2/2 P'' = 0` on `mesh_n` intervals, Dirichlet boundary
/// values, solved with the Thomas algorithm.
pub fn escape_probability_bvp(problem: &EscapeProblem, mesh_n: usize) -> Result<Vec<f64>> {
    let n = mesh_n.max(4);
    let (g1, g2) = (problem.gamma1, problem.gamma2);
    let h = (g2 - g1) / n as f64;

    // interior unknowns P_1..P_{n-1}
    let mut sub = vec![0.0; n - 1];
    let mut diag = vec![0.0; n - 1];
    let mut sup = vec![0.0; n - 1];
    let mut rhs = vec![0.0; n - 1];
    for i in 1..n {
        let x = g1 + i as f64 * h;
        let m = problem.drift1(x);
        let s2 = problem.sigma_sq(x)?;
        let a = s2 / (2.0 * h * h) - m / (2.0 * h);
        let b = -s2 / (h * h);
        let c = s2 / (2.0 * h * h) + m / (2.0 * h);
        sub[i - 1] = a;
        diag[i - 1] = b;
        sup[i - 1] = c;
        if i == 1 {
            rhs[i - 1] = -a; // P_0 = 1
        }
        // P_n = 0 contributes nothing
    }
    // Thomas solve
    let mut c_star = vec![0.0; n - 1];
    let mut d_star = vec![0.0; n - 1];
    c_star[0] = sup[0] / diag[0];
    d_star[0] = rhs[0] / diag[0];
    for i in 1..n - 1 {
        let denom = diag[i] - sub[i] * c_star[i - 1];
        c_star[i] = sup[i] / denom;
        d_star[i] = (rhs[i] - sub[i] * d_star[i - 1]) / denom;
    }
    let mut p = vec![0.0; n + 1];
    p[0] = 1.0;
    p[n] = 0.0;
    p[n - 1] = d_star[n - 2];
    for i in (1..n - 1).rev() {
        p[i] = d_star[i - 1] - c_star[i - 1] * p[i + 1];
    }

    let value_at = |x: f64| -> f64 {
        let t = ((x - g1) / h).clamp(0.0, n as f64);
        let i = (t.floor() as usize).min(n - 1);
        let frac = t - i as f64;
        p[i] + frac * (p[i + 1] - p[i])
    };
    Ok(problem.queries.iter().map(|&q| value_at(q)).collect())
}

/// Monte Carlo escape estimates with their standard errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EscapeMcResult {
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Worst per-query fraction of trajectories that hit neither boundary.
    pub max_censored_fraction: f64,
}

/// Absorption counting: from each query point, the fraction of
/// trajectories hitting `gamma1` before `gamma2` within `max_time`.
/// Censored trajectories count toward neither outcome; more than 1%
/// censoring at any query aborts with `IncreaseMaxTime`.
pub fn escape_probability_monte_carlo(
    problem: &EscapeProblem,
    n_traj: usize,
    max_time: f64,
    dt: f64,
    seed: u64,
) -> Result<EscapeMcResult> {
    if n_traj < 1_000 {
        return Err(Error::Config("need at least 1000 trajectories per query".into()));
    }
    let max_steps = (max_time / dt).ceil() as usize;
    let model = &problem.model;

    let per_query: Vec<(f64, f64, f64)> = problem
        .queries
        .par_iter()
        .enumerate()
        .map(|(qi, &q)| {
            let mut escaped = 0usize;
            let mut survived = 0usize;
            let mut censored = 0usize;
            let base = derive_seed(seed, TAG_ESCAPE, qi as u64);
            let mut bufs = StepBuffers::for_model(model);
            let sqrt_dt = dt.sqrt();
            let mut dw = [0.0f64];
            for traj in 0..n_traj {
                let mut rng = ChaCha8Rng::seed_from_u64(base);
                rng.set_stream(traj as u64);
                let mut x = q;
                let mut done = false;
                for _ in 0..max_steps {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    dw[0] = sqrt_dt * z;
                    match euler_milstein_step_buffered(model, &[x], dt, &dw, false, &mut bufs) {
                        Ok(next) => x = next[0],
                        Err(_) => {
                            // blown-up trajectory: treat as censored
                            break;
                        }
                    }
                    if x <= problem.gamma1 {
                        escaped += 1;
                        done = true;
                        break;
                    }
                    if x >= problem.gamma2 {
                        survived = survived.saturating_add(1);
                        done = true;
                        break;
                    }
                }
                if !done {
                    censored += 1;
                }
            }
            let resolved = (escaped + survived).max(1);
            let p = escaped as f64 / resolved as f64;
            let se = (p * (1.0 - p) / resolved as f64).sqrt();
            (p, se, censored as f64 / n_traj as f64)
        })
        .collect();

    let max_censored = per_query.iter().map(|t| t.2).fold(0.0f64, f64::max);
    if max_censored >= 0.01 {
        let total = n_traj;
        let censored = (max_censored * n_traj as f64).round() as usize;
        return Err(Error::IncreaseMaxTime { censored, total });
    }

    Ok(EscapeMcResult {
        estimates: per_query.iter().map(|t| t.0).collect(),
        std_errors: per_query.iter().map(|t| t.1).collect(),
        max_censored_fraction: max_censored,
    })
}

/// Cell-based occupancy histogram. Cell `i` along a dimension covers
/// `[lo + i w, lo + (i+1) w)` with `w = (hi - lo) / cells`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityGrid {
    pub bounds: Vec<[f64; 2]>,
    pub shape: Vec<usize>,
    pub counts: Vec<u64>,
    pub density: Vec<f64>,
    pub burn_in: f64,
    pub total_time: f64,
}

impl DensityGrid {
    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn total_cells(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn cell_width(&self, d: usize) -> f64 {
        (self.bounds[d][1] - self.bounds[d][0]) / self.shape[d] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|d| self.cell_width(d)).product()
    }

    /// Center coordinates of a flat cell index.
    pub fn cell_center(&self, flat: usize) -> Vec<f64> {
        let mut rem = flat;
        let mut idx = vec![0usize; self.dim()];
        for d in (0..self.dim()).rev() {
            idx[d] = rem % self.shape[d];
            rem /= self.shape[d];
        }
        (0..self.dim())
            .map(|d| self.bounds[d][0] + (idx[d] as f64 + 0.5) * self.cell_width(d))
            .collect()
    }

    fn flat_cell(&self, x: &[f64]) -> Option<usize> {
        let mut flat = 0;
        for d in 0..self.dim() {
            let w = self.cell_width(d);
            let t = (x[d] - self.bounds[d][0]) / w;
            if t < 0.0 || !t.is_finite() {
                return None;
            }
            let i = t.floor() as usize;
            if i >= self.shape[d] {
                return None;
            }
            flat = flat * self.shape[d] + i;
        }
        Some(flat)
    }

    /// L1 distance between two normalized densities on the same grid.
    pub fn l1_distance(&self, other: &DensityGrid) -> f64 {
        let v = self.cell_volume();
        self.density
            .iter()
            .zip(other.density.iter())
            .map(|(a, b)| (a - b).abs() * v)
            .sum()
    }
}

/// Time-averaged occupancy histogram over an ensemble of long
/// trajectories: states after `burn_in` are binned at every step until
/// `total_time`, pooled across `n_traj` trajectories, and normalized so
/// the density integrates to one over the grid. Trajectories that blow
/// up restart with a fresh stream (bounded retries).
#[allow(clippy::too_many_arguments)]
pub fn steady_state_density(
    model: &SdeModel,
    x0: &[f64],
    burn_in: f64,
    total_time: f64,
    bounds: Vec<[f64; 2]>,
    shape: Vec<usize>,
    n_traj: usize,
    dt: f64,
    seed: u64,
) -> Result<DensityGrid> {
    if !(total_time > burn_in) {
        return Err(Error::Config("total_time must exceed burn_in".into()));
    }
    if bounds.len() != model.dim() || shape.len() != model.dim() {
        return Err(Error::Shape("density grid dimension mismatch".into()));
    }
    let mut grid = DensityGrid {
        bounds,
        shape,
        counts: Vec::new(),
        density: Vec::new(),
        burn_in,
        total_time,
    };
    grid.counts = vec![0u64; grid.total_cells()];

    let burn_steps = (burn_in / dt).ceil() as usize;
    let total_steps = (total_time / dt).ceil() as usize;
    let max_restarts = 3 * n_traj;

    let partials: Vec<Result<Vec<u64>>> = (0..n_traj)
        .into_par_iter()
        .map(|traj| {
            let mut counts = vec![0u64; grid.total_cells()];
            let mut bufs = StepBuffers::for_model(model);
            let m = model.noise_dim();
            let mut dw = vec![0.0; m];
            let sqrt_dt = dt.sqrt();
            let mut attempt = 0usize;
            'restart: loop {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    seed,
                    TAG_DENSITY,
                    (traj + attempt * n_traj) as u64,
                ));
                let mut x = x0.to_vec();
                for step in 0..total_steps {
                    for w in dw.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *w = sqrt_dt * z;
                    }
                    match euler_milstein_step_buffered(model, &x, dt, &dw, false, &mut bufs) {
                        Ok(next) => x.copy_from_slice(next),
                        Err(_) => {
                            attempt += 1;
                            if attempt > max_restarts / n_traj.max(1) {
                                return Err(Error::NonFiniteState(
                                    "density trajectory kept blowing up after restarts".into(),
                                ));
                            }
                            counts.fill(0);
                            continue 'restart;
                        }
                    }
                    if step >= burn_steps {
                        if let Some(cell) = grid.flat_cell(&x) {
                            counts[cell] += 1;
                        }
                    }
                }
                return Ok(counts);
            }
        })
        .collect();

    for partial in partials {
        let partial = partial?;
        for (acc, v) in grid.counts.iter_mut().zip(partial.iter()) {
            *acc += v;
        }
    }

    let total: u64 = grid.counts.iter().sum();
    if total == 0 {
        return Err(Error::Config(
            "no samples landed inside the density grid; widen the bounds".into(),
        ));
    }
    let norm = 1.0 / (total as f64 * grid.cell_volume());
    grid.density = grid.counts.iter().map(|&c| c as f64 * norm).collect();
    Ok(grid)
}

/// Ring-versus-point classification of a stationary density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityShape {
    Ring,
    Point,
}

/// Radial shape statistic of a density about the origin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadialDiagnostic {
    /// Radius of the angular-averaged profile's argmax.
    pub r_star: f64,
    /// Classification threshold used (in length units).
    pub threshold: f64,
    pub shape: DensityShape,
    /// (bin center radius, mean density) pairs.
    pub profile: Vec<(f64, f64)>,
}

/// Angular-averaged radial profile: cells are binned by the radius of
/// their center (bin width = smallest cell width), densities averaged per
/// bin. `r_star` is the argmax bin's center radius; `r_star` above
/// `threshold_cells` bin widths classifies the density as a ring.
pub fn p_bifurcation_diagnostic(density: &DensityGrid, threshold_cells: f64) -> Result<RadialDiagnostic> {
    if density.density.iter().all(|&v| v == 0.0) {
        return Err(Error::Config("degenerate all-zero density".into()));
    }
    let bin_w = (0..density.dim())
        .map(|d| density.cell_width(d))
        .fold(f64::INFINITY, f64::min);
    let max_r = (0..density.dim())
        .map(|d| density.bounds[d][0].abs().max(density.bounds[d][1].abs()).powi(2))
        .sum::<f64>()
        .sqrt();
    let n_bins = (max_r / bin_w).ceil() as usize + 1;
    let mut sums = vec![0.0; n_bins];
    let mut cells = vec![0usize; n_bins];
    for flat in 0..density.total_cells() {
        let c = density.cell_center(flat);
        let r = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bin = ((r / bin_w).floor() as usize).min(n_bins - 1);
        sums[bin] += density.density[flat];
        cells[bin] += 1;
    }
    let profile: Vec<(f64, f64)> = (0..n_bins)
        .filter(|&b| cells[b] > 0)
        .map(|b| ((b as f64 + 0.5) * bin_w, sums[b] / cells[b] as f64))
        .collect();
    let (r_star, _) = profile
        .iter()
        .copied()
        .fold((0.0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    let threshold = threshold_cells * bin_w;
    Ok(RadialDiagnostic {
        r_star,
        threshold,
        shape: if r_star > threshold {
            DensityShape::Ring
        } else {
            DensityShape::Point
        },
        profile,
    })
}
