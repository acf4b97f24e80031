//! Adaptive identification loop: two-stage moment-matching training,
//! residual fields over the initial-condition grid, RBMS augmentation,
//! and the benchmark metrics.
//!
//! Stage 1 fits the drift network to the teacher-forced one-step mean
//! error (the diffusion contribution is frozen at zero); stage 2 fits the
//! diffusion network to the one-step covariance error with the drift
//! frozen. Both gradients are exact reverse-mode: the covariance loss is
//! differentiated through the sigma-point reconstruction, and the mean
//! loss additionally through the RK4 integration of the drift map.
//!
//! Sigma points are generated from *data* moments, so they are
//! precomputed once per dataset and reused by every gradient step.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::derive_seed;
use crate::net::{optimizer_step, Mlp, MlpGrads, MlpWorkspace, OptimState};
use crate::sampler::{
    build_residual_field, rbms_i_sample, rbms_ii_sample, RbmsConfig, RbmsVariant, SampleGrid,
    SampleSet,
};
use crate::sim::{compute_moments, simulate_ensemble_perturbed, MomentSeries, SdeModel, SimConfig};
use crate::unscented::{augmented_sigma, Field, SigmaSet, UtParams, DEFAULT_RK4_SUBSTEPS};
use crate::{Error, Result};

const TAG_SIM: u64 = 0x51;
const TAG_INIT_SAMPLES: u64 = 0x52;
const TAG_NET: u64 = 0x53;
const TAG_BATCH: u64 = 0x54;
const TAG_ROBUST: u64 = 0x55;

/// Per-round learning-rate decay applied on top of the configured rate.
const LR_DECAY_PER_ROUND: f64 = 0.95;
const LR_FLOOR_FACTOR: f64 = 0.1;

/// Moment data for one grid node: the measured series plus the cached
/// augmented sigma sets at k = 0..L-1 (inputs of the teacher-forced
/// one-step predictions).
#[derive(Debug, Clone)]
pub struct NodeData {
    pub moments: MomentSeries,
    sigma: Vec<SigmaSet>,
}

/// Pre-simulated moments for every node of the grid, with everything the
/// trainer needs cached. AGF baselines, RBMS runs and residual sweeps all
/// consume this one dataset, so sample efficiency is purely about which
/// nodes the trainer reads.
#[derive(Debug, Clone)]
pub struct MomentDataset {
    pub grid: SampleGrid,
    pub nodes: Vec<NodeData>,
    pub state_dim: usize,
    pub noise_dim: usize,
    pub dt: f64,
    pub steps: usize,
    pub ut: UtParams,
}

impl MomentDataset {
    /// Simulate an ensemble at every grid node and reduce to moments.
    /// Node `i` uses a seed derived from `(sim.seed, i)`; `init_std > 0`
    /// adds the per-trajectory initial perturbation of the robustness
    /// protocol.
    pub fn simulate(
        model: &SdeModel,
        grid: &SampleGrid,
        sim: &SimConfig,
        ut: &UtParams,
        init_std: f64,
    ) -> Result<Self> {
        let all: Result<Vec<MomentSeries>> = (0..grid.total())
            .into_par_iter()
            .map(|node| {
                let cfg = SimConfig {
                    seed: derive_seed(sim.seed, TAG_SIM, node as u64),
                    ..*sim
                };
                let ens = simulate_ensemble_perturbed(model, &grid.coords(node), &cfg, init_std)?;
                compute_moments(&ens)
            })
            .collect();
        Self::from_moments(grid.clone(), all?, model.noise_dim(), sim.dt, *ut)
    }

    /// Wrap existing per-node moment series (e.g. read back from disk),
    /// building the sigma-point cache.
    pub fn from_moments(
        grid: SampleGrid,
        series: Vec<MomentSeries>,
        noise_dim: usize,
        dt: f64,
        ut: UtParams,
    ) -> Result<Self> {
        if series.len() != grid.total() {
            return Err(Error::Shape(format!(
                "{} moment series for a {}-node grid",
                series.len(),
                grid.total()
            )));
        }
        let first = series.first().ok_or_else(|| Error::Config("empty dataset".into()))?;
        let state_dim = first.dim();
        let steps = first.len() - 1;
        let nodes: Result<Vec<NodeData>> = series
            .into_par_iter()
            .map(|moments| {
                if moments.len() != steps + 1 || moments.dim() != state_dim {
                    return Err(Error::Shape("inconsistent moment series in dataset".into()));
                }
                let mut sigma = Vec::with_capacity(steps);
                for k in 0..steps {
                    sigma.push(augmented_sigma(
                        &moments.means[k],
                        &moments.covariances[k],
                        noise_dim,
                        dt,
                        &ut,
                    )?);
                }
                Ok(NodeData { moments, sigma })
            })
            .collect();
        Ok(Self {
            grid,
            nodes: nodes?,
            state_dim,
            noise_dim,
            dt,
            steps,
            ut,
        })
    }
}

/// Optimizer settings for one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSettings {
    pub learning_rate: f64,
    /// Gradient steps per augmentation round.
    pub steps_per_round: usize,
    /// Gradient steps for the all-grid baseline run.
    pub agf_steps: usize,
    pub gradient_clip: Option<f64>,
}

impl Default for StageSettings {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            steps_per_round: 150,
            agf_steps: 600,
            gradient_clip: Some(100.0),
        }
    }
}

/// Point-selection strategy of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// All-grid fitting: every node of the grid.
    Agf,
    /// Residual-based multi-peak sampling, variant I.
    Rbms1,
    /// Residual-based multi-peak sampling, variant II.
    Rbms2,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainMode::Agf => write!(f, "agf"),
            TrainMode::Rbms1 => write!(f, "rbms1"),
            TrainMode::Rbms2 => write!(f, "rbms2"),
        }
    }
}

/// Full trainer configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Nodes in the seeded uniform-random initial sample.
    pub initial_sample_count: usize,
    /// Nodes per gradient step (mini-batch over the sampled set).
    pub batch_size: usize,
    pub stage1: StageSettings,
    pub stage2: StageSettings,
    /// Stop once the field RMSE falls to this value; `None` trains until
    /// budget or round limit (the AGF baseline supplies the value then).
    pub stop_threshold: Option<f64>,
    pub max_rounds: usize,
    pub sample_budget: usize,
    pub rbms: RbmsConfig,
    /// Hidden layer widths of both surrogate networks.
    pub hidden_layers: Vec<usize>,
    pub rk4_substeps: usize,
    /// Gaussian-smooth the residual field before peak detection.
    pub smooth_residuals: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_sample_count: 20,
            batch_size: 64,
            stage1: StageSettings::default(),
            stage2: StageSettings::default(),
            stop_threshold: None,
            max_rounds: 40,
            sample_budget: usize::MAX,
            rbms: RbmsConfig::default(),
            hidden_layers: vec![16, 16],
            rk4_substeps: DEFAULT_RK4_SUBSTEPS,
            smooth_residuals: true,
        }
    }
}

/// Field-error summary against the ground truth, pooled over drift and
/// |diffusion| components at every grid node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub rrmse: f64,
    pub max_sigma_error: f64,
}

/// One augmentation round of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub n_samples: usize,
    pub stage1_loss: f64,
    pub stage2_loss: f64,
    pub rmse: f64,
    pub rrmse: f64,
    pub max_sigma_error: f64,
    pub wall_time_s: f64,
}

/// One sampled node with the residual-field values that selected it
/// (epoch 0 is the seeded initial draw, before any residual exists).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledNodeRecord {
    pub epoch: usize,
    pub node_index: usize,
    pub epsilon: f64,
    pub pdf: f64,
}

/// Everything a training run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub seed: u64,
    pub rounds: Vec<RoundRecord>,
    pub stop_threshold: Option<f64>,
    pub stop_reason: String,
    pub final_samples: usize,
    /// First round whose RMSE reached the threshold, if any.
    pub stopped_at_round: Option<usize>,
    /// Per-epoch additions to the sample set (epoch 0 = initial draw).
    pub sample_history: Vec<Vec<usize>>,
    /// Flat per-node sampling records for the samples CSV.
    pub sample_details: Vec<SampledNodeRecord>,
}

impl TrainReport {
    pub fn final_metrics(&self) -> Option<Metrics> {
        self.rounds.last().map(|r| Metrics {
            rmse: r.rmse,
            rrmse: r.rrmse,
            max_sigma_error: r.max_sigma_error,
        })
    }

    /// Sample count at the first round whose RMSE is at or below
    /// `threshold`; `None` if the run never got there.
    pub fn samples_to_reach(&self, threshold: f64) -> Option<usize> {
        self.rounds.iter().find(|r| r.rmse <= threshold).map(|r| r.n_samples)
    }
}

/// A finished run: the report plus the trained networks.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub drift: Mlp,
    pub diffusion: Mlp,
}

/// Wrap trained networks as an [`SdeModel`] so every downstream analysis
/// runs identically on learned and ground-truth dynamics.
pub fn surrogate_model(drift: &Mlp, diffusion: &Mlp) -> SdeModel {
    let n = drift.output_dim();
    let m = diffusion.output_dim() / n;
    let d = drift.clone();
    let g = diffusion.clone();
    SdeModel::new(
        n,
        m,
        move |x, out| {
            use std::cell::RefCell;
            thread_local! {
                static WS: RefCell<MlpWorkspace> = RefCell::new(MlpWorkspace::default());
            }
            WS.with(|ws| out.copy_from_slice(d.forward_ws(x, &mut ws.borrow_mut())));
        },
        move |x, out| {
            use std::cell::RefCell;
            thread_local! {
                static WS: RefCell<MlpWorkspace> = RefCell::new(MlpWorkspace::default());
            }
            WS.with(|ws| out.copy_from_slice(g.forward_ws(x, &mut ws.borrow_mut())));
        },
    )
}

// ───────────────────────── gradient engine ─────────────────────────

/// Tape for one RK4 rollout: per substep, the four stage inputs and the
/// workspaces holding the drift net's activations at those inputs.
struct Rk4Tape {
    /// 4 workspaces per substep, in stage order.
    wss: Vec<MlpWorkspace>,
    /// Stage inputs a1..a4 per substep (a1 = substep input state).
    inputs: Vec<f64>,
    substeps: usize,
    n: usize,
}

impl Rk4Tape {
    fn new() -> Self {
        Self {
            wss: Vec::new(),
            inputs: Vec::new(),
            substeps: 0,
            n: 0,
        }
    }

    fn ensure(&mut self, substeps: usize, n: usize) {
        if self.wss.len() < 4 * substeps {
            self.wss.resize_with(4 * substeps, MlpWorkspace::default);
        }
        self.inputs.resize(4 * substeps * n, 0.0);
        self.substeps = substeps;
        self.n = n;
    }
}

/// RK4 forward pass recording the tape. `out` receives the final state.
fn rk4_forward_tape(net: &Mlp, x: &[f64], dt: f64, substeps: usize, tape: &mut Rk4Tape, out: &mut [f64]) {
    let n = x.len();
    tape.ensure(substeps, n);
    let h = dt / substeps as f64;
    let mut u = x.to_vec();
    let mut k = vec![0.0; 4 * n];
    for s in 0..substeps {
        // stage 1 input = u
        let base = s * 4 * n;
        tape.inputs[base..base + n].copy_from_slice(&u);
        let k1 = {
            let o = net.forward_ws(&u, &mut tape.wss[s * 4]);
            k[..n].copy_from_slice(o);
            &k[..n]
        };
        for i in 0..n {
            tape.inputs[base + n + i] = u[i] + 0.5 * h * k1[i];
        }
        {
            let (a2_src, _) = tape.inputs[base + n..].split_at(n);
            let a2 = a2_src.to_vec();
            let o = net.forward_ws(&a2, &mut tape.wss[s * 4 + 1]);
            k[n..2 * n].copy_from_slice(o);
        }
        for i in 0..n {
            tape.inputs[base + 2 * n + i] = u[i] + 0.5 * h * k[n + i];
        }
        {
            let a3 = tape.inputs[base + 2 * n..base + 3 * n].to_vec();
            let o = net.forward_ws(&a3, &mut tape.wss[s * 4 + 2]);
            k[2 * n..3 * n].copy_from_slice(o);
        }
        for i in 0..n {
            tape.inputs[base + 3 * n + i] = u[i] + h * k[2 * n + i];
        }
        {
            let a4 = tape.inputs[base + 3 * n..base + 4 * n].to_vec();
            let o = net.forward_ws(&a4, &mut tape.wss[s * 4 + 3]);
            k[3 * n..4 * n].copy_from_slice(o);
        }
        for i in 0..n {
            u[i] += h / 6.0
                * (k[i] + 2.0 * k[n + i] + 2.0 * k[2 * n + i] + k[3 * n + i]);
        }
    }
    out.copy_from_slice(&u);
}

/// Adjoint of [`rk4_forward_tape`]: accumulates parameter gradients of
/// `<final state, cotangent>` into `grads`. The tape workspaces must hold
/// the forward activations; each stage's backward reuses them directly.
fn rk4_backward_tape(
    net: &Mlp,
    dt: f64,
    tape: &mut Rk4Tape,
    cotangent: &[f64],
    grads: &mut MlpGrads,
) {
    let n = tape.n;
    let substeps = tape.substeps;
    let h = dt / substeps as f64;
    let mut ubar = cotangent.to_vec();
    let mut kbar = vec![0.0; n];
    let mut abar = vec![vec![0.0; n]; 4];
    for s in (0..substeps).rev() {
        // k4
        for i in 0..n {
            kbar[i] = h / 6.0 * ubar[i];
        }
        net.backward_ws(&kbar, &mut tape.wss[s * 4 + 3], grads, Some(&mut abar[3]));
        // k3
        for i in 0..n {
            kbar[i] = h / 3.0 * ubar[i] + h * abar[3][i];
        }
        net.backward_ws(&kbar, &mut tape.wss[s * 4 + 2], grads, Some(&mut abar[2]));
        // k2
        for i in 0..n {
            kbar[i] = h / 3.0 * ubar[i] + 0.5 * h * abar[2][i];
        }
        net.backward_ws(&kbar, &mut tape.wss[s * 4 + 1], grads, Some(&mut abar[1]));
        // k1
        for i in 0..n {
            kbar[i] = h / 6.0 * ubar[i] + 0.5 * h * abar[1][i];
        }
        net.backward_ws(&kbar, &mut tape.wss[s * 4], grads, Some(&mut abar[0]));
        for i in 0..n {
            ubar[i] += abar[0][i] + abar[1][i] + abar[2][i] + abar[3][i];
        }
    }
}

/// Reusable per-thread buffers for loss/gradient evaluation.
struct ScratchPad {
    tapes: Vec<Rk4Tape>,
    diff_wss: Vec<MlpWorkspace>,
    ys: Vec<Vec<f64>>,
    plain_ws: MlpWorkspace,
}

impl ScratchPad {
    fn new(n_points: usize) -> Self {
        Self {
            tapes: (0..n_points).map(|_| Rk4Tape::new()).collect(),
            diff_wss: vec![MlpWorkspace::default(); n_points],
            ys: vec![Vec::new(); n_points],
            plain_ws: MlpWorkspace::default(),
        }
    }
}

/// Stage-1 loss and drift gradient for one node: teacher-forced one-step
/// mean error summed over k, diffusion frozen at zero contribution.
fn stage1_node(
    drift: &Mlp,
    data: &MomentDataset,
    node: usize,
    substeps: usize,
    pad: &mut ScratchPad,
    grads: &mut MlpGrads,
) -> f64 {
    let n = data.state_dim;
    let nd = &data.nodes[node];
    let mut loss = 0.0;
    let mut y = vec![0.0; n];
    let mut mu_hat = vec![0.0; n];
    let mut resid = vec![0.0; n];
    let mut ybar = vec![0.0; n];
    for k in 0..data.steps {
        let sigma = &nd.sigma[k];
        let n_points = sigma.points.len();
        mu_hat.fill(0.0);
        for (i, p) in sigma.points.iter().enumerate() {
            rk4_forward_tape(drift, &p[..n], data.dt, substeps, &mut pad.tapes[i], &mut y);
            pad.ys[i].clear();
            pad.ys[i].extend_from_slice(&y);
            let w = sigma.mean_weights[i];
            for j in 0..n {
                mu_hat[j] += w * y[j];
            }
        }
        let target = &nd.moments.means[k + 1];
        for j in 0..n {
            resid[j] = mu_hat[j] - target[j];
            loss += resid[j] * resid[j];
        }
        for i in 0..n_points {
            let w = sigma.mean_weights[i];
            for j in 0..n {
                ybar[j] = 2.0 * w * resid[j];
            }
            rk4_backward_tape(drift, data.dt, &mut pad.tapes[i], &ybar, grads);
        }
    }
    loss
}

/// Stage-2 loss and diffusion gradient for one node: one-step covariance
/// error (Frobenius norm) with the drift frozen.
fn stage2_node(
    drift: &Mlp,
    diffusion: &Mlp,
    data: &MomentDataset,
    node: usize,
    substeps: usize,
    pad: &mut ScratchPad,
    grads: &mut MlpGrads,
) -> f64 {
    let n = data.state_dim;
    let m = data.noise_dim;
    let nd = &data.nodes[node];
    let mut loss = 0.0;
    let mut mu_hat = vec![0.0; n];
    let mut s_mat = vec![0.0; n * n];
    let mut v = vec![0.0; n];
    let mut ybar = vec![0.0; n];
    let mut gbar = vec![0.0; n * m];
    for k in 0..data.steps {
        let sigma = &nd.sigma[k];
        let n_points = sigma.points.len();
        mu_hat.fill(0.0);
        for (i, p) in sigma.points.iter().enumerate() {
            let (x, w_noise) = p.split_at(n);
            let y = &mut pad.ys[i];
            y.clear();
            y.extend_from_slice(&crate::unscented::rk4_integrate(
                &FrozenDrift { net: drift, ws: std::cell::RefCell::new(&mut pad.plain_ws) },
                x,
                data.dt,
                substeps,
            ));
            let g = diffusion.forward_ws(x, &mut pad.diff_wss[i]);
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..m {
                    acc += g[j * m + l] * w_noise[l];
                }
                y[j] += acc;
            }
            let w = sigma.mean_weights[i];
            for j in 0..n {
                mu_hat[j] += w * y[j];
            }
        }
        // S = Sigma_hat - Sigma_target; loss += ||S||_F^2
        let target = &nd.moments.covariances[k + 1];
        s_mat.fill(0.0);
        for (i, _) in sigma.points.iter().enumerate() {
            let wc = sigma.cov_weights[i];
            let y = &pad.ys[i];
            for a in 0..n {
                let da = y[a] - mu_hat[a];
                for b in 0..n {
                    s_mat[a * n + b] += wc * da * (y[b] - mu_hat[b]);
                }
            }
        }
        for a in 0..n {
            for b in 0..n {
                s_mat[a * n + b] -= target[(a, b)];
                loss += s_mat[a * n + b] * s_mat[a * n + b];
            }
        }
        // v = sum_j Wc_j D_j
        v.fill(0.0);
        for (i, _) in sigma.points.iter().enumerate() {
            let wc = sigma.cov_weights[i];
            let y = &pad.ys[i];
            for a in 0..n {
                v[a] += wc * (y[a] - mu_hat[a]);
            }
        }
        // ybar_i = 4 S (Wc_i D_i - Wm_i v); then through y_i = ... + G(x_i) w
        for i in 0..n_points {
            let wc = sigma.cov_weights[i];
            let wm = sigma.mean_weights[i];
            let y = &pad.ys[i];
            for a in 0..n {
                let mut acc = 0.0;
                for b in 0..n {
                    acc += s_mat[a * n + b] * (wc * (y[b] - mu_hat[b]) - wm * v[b]);
                }
                ybar[a] = 4.0 * acc;
            }
            let w_noise = &sigma.points[i][n..];
            for j in 0..n {
                for l in 0..m {
                    gbar[j * m + l] = ybar[j] * w_noise[l];
                }
            }
            diffusion.backward_ws(&gbar, &mut pad.diff_wss[i], grads, None);
        }
    }
    loss
}

/// Adapter so the frozen drift can reuse the generic RK4 integrator with
/// a borrowed workspace.
struct FrozenDrift<'a, 'b> {
    net: &'a Mlp,
    ws: std::cell::RefCell<&'b mut MlpWorkspace>,
}

impl Field for FrozenDrift<'_, '_> {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.net.forward_ws(x, &mut self.ws.borrow_mut()));
    }
}

unsafe impl Sync for FrozenDrift<'_, '_> {}

/// Mean loss and gradient over a batch of nodes, reduced in node order so
/// the result is independent of the parallel schedule.
fn batch_loss_grad(
    stage: usize,
    drift: &Mlp,
    diffusion: &Mlp,
    data: &MomentDataset,
    nodes: &[usize],
    substeps: usize,
) -> (f64, MlpGrads) {
    let net_for_shape = if stage == 1 { drift } else { diffusion };
    let per_node: Vec<(f64, MlpGrads)> = nodes
        .par_iter()
        .map(|&node| {
            let n_points = 2 * (data.state_dim + data.noise_dim) + 1;
            let mut pad = ScratchPad::new(n_points);
            let mut grads = MlpGrads::zeros_like(net_for_shape);
            let loss = if stage == 1 {
                stage1_node(drift, data, node, substeps, &mut pad, &mut grads)
            } else {
                stage2_node(drift, diffusion, data, node, substeps, &mut pad, &mut grads)
            };
            (loss, grads)
        })
        .collect();

    let scale = 1.0 / (nodes.len() * data.steps) as f64;
    let mut loss = 0.0;
    let mut grads = MlpGrads::zeros_like(net_for_shape);
    for (l, g) in &per_node {
        loss += l;
        grads.axpy(scale, g);
    }
    (loss * scale, grads)
}

/// Forward-only residual: `eps = sqrt(sum_k ||mu - mu_hat||^2 +
/// ||Sigma - Sigma_hat||_F^2) / L` per node, over the whole grid.
/// Nodes with non-finite predictions get ten times the finite maximum so
/// the sampler is drawn to them.
pub fn evaluate_residuals(drift: &dyn Field, diffusion: &dyn Field, data: &MomentDataset) -> Vec<f64> {
    let n = data.state_dim;
    let m = data.noise_dim;
    let raw: Vec<Option<f64>> = (0..data.nodes.len())
        .into_par_iter()
        .map(|node| {
            let nd = &data.nodes[node];
            let mut acc = 0.0;
            let mut g = vec![0.0; n * m];
            let mut ys: Vec<Vec<f64>> = Vec::new();
            for k in 0..data.steps {
                let sigma = &nd.sigma[k];
                ys.clear();
                let mut mu_hat = vec![0.0; n];
                for (i, p) in sigma.points.iter().enumerate() {
                    let (x, w_noise) = p.split_at(n);
                    let mut y = crate::unscented::rk4_integrate(drift, x, data.dt, DEFAULT_RK4_SUBSTEPS.min(data.steps.max(1)), );
                    diffusion.eval_into(x, &mut g);
                    for j in 0..n {
                        let mut a = 0.0;
                        for l in 0..m {
                            a += g[j * m + l] * w_noise[l];
                        }
                        y[j] += a;
                    }
                    if y.iter().any(|v| !v.is_finite()) {
                        return None;
                    }
                    let w = sigma.mean_weights[i];
                    for j in 0..n {
                        mu_hat[j] += w * y[j];
                    }
                    ys.push(y);
                }
                let mu_t = &nd.moments.means[k + 1];
                for j in 0..n {
                    let d = mu_hat[j] - mu_t[j];
                    acc += d * d;
                }
                let cov_t = &nd.moments.covariances[k + 1];
                for a in 0..n {
                    for b in 0..n {
                        let mut s = 0.0;
                        for (i, y) in ys.iter().enumerate() {
                            s += sigma.cov_weights[i] * (y[a] - mu_hat[a]) * (y[b] - mu_hat[b]);
                        }
                        let d = s - cov_t[(a, b)];
                        acc += d * d;
                    }
                }
            }
            Some(acc.sqrt() / data.steps as f64)
        })
        .collect();

    let max_finite = raw
        .iter()
        .flatten()
        .fold(0.0f64, |a, &b| a.max(b));
    let fallback = if max_finite > 0.0 { 10.0 * max_finite } else { 1.0 };
    raw.into_iter().map(|v| v.unwrap_or(fallback)).collect()
}

/// RMSE / RRMSE / max-sigma-error of the surrogate fields against the
/// ground truth over the grid. Drift components and |diffusion|
/// components are pooled for RMSE and RRMSE; the max-error metric runs
/// over the |sigma| entries only.
pub fn compute_metrics(
    drift: &dyn Field,
    diffusion: &dyn Field,
    truth: &SdeModel,
    grid: &SampleGrid,
) -> Metrics {
    let n = truth.dim();
    let m = truth.noise_dim();
    let mut err_sq = 0.0;
    let mut true_sq = 0.0;
    let mut max_sigma = 0.0f64;
    let mut fd = vec![0.0; n];
    let mut gd = vec![0.0; n * m];
    for node in 0..grid.total() {
        let x = grid.coords(node);
        let td = truth.drift_at(&x);
        let tg = truth.diffusion_at(&x);
        drift.eval_into(&x, &mut fd);
        diffusion.eval_into(&x, &mut gd);
        for j in 0..n {
            let d = fd[j] - td[j];
            err_sq += d * d;
            true_sq += td[j] * td[j];
        }
        for j in 0..n * m {
            let d = gd[j].abs() - tg[j].abs();
            err_sq += d * d;
            true_sq += tg[j] * tg[j];
            max_sigma = max_sigma.max(d.abs());
        }
    }
    let count = (grid.total() * (n + n * m)) as f64;
    let rmse = (err_sq / count).sqrt();
    let true_rms = (true_sq / count).sqrt();
    Metrics {
        rmse,
        rrmse: if true_rms > 0.0 { rmse / true_rms } else { f64::INFINITY },
        max_sigma_error: max_sigma,
    }
}

// ───────────────────────── stage drivers ─────────────────────────

struct BatchCycle {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchCycle {
    fn new(nodes: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order = nodes.to_vec();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size.min(self.order.len()));
        for _ in 0..size.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

/// Run `steps` optimizer steps of one stage over the sampled nodes.
/// Returns the last batch loss. Divergence (loss above 10x the initial
/// batch loss for 50 consecutive steps) aborts with diagnostics.
fn run_stage(
    stage: usize,
    drift: &mut Mlp,
    diffusion: &mut Mlp,
    opt: &mut OptimState,
    data: &MomentDataset,
    nodes: &[usize],
    cfg: &TrainConfig,
    steps: usize,
    lr: f64,
    batch_seed: u64,
) -> Result<f64> {
    let mut cycle = BatchCycle::new(nodes, batch_seed);
    opt.learning_rate = lr;
    let mut initial_loss = None;
    let mut high_count = 0usize;
    let mut last = 0.0;
    for step in 0..steps {
        let batch = cycle.next_batch(cfg.batch_size);
        let (loss, grads) = if stage == 1 {
            let (l, g) = batch_loss_grad(1, drift, diffusion, data, &batch, cfg.rk4_substeps);
            optimizer_step(drift, &g, opt);
            (l, g)
        } else {
            let (l, g) = batch_loss_grad(2, drift, diffusion, data, &batch, cfg.rk4_substeps);
            optimizer_step(diffusion, &g, opt);
            (l, g)
        };
        let _ = grads;
        let init = *initial_loss.get_or_insert(loss.max(1e-300));
        if loss > 10.0 * init {
            high_count += 1;
            if high_count >= 50 {
                return Err(Error::Divergence(format!(
                    "stage {stage} loss {loss:.3e} above 10x initial {init:.3e} for 50 consecutive steps (step {step})"
                )));
            }
        } else {
            high_count = 0;
        }
        last = loss;
    }
    Ok(last)
}

/// Full-batch stage-1 training entry (fits the drift network).
pub fn train_drift(
    data: &MomentDataset,
    nodes: &[usize],
    drift: &mut Mlp,
    opt: &mut OptimState,
    cfg: &TrainConfig,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let mut dummy_diff = Mlp::new(&[data.state_dim, 1, data.state_dim * data.noise_dim], 0);
    run_stage(
        1,
        drift,
        &mut dummy_diff,
        opt,
        data,
        nodes,
        cfg,
        steps,
        opt.learning_rate,
        seed,
    )
}

/// Full-batch stage-2 training entry (fits the diffusion network with the
/// drift frozen). The drift parameters are bitwise untouched.
pub fn train_diffusion(
    data: &MomentDataset,
    nodes: &[usize],
    drift: &Mlp,
    diffusion: &mut Mlp,
    opt: &mut OptimState,
    cfg: &TrainConfig,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let mut drift_copy = drift.clone();
    run_stage(
        2,
        &mut drift_copy,
        diffusion,
        opt,
        data,
        nodes,
        cfg,
        steps,
        opt.learning_rate,
        seed,
    )
}

// ───────────────────────── adaptive loop ─────────────────────────

/// Build the surrogate pair with feature scaling derived from the grid
/// bounds and from the moment increments of the sampled nodes.
fn init_networks(data: &MomentDataset, nodes: &[usize], hidden: &[usize], seed: u64) -> (Mlp, Mlp) {
    let n = data.state_dim;
    let m = data.noise_dim;
    let dim = data.grid.dim();
    let mut offset = vec![0.0; dim];
    let mut scale = vec![1.0; dim];
    for d in 0..dim {
        let [lo, hi] = data.grid.bounds[d];
        offset[d] = 0.5 * (lo + hi);
        scale[d] = 2.0 / (hi - lo);
    }

    // Output scale from the data: max one-step increment rate per component.
    let mut drift_scale = vec![1e-3f64; n];
    let mut sigma_scale = vec![1e-3f64; n];
    for &node in nodes {
        let mm = &data.nodes[node].moments;
        for k in 0..data.steps {
            for j in 0..n {
                let dmu = (mm.means[k + 1][j] - mm.means[k][j]).abs() / data.dt;
                drift_scale[j] = drift_scale[j].max(dmu);
                let dsig = (mm.covariances[k + 1][(j, j)] - mm.covariances[k][(j, j)]).abs() / data.dt;
                sigma_scale[j] = sigma_scale[j].max(dsig.sqrt());
            }
        }
    }
    let mut diff_out_scale = vec![0.0; n * m];
    for j in 0..n {
        for l in 0..m {
            diff_out_scale[j * m + l] = sigma_scale[j];
        }
    }

    let mut sizes1 = vec![n];
    sizes1.extend_from_slice(hidden);
    sizes1.push(n);
    let mut sizes2 = vec![n];
    sizes2.extend_from_slice(hidden);
    sizes2.push(n * m);

    let drift = Mlp::new(&sizes1, derive_seed(seed, TAG_NET, 1)).with_scaling(&offset, &scale, &drift_scale);
    let diffusion =
        Mlp::new(&sizes2, derive_seed(seed, TAG_NET, 2)).with_scaling(&offset, &scale, &diff_out_scale);
    (drift, diffusion)
}

/// Run the adaptive identification loop (or the AGF baseline when
/// `mode == Agf`). Per round: stage-1 then stage-2 training on the current
/// sample set, metric evaluation against the ground truth, stop checks
/// (threshold, budget, round limit), then residual evaluation over the
/// whole grid and RBMS augmentation. On a saturated sampler the radius is
/// widened by 2 once; a second saturation stops the run.
pub fn adaptive_train(
    data: &MomentDataset,
    truth: &SdeModel,
    cfg: &TrainConfig,
    mode: TrainMode,
    seed: u64,
) -> Result<TrainOutcome> {
    if cfg.initial_sample_count == 0 || cfg.initial_sample_count > data.grid.total() {
        return Err(Error::Config(format!(
            "initial_sample_count {} out of range for {}-node grid",
            cfg.initial_sample_count,
            data.grid.total()
        )));
    }
    cfg.rbms.validate()?;
    let budget = cfg.sample_budget.min(data.grid.total());
    if let Some(t) = cfg.stop_threshold {
        if !(t > 0.0) {
            return Err(Error::Config("stop_threshold must be positive".into()));
        }
    }

    let mut samples = match mode {
        TrainMode::Agf => SampleSet::from_indices(0..data.grid.total()),
        _ => SampleSet::random(&data.grid, cfg.initial_sample_count, derive_seed(seed, TAG_INIT_SAMPLES, 0))?,
    };
    let mut sample_details: Vec<SampledNodeRecord> = samples
        .iter()
        .map(|node_index| SampledNodeRecord {
            epoch: 0,
            node_index,
            epsilon: 0.0,
            pdf: 0.0,
        })
        .collect();
    let (mut drift, mut diffusion) = init_networks(data, &samples.to_vec(), &cfg.hidden_layers, seed);
    let mut opt1 = OptimState::new(&drift, cfg.stage1.learning_rate, cfg.stage1.gradient_clip);
    let mut opt2 = OptimState::new(&diffusion, cfg.stage2.learning_rate, cfg.stage2.gradient_clip);

    let max_rounds = if mode == TrainMode::Agf { 1 } else { cfg.max_rounds };
    let mut rounds = Vec::new();
    let mut stop_reason = String::new();
    let mut rbms_cfg = cfg.rbms;
    let mut widened = false;

    for round in 1..=max_rounds {
        let t0 = Instant::now();
        let nodes = samples.to_vec();
        let (steps1, steps2) = if mode == TrainMode::Agf {
            (cfg.stage1.agf_steps, cfg.stage1.agf_steps.max(cfg.stage2.agf_steps))
        } else {
            (cfg.stage1.steps_per_round, cfg.stage2.steps_per_round)
        };
        let anneal = LR_DECAY_PER_ROUND.powi(round as i32 - 1).max(LR_FLOOR_FACTOR);

        opt1.learning_rate = cfg.stage1.learning_rate * anneal;
        let s1 = run_stage(
            1,
            &mut drift,
            &mut diffusion,
            &mut opt1,
            data,
            &nodes,
            cfg,
            steps1,
            cfg.stage1.learning_rate * anneal,
            derive_seed(seed, TAG_BATCH, 2 * round as u64),
        )?;
        let s2 = run_stage(
            2,
            &mut drift,
            &mut diffusion,
            &mut opt2,
            data,
            &nodes,
            cfg,
            if mode == TrainMode::Agf { cfg.stage2.agf_steps } else { steps2 },
            cfg.stage2.learning_rate * anneal,
            derive_seed(seed, TAG_BATCH, 2 * round as u64 + 1),
        )?;

        let metrics = compute_metrics(&drift, &diffusion, truth, &data.grid);
        rounds.push(RoundRecord {
            round,
            n_samples: samples.len(),
            stage1_loss: s1,
            stage2_loss: s2,
            rmse: metrics.rmse,
            rrmse: metrics.rrmse,
            max_sigma_error: metrics.max_sigma_error,
            wall_time_s: t0.elapsed().as_secs_f64(),
        });

        if let Some(t) = cfg.stop_threshold {
            if metrics.rmse <= t {
                stop_reason = "threshold".into();
                break;
            }
        }
        if mode == TrainMode::Agf {
            stop_reason = "agf".into();
            break;
        }
        if samples.len() >= budget {
            stop_reason = "budget".into();
            break;
        }
        if round == max_rounds {
            stop_reason = "max_rounds".into();
            break;
        }

        let eps = evaluate_residuals(&drift, &diffusion, data);
        let field = build_residual_field(&data.grid, &eps, cfg.smooth_residuals)?;
        let grown = match rbms_cfg.variant {
            RbmsVariant::I => rbms_i_sample(&field, &samples, &rbms_cfg),
            RbmsVariant::II => rbms_ii_sample(&field, &samples, rbms_cfg.r),
        };
        match grown {
            Ok(next) => {
                record_added(&mut sample_details, round, &next, &field);
                samples = next;
            }
            Err(Error::SaturatedRegion) if !widened => {
                rbms_cfg.r += 2;
                widened = true;
                let retry = match rbms_cfg.variant {
                    RbmsVariant::I => rbms_i_sample(&field, &samples, &rbms_cfg),
                    RbmsVariant::II => rbms_ii_sample(&field, &samples, rbms_cfg.r),
                };
                match retry {
                    Ok(next) => {
                        record_added(&mut sample_details, round, &next, &field);
                        samples = next;
                    }
                    Err(Error::SaturatedRegion) => {
                        stop_reason = "saturated".into();
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(Error::SaturatedRegion) => {
                stop_reason = "saturated".into();
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let stopped_at_round = cfg
        .stop_threshold
        .and_then(|t| rounds.iter().find(|r| r.rmse <= t).map(|r| r.round));

    Ok(TrainOutcome {
        report: TrainReport {
            mode,
            seed,
            final_samples: samples.len(),
            rounds,
            stop_threshold: cfg.stop_threshold,
            stop_reason,
            stopped_at_round,
            sample_history: samples.history.clone(),
            sample_details,
        },
        drift,
        diffusion,
    })
}

fn record_added(
    details: &mut Vec<SampledNodeRecord>,
    epoch: usize,
    grown: &SampleSet,
    field: &crate::sampler::ResidualField,
) {
    if let Some(added) = grown.history.last() {
        for &node_index in added {
            details.push(SampledNodeRecord {
                epoch,
                node_index,
                epsilon: field.epsilon[node_index],
                pdf: field.pdf[node_index],
            });
        }
    }
}

/// AGF baseline then the requested RBMS mode with the baseline RMSE as
/// its stop threshold (unless the config pins one explicitly).
pub fn run_with_baseline(
    data: &MomentDataset,
    truth: &SdeModel,
    cfg: &TrainConfig,
    mode: TrainMode,
    seed: u64,
) -> Result<(TrainOutcome, TrainOutcome)> {
    let agf = adaptive_train(data, truth, cfg, TrainMode::Agf, seed)?;
    let threshold = cfg
        .stop_threshold
        .unwrap_or_else(|| agf.report.rounds.last().map(|r| r.rmse).unwrap_or(f64::INFINITY));
    let rbms_cfg = TrainConfig {
        stop_threshold: Some(threshold),
        ..cfg.clone()
    };
    let rbms = adaptive_train(data, truth, &rbms_cfg, mode, seed)?;
    Ok((agf, rbms))
}

// ───────────────────────── robustness protocol ─────────────────────────

/// One repetition of the initial-perturbation experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessRep {
    pub seed: u64,
    pub agf: Metrics,
    pub rbms: Metrics,
    pub agf_samples: usize,
    pub rbms_samples: usize,
    /// Mean relative change of the final-step mean vs the clean data.
    pub mean_rel_mu_change: f64,
    /// Mean relative change of the final-step covariance vs the clean data.
    pub mean_rel_sigma_change: f64,
}

/// Paired AGF / RBMS-II reports over repeated noisy-data experiments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub perturbation_std: f64,
    pub reps: Vec<RobustnessRep>,
}

impl RobustnessReport {
    /// Mean and standard deviation of one metric across repetitions.
    /// `which`: 0 = RMSE, 1 = RRMSE, 2 = max sigma error.
    pub fn band(&self, agf: bool, which: usize) -> (f64, f64) {
        let vals: Vec<f64> = self
            .reps
            .iter()
            .map(|r| {
                let m = if agf { &r.agf } else { &r.rbms };
                match which {
                    0 => m.rmse,
                    1 => m.rrmse,
                    _ => m.max_sigma_error,
                }
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        (mean, var.sqrt())
    }
}

/// Re-simulate every node ensemble with per-trajectory initial
/// perturbation `N(0, std^2 I)`, train AGF and RBMS-II on the noisy data,
/// and repeat `reps` times with fresh seeds. Also reports how strongly
/// the perturbation inflated second moments relative to first moments at
/// the end of the window.
pub fn robustness_experiment(
    truth: &SdeModel,
    grid: &SampleGrid,
    sim: &SimConfig,
    ut: &UtParams,
    cfg: &TrainConfig,
    perturbation_std: f64,
    reps: usize,
    master_seed: u64,
) -> Result<RobustnessReport> {
    if perturbation_std < 0.0 {
        return Err(Error::Config("perturbation_std must be nonnegative".into()));
    }
    let mut out = Vec::with_capacity(reps);
    for rep in 0..reps {
        let seed = derive_seed(master_seed, TAG_ROBUST, rep as u64);
        let sim_rep = SimConfig { seed, ..*sim };
        let noisy = MomentDataset::simulate(truth, grid, &sim_rep, ut, perturbation_std)?;
        let clean = MomentDataset::simulate(truth, grid, &sim_rep, ut, 0.0)?;

        // moment inflation at the end of the window
        let last = noisy.steps;
        let mut rel_mu = 0.0;
        let mut rel_sigma = 0.0;
        for (nn, cn) in noisy.nodes.iter().zip(clean.nodes.iter()) {
            let dmu = (&nn.moments.means[last] - &cn.moments.means[last]).norm();
            rel_mu += dmu / cn.moments.means[last].norm().max(1e-12);
            let dsig = (&nn.moments.covariances[last] - &cn.moments.covariances[last]).norm();
            rel_sigma += dsig / cn.moments.covariances[last].norm().max(1e-12);
        }
        rel_mu /= noisy.nodes.len() as f64;
        rel_sigma /= noisy.nodes.len() as f64;

        let (agf, rbms) = run_with_baseline(&noisy, truth, cfg, TrainMode::Rbms2, seed)?;
        out.push(RobustnessRep {
            seed,
            agf: agf.report.final_metrics().unwrap(),
            rbms: rbms.report.final_metrics().unwrap(),
            agf_samples: agf.report.final_samples,
            rbms_samples: rbms.report.final_samples,
            mean_rel_mu_change: rel_mu,
            mean_rel_sigma_change: rel_sigma,
        });
    }
    Ok(RobustnessReport {
        perturbation_std,
        reps: out,
    })
}

/// One-step moment prediction error of the trained pair against the data
/// (used by tests); thin wrapper over the engine's forward path.
pub fn one_step_prediction(
    drift: &dyn Field,
    diffusion: &dyn Field,
    data: &MomentDataset,
    node: usize,
    k: usize,
    substeps: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let nd = &data.nodes[node];
    let prop = crate::unscented::propagate_sigma(drift, diffusion, &nd.sigma[k], data.dt, substeps)?;
    Ok(crate::unscented::reconstruct_moments(&prop))
}
