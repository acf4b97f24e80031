//! Experiment configuration: one self-contained JSON document drives
//! simulation, training, analysis and the robustness protocol.
//! Re-running the same file with the same seeds reproduces every numeric
//! artifact (wall-clock timings aside).

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::sampler::SampleGrid;
use crate::sim::{SdeModel, SimConfig};
use crate::systems::{grazing_model, grazing_unstable_equilibrium, rvdp_model, GrazingParams, RvdpParams};
use crate::train::TrainConfig;
use crate::unscented::UtParams;
use crate::{Error, Result};

/// Benchmark system selector with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "lowercase")]
pub enum SystemConfig {
    Grazing(GrazingParams),
    Rvdp(RvdpParams),
}

impl SystemConfig {
    pub fn build(&self) -> SdeModel {
        match self {
            SystemConfig::Grazing(p) => grazing_model(p),
            SystemConfig::Rvdp(p) => rvdp_model(p),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SystemConfig::Grazing(_) => "grazing",
            SystemConfig::Rvdp(_) => "rvdp",
        }
    }

    /// Noise intensity of the configured parameter set.
    pub fn noise_intensity(&self) -> f64 {
        match self {
            SystemConfig::Grazing(p) => p.d,
            SystemConfig::Rvdp(p) => p.d,
        }
    }

    /// Same system with a different noise intensity (for D sweeps).
    pub fn with_noise_intensity(&self, d: f64) -> SystemConfig {
        match self {
            SystemConfig::Grazing(p) => SystemConfig::Grazing(GrazingParams { d, ..*p }),
            SystemConfig::Rvdp(p) => SystemConfig::Rvdp(RvdpParams { d, ..*p }),
        }
    }

    /// Default escape boundary: the unstable equilibrium of the grazing
    /// drift. Only 1-D systems support escape analysis.
    pub fn default_gamma1(&self) -> Option<f64> {
        match self {
            SystemConfig::Grazing(p) => grazing_unstable_equilibrium(p),
            SystemConfig::Rvdp(_) => None,
        }
    }
}

/// Escape-probability analysis settings (1-D systems).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapeSpec {
    /// Escape boundary; `None` places it at the drift's unstable equilibrium.
    #[serde(default)]
    pub gamma1: Option<f64>,
    pub gamma2: f64,
    #[serde(default = "default_n_query")]
    pub n_query: usize,
    #[serde(default = "default_mc_traj")]
    pub mc_trajectories: usize,
    #[serde(default = "default_max_time")]
    pub max_time: f64,
    #[serde(default = "default_escape_dt")]
    pub dt: f64,
    #[serde(default = "default_bvp_mesh")]
    pub bvp_mesh: usize,
}

fn default_n_query() -> usize {
    25
}
fn default_mc_traj() -> usize {
    10_000
}
fn default_max_time() -> f64 {
    400.0
}
fn default_escape_dt() -> f64 {
    0.01
}
fn default_bvp_mesh() -> usize {
    1000
}

/// Stationary-density analysis settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySpec {
    pub bounds: Vec<[f64; 2]>,
    pub shape: Vec<usize>,
    pub x0: Vec<f64>,
    pub burn_in: f64,
    pub total_time: f64,
    #[serde(default = "default_density_traj")]
    pub n_traj: usize,
    #[serde(default = "default_escape_dt")]
    pub dt: f64,
    #[serde(default = "default_threshold_cells")]
    pub threshold_cells: f64,
}

fn default_density_traj() -> usize {
    16
}
fn default_threshold_cells() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub escape: Option<EscapeSpec>,
    #[serde(default)]
    pub density: Option<DensitySpec>,
    /// Noise intensities for the P-bifurcation sweep.
    #[serde(default)]
    pub d_sweep: Vec<f64>,
}

/// Initial-value perturbation protocol settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSpec {
    #[serde(default = "default_perturbation_std")]
    pub perturbation_std: f64,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
}

fn default_perturbation_std() -> f64 {
    0.25
}
fn default_reps() -> usize {
    10
}

impl Default for RobustnessSpec {
    fn default() -> Self {
        Self {
            perturbation_std: default_perturbation_std(),
            repetitions: default_reps(),
        }
    }
}

/// The complete experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub grid: SampleGrid,
    pub sim: SimConfig,
    #[serde(default)]
    pub ut: UtParams,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub robustness: RobustnessSpec,
    pub output_dir: String,
    /// Master seed for sampling, network initialization and analysis
    /// streams. The ensemble data seed lives in `sim.seed`.
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        let model = self.system.build();
        if self.grid.dim() != model.dim() {
            return Err(Error::Config(format!(
                "grid dimension {} does not match the {}-dimensional system",
                self.grid.dim(),
                model.dim()
            )));
        }
        SampleGrid::new(self.grid.bounds.clone(), self.grid.shape.clone())?;
        if self.train.initial_sample_count > self.grid.total() {
            return Err(Error::Config("initial_sample_count exceeds grid size".into()));
        }
        self.train.rbms.validate()?;
        if let Some(d) = &self.analysis.density {
            if d.bounds.len() != model.dim() || d.shape.len() != model.dim() || d.x0.len() != model.dim() {
                return Err(Error::Config("density spec dimension mismatch".into()));
            }
            if !(d.total_time > d.burn_in) {
                return Err(Error::Config("density total_time must exceed burn_in".into()));
            }
        }
        if let Some(e) = &self.analysis.escape {
            if model.dim() != 1 {
                return Err(Error::Config("escape analysis needs a 1-D system".into()));
            }
            if let Some(g1) = e.gamma1 {
                if !(g1 < e.gamma2) {
                    return Err(Error::Config("escape gamma1 must be below gamma2".into()));
                }
            }
        }
        Ok(())
    }

    /// Grazing defaults: bistable parameters, 1600 nodes over [0.1, 9.9].
    pub fn grazing_default(output_dir: &str) -> Self {
        let params = GrazingParams { d: 0.1, ..Default::default() };
        Self {
            system: SystemConfig::Grazing(params),
            grid: SampleGrid {
                bounds: vec![[0.1, 9.9]],
                shape: vec![1600],
            },
            sim: SimConfig {
                dt: 0.01,
                steps: 25,
                ensemble_size: 2000,
                seed: 1,
                milstein_correction: false,
            },
            ut: UtParams::default(),
            train: TrainConfig::default(),
            analysis: AnalysisConfig {
                escape: Some(EscapeSpec {
                    gamma1: None,
                    gamma2: 9.9,
                    n_query: default_n_query(),
                    mc_trajectories: default_mc_traj(),
                    max_time: default_max_time(),
                    dt: default_escape_dt(),
                    bvp_mesh: default_bvp_mesh(),
                }),
                density: None,
                d_sweep: vec![0.01, 0.05, 0.1],
            },
            robustness: RobustnessSpec::default(),
            output_dir: output_dir.into(),
            seed: 1,
        }
    }

    /// RVDP defaults: 40x40 grid over [1,3] x [-3,-1].
    pub fn rvdp_default(output_dir: &str) -> Self {
        let params = RvdpParams::default();
        Self {
            system: SystemConfig::Rvdp(params),
            grid: SampleGrid {
                bounds: vec![[1.0, 3.0], [-3.0, -1.0]],
                shape: vec![40, 40],
            },
            sim: SimConfig {
                dt: 0.01,
                steps: 25,
                ensemble_size: 2000,
                seed: 1,
                milstein_correction: false,
            },
            ut: UtParams::default(),
            train: TrainConfig::default(),
            analysis: AnalysisConfig {
                escape: None,
                density: Some(DensitySpec {
                    bounds: vec![[0.0, 4.0], [-4.0, 4.0]],
                    shape: vec![40, 80],
                    x0: vec![1.5, 0.0],
                    burn_in: 50.0,
                    total_time: 450.0,
                    n_traj: default_density_traj(),
                    dt: 0.005,
                    threshold_cells: default_threshold_cells(),
                }),
                d_sweep: vec![0.01, 0.05, 0.1],
            },
            robustness: RobustnessSpec::default(),
            output_dir: output_dir.into(),
            seed: 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn config_round_trip_is_identity() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.json");
        let cfg = ExperimentConfig::grazing_default("out");
        cfg.save(&p).unwrap();
        let back = ExperimentConfig::load(&p).unwrap();
        assert_eq!(cfg, back);
        // serialize -> parse -> serialize fixed point
        let p2 = dir.path().join("c2.json");
        back.save(&p2).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            std::fs::read_to_string(&p2).unwrap()
        );
    }

    #[test]
    fn rvdp_default_validates() {
        ExperimentConfig::rvdp_default("out").validate().unwrap();
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut cfg = ExperimentConfig::grazing_default("out");
        cfg.grid = SampleGrid {
            bounds: vec![[0.0, 1.0], [0.0, 1.0]],
            shape: vec![10, 10],
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn escape_on_2d_system_is_rejected() {
        let mut cfg = ExperimentConfig::rvdp_default("out");
        cfg.analysis.escape = Some(EscapeSpec {
            gamma1: Some(0.5),
            gamma2: 2.0,
            n_query: 5,
            mc_trajectories: 1000,
            max_time: 10.0,
            dt: 0.01,
            bvp_mesh: 100,
        });
        assert!(cfg.validate().is_err());
    }
}
