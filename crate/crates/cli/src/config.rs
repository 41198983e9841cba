//! Pipeline configuration: strict JSON with per-stage parameter blocks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vesselforge_core::lddmm::{AdamConfig, DeformLossConfig, FlowConfig};
use vesselforge_core::logbseg::{BalancedGate, NetConfig, TrainConfig};
use vesselforge_core::phantom::PhantomSpec;
use vesselforge_core::volume::PreprocessConfig;

use crate::PipelineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Phantom,
    Train,
    Segment,
    Reconstruct,
    Deform,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Phantom, Stage::Train, Stage::Segment, Stage::Reconstruct, Stage::Deform, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Phantom => "phantom",
            Stage::Train => "train",
            Stage::Segment => "segment",
            Stage::Reconstruct => "reconstruct",
            Stage::Deform => "deform",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomStageConfig {
    /// Explicit case; when absent a random vessel is drawn from the global seed.
    pub spec: Option<PhantomSpec>,
    pub dims: [usize; 3],
    pub max_branches: usize,
    pub noise_sd: f64,
    pub blur_sigma: f64,
}

impl Default for PhantomStageConfig {
    fn default() -> Self {
        Self { spec: None, dims: [64; 3], max_branches: 2, noise_sd: 10.0, blur_sigma: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainStageConfig {
    /// Number of generated training phantoms.
    pub volumes: usize,
    pub dims: [usize; 3],
    pub max_branches: usize,
    pub noise_sd: f64,
    pub blur_sigma: f64,
    pub net: NetConfig,
    /// `seed` is replaced by one derived from the global seed.
    pub optimizer: TrainConfig,
    pub gate: BalancedGate,
}

impl Default for TrainStageConfig {
    fn default() -> Self {
        Self {
            volumes: 10,
            dims: [64; 3],
            max_branches: 2,
            noise_sd: 10.0,
            blur_sigma: 1.0,
            net: NetConfig::default(),
            optimizer: TrainConfig::default(),
            gate: BalancedGate::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentStageConfig {
    /// Posterior samples K.
    pub samples: usize,
    pub overlap: usize,
    /// Use this checkpoint instead of the train stage output.
    pub checkpoint: Option<PathBuf>,
    /// Use this NRRD image instead of the phantom stage output.
    pub image: Option<PathBuf>,
}

impl Default for SegmentStageConfig {
    fn default() -> Self {
        Self { samples: 8, overlap: 16, checkpoint: None, image: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructStageConfig {
    pub iso: f64,
    pub smooth_steps: usize,
    pub smooth_lr: f64,
    pub target_vertices: usize,
}

impl Default for ReconstructStageConfig {
    fn default() -> Self {
        Self { iso: 0.5, smooth_steps: 50, smooth_lr: 0.5, target_vertices: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformStageConfig {
    pub control_points: usize,
    /// Kernel width σ_K (mm); 5% of the mesh bounding-box diagonal when absent.
    pub sigma: Option<f64>,
    pub flow: FlowConfig,
    pub loss: DeformLossConfig,
    pub optimizer: AdamConfig,
    /// Freeze inlet/outlet caps when the phantom stage recorded them.
    pub use_caps: bool,
}

impl Default for DeformStageConfig {
    fn default() -> Self {
        Self {
            control_points: 150,
            sigma: None,
            flow: FlowConfig::default(),
            loss: DeformLossConfig::default(),
            optimizer: AdamConfig::default(),
            use_caps: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateStageConfig {
    /// Case name written to the metrics table.
    pub case: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub phantom: PhantomStageConfig,
    #[serde(default)]
    pub train: TrainStageConfig,
    #[serde(default)]
    pub segment: SegmentStageConfig,
    #[serde(default)]
    pub reconstruct: ReconstructStageConfig,
    #[serde(default)]
    pub deform: DeformStageConfig,
    #[serde(default)]
    pub evaluate: EvaluateStageConfig,
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stages in dependency order, without duplicates.
    pub fn ordered_stages(&self) -> Vec<Stage> {
        let mut s = self.stages.clone();
        s.sort();
        s.dedup();
        s
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.stages.is_empty() {
            return Err(invalid("stage list is empty"));
        }
        self.preprocess.validate().map_err(|e| invalid(format!("preprocess: {e}")))?;
        let tile = self.preprocess.crop_dims;
        if tile.iter().any(|&t| t != tile[0]) {
            return Err(invalid(format!("preprocess.crop_dims {tile:?} must be cubic")));
        }
        if let Some(spec) = &self.phantom.spec {
            spec.validate().map_err(|e| invalid(format!("phantom.spec: {e}")))?;
        }
        let t = &self.train;
        if t.volumes < 4 {
            return Err(invalid(format!("train.volumes must be at least 4, got {}", t.volumes)));
        }
        t.net.validate().map_err(|e| invalid(format!("train.net: {e}")))?;
        t.optimizer.validate(&t.gate).map_err(|e| invalid(format!("train: {e}")))?;
        let factor = 1usize << t.net.blocks;
        if tile[0] % factor != 0 {
            return Err(invalid(format!("tile {} not divisible by 2^blocks = {factor}", tile[0])));
        }
        let s = &self.segment;
        if s.samples < 2 {
            return Err(invalid("segment.samples must be at least 2"));
        }
        if s.overlap >= tile[0] {
            return Err(invalid(format!("segment.overlap {} must be smaller than the tile {}", s.overlap, tile[0])));
        }
        let r = &self.reconstruct;
        if !(r.iso > 0.0 && r.iso < 1.0) || r.target_vertices < 100 || !(r.smooth_lr >= 0.0) {
            return Err(invalid("reconstruct: iso must lie in (0, 1), target_vertices ≥ 100, smooth_lr ≥ 0"));
        }
        let d = &self.deform;
        if d.control_points == 0 || d.sigma.is_some_and(|s| !(s > 0.0)) {
            return Err(invalid("deform: control_points must be positive and sigma, if set, positive"));
        }
        if d.flow.steps == 0 || !(d.flow.t_end > 0.0) || !(d.optimizer.lr > 0.0) {
            return Err(invalid("deform: flow steps, t_end and learning rate must be positive"));
        }
        Ok(())
    }
}

/// Read and validate a config file. Unknown and duplicate keys are rejected.
pub fn parse_config(path: impl AsRef<Path>) -> Result<PipelineConfig, PipelineError> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
    PipelineConfig::from_json(&text)
}
