use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mpvbgs::mpsearch::{CostSource, SearchOptions, DEFAULT_TAU};
use mpvbgs::scene::{SceneSpec, DEFAULT_EVAL_POINTS};
use mpvbgs::vbgs::TrainConfig;
use mpvbgs::{CostModel, Error, ExecMode, PrecisionFormat, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fused,
    Baseline,
}

impl From<Mode> for ExecMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Fused => ExecMode::FusedContraction,
            Mode::Baseline => ExecMode::MaterializeThenReduce,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub fp16: f64,
    pub tf32: f64,
    pub fp32: f64,
    pub fp64: f64,
    pub cast: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        let d = CostModel::default();
        let w = |f| d.weight(f);
        CostWeights {
            fp16: w(PrecisionFormat::Fp16),
            tf32: w(PrecisionFormat::Tf32),
            fp32: w(PrecisionFormat::Fp32),
            fp64: w(PrecisionFormat::Fp64),
            cast: d.cast_weight,
        }
    }
}

impl CostWeights {
    pub fn model(&self) -> CostModel {
        use PrecisionFormat::*;
        CostModel {
            per_element_weight: BTreeMap::from([(Fp16, self.fp16), (Tf32, self.tf32), (Fp32, self.fp32), (Fp64, self.fp64)]),
            cast_weight: self.cast,
        }
    }
}

/// Everything a command needs; serialized into every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Scene spec file, relative to the config file. Inline `scene_spec`
    /// wins when both are present.
    pub scene: Option<PathBuf>,
    pub scene_spec: Option<SceneSpec>,
    pub out_dir: PathBuf,
    pub frames: usize,
    pub points_per_frame: usize,
    pub overlap: f64,
    pub eval_points: usize,
    pub model: TrainConfig,
    pub mode: Mode,
    /// Homogeneous format used when no precision maps are given.
    pub precision: PrecisionFormat,
    pub epsilon: f64,
    pub tau: f64,
    pub formats: Vec<PrecisionFormat>,
    pub cost_source: CostSource,
    pub cost: CostWeights,
    pub probe_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: None,
            scene_spec: None,
            out_dir: PathBuf::from("runs/default"),
            frames: 50,
            points_per_frame: 512,
            overlap: 0.5,
            eval_points: DEFAULT_EVAL_POINTS,
            model: TrainConfig::default(),
            mode: Mode::Fused,
            precision: PrecisionFormat::Fp64,
            epsilon: 1e-6,
            tau: DEFAULT_TAU,
            formats: PrecisionFormat::ALL.to_vec(),
            cost_source: CostSource::Model,
            cost: CostWeights::default(),
            probe_seed: 1,
        }
    }
}

impl RunConfig {
    /// Read a TOML config, resolving the scene file next to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut config: RunConfig = toml::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        if config.scene_spec.is_none() {
            if let Some(scene) = &config.scene {
                let resolved = path.parent().unwrap_or(Path::new(".")).join(scene);
                config.scene_spec = Some(SceneSpec::load(&resolved)?);
            }
        }
        Ok(config)
    }

    pub fn scene(&self) -> SceneSpec {
        self.scene_spec.clone().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.frames == 0 || self.points_per_frame == 0 {
            return bad("frames and points_per_frame must be positive");
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad("overlap must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) || !(self.tau > 0.0) {
            return bad("epsilon and tau must be positive");
        }
        if self.formats.is_empty() {
            return bad("formats must not be empty");
        }
        self.scene().validate()?;
        self.model.validate()?;
        self.cost.model().validate()
    }

    pub fn search_options(&self) -> SearchOptions {
        SearchOptions {
            formats: self.formats.clone(),
            tau: self.tau,
            cost_source: self.cost_source,
            cost_model: self.cost.model(),
            ..SearchOptions::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode.into(),
            ..self.model.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
