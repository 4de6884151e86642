use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use synmocap::calibration::CalibrationConfig;
use synmocap::camera::CameraRig;
use synmocap::init::InitConfig;
use synmocap::scene::{studio_rig, SceneConfig};
use synmocap::skeleton::SkeletonModel;
use synmocap::tracker::TrackerConfig;

use crate::CliError;

/// Everything a run reads besides its input data. Every section is optional
/// in the file and falls back to the built-in defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Camera rig file; the built-in studio rig when absent.
    pub rig: Option<PathBuf>,
    /// Skeleton template file; the standard skeleton when absent.
    pub skeleton: Option<PathBuf>,
    pub scene: SceneConfig,
    pub tracker: TrackerConfig,
    pub init: InitConfig,
    pub calibration: CalibrationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rig: None,
            skeleton: None,
            scene: SceneConfig::bundled(),
            tracker: TrackerConfig::default(),
            init: InitConfig::default(),
            calibration: CalibrationConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or the defaults), rebases relative file references onto
    /// the config's directory and applies a seed override to every seeded
    /// component.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                let mut cfg: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                let base = p.parent().unwrap_or(Path::new("."));
                for file in [&mut cfg.rig, &mut cfg.skeleton].into_iter().flatten() {
                    if file.is_relative() {
                        *file = base.join(&*file);
                    }
                }
                cfg
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = seed {
            cfg.scene.seed = seed;
            cfg.init.ransac.seed = seed;
            cfg.calibration.ransac.seed = seed;
        }
        cfg.scene.validate()?;
        cfg.tracker.validate()?;
        cfg.init.ik.validate()?;
        Ok(cfg)
    }

    pub fn rig(&self) -> Result<CameraRig, CliError> {
        match &self.rig {
            Some(p) => Ok(CameraRig::load(p)?),
            None => Ok(studio_rig()),
        }
    }

    pub fn skeleton(&self) -> Result<SkeletonModel, CliError> {
        match &self.skeleton {
            Some(p) => Ok(SkeletonModel::load(p)?),
            None => Ok(SkeletonModel::standard()),
        }
    }
}

/// Snapshot written next to every run's outputs.
#[derive(Debug, Serialize)]
pub struct Manifest<'a, A: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: u64,
    pub arguments: A,
    pub config: &'a RunConfig,
}
