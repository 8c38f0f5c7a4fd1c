//! Run configuration, loaded from JSON. Every field has a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::heatmap::DecodeConfig;
use crate::matching::MatchConfig;
use crate::metrics::MetricThresholds;
use crate::skeleton::SkeletonSpec;
use crate::tto::TtoConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub skeleton: SkeletonSpec,
    pub camera: CameraIntrinsics<f64>,
    pub matching: MatchConfig,
    pub fusion: FusionKind,
    pub tto: TtoConfig,
    /// Skip test-time optimization when false.
    pub refine: bool,
    pub metrics: MetricThresholds,
    pub decode: DecodeConfig,
    /// Largest root displacement between consecutive frames for linking
    /// unlabeled poses into tracks, mm.
    pub link_gate_mm: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            skeleton: SkeletonSpec::default(),
            camera: CameraIntrinsics::default(),
            matching: MatchConfig::default(),
            fusion: FusionKind::default(),
            tto: TtoConfig::default(),
            refine: true,
            metrics: MetricThresholds::default(),
            decode: DecodeConfig::default(),
            link_gate_mm: 500.0,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.skeleton.validate().map_err(wrap)?;
        self.camera.validate().map_err(wrap)?;
        self.matching.validate()?;
        self.fusion.validate()?;
        self.tto.validate()?;
        self.metrics.validate()?;
        if self.matching.sigma_override.as_ref().is_some_and(|s| s.len() != self.skeleton.num_joints()) {
            return Err(Error::Config("sigma_override length differs from the joint count".into()));
        }
        if !(self.link_gate_mm > 0.0) {
            return Err(Error::Config(format!("link_gate_mm must be positive, got {}", self.link_gate_mm)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
