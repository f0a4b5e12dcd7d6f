//! Record types shared by every stage of the pipeline.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Ground-truth class id reserved for out-of-distribution objects.
pub const OOD_CLASS: i32 = -1;

/// Axis-aligned box in corner format, image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct BoundingBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BoundingBox {
    pub const fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn area(&self) -> f64 {
        let w = (self.x_max as f64 - self.x_min as f64).max(0.0);
        let h = (self.y_max as f64 - self.y_min as f64).max(0.0);
        w * h
    }

    pub fn validate(&self) -> core::result::Result<(), &'static str> {
        let c = [self.x_min, self.y_min, self.x_max, self.y_max];
        if c.iter().any(|v| !v.is_finite()) {
            return Err("non-finite box coordinate");
        }
        if self.x_max < self.x_min || self.y_max < self.y_min {
            return Err("box max corner precedes min corner");
        }
        Ok(())
    }
}

/// One predicted box with its class logits and embedding.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DetectionRecord {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub logits: Vec<f32>,
    pub embedding: Vec<f32>,
    pub detector_score: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GroundTruthRecord {
    pub image_id: String,
    pub bbox: BoundingBox,
    /// Index into the manifest classes, or [`OOD_CLASS`].
    pub class_id: i32,
}

impl GroundTruthRecord {
    pub fn is_ood(&self) -> bool {
        self.class_id == OOD_CLASS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Split {
    Train,
    Val,
    ClosedTest,
    OpenTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::ClosedTest, Split::OpenTest];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::ClosedTest => "closed_test",
            Split::OpenTest => "open_test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DatasetManifest {
    pub num_classes: u32,
    pub class_names: Vec<String>,
    pub embedding_dim: u32,
    pub split: Split,
    /// Provenance only: whether the detector backbone was spectrally normalized.
    pub spectral_normalized: bool,
    pub detector_name: String,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::invalid("manifest num_classes must be at least 1"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::invalid("manifest embedding_dim must be at least 1"));
        }
        if self.class_names.len() != self.num_classes as usize {
            return Err(Error::invalid(format!(
                "manifest lists {} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// A manifest together with its detection and ground-truth records.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub detections: Vec<DetectionRecord>,
    pub ground_truth: Vec<GroundTruthRecord>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes as usize
    }

    pub fn embedding_dim(&self) -> usize {
        self.manifest.embedding_dim as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        for (i, d) in self.detections.iter().enumerate() {
            validate_detection(d, &self.manifest).map_err(|r| Error::record(i, r))?;
        }
        for (i, g) in self.ground_truth.iter().enumerate() {
            validate_ground_truth(g, &self.manifest).map_err(|r| Error::record(i, r))?;
        }
        Ok(())
    }
}

pub fn validate_detection(d: &DetectionRecord, m: &DatasetManifest) -> core::result::Result<(), String> {
    d.bbox.validate().map_err(String::from)?;
    if d.logits.len() != m.num_classes as usize {
        return Err(format!(
            "logits length {} does not match num_classes {}",
            d.logits.len(),
            m.num_classes
        ));
    }
    if d.embedding.len() != m.embedding_dim as usize {
        return Err(format!(
            "embedding length {} does not match embedding_dim {}",
            d.embedding.len(),
            m.embedding_dim
        ));
    }
    if d.logits.iter().chain(&d.embedding).any(|v| !v.is_finite()) {
        return Err("non-finite value in logits or embedding".into());
    }
    if let Some(s) = d.detector_score {
        if !(0.0..=1.0).contains(&s) {
            return Err(format!("detector_score {s} outside [0, 1]"));
        }
    }
    Ok(())
}

pub fn validate_ground_truth(g: &GroundTruthRecord, m: &DatasetManifest) -> core::result::Result<(), String> {
    g.bbox.validate().map_err(String::from)?;
    if g.class_id != OOD_CLASS && (g.class_id < 0 || g.class_id as u32 >= m.num_classes) {
        return Err(format!("class_id {} outside [0, {})", g.class_id, m.num_classes));
    }
    Ok(())
}

/// Pruning x temperature toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Raw,
    Pruned,
    Temp,
    PrunedTemp,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Raw, Mode::Pruned, Mode::Temp, Mode::PrunedTemp];

    pub fn prunes(&self) -> bool {
        matches!(self, Mode::Pruned | Mode::PrunedTemp)
    }

    pub fn tempered(&self) -> bool {
        matches!(self, Mode::Temp | Mode::PrunedTemp)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Raw => "raw",
            Mode::Pruned => "pruned",
            Mode::Temp => "temp",
            Mode::PrunedTemp => "pruned-temp",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "raw" => Ok(Mode::Raw),
            "pruned" => Ok(Mode::Pruned),
            "temp" => Ok(Mode::Temp),
            "pruned-temp" | "prunedtemp" | "pruned+temp" => Ok(Mode::PrunedTemp),
            other => Err(Error::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

/// Temperatures and pruning floor for one evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CalibrationProfile {
    pub t_model: f64,
    pub t_gmm: f64,
    pub prune_threshold: f64,
    pub mode: Mode,
    /// Add log class priors to the per-class log-likelihoods before the GMM posterior.
    #[cfg_attr(feature = "serde", serde(default = "default_true"))]
    pub gmm_priors: bool,
}

#[cfg(feature = "serde")]
fn default_true() -> bool {
    true
}

pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.2;

impl Default for CalibrationProfile {
    fn default() -> Self {
        Self {
            t_model: 1.0,
            t_gmm: 1.0,
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
            mode: Mode::Raw,
            gmm_priors: true,
        }
    }
}

impl CalibrationProfile {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("t_model", self.t_model), ("t_gmm", self.t_gmm)] {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {t}")));
            }
        }
        if !(0.0..=1.0).contains(&self.prune_threshold) {
            return Err(Error::Config(format!(
                "prune_threshold {} outside [0, 1]",
                self.prune_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct QuantilePolicy {
    pub soft_quantile: f64,
    pub gmm_quantile: f64,
}

impl Default for QuantilePolicy {
    fn default() -> Self {
        Self {
            soft_quantile: 0.05,
            gmm_quantile: 0.95,
        }
    }
}

/// Acceptance thresholds: ID iff `s_soft >= tau_soft` and `H_gmm <= tau_gmm`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct JointThresholds {
    pub tau_soft: f64,
    pub tau_gmm: f64,
    pub policy: QuantilePolicy,
}

#[cfg(feature = "serde")]
impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> core::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

#[cfg(feature = "serde")]
impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> core::result::Result<Self, D::Error> {
        let s = alloc::string::String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
