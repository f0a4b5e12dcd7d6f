//! `models.json` and `calibration.json`.

use std::path::Path;

use osgate_core::calibration::TemperatureFit;
use osgate_core::density::{ClassDensityModel, CollapseEvent, FitConfig, ModelSet};
use osgate_core::metrics::ModeCalibration;
use osgate_core::{Mode, QuantilePolicy};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json::{self, FormatVersion};

pub const MODELS_FILE: &str = "models.json";
pub const CALIBRATION_FILE: &str = "calibration.json";

const MODEL_FIELDS: &[&str] = &[
    "format_version",
    "required",
    "num_classes",
    "embedding_dim",
    "fit_config",
    "match_floor",
    "single",
    "multi",
    "summary",
    "train_fingerprint",
];

const CALIBRATION_FIELDS: &[&str] = &[
    "format_version",
    "required",
    "models_fingerprint",
    "t_model",
    "t_gmm",
    "prune_threshold",
    "gmm_priors",
    "policy",
    "match_floor",
    "validation_detections",
    "leakage_warning",
    "modes",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFitSummary {
    pub class_id: u32,
    pub sample_count: usize,
    pub requested_k: usize,
    pub fitted_k: usize,
    pub em_iterations: usize,
    pub converged: bool,
    pub degenerate: bool,
    pub collapse_events: Vec<CollapseEvent>,
}

impl ClassFitSummary {
    pub fn of(model: &ClassDensityModel) -> Self {
        Self {
            class_id: model.class_id,
            sample_count: model.meta.sample_count,
            requested_k: model.meta.requested_k,
            fitted_k: model.k(),
            em_iterations: model.meta.em_iterations,
            converged: model.meta.converged,
            degenerate: model.meta.degenerate,
            collapse_events: model.meta.collapse_events.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsFile {
    pub format_version: FormatVersion,
    #[serde(default)]
    pub required: Vec<String>,
    pub num_classes: usize,
    pub embedding_dim: usize,
    pub fit_config: FitConfig,
    pub match_floor: f64,
    /// One full-covariance Gaussian per class.
    pub single: Vec<ClassDensityModel>,
    /// One K-component mixture per class.
    pub multi: Vec<ClassDensityModel>,
    pub summary: Vec<ClassFitSummary>,
    #[serde(default)]
    pub train_fingerprint: String,
}

/// Fitted single-Gaussian and mixture model sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub single: ModelSet,
    pub multi: ModelSet,
}

impl ModelsFile {
    pub fn new(models: &Models, fit_config: FitConfig, match_floor: f64, train_fingerprint: String) -> Self {
        Self {
            format_version: json::CURRENT_VERSION,
            required: Vec::new(),
            num_classes: models.single.num_classes(),
            embedding_dim: models.single.dim(),
            fit_config,
            match_floor,
            single: models.single.models().to_vec(),
            multi: models.multi.models().to_vec(),
            summary: models.multi.models().iter().map(ClassFitSummary::of).collect(),
            train_fingerprint,
        }
    }

    /// Rebuilds the model sets, checking completeness and shapes.
    pub fn models(&self) -> osgate_core::Result<Models> {
        let single = ModelSet::new(self.single.clone(), self.num_classes)?;
        let multi = ModelSet::new(self.multi.clone(), self.num_classes)?;
        for set in [&single, &multi] {
            if set.dim() != self.embedding_dim {
                return Err(osgate_core::Error::DimensionMismatch {
                    expected: self.embedding_dim,
                    actual: set.dim(),
                });
            }
        }
        Ok(Models { single, multi })
    }
}

pub fn save_models(file: &ModelsFile, path: &Path) -> Result<()> {
    json::write_canonical(path, file)
}

pub fn load_models(path: &Path) -> Result<(ModelsFile, Models)> {
    let file: ModelsFile = json::read_versioned(path, MODEL_FIELDS)?;
    let models = file.models().map_err(|source| Error::Validation {
        path: path.to_owned(),
        source,
    })?;
    Ok((file, models))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub format_version: FormatVersion,
    #[serde(default)]
    pub required: Vec<String>,
    #[serde(default)]
    pub models_fingerprint: String,
    pub t_model: TemperatureFit,
    pub t_gmm: TemperatureFit,
    pub prune_threshold: f64,
    pub gmm_priors: bool,
    pub policy: QuantilePolicy,
    pub match_floor: f64,
    pub validation_detections: usize,
    #[serde(default)]
    pub leakage_warning: bool,
    pub modes: Vec<ModeCalibration>,
}

impl CalibrationFile {
    pub fn mode(&self, mode: Mode) -> Option<&ModeCalibration> {
        self.modes.iter().find(|m| m.profile.mode == mode)
    }

    pub fn validate(&self) -> osgate_core::Result<()> {
        for mode in Mode::ALL {
            let m = self
                .mode(mode)
                .ok_or_else(|| osgate_core::Error::Config(format!("calibration lacks mode {mode}")))?;
            m.profile.validate()?;
            if !(m.thresholds.tau_soft.is_finite() && m.thresholds.tau_gmm.is_finite()) {
                return Err(osgate_core::Error::Config(format!("mode {mode} has non-finite thresholds")));
            }
        }
        Ok(())
    }
}

pub fn save_calibration(file: &CalibrationFile, path: &Path) -> Result<()> {
    json::write_canonical(path, file)
}

pub fn load_calibration(path: &Path) -> Result<CalibrationFile> {
    let file: CalibrationFile = json::read_versioned(path, CALIBRATION_FIELDS)?;
    file.validate().map_err(|source| Error::Validation {
        path: path.to_owned(),
        source,
    })?;
    Ok(file)
}
