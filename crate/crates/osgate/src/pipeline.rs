//! The four pipeline stages over in-memory datasets.

use log::{info, warn};
use osgate_core::assignment::{collect_labeled_embeddings, match_records};
use osgate_core::calibration::{
    build_mode_matrix, learn_temperature, raw_confidence, select_joint_thresholds, LabeledVectors, TemperatureSearch,
};
use osgate_core::density::{fit_gmm_em, fit_single_gaussian, FitConfig, ModelSet, Samples};
use osgate_core::metrics::{evaluate_mode, EvalSettings, EvaluationReport, ModeCalibration};
use osgate_core::scoring::{ScoreKind, Scorer, ValidationReference};
use osgate_core::{Dataset, DetectionRecord, Error, Mode, QuantilePolicy, Result};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::artifacts::{CalibrationFile, Models};
use crate::json;

/// SHA-256 over the records of a dataset (the manifest's split label excluded),
/// used to detect a validation split that repeats the training data.
pub fn dataset_fingerprint(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(dataset.manifest.num_classes.to_le_bytes());
    h.update(dataset.manifest.embedding_dim.to_le_bytes());
    h.update((dataset.detections.len() as u64).to_le_bytes());
    for d in &dataset.detections {
        h.update((d.image_id.len() as u64).to_le_bytes());
        h.update(d.image_id.as_bytes());
        for v in [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max] {
            h.update(v.to_le_bytes());
        }
        match d.detector_score {
            Some(s) => {
                h.update([1]);
                h.update(s.to_le_bytes());
            }
            None => h.update([0]),
        }
        for v in d.logits.iter().chain(&d.embedding) {
            h.update(v.to_le_bytes());
        }
    }
    h.update((dataset.ground_truth.len() as u64).to_le_bytes());
    for g in &dataset.ground_truth {
        h.update((g.image_id.len() as u64).to_le_bytes());
        h.update(g.image_id.as_bytes());
        h.update(g.class_id.to_le_bytes());
        for v in [g.bbox.x_min, g.bbox.y_min, g.bbox.x_max, g.bbox.y_max] {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Matches training detections to ground truth and fits, per class, a single
/// Gaussian and a K-component mixture on the matched embeddings.
pub fn fit(train: &Dataset, config: &FitConfig, match_floor: f64) -> Result<Models> {
    config.validate()?;
    let (labeled, summary) = collect_labeled_embeddings(train, match_floor);
    let dim = train.embedding_dim();
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); train.num_classes()];
    for l in &labeled {
        per_class[l.class_id as usize].extend(l.embedding.iter().map(|&v| v as f64));
    }
    for (c, &n) in summary.per_class.iter().enumerate() {
        if n < 2 {
            return Err(Error::Fit {
                class_id: c as u32,
                reason: format!("class '{}' has {n} matched embeddings; at least 2 are needed", train.manifest.class_names[c]),
            });
        }
        info!("class {c}: {n} matched embeddings");
    }
    let total = labeled.len();
    let fitted: Vec<_> = per_class
        .par_iter()
        .enumerate()
        .map(|(c, data)| {
            let samples = Samples::new(data, dim)?;
            let single = fit_single_gaussian(c as u32, samples, total, config.jitter)?;
            let multi = fit_gmm_em(c as u32, samples, total, config)?.model;
            Ok((single, multi))
        })
        .collect::<Result<_>>()?;
    let (single, multi): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    for m in &multi {
        if !m.meta.collapse_events.is_empty() {
            warn!("class {}: mixture collapse events {:?}", m.class_id, m.meta.collapse_events);
        }
    }
    Ok(Models {
        single: ModelSet::new(single, train.num_classes())?,
        multi: ModelSet::new(multi, train.num_classes())?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrateOptions {
    pub policy: QuantilePolicy,
    pub prune_threshold: f64,
    pub match_floor: f64,
    pub gmm_priors: bool,
    pub search: TemperatureSearch,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        Self {
            policy: QuantilePolicy::default(),
            prune_threshold: osgate_core::DEFAULT_PRUNE_THRESHOLD,
            match_floor: osgate_core::assignment::DEFAULT_MATCH_FLOOR,
            gmm_priors: true,
            search: TemperatureSearch::default(),
        }
    }
}

/// Learns both temperatures on ID-matched validation detections and selects
/// joint thresholds for every mode.
pub fn calibrate(val: &Dataset, models: &Models, options: &CalibrateOptions) -> Result<CalibrationFile> {
    let c = val.num_classes();
    if models.single.num_classes() != c || models.single.dim() != val.embedding_dim() {
        return Err(Error::Config(format!(
            "models expect {} classes of dim {}, validation split has {} of dim {}",
            models.single.num_classes(),
            models.single.dim(),
            c,
            val.embedding_dim()
        )));
    }
    let matched: Vec<(usize, usize)> = match_records(&val.detections, &val.ground_truth, options.match_floor)
        .into_iter()
        .filter(|p| !val.ground_truth[p.ground_truth].is_ood())
        .map(|p| (p.detection, val.ground_truth[p.ground_truth].class_id as usize))
        .collect();
    if matched.is_empty() {
        return Err(Error::Config("validation split has no detections matched to in-distribution ground truth".into()));
    }

    let mut logits = LabeledVectors::new(c);
    let mut gmm = LabeledVectors::new(c);
    let mut row = vec![0.0; c];
    let mut embedding = vec![0.0; val.embedding_dim()];
    let mut scratch = vec![0.0; val.embedding_dim()];
    for &(i, class) in &matched {
        let d = &val.detections[i];
        row.iter_mut().zip(&d.logits).for_each(|(r, &v)| *r = v as f64);
        logits.push(&row, class)?;
        embedding.iter_mut().zip(&d.embedding).for_each(|(e, &v)| *e = v as f64);
        models.single.per_class_loglik_into(&embedding, &mut scratch, &mut row);
        if options.gmm_priors {
            row.iter_mut().zip(models.single.log_priors()).for_each(|(r, p)| *r += p);
        }
        gmm.push(&row, class)?;
    }
    let t_model = learn_temperature(&logits, &options.search)?;
    let t_gmm = learn_temperature(&gmm, &options.search)?;
    for (name, fit) in [("T_model", &t_model), ("T_gmm", &t_gmm)] {
        if fit.temperature <= options.search.t_min * (1.0 + 1e-9) || fit.temperature >= options.search.t_max * (1.0 - 1e-9) {
            warn!("{name} = {} sits on the search boundary", fit.temperature);
        }
    }

    let matrix = build_mode_matrix(t_model.temperature, t_gmm.temperature, options.prune_threshold)
        .with_gmm_priors(options.gmm_priors);
    let modes = Mode::ALL
        .iter()
        .map(|&mode| {
            let profile = *matrix.get(mode);
            let mut scorer = Scorer::new(&models.single, &models.multi, profile)?;
            let kept: Vec<&DetectionRecord> = matched
                .iter()
                .map(|&(i, _)| &val.detections[i])
                .filter(|d| {
                    !mode.prunes() || {
                        let l: Vec<f64> = d.logits.iter().map(|&v| v as f64).collect();
                        raw_confidence(&l) >= profile.prune_threshold
                    }
                })
                .collect();
            let bundles = scorer.score_batch(&kept)?;
            if bundles.is_empty() {
                return Err(Error::Config(format!("pruning leaves no validation detections in mode {mode}")));
            }
            Ok(ModeCalibration {
                profile,
                thresholds: select_joint_thresholds(&bundles, options.policy)?,
                reference: ValidationReference::from_bundles(&bundles)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(CalibrationFile {
        format_version: json::CURRENT_VERSION,
        required: Vec::new(),
        models_fingerprint: String::new(),
        t_model,
        t_gmm,
        prune_threshold: options.prune_threshold,
        gmm_priors: options.gmm_priors,
        policy: options.policy,
        match_floor: options.match_floor,
        validation_detections: matched.len(),
        leakage_warning: false,
        modes,
    })
}

/// One report per (mode, score), modes evaluated in parallel.
pub fn evaluate(
    closed_test: &Dataset,
    open_test: &Dataset,
    models: &Models,
    calibration: &CalibrationFile,
    modes: &[Mode],
    scores: &[ScoreKind],
    settings: &EvalSettings,
) -> Result<Vec<EvaluationReport>> {
    for ds in [closed_test, open_test] {
        if ds.num_classes() != models.single.num_classes() || ds.embedding_dim() != models.single.dim() {
            return Err(Error::Config(format!(
                "{} split shape ({} classes, dim {}) does not match the models",
                ds.manifest.split,
                ds.num_classes(),
                ds.embedding_dim()
            )));
        }
    }
    let per_mode = modes
        .par_iter()
        .map(|&mode| {
            let cal = calibration
                .mode(mode)
                .ok_or_else(|| Error::Config(format!("calibration lacks mode {mode}")))?;
            evaluate_mode(closed_test, open_test, &models.single, &models.multi, cal, scores, settings)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_mode.into_iter().flatten().collect())
}
