//! Evaluation reports as canonical JSON and as a flat CSV.
//!
//! CSV columns, one row per (mode, score), absent metrics left empty:
//! `mode, score, auroc, auroc_bd, tpr_at_5, tpr_at_10, tpr_at_20, cs_map,
//! os_map, joint_id_accept, joint_ood_reject, total, pruned, id_matched,
//! ood_matched, background, t_model, t_gmm, prune_threshold, prune_applied,
//! gmm_priors, tau_soft, tau_gmm, soft_quantile, gmm_quantile, match_floor,
//! confidence`.

use std::path::Path;

use osgate_core::metrics::{ConfidenceSource, EvaluationReport};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::json::{self, FormatVersion};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Serialize)]
struct ReportFile<'a> {
    format_version: FormatVersion,
    reports: &'a [EvaluationReport],
}

#[derive(Debug, Serialize)]
struct CsvRow {
    mode: &'static str,
    score: &'static str,
    auroc: Option<f64>,
    auroc_bd: Option<f64>,
    tpr_at_5: Option<f64>,
    tpr_at_10: Option<f64>,
    tpr_at_20: Option<f64>,
    cs_map: Option<f64>,
    os_map: Option<f64>,
    joint_id_accept: Option<f64>,
    joint_ood_reject: Option<f64>,
    total: usize,
    pruned: usize,
    id_matched: usize,
    ood_matched: usize,
    background: usize,
    t_model: f64,
    t_gmm: f64,
    prune_threshold: f64,
    prune_applied: bool,
    gmm_priors: bool,
    tau_soft: f64,
    tau_gmm: f64,
    soft_quantile: f64,
    gmm_quantile: f64,
    match_floor: f64,
    confidence: &'static str,
}

fn tpr_at(r: &EvaluationReport, level: f64) -> Option<f64> {
    r.tpr_at_osr
        .iter()
        .find(|p| (p.level - level).abs() < 1e-12)
        .and_then(|p| p.tpr)
}

fn csv_row(r: &EvaluationReport) -> CsvRow {
    let c = &r.config;
    CsvRow {
        mode: r.mode.as_str(),
        score: r.score.as_str(),
        auroc: r.auroc,
        auroc_bd: r.auroc_bd,
        tpr_at_5: tpr_at(r, 0.05),
        tpr_at_10: tpr_at(r, 0.10),
        tpr_at_20: tpr_at(r, 0.20),
        cs_map: r.cs_map,
        os_map: r.os_map,
        joint_id_accept: r.joint_id_accept,
        joint_ood_reject: r.joint_ood_reject,
        total: r.counts.total,
        pruned: r.counts.pruned,
        id_matched: r.counts.id_matched,
        ood_matched: r.counts.ood_matched,
        background: r.counts.background,
        t_model: c.t_model,
        t_gmm: c.t_gmm,
        prune_threshold: c.prune_threshold,
        prune_applied: c.prune_applied,
        gmm_priors: c.gmm_priors,
        tau_soft: c.tau_soft,
        tau_gmm: c.tau_gmm,
        soft_quantile: c.soft_quantile,
        gmm_quantile: c.gmm_quantile,
        match_floor: c.match_floor,
        confidence: match c.confidence {
            ConfidenceSource::SoftmaxConf => "softmax",
            ConfidenceSource::DetectorScore => "detector",
        },
    }
}

pub fn to_csv(reports: &[EvaluationReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(csv_row(r)).map_err(|e| Error::Usage(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_reports(reports: &[EvaluationReport], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    json::write_canonical(
        &dir.join(REPORT_JSON),
        &ReportFile {
            format_version: json::CURRENT_VERSION,
            reports,
        },
    )?;
    let path = dir.join(REPORT_CSV);
    std::fs::write(&path, to_csv(reports)?).map_err(|e| Error::io(&path, e))
}
