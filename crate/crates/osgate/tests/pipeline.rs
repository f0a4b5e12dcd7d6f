use std::fs;

use osgate::artifacts::{load_calibration, load_models, save_calibration, save_models, ModelsFile};
use osgate::pipeline::{self, dataset_fingerprint, CalibrateOptions};
use osgate::Error;
use osgate_core::density::FitConfig;
use osgate_core::metrics::EvalSettings;
use osgate_core::scoring::ScoreKind;
use osgate_core::synthgen::{generate, SynthSpec};
use osgate_core::Mode;
use tempfile::tempdir;

fn spec() -> SynthSpec {
    SynthSpec {
        train_per_class: 300,
        val_per_class: 200,
        test_per_class: 150,
        ood_count: 100,
        background_count: 60,
        embedding_dim: 8,
        seed: 5,
        ..SynthSpec::default()
    }
}

#[test]
fn models_round_trip_exactly() {
    let d = generate(&spec()).unwrap();
    let cfg = FitConfig { k: 2, ..FitConfig::default() };
    let models = pipeline::fit(&d.train, &cfg, 0.5).unwrap();
    let file = ModelsFile::new(&models, cfg, 0.5, dataset_fingerprint(&d.train));
    let dir = tempdir().unwrap();
    let p = dir.path().join("models.json");
    save_models(&file, &p).unwrap();
    let (back_file, back) = load_models(&p).unwrap();
    assert_eq!(back_file, file);
    assert_eq!(back, models);
    // second save is byte-identical
    let q = dir.path().join("again.json");
    save_models(&back_file, &q).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
}

#[test]
fn single_gaussian_set_round_trips() {
    let d = generate(&spec()).unwrap();
    let cfg = FitConfig { k: 1, ..FitConfig::default() };
    let models = pipeline::fit(&d.train, &cfg, 0.5).unwrap();
    assert!(models.multi.models().iter().all(|m| m.k() == 1));
    let dir = tempdir().unwrap();
    let p = dir.path().join("models.json");
    save_models(&ModelsFile::new(&models, cfg, 0.5, String::new()), &p).unwrap();
    assert_eq!(load_models(&p).unwrap().1, models);
}

#[test]
fn missing_class_is_a_completeness_error() {
    let d = generate(&spec()).unwrap();
    let models = pipeline::fit(&d.train, &FitConfig::default(), 0.5).unwrap();
    let mut file = ModelsFile::new(&models, FitConfig::default(), 0.5, String::new());
    file.single.pop();
    let dir = tempdir().unwrap();
    let p = dir.path().join("models.json");
    save_models(&file, &p).unwrap();
    match load_models(&p) {
        Err(Error::Validation {
            source: osgate_core::Error::MissingClass(1),
            ..
        }) => {}
        other => panic!("expected a completeness error, got {other:?}"),
    }
}

#[test]
fn newer_minor_models_file_loads() {
    let d = generate(&spec()).unwrap();
    let models = pipeline::fit(&d.train, &FitConfig::default(), 0.5).unwrap();
    let file = ModelsFile::new(&models, FitConfig::default(), 0.5, String::new());
    let mut v = serde_json::to_value(&file).unwrap();
    v["format_version"]["minor"] = 3.into();
    v["training_notes"] = "extra".into();
    v["single"][0]["provenance"] = "extra".into();
    let dir = tempdir().unwrap();
    let p = dir.path().join("models.json");
    fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
    assert_eq!(load_models(&p).unwrap().1, models);
}

#[test]
fn class_without_matches_is_a_hard_error() {
    let mut d = generate(&spec()).unwrap();
    d.train.ground_truth.retain(|g| g.class_id != 1);
    match pipeline::fit(&d.train, &FitConfig::default(), 0.5) {
        Err(osgate_core::Error::Fit { class_id: 1, reason }) => assert!(reason.contains("class_1"), "{reason}"),
        other => panic!("expected a fit error for class 1, got {other:?}"),
    }
}

#[test]
fn calibration_round_trips_and_covers_all_modes() {
    let d = generate(&spec()).unwrap();
    let models = pipeline::fit(&d.train, &FitConfig::default(), 0.5).unwrap();
    let cal = pipeline::calibrate(&d.val, &models, &CalibrateOptions::default()).unwrap();
    assert_eq!(cal.modes.len(), 4);
    assert!(cal.t_model.nll <= cal.t_model.nll_at_one);
    assert!(cal.t_gmm.nll <= cal.t_gmm.nll_at_one);
    for m in &cal.modes {
        assert_eq!(m.profile.t_model == 1.0, !m.profile.mode.tempered());
    }
    let dir = tempdir().unwrap();
    let p = dir.path().join("calibration.json");
    save_calibration(&cal, &p).unwrap();
    assert_eq!(load_calibration(&p).unwrap(), cal);
}

#[test]
fn calibration_without_matches_fails() {
    let mut d = generate(&spec()).unwrap();
    let models = pipeline::fit(&d.train, &FitConfig::default(), 0.5).unwrap();
    d.val.ground_truth.clear();
    assert!(pipeline::calibrate(&d.val, &models, &CalibrateOptions::default()).is_err());
}

#[test]
fn calibrated_val_split_recovers_unit_temperature() {
    let s = SynthSpec {
        val_per_class: 5000,
        logit_margin: 2.0,
        ..spec()
    };
    let d = generate(&s).unwrap();
    let models = pipeline::fit(&d.train, &FitConfig::default(), 0.5).unwrap();
    let cal = pipeline::calibrate(&d.val, &models, &CalibrateOptions::default()).unwrap();
    let t = cal.t_model.temperature;
    assert!((t - 1.0).abs() <= 0.05, "T_model = {t}");
}

#[test]
fn evaluation_grid_has_one_row_per_pair() {
    let d = generate(&spec()).unwrap();
    let models = pipeline::fit(&d.train, &FitConfig::default(), 0.5).unwrap();
    let cal = pipeline::calibrate(&d.val, &models, &CalibrateOptions::default()).unwrap();
    let settings = EvalSettings::default();
    let all = pipeline::evaluate(&d.closed_test, &d.open_test, &models, &cal, &Mode::ALL, &ScoreKind::TABLE, &settings).unwrap();
    assert_eq!(all.len(), 28);
    assert!(all.iter().all(|r| r.auroc.is_some() && r.auroc_bd.is_some() && r.cs_map.is_some()));
    let one = pipeline::evaluate(&d.closed_test, &d.open_test, &models, &cal, &[Mode::Raw], &[ScoreKind::SoftmaxConf], &settings).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0], all[0]);
}

#[test]
fn open_split_without_ood_reports_absent_auroc() {
    let mut d = generate(&spec()).unwrap();
    let models = pipeline::fit(&d.train, &FitConfig::default(), 0.5).unwrap();
    let cal = pipeline::calibrate(&d.val, &models, &CalibrateOptions::default()).unwrap();
    d.open_test.ground_truth.retain(|g| !g.is_ood());
    let r = pipeline::evaluate(&d.closed_test, &d.open_test, &models, &cal, &[Mode::Raw], &[ScoreKind::Joint], &EvalSettings::default()).unwrap();
    assert_eq!(r[0].auroc, None);
    assert_eq!(r[0].auroc_bd, None);
    assert!(r[0].absent.contains_key("auroc"));
    assert!(r[0].cs_map.is_some() && r[0].os_map.is_some());
}

#[test]
fn fit_is_deterministic() {
    let d = generate(&spec()).unwrap();
    let a = pipeline::fit(&d.train, &FitConfig::default(), 0.5).unwrap();
    let b = pipeline::fit(&d.train, &FitConfig::default(), 0.5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn wide_separation_recovers_cluster_means() {
    let s = SynthSpec {
        separation: 10.0,
        ..SynthSpec::default()
    };
    let d = generate(&s).unwrap();
    let models = pipeline::fit(&d.train, &FitConfig { k: 1, ..FitConfig::default() }, 0.5).unwrap();
    for m in models.single.models() {
        let c = m.class_id as usize;
        let rows: Vec<&Vec<f32>> = d
            .train
            .ground_truth
            .iter()
            .zip(&d.train.detections)
            .filter(|(g, _)| g.class_id as usize == c)
            .map(|(_, det)| &det.embedding)
            .collect();
        let mean = &m.components[0].mean;
        let truth = s.class_mean(c);
        for j in 0..s.embedding_dim {
            let sample_mean = rows.iter().map(|r| r[j] as f64).sum::<f64>() / rows.len() as f64;
            assert!((mean[j] - sample_mean).abs() < 1e-9);
            assert!((mean[j] - truth[j]).abs() < 0.1 * s.cluster_sigma);
        }
    }
}
