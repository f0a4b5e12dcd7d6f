//! Seeded synthetic open-set detection datasets and brute-force oracles.
//!
//! Each in-distribution object draws a latent logit vector `z` around a
//! random class axis, then its true class `y ~ softmax(z)`, so the stored
//! logits `logit_scale · z` are perfectly calibrated at temperature
//! `logit_scale`. Embeddings come from an isotropic Gaussian around the
//! class mean; OOD objects sit off-axis from the class centroid and
//! background clutter is broad and low-confidence.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::calibration::LabeledVectors;
use crate::math::{exp, sqrt};
use crate::types::{BoundingBox, Dataset, DatasetManifest, DetectionRecord, GroundTruthRecord, Split, OOD_CLASS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SynthSpec {
    pub num_id_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// OOD objects in the open test split.
    pub ood_count: usize,
    /// Unmatched clutter detections in the open test split.
    pub background_count: usize,
    pub embedding_dim: usize,
    /// Distance between class means, in cluster standard deviations.
    pub separation: f64,
    /// Offset of the OOD mean from the class centroid along an unused axis.
    pub ood_offset: f64,
    pub cluster_sigma: f64,
    /// Spread of background embeddings around the centroid, relative to `cluster_sigma`.
    pub background_spread: f64,
    /// Extra embedding noise on both test splits, relative to `cluster_sigma`.
    pub corruption: f64,
    /// Mean of the latent logit on the favoured class.
    pub logit_margin: f64,
    pub ood_logit_margin: f64,
    pub logit_noise: f64,
    pub background_logit_noise: f64,
    /// Multiplier on the latent logits; the calibrated temperature equals it.
    pub logit_scale: f64,
    pub image_size: f64,
    /// Cells per image side; each cell holds at most one object.
    pub grid: usize,
    pub box_min: f64,
    pub box_max: f64,
    /// Detection corner jitter as a fraction of the box size.
    pub box_jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_id_classes: 2,
            train_per_class: 2000,
            val_per_class: 500,
            test_per_class: 500,
            ood_count: 500,
            background_count: 375,
            embedding_dim: 64,
            separation: 4.0,
            ood_offset: 2.0,
            cluster_sigma: 1.0,
            background_spread: 3.0,
            corruption: 0.0,
            logit_margin: 4.0,
            ood_logit_margin: 1.5,
            logit_noise: 1.0,
            background_logit_noise: 0.3,
            logit_scale: 1.0,
            image_size: 640.0,
            grid: 4,
            box_min: 24.0,
            box_max: 96.0,
            box_jitter: 0.04,
            seed: 0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be non-negative and finite, got {v}")))
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_id_classes == 0 {
            return Err(Error::invalid("num_id_classes must be at least 1"));
        }
        if self.embedding_dim <= self.num_id_classes {
            return Err(Error::invalid(format!(
                "embedding_dim {} must exceed num_id_classes {}",
                self.embedding_dim, self.num_id_classes
            )));
        }
        if self.grid == 0 {
            return Err(Error::invalid("grid must be at least 1"));
        }
        positive("separation", self.separation)?;
        positive("cluster_sigma", self.cluster_sigma)?;
        positive("logit_scale", self.logit_scale)?;
        positive("image_size", self.image_size)?;
        positive("box_min", self.box_min)?;
        non_negative("ood_offset", self.ood_offset)?;
        non_negative("background_spread", self.background_spread)?;
        non_negative("corruption", self.corruption)?;
        non_negative("logit_margin", self.logit_margin)?;
        non_negative("ood_logit_margin", self.ood_logit_margin)?;
        non_negative("logit_noise", self.logit_noise)?;
        non_negative("background_logit_noise", self.background_logit_noise)?;
        non_negative("box_jitter", self.box_jitter)?;
        if !(self.box_max >= self.box_min) || self.box_max > self.image_size / self.grid as f64 {
            return Err(Error::invalid(format!(
                "box size range [{}, {}] must fit a grid cell of {}",
                self.box_min,
                self.box_max,
                self.image_size / self.grid as f64
            )));
        }
        if self.box_jitter >= 0.25 {
            return Err(Error::invalid("box_jitter must be below 0.25"));
        }
        Ok(())
    }

    /// Mean embedding of an in-distribution class.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.embedding_dim];
        m[class] = self.separation * self.cluster_sigma / sqrt(2.0);
        m
    }

    pub fn centroid(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.embedding_dim];
        let v = self.separation * self.cluster_sigma / sqrt(2.0) / self.num_id_classes as f64;
        c[..self.num_id_classes].fill(v);
        c
    }

    pub fn ood_mean(&self) -> Vec<f64> {
        let mut m = self.centroid();
        m[self.num_id_classes] = self.ood_offset * self.cluster_sigma;
        m
    }
}

/// The four splits produced by [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDatasets {
    pub train: Dataset,
    pub val: Dataset,
    pub closed_test: Dataset,
    pub open_test: Dataset,
}

impl SynthDatasets {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::ClosedTest => &self.closed_test,
            Split::OpenTest => &self.open_test,
        }
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Id,
    Ood,
    Background,
}

struct Object {
    kind: Kind,
    class_id: i32,
    logits: Vec<f32>,
    embedding: Vec<f32>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn softmax_draw(z: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = z.iter().map(|&v| exp(v - m)).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &wi) in w.iter().enumerate() {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}

/// Latent logits around a uniformly chosen class axis and a class drawn from
/// their softmax.
fn calibrated_latent(classes: usize, margin: f64, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
    let axis = rng.random_range(0..classes);
    let z: Vec<f64> = (0..classes)
        .map(|c| if c == axis { margin } else { 0.0 } + noise * normal(rng))
        .collect();
    let y = softmax_draw(&z, rng);
    (z, y)
}

fn gaussian_around(mean: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    mean.iter().map(|&m| (m + sigma * normal(rng)) as f32).collect()
}

fn scaled(z: &[f64], s: f64) -> Vec<f32> {
    z.iter().map(|&v| (v * s) as f32).collect()
}

fn id_objects(spec: &SynthSpec, per_class: usize, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Object> {
    let c = spec.num_id_classes;
    let means: Vec<Vec<f64>> = (0..c).map(|k| spec.class_mean(k)).collect();
    let mut filled = vec![0usize; c];
    let mut out = Vec::with_capacity(per_class * c);
    while out.len() < per_class * c {
        let (z, y) = calibrated_latent(c, spec.logit_margin, spec.logit_noise, rng);
        if filled[y] == per_class {
            continue;
        }
        filled[y] += 1;
        out.push(Object {
            kind: Kind::Id,
            class_id: y as i32,
            logits: scaled(&z, spec.logit_scale),
            embedding: gaussian_around(&means[y], noise_sigma, rng),
        });
    }
    out
}

fn ood_objects(spec: &SynthSpec, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Object> {
    let c = spec.num_id_classes;
    let mean = spec.ood_mean();
    (0..spec.ood_count)
        .map(|_| {
            let axis = rng.random_range(0..c);
            let z: Vec<f64> = (0..c)
                .map(|k| if k == axis { spec.ood_logit_margin } else { 0.0 } + spec.logit_noise * normal(rng))
                .collect();
            Object {
                kind: Kind::Ood,
                class_id: OOD_CLASS,
                logits: scaled(&z, spec.logit_scale),
                embedding: gaussian_around(&mean, noise_sigma, rng),
            }
        })
        .collect()
}

fn background_objects(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Object> {
    let c = spec.num_id_classes;
    let centroid = spec.centroid();
    let sigma = spec.background_spread * spec.cluster_sigma;
    (0..spec.background_count)
        .map(|_| {
            let z: Vec<f64> = (0..c).map(|_| spec.background_logit_noise * normal(rng)).collect();
            Object {
                kind: Kind::Background,
                class_id: OOD_CLASS,
                logits: scaled(&z, spec.logit_scale),
                embedding: gaussian_around(&centroid, sigma, rng),
            }
        })
        .collect()
}

fn jitter(v: f64, size: f64, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> f32 {
    (v + spec.box_jitter * size * rng.random_range(-1.0..=1.0)) as f32
}

/// Shuffles objects into images, one per grid cell, and emits records.
fn layout(spec: &SynthSpec, split: Split, mut objects: Vec<Object>, rng: &mut ChaCha8Rng) -> Dataset {
    objects.shuffle(rng);
    let per_image = spec.grid * spec.grid;
    let cell = spec.image_size / spec.grid as f64;
    let mut detections = Vec::with_capacity(objects.len());
    let mut ground_truth = Vec::new();
    for (i, obj) in objects.into_iter().enumerate() {
        let image_id = format!("{}-{:06}", split.as_str(), i / per_image);
        let slot = i % per_image;
        let (cx, cy) = ((slot % spec.grid) as f64 * cell, (slot / spec.grid) as f64 * cell);
        let w = rng.random_range(spec.box_min..=spec.box_max);
        let h = rng.random_range(spec.box_min..=spec.box_max);
        let x0 = cx + rng.random_range(0.0..=(cell - w));
        let y0 = cy + rng.random_range(0.0..=(cell - h));
        let truth = BoundingBox::new(x0 as f32, y0 as f32, (x0 + w) as f32, (y0 + h) as f32);
        let mut bbox = BoundingBox::new(
            jitter(x0, w, spec, rng),
            jitter(y0, h, spec, rng),
            jitter(x0 + w, w, spec, rng),
            jitter(y0 + h, h, spec, rng),
        );
        if matches!(obj.kind, Kind::Background) {
            bbox = truth;
        } else {
            ground_truth.push(GroundTruthRecord {
                image_id: image_id.clone(),
                bbox: truth,
                class_id: obj.class_id,
            });
        }
        detections.push(DetectionRecord {
            image_id,
            bbox,
            logits: obj.logits,
            embedding: obj.embedding,
            detector_score: None,
        });
    }
    Dataset {
        manifest: DatasetManifest {
            num_classes: spec.num_id_classes as u32,
            class_names: (0..spec.num_id_classes).map(|c| format!("class_{c}")).collect::<Vec<String>>(),
            embedding_dim: spec.embedding_dim as u32,
            split,
            spectral_normalized: false,
            detector_name: String::from("synthgen"),
        },
        detections,
        ground_truth,
    }
}

/// Generates one split; every split owns an independent ChaCha stream of the seed.
pub fn generate_split(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split as u64);
    let test_sigma = spec.cluster_sigma * sqrt(1.0 + spec.corruption * spec.corruption);
    let objects = match split {
        Split::Train => id_objects(spec, spec.train_per_class, spec.cluster_sigma, &mut rng),
        Split::Val => id_objects(spec, spec.val_per_class, spec.cluster_sigma, &mut rng),
        Split::ClosedTest => id_objects(spec, spec.test_per_class, test_sigma, &mut rng),
        Split::OpenTest => {
            let mut o = id_objects(spec, spec.test_per_class, test_sigma, &mut rng);
            o.extend(ood_objects(spec, test_sigma, &mut rng));
            o.extend(background_objects(spec, &mut rng));
            o
        }
    };
    Ok(layout(spec, split, objects, &mut rng))
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDatasets> {
    Ok(SynthDatasets {
        train: generate_split(spec, Split::Train)?,
        val: generate_split(spec, Split::Val)?,
        closed_test: generate_split(spec, Split::ClosedTest)?,
        open_test: generate_split(spec, Split::OpenTest)?,
    })
}

/// Labelled logits whose calibrated temperature is exactly `scale`: labels are
/// drawn from the softmax of the latent logits, which are then multiplied by
/// `scale`.
pub fn calibrated_logits(n: usize, classes: usize, margin: f64, noise: f64, scale: f64, seed: u64) -> Result<LabeledVectors> {
    if classes < 2 {
        return Err(Error::invalid("calibrated logits need at least 2 classes"));
    }
    positive("scale", scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = LabeledVectors::new(classes);
    let mut row = vec![0.0; classes];
    for _ in 0..n {
        let (z, y) = calibrated_latent(classes, margin, noise, &mut rng);
        for (r, v) in row.iter_mut().zip(&z) {
            *r = v * scale;
        }
        out.push(&row, y)?;
    }
    Ok(out)
}

/// Largest `n·m` accepted by [`oracle_auroc`].
pub const ORACLE_PAIR_LIMIT: usize = 1_000_000;

/// AUROC by counting every (ID, OOD) pair, ties counting one half.
pub fn oracle_auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::UndefinedMetric("oracle needs both score sets"));
    }
    let pairs = id.len().saturating_mul(ood.len());
    if pairs > ORACLE_PAIR_LIMIT {
        return Err(Error::invalid(format!("oracle refuses {pairs} pairs (limit {ORACLE_PAIR_LIMIT})")));
    }
    let mut doubled: u64 = 0;
    for &a in id {
        for &b in ood {
            if a > b {
                doubled += 2;
            } else if a == b {
                doubled += 1;
            }
        }
    }
    Ok(doubled as f64 / (2 * pairs) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::collect_labeled_embeddings;
    use crate::calibration::{learn_temperature, TemperatureSearch};
    use crate::metrics::auroc;

    fn small() -> SynthSpec {
        SynthSpec {
            train_per_class: 200,
            val_per_class: 50,
            test_per_class: 50,
            ood_count: 40,
            background_count: 30,
            embedding_dim: 8,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn oracle_trivial_cases() {
        assert_eq!(oracle_auroc(&[1.0], &[0.0]).unwrap(), 1.0);
        assert_eq!(oracle_auroc(&[0.0], &[1.0]).unwrap(), 0.0);
        assert_eq!(oracle_auroc(&[0.5], &[0.5]).unwrap(), 0.5);
        assert!(oracle_auroc(&vec![0.0; 1001], &vec![0.0; 1000]).is_err());
    }

    #[test]
    fn oracle_agrees_with_rank_auroc() {
        let id = [0.3, 0.7, 0.7, 0.1, 0.9];
        let ood = [0.7, 0.2, 0.1, 0.0];
        assert_eq!(oracle_auroc(&id, &ood).unwrap(), auroc(&id, &ood).unwrap());
    }

    #[test]
    fn splits_have_expected_composition() {
        let spec = small();
        let d = generate(&spec).unwrap();
        for s in Split::ALL {
            d.get(s).validate().unwrap();
            assert_eq!(d.get(s).manifest.split, s);
        }
        assert_eq!(d.train.ground_truth.len(), 400);
        assert!(d.train.ground_truth.iter().all(|g| !g.is_ood()));
        assert!(d.val.ground_truth.iter().all(|g| !g.is_ood()));
        assert!(d.closed_test.ground_truth.iter().all(|g| !g.is_ood()));
        let ood = d.open_test.ground_truth.iter().filter(|g| g.is_ood()).count();
        assert_eq!(ood, 40);
        assert_eq!(d.open_test.detections.len(), 100 + 40 + 30);
        assert_eq!(d.open_test.ground_truth.len(), 140);
        for c in 0..2 {
            assert_eq!(d.train.ground_truth.iter().filter(|g| g.class_id == c).count(), 200);
        }
    }

    #[test]
    fn degenerate_open_split_matches_closed_composition() {
        let spec = SynthSpec {
            ood_count: 0,
            background_count: 0,
            ..small()
        };
        let d = generate(&spec).unwrap();
        assert_eq!(d.open_test.detections.len(), d.closed_test.detections.len());
        let count = |ds: &Dataset, c: i32| ds.ground_truth.iter().filter(|g| g.class_id == c).count();
        for c in [-1, 0, 1] {
            assert_eq!(count(&d.open_test, c), count(&d.closed_test, c));
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn every_object_is_matched() {
        let d = generate(&small()).unwrap();
        let (emb, summary) = collect_labeled_embeddings(&d.train, 0.5);
        assert_eq!(emb.len(), 400);
        assert!(summary.classes_without_matches.is_empty());
    }

    #[test]
    fn rejects_invalid_spec() {
        assert!(generate(&SynthSpec { separation: 0.0, ..small() }).is_err());
        assert!(generate(&SynthSpec { embedding_dim: 2, ..small() }).is_err());
        assert!(generate(&SynthSpec { box_max: 500.0, ..small() }).is_err());
    }

    #[test]
    fn calibrated_fixture_recovers_scale() {
        let data = calibrated_logits(4000, 3, 2.0, 1.5, 2.0, 3).unwrap();
        let fit = learn_temperature(&data, &TemperatureSearch::default()).unwrap();
        assert!((fit.temperature - 2.0).abs() < 0.1, "{}", fit.temperature);
    }
}
