//! Dataset container: a directory holding `manifest.json`, `detections.bin`
//! and `groundtruth.bin`.
//!
//! Both binary files start with a 16-byte header (`b"OSGT"`, `u32` format
//! version, `u64` record count) followed by fixed-width little-endian rows:
//!
//! | file              | row layout                                                                   |
//! |-------------------|------------------------------------------------------------------------------|
//! | `detections.bin`  | `u32` image index, `u32` flags, 4 × `f32` box, `f32` score, C × `f32` logits, D × `f32` embedding |
//! | `groundtruth.bin` | `u32` image index, `i32` class id, 4 × `f32` box                             |
//!
//! Flag bit 0 marks a present detector score. Image ids live in the manifest's
//! `images` list, ordered by first appearance (detections, then ground truth).

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use osgate_core::{
    validate_detection, validate_ground_truth, BoundingBox, Dataset, DatasetManifest, DetectionRecord, GroundTruthRecord,
    Split,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json::{self, FormatVersion};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DETECTIONS_FILE: &str = "detections.bin";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.bin";

pub const MAGIC: [u8; 4] = *b"OSGT";
pub const BINARY_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;
const HAS_SCORE: u32 = 1;

/// Manifest fields this reader understands; a `required` entry outside this
/// list makes the container unreadable.
const KNOWN_FIELDS: &[&str] = &[
    "format_version",
    "required",
    "num_classes",
    "class_names",
    "embedding_dim",
    "split",
    "spectral_normalized",
    "detector_name",
    "images",
    "detection_count",
    "ground_truth_count",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    format_version: FormatVersion,
    #[serde(default)]
    required: Vec<String>,
    num_classes: u32,
    class_names: Vec<String>,
    embedding_dim: u32,
    split: Split,
    #[serde(default)]
    spectral_normalized: bool,
    #[serde(default)]
    detector_name: String,
    #[serde(default)]
    images: Vec<String>,
    #[serde(default)]
    detection_count: Option<u64>,
    #[serde(default)]
    ground_truth_count: Option<u64>,
}

pub fn detection_row_len(num_classes: usize, embedding_dim: usize) -> usize {
    4 * (7 + num_classes + embedding_dim)
}

pub const GROUND_TRUTH_ROW_LEN: usize = 24;

fn header(count: usize) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(&MAGIC);
    h[4..8].copy_from_slice(&BINARY_VERSION.to_le_bytes());
    h[8..].copy_from_slice(&(count as u64).to_le_bytes());
    h
}

fn push_box(buf: &mut Vec<u8>, b: &BoundingBox) {
    for v in [b.x_min, b.y_min, b.x_max, b.y_max] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn validation(path: PathBuf, index: usize, kind: &str, reason: String) -> Error {
    Error::Validation {
        path,
        source: osgate_core::Error::InvalidRecord {
            index,
            reason: format!("{kind}: {reason}"),
        },
    }
}

/// Writes `dataset` into directory `dir`, creating it if needed. Every record
/// is validated against the manifest before any file is touched.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let m = &dataset.manifest;
    m.validate().map_err(|source| Error::Validation {
        path: dir.join(MANIFEST_FILE),
        source,
    })?;
    for (i, d) in dataset.detections.iter().enumerate() {
        validate_detection(d, m).map_err(|r| validation(dir.join(DETECTIONS_FILE), i, "detection", r))?;
    }
    for (i, g) in dataset.ground_truth.iter().enumerate() {
        validate_ground_truth(g, m).map_err(|r| validation(dir.join(GROUND_TRUTH_FILE), i, "ground truth", r))?;
    }

    let mut images: Vec<String> = Vec::new();
    let mut index: HashMap<&str, u32> = HashMap::new();
    for id in dataset
        .detections
        .iter()
        .map(|d| d.image_id.as_str())
        .chain(dataset.ground_truth.iter().map(|g| g.image_id.as_str()))
    {
        index.entry(id).or_insert_with(|| {
            images.push(id.to_owned());
            (images.len() - 1) as u32
        });
    }

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = ManifestFile {
        format_version: json::CURRENT_VERSION,
        required: Vec::new(),
        num_classes: m.num_classes,
        class_names: m.class_names.clone(),
        embedding_dim: m.embedding_dim,
        split: m.split,
        spectral_normalized: m.spectral_normalized,
        detector_name: m.detector_name.clone(),
        images,
        detection_count: Some(dataset.detections.len() as u64),
        ground_truth_count: Some(dataset.ground_truth.len() as u64),
    };
    json::write_canonical(&dir.join(MANIFEST_FILE), &manifest)?;

    let row_len = detection_row_len(m.num_classes as usize, m.embedding_dim as usize);
    write_rows(&dir.join(DETECTIONS_FILE), dataset.detections.len(), row_len, |i, buf| {
        let d = &dataset.detections[i];
        buf.extend_from_slice(&index[d.image_id.as_str()].to_le_bytes());
        let flags = if d.detector_score.is_some() { HAS_SCORE } else { 0 };
        buf.extend_from_slice(&flags.to_le_bytes());
        push_box(buf, &d.bbox);
        buf.extend_from_slice(&d.detector_score.unwrap_or(0.0).to_le_bytes());
        for v in d.logits.iter().chain(&d.embedding) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    })?;
    write_rows(&dir.join(GROUND_TRUTH_FILE), dataset.ground_truth.len(), GROUND_TRUTH_ROW_LEN, |i, buf| {
        let g = &dataset.ground_truth[i];
        buf.extend_from_slice(&index[g.image_id.as_str()].to_le_bytes());
        buf.extend_from_slice(&g.class_id.to_le_bytes());
        push_box(buf, &g.bbox);
    })
}

fn write_rows(path: &Path, count: usize, row_len: usize, mut row: impl FnMut(usize, &mut Vec<u8>)) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(row_len);
    w.write_all(&header(count)).map_err(|e| Error::io(path, e))?;
    for i in 0..count {
        buf.clear();
        row(i, &mut buf);
        debug_assert_eq!(buf.len(), row_len);
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads and validates the body of a binary file; a missing file is an empty sequence.
fn read_rows(path: &Path, row_len: usize) -> Result<Option<Vec<u8>>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BINARY_VERSION {
        return Err(Error::format(path, format!("unsupported binary version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let expected = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(row_len))
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(path, format!("record count {count} overflows")))?;
    if bytes.len() < expected {
        return Err(Error::format(
            path,
            format!("truncated: header declares {count} records ({expected} bytes), file has {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(path, format!("{} trailing bytes after {count} records", bytes.len() - expected)));
    }
    Ok(Some(bytes))
}

fn f32_at(row: &[u8], word: usize) -> f32 {
    f32::from_le_bytes(row[4 * word..4 * word + 4].try_into().unwrap())
}

fn u32_at(row: &[u8], word: usize) -> u32 {
    u32::from_le_bytes(row[4 * word..4 * word + 4].try_into().unwrap())
}

fn box_at(row: &[u8], word: usize) -> BoundingBox {
    BoundingBox::new(f32_at(row, word), f32_at(row, word + 1), f32_at(row, word + 2), f32_at(row, word + 3))
}

fn image_of(images: &[String], path: &Path, i: usize, row: &[u8]) -> Result<String> {
    let idx = u32_at(row, 0) as usize;
    images
        .get(idx)
        .cloned()
        .ok_or_else(|| Error::format(path, format!("record {i}: image index {idx} outside the manifest's {} images", images.len())))
}

pub fn read_manifest(dir: &Path) -> Result<(DatasetManifest, Vec<String>)> {
    let path = dir.join(MANIFEST_FILE);
    let file: ManifestFile = json::read_versioned(&path, KNOWN_FIELDS)?;
    let manifest = DatasetManifest {
        num_classes: file.num_classes,
        class_names: file.class_names,
        embedding_dim: file.embedding_dim,
        split: file.split,
        spectral_normalized: file.spectral_normalized,
        detector_name: file.detector_name,
    };
    manifest.validate().map_err(|source| Error::Validation { path, source })?;
    Ok((manifest, file.images))
}

/// Inverse of [`write_dataset`]; every record is validated on load.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let (manifest, images) = read_manifest(dir)?;
    let (c, d) = (manifest.num_classes as usize, manifest.embedding_dim as usize);

    let det_path = dir.join(DETECTIONS_FILE);
    let mut detections = Vec::new();
    if let Some(bytes) = read_rows(&det_path, detection_row_len(c, d))? {
        let rows = bytes[HEADER_LEN..].chunks_exact(detection_row_len(c, d));
        detections.reserve(rows.len());
        for (i, row) in rows.enumerate() {
            let flags = u32_at(row, 1);
            if flags & !HAS_SCORE != 0 {
                return Err(Error::format(&det_path, format!("record {i}: unknown flag bits {flags:#x}")));
            }
            let rec = DetectionRecord {
                image_id: image_of(&images, &det_path, i, row)?,
                bbox: box_at(row, 2),
                detector_score: (flags & HAS_SCORE != 0).then(|| f32_at(row, 6)),
                logits: (0..c).map(|k| f32_at(row, 7 + k)).collect(),
                embedding: (0..d).map(|k| f32_at(row, 7 + c + k)).collect(),
            };
            validate_detection(&rec, &manifest).map_err(|r| validation(det_path.clone(), i, "detection", r))?;
            detections.push(rec);
        }
    }

    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let mut ground_truth = Vec::new();
    if let Some(bytes) = read_rows(&gt_path, GROUND_TRUTH_ROW_LEN)? {
        for (i, row) in bytes[HEADER_LEN..].chunks_exact(GROUND_TRUTH_ROW_LEN).enumerate() {
            let rec = GroundTruthRecord {
                image_id: image_of(&images, &gt_path, i, row)?,
                class_id: u32_at(row, 1) as i32,
                bbox: box_at(row, 2),
            };
            validate_ground_truth(&rec, &manifest).map_err(|r| validation(gt_path.clone(), i, "ground truth", r))?;
            ground_truth.push(rec);
        }
    }

    Ok(Dataset {
        manifest,
        detections,
        ground_truth,
    })
}

/// Record counts and a SHA-256 over the three container files.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContainerSummary {
    pub split: Split,
    pub detections: usize,
    pub ground_truth: usize,
    pub ood_ground_truth: usize,
    pub per_class_ground_truth: Vec<usize>,
    pub embedding_dim: u32,
    pub sha256: String,
}

pub fn summarize(dir: &Path) -> Result<ContainerSummary> {
    let dataset = read_dataset(dir)?;
    let mut per_class = vec![0usize; dataset.num_classes()];
    let mut ood = 0;
    for g in &dataset.ground_truth {
        if g.is_ood() {
            ood += 1;
        } else {
            per_class[g.class_id as usize] += 1;
        }
    }
    Ok(ContainerSummary {
        split: dataset.manifest.split,
        detections: dataset.detections.len(),
        ground_truth: dataset.ground_truth.len(),
        ood_ground_truth: ood,
        per_class_ground_truth: per_class,
        embedding_dim: dataset.manifest.embedding_dim,
        sha256: json::digest_files(&[dir.join(MANIFEST_FILE), dir.join(DETECTIONS_FILE), dir.join(GROUND_TRUTH_FILE)])?,
    })
}
