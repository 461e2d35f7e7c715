//! Manifest-driven ingestion of real image datasets.
//!
//! A manifest is UTF-8 CSV with a header row: `image_path`, one `0`/`1` column per
//! finding, and `domain`. Relative image paths resolve against the manifest's
//! directory. Images are converted to the configured channel count, resized to a
//! square, contrast-stretched to the full 0–255 range and scaled to `[0, 1]`.

use std::path::Path;

use image::imageops::FilterType;
use image::DynamicImage;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestOptions {
    /// Expected finding columns in class order. `None` accepts the header as is.
    pub class_names: Option<Vec<String>>,
    /// Domain names in id order. `None` assigns ids by first appearance.
    pub domain_names: Option<Vec<String>>,
    pub image_size: usize,
    pub channels: usize,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        Self {
            class_names: None,
            domain_names: None,
            image_size: 320,
            channels: 1,
        }
    }
}

const PATH_COLUMN: &str = "image_path";
const DOMAIN_COLUMN: &str = "domain";

pub fn load_manifest(path: impl AsRef<Path>, opts: &ManifestOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let header_err = |message: String| Error::Ingestion { row: 0, message };

    let empty_classes = opts.class_names.clone().unwrap_or_default();
    if text.trim().is_empty() {
        return Ok(Dataset::empty(empty_classes, opts.channels, opts.image_size));
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| header_err(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some(PATH_COLUMN) {
        return Err(header_err(format!("first column must be `{PATH_COLUMN}`")));
    }
    if header.last().map(String::as_str) != Some(DOMAIN_COLUMN) || header.len() < 2 {
        return Err(header_err(format!("last column must be `{DOMAIN_COLUMN}`")));
    }
    let finding_cols = &header[1..header.len() - 1];
    let class_names = match &opts.class_names {
        Some(expected) => {
            if let Some(unknown) = finding_cols.iter().find(|c| !expected.contains(c)) {
                return Err(header_err(format!("unknown finding column `{unknown}`")));
            }
            if let Some(missing) = expected.iter().find(|c| !finding_cols.contains(c)) {
                return Err(header_err(format!("missing finding column `{missing}`")));
            }
            expected.clone()
        }
        None => finding_cols.to_vec(),
    };
    // manifest column index for each class position
    let column_of: Vec<usize> = class_names
        .iter()
        .map(|c| 1 + finding_cols.iter().position(|f| f == c).expect("checked above"))
        .collect();

    let mut domain_names = opts.domain_names.clone().unwrap_or_default();
    let fixed_domains = opts.domain_names.is_some();
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let fail = |message: String| Error::Ingestion { row, message };
        let record = record.map_err(|e| fail(e.to_string()))?;
        if record.len() != header.len() {
            return Err(fail(format!("{} fields, expected {}", record.len(), header.len())));
        }
        let labels = column_of
            .iter()
            .map(|&col| match &record[col] {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(fail(format!("label `{other}` in column `{}` is not 0/1", header[col]))),
            })
            .collect::<Result<Vec<u8>>>()?;
        if !labels.contains(&1) {
            return Err(fail("row has no positive finding (set the No finding column)".into()));
        }
        let domain = &record[header.len() - 1];
        let domain_label = match domain_names.iter().position(|d| d == domain) {
            Some(id) => id,
            None if fixed_domains => return Err(fail(format!("unknown domain `{domain}`"))),
            None => {
                domain_names.push(domain.to_string());
                domain_names.len() - 1
            }
        };
        let rel = &record[0];
        let image_path = base.join(rel);
        if !image_path.exists() {
            return Err(fail(format!("image `{}` does not exist", image_path.display())));
        }
        let img = image::open(&image_path).map_err(|e| fail(format!("{}: {e}", image_path.display())))?;
        let image = preprocess(img, opts.channels, opts.image_size).map_err(fail)?;
        samples.push(Sample {
            image,
            disease_labels: labels,
            domain_label,
            sample_id: rel.to_string(),
        });
    }
    Ok(Dataset {
        class_names,
        domain_names,
        channels: opts.channels,
        image_size: opts.image_size,
        samples,
    })
}

/// Channel conversion, resize, per-image min–max stretch to 0–255, scale to `[0, 1]`.
pub fn preprocess(img: DynamicImage, channels: usize, size: usize) -> std::result::Result<Vec<f32>, String> {
    let img = img.resize_exact(size as u32, size as u32, FilterType::Triangle);
    let interleaved: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        other => return Err(format!("unsupported channel count {other}")),
    };
    let lo = *interleaved.iter().min().unwrap_or(&0) as f32;
    let hi = *interleaved.iter().max().unwrap_or(&0) as f32;
    let stretch = |v: u8| {
        let v = v as f32;
        let s = if hi > lo { (v - lo) * 255.0 / (hi - lo) } else { v };
        s.round() / 255.0
    };
    let plane = size * size;
    let mut out = vec![0.0f32; channels * plane];
    for p in 0..plane {
        for c in 0..channels {
            out[c * plane + p] = stretch(interleaved[p * channels + c]);
        }
    }
    Ok(out)
}
