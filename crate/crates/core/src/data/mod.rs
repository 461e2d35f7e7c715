//! Samples, datasets and their conversion to batched tensors.

pub mod manifest;
pub mod sampler;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use manifest::{load_manifest, ManifestOptions};
pub use sampler::{epoch_batches, make_batches, BatchStream};
pub use synthetic::{generate_synthetic, generate_synthetic_detailed, Role, SyntheticSpec};

/// The nine chest X-ray findings in reporting order.
pub const CXR_FINDINGS: [&str; 9] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Effusion",
    "Lung opacity",
    "No finding",
    "Pneumonia",
    "Pneumothorax",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `channels × size × size`, row-major, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub disease_labels: Vec<u8>,
    pub domain_label: usize,
    pub sample_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub domain_names: Vec<String>,
    pub channels: usize,
    pub image_size: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn empty(class_names: Vec<String>, channels: usize, image_size: usize) -> Self {
        Self {
            class_names,
            domain_names: Vec::new(),
            channels,
            image_size,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_domains(&self) -> usize {
        self.domain_names.len()
    }

    /// Fraction of samples positive for each class.
    pub fn prevalence(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.n_classes()];
        for s in &self.samples {
            for (c, &y) in s.disease_labels.iter().enumerate() {
                counts[c] += usize::from(y == 1);
            }
        }
        let n = self.len().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }

    pub fn domain_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_domains()];
        for s in &self.samples {
            counts[s.domain_label] += 1;
        }
        counts
    }

    /// Checks label lengths, label values, domain range and image sizes.
    pub fn validate(&self) -> Result<()> {
        let pixels = self.channels * self.image_size * self.image_size;
        for (row, s) in self.samples.iter().enumerate() {
            let fail = |message: String| Err(Error::Ingestion { row, message });
            if s.disease_labels.len() != self.n_classes() {
                return fail(format!(
                    "{} labels for {} classes",
                    s.disease_labels.len(),
                    self.n_classes()
                ));
            }
            if s.disease_labels.iter().any(|&y| y > 1) {
                return fail("labels must be 0 or 1".into());
            }
            if !s.disease_labels.contains(&1) {
                return fail(format!("sample `{}` has no positive label", s.sample_id));
            }
            if s.domain_label >= self.n_domains() {
                return fail(format!("domain {} out of range", s.domain_label));
            }
            if s.image.len() != pixels {
                return fail(format!("image has {} values, expected {pixels}", s.image.len()));
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            class_names: self.class_names.clone(),
            domain_names: self.domain_names.clone(),
            channels: self.channels,
            image_size: self.image_size,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Train/validation split, stratified per domain: within each domain a shuffled
    /// `train_fraction` of the samples goes to training.
    pub fn split_by_domain(&self, train_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::Config(format!(
                "train fraction must lie in [0, 1], got {train_fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_domain: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            by_domain.entry(s.domain_label).or_default().push(i);
        }
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (_, mut idx) in by_domain {
            idx.shuffle(&mut rng);
            let cut = (idx.len() as f64 * train_fraction).round() as usize;
            train.extend_from_slice(&idx[..cut]);
            val.extend_from_slice(&idx[cut..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        Ok((self.subset(&train), self.subset(&val)))
    }

    pub fn images(&self, indices: &[usize], dtype: DType) -> Result<Tensor> {
        let pixels = self.channels * self.image_size * self.image_size;
        let mut flat = Vec::with_capacity(indices.len() * pixels);
        for &i in indices {
            flat.extend_from_slice(&self.samples[i].image);
        }
        let t = Tensor::from_vec(
            flat,
            (indices.len(), self.channels, self.image_size, self.image_size),
            &Device::Cpu,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn disease_labels(&self, indices: &[usize]) -> Vec<Vec<u8>> {
        indices
            .iter()
            .map(|&i| self.samples[i].disease_labels.clone())
            .collect()
    }

    pub fn disease_label_tensor(&self, indices: &[usize], dtype: DType) -> Result<Tensor> {
        let c = self.n_classes();
        let flat: Vec<f64> = indices
            .iter()
            .flat_map(|&i| self.samples[i].disease_labels.iter().map(|&y| f64::from(y)))
            .collect();
        Ok(Tensor::from_vec(flat, (indices.len(), c), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn domain_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].domain_label).collect()
    }

    /// Writes one 8-bit PNG per sample plus `manifest.csv` into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let manifest_path = dir.join("manifest.csv");
        let mut w = csv::Writer::from_path(&manifest_path)
            .map_err(|e| Error::io(&manifest_path, std::io::Error::other(e)))?;
        let mut header = vec!["image_path".to_string()];
        header.extend(self.class_names.iter().cloned());
        header.push("domain".into());
        let csv_err = |e: csv::Error| Error::io(&manifest_path, std::io::Error::other(e));
        w.write_record(&header).map_err(csv_err)?;
        for s in &self.samples {
            let rel = format!("images/{}.png", s.sample_id);
            let path = dir.join(&rel);
            save_png(&path, &s.image, self.channels, self.image_size)?;
            let mut rec = vec![rel];
            rec.extend(s.disease_labels.iter().map(|y| y.to_string()));
            rec.push(self.domain_names[s.domain_label].clone());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&manifest_path, e))?;
        Ok(())
    }
}

fn save_png(path: &Path, image: &[f32], channels: usize, size: usize) -> Result<()> {
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let plane = size * size;
    let result = match channels {
        1 => image::GrayImage::from_raw(size as u32, size as u32, image.iter().map(|&v| to_u8(v)).collect())
            .expect("buffer matches dimensions")
            .save(path),
        3 => {
            let mut buf = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for c in 0..3 {
                    buf.push(to_u8(image[c * plane + p]));
                }
            }
            image::RgbImage::from_raw(size as u32, size as u32, buf)
                .expect("buffer matches dimensions")
                .save(path)
        }
        other => {
            return Err(Error::Config(format!(
                "only 1 or 3 channel images can be written, got {other}"
            )))
        }
    };
    result.map_err(|e| Error::io(path, std::io::Error::other(e)))
}
