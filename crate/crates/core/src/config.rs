//! Run configuration: presets, TOML files and dotted `key=value` overrides, and
//! resolution of the datasets and causal graph a run uses.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::{default_arms, Arm};
use crate::data::{generate_synthetic, load_manifest, Dataset, ManifestOptions, Role, SyntheticSpec, CXR_FINDINGS};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::prior::CausalGraph;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small backbone on synthetic data, minutes on a laptop CPU.
    #[default]
    Desk,
    /// Full-size model on manifest-described chest X-rays.
    FullScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Synthetic sizes. Training and validation come from one ID draw.
    pub n_train: usize,
    pub n_val: usize,
    pub n_ood: usize,
    /// ID manifest, split into training and validation per domain.
    pub manifest: Option<PathBuf>,
    pub ood_manifest: Option<PathBuf>,
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Causal graph file for the task prior. Defaults to the synthetic label
    /// graph or the built-in chest X-ray graph.
    pub graph: Option<PathBuf>,
    /// Domain names for manifests, in id order.
    pub domain_names: Option<Vec<String>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            n_train: 2000,
            n_val: 500,
            n_ood: 500,
            manifest: None,
            ood_manifest: None,
            train_fraction: 0.8,
            split_seed: 0,
            graph: None,
            domain_names: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            arms: default_arms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Model initialization and training seed.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

pub struct RunData {
    pub train: Dataset,
    pub val: Dataset,
    pub ood: Option<Dataset>,
    pub graph: Option<CausalGraph>,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let synthetic = SyntheticSpec::default();
        match preset {
            Preset::Desk => {
                let model = ModelConfig {
                    n_c: synthetic.n_classes(),
                    n_d: synthetic.n_domains,
                    image_size: synthetic.image_size,
                    ..ModelConfig::desk()
                };
                Self {
                    preset,
                    seed: 0,
                    model,
                    train: TrainConfig::desk(),
                    data: DataConfig::default(),
                    synthetic,
                    ablate: AblateConfig::default(),
                }
            }
            Preset::FullScale => Self {
                preset,
                seed: 0,
                model: ModelConfig::full_scale(),
                train: TrainConfig::full_scale(),
                data: DataConfig {
                    source: DataSource::Manifest,
                    ..DataConfig::default()
                },
                synthetic,
                ablate: AblateConfig::default(),
            },
        }
    }

    /// Preset defaults, then the file (if any), then the overrides in order.
    pub fn load(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::preset(preset))
            .map_err(|e| Error::Config(format!("cannot serialize preset: {e}")))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file_value: toml::Value = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if let Some(p) = file_value.get("preset") {
                let named: Preset = p
                    .clone()
                    .try_into()
                    .map_err(|e| Error::Config(format!("{}: preset: {e}", path.display())))?;
                value = toml::Value::try_from(Self::preset(named))
                    .map_err(|e| Error::Config(format!("cannot serialize preset: {e}")))?;
            }
            merge(&mut value, file_value);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.source == DataSource::Synthetic {
            self.synthetic.validate()?;
            if self.model.n_c != self.synthetic.n_classes() || self.model.n_d != self.synthetic.n_domains {
                return Err(Error::Config(format!(
                    "model expects {} classes and {} domains, the synthetic spec makes {} and {}",
                    self.model.n_c,
                    self.model.n_d,
                    self.synthetic.n_classes(),
                    self.synthetic.n_domains
                )));
            }
            if self.model.image_size != self.synthetic.image_size || self.model.channels != 1 {
                return Err(Error::Config(
                    "synthetic images are single-channel at synthetic.image_size; match model.image_size and model.channels".into(),
                ));
            }
        }
        Ok(())
    }

    /// Text that reproduces this configuration when loaded as a file.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn manifest_options(&self) -> ManifestOptions {
        ManifestOptions {
            class_names: None,
            domain_names: self.data.domain_names.clone(),
            image_size: self.model.image_size,
            channels: self.model.channels,
        }
    }

    /// Training, validation and OOD data plus the prior graph.
    pub fn load_data(&self) -> Result<RunData> {
        let (id, ood, default_graph) = match self.data.source {
            DataSource::Synthetic => {
                let id = generate_synthetic(&self.synthetic, self.data.n_train + self.data.n_val, Role::Id)?;
                let ood = generate_synthetic(&self.synthetic, self.data.n_ood, Role::Ood)?;
                (id, Some(ood), Some(self.synthetic.causal_graph()?))
            }
            DataSource::Manifest => {
                let path = self
                    .data
                    .manifest
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.manifest is required for manifest data".into()))?;
                let id = load_manifest(path, &self.manifest_options())?;
                let ood = self
                    .data
                    .ood_manifest
                    .as_ref()
                    .map(|p| {
                        let opts = ManifestOptions {
                            class_names: Some(id.class_names.clone()),
                            domain_names: None,
                            ..self.manifest_options()
                        };
                        load_manifest(p, &opts)
                    })
                    .transpose()?;
                let cxr: Vec<String> = CXR_FINDINGS.iter().map(|s| s.to_string()).collect();
                let graph = (id.class_names == cxr).then(CausalGraph::chest_xray_default);
                (id, ood, graph)
            }
        };
        let graph = match &self.data.graph {
            Some(p) => Some(CausalGraph::load(p)?),
            None => default_graph,
        };
        let fraction = match self.data.source {
            DataSource::Synthetic => {
                self.data.n_train as f64 / (self.data.n_train + self.data.n_val).max(1) as f64
            }
            DataSource::Manifest => self.data.train_fraction,
        };
        let (train, val) = id.split_by_domain(fraction, self.data.split_seed)?;
        Ok(RunData { train, val, ood, graph })
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `dotted.key=value` override.
pub fn apply_override(value: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = value;
    for (i, part) in path.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{}` is not a table", path[..i].join("."))))?;
        if i + 1 == path.len() {
            table.insert(part.to_string(), parse_literal(raw.trim()));
            return Ok(());
        }
        cur = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("override `{key}`: unknown key `{part}`")))?;
    }
    unreachable!("path has at least one element")
}
