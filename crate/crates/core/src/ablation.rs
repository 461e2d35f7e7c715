//! Ablation sweep: several training arms under shared seeds, evaluated on the
//! same ID and OOD data and compared side by side.

use std::collections::BTreeSet;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{full_report, ClassMetrics, Comparison, EvalReport, SplitReport};
use crate::model::{save_checkpoint, Architecture, ModelConfig, Network};
use crate::prior::CausalGraph;
use crate::train::{train, Ablation, History, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub architecture: Architecture,
    #[serde(default)]
    pub ablation: BTreeSet<Ablation>,
}

impl Arm {
    pub fn new(name: &str, architecture: Architecture, ablation: &[Ablation]) -> Self {
        Self {
            name: name.to_string(),
            architecture,
            ablation: ablation.iter().copied().collect(),
        }
    }
}

/// Plain backbone, the domain-branch-free variant, the two single-component
/// ablations and the full model, in table order.
pub fn default_arms() -> Vec<Arm> {
    vec![
        Arm::new("baseline", Architecture::Baseline, &[]),
        Arm::new("no_domain_branch", Architecture::Crocodile, &[Ablation::NoDomainBranch, Ablation::NoTp]),
        Arm::new("no_cl", Architecture::Crocodile, &[Ablation::NoCl]),
        Arm::new("no_tp", Architecture::Crocodile, &[Ablation::NoTp]),
        Arm::new("full", Architecture::Crocodile, &[]),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub history: Option<History>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub seeds: Vec<u64>,
    pub runs: Vec<ArmRun>,
    /// Element-wise median over seeds for every arm that finished at least once.
    pub median: Comparison,
}

impl AblationOutcome {
    pub fn median_of(&self, arm: &str) -> Option<&EvalReport> {
        self.median.columns.iter().find(|c| c.model == arm)
    }
}

pub struct AblationInputs<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub ood: &'a Dataset,
    pub graph: Option<&'a CausalGraph>,
}

/// Trains one arm and evaluates it on the ID validation data and the OOD data.
pub fn run_arm(
    arm: &Arm,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    inputs: &AblationInputs<'_>,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(EvalReport, History)> {
    let network = Network::build(arm.architecture, model_cfg.clone(), DType::F32, seed)?;
    let mut cfg = train_cfg.clone();
    cfg.seed = seed;
    cfg.ablation.extend(arm.ablation.iter().copied());
    let metrics = out_dir.map(|d| d.join(format!("{}_seed{seed}_metrics.jsonl", arm.name)));
    let outcome = train(&network, inputs.train, inputs.val, inputs.graph, &cfg, metrics.as_deref())?;
    if let Some(d) = out_dir {
        save_checkpoint(d.join(format!("{}_seed{seed}.ckpt", arm.name)), &outcome.checkpoint)?;
    }
    let report = full_report(&arm.name, &network, inputs.val, Some(inputs.ood), cfg.eval_intervened)?;
    Ok((report, outcome.history))
}

/// Runs every arm for every seed. A failing arm is recorded and the sweep goes on.
pub fn run_ablation(
    arms: &[Arm],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    inputs: &AblationInputs<'_>,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<AblationOutcome> {
    if arms.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one arm and one seed".into()));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        for arm in arms {
            log::info!("ablation arm `{}`, seed {seed}", arm.name);
            let run = match run_arm(arm, model_cfg, train_cfg, inputs, seed, out_dir) {
                Ok((report, history)) => ArmRun {
                    arm: arm.name.clone(),
                    seed,
                    report: Some(report),
                    history: Some(history),
                    error: None,
                },
                Err(e) => {
                    log::error!("arm `{}` seed {seed} failed: {e}", arm.name);
                    ArmRun {
                        arm: arm.name.clone(),
                        seed,
                        report: None,
                        history: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            runs.push(run);
        }
    }
    let mut columns = Vec::new();
    for arm in arms {
        let reports: Vec<&EvalReport> = runs
            .iter()
            .filter(|r| r.arm == arm.name)
            .filter_map(|r| r.report.as_ref())
            .collect();
        if let Some(m) = median_report(&arm.name, &reports) {
            columns.push(m);
        }
    }
    Ok(AblationOutcome {
        seeds: seeds.to_vec(),
        runs,
        median: Comparison { columns },
    })
}

/// Median of a non-empty list; the mean of the two middle values for even length.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn median_split(splits: &[&SplitReport]) -> Option<SplitReport> {
    let first = splits.first()?;
    let classes = first
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let pick = |f: fn(&ClassMetrics) -> Option<f64>| {
                let v: Vec<f64> = splits.iter().filter_map(|s| s.classes.get(i).and_then(f)).collect();
                median(&v)
            };
            ClassMetrics {
                name: c.name.clone(),
                auc: pick(|m| m.auc),
                ap: pick(|m| m.ap),
            }
        })
        .collect();
    Some(SplitReport {
        split: first.split,
        classes,
        mean_auc: median(&splits.iter().map(|s| s.mean_auc).collect::<Vec<_>>())?,
        mean_ap: median(&splits.iter().map(|s| s.mean_ap).collect::<Vec<_>>())?,
    })
}

/// Element-wise median report. The drops are medians of the per-seed drops, not
/// drops of the median means.
pub fn median_report(name: &str, reports: &[&EvalReport]) -> Option<EvalReport> {
    let id = median_split(&reports.iter().map(|r| &r.id).collect::<Vec<_>>())?;
    let oods: Vec<&SplitReport> = reports.iter().filter_map(|r| r.ood.as_ref()).collect();
    let drops = |f: fn(&EvalReport) -> Option<f64>| median(&reports.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
    Some(EvalReport {
        model: name.to_string(),
        id,
        ood: median_split(&oods),
        drop_auc_percent: drops(|r| r.drop_auc_percent),
        drop_ap_percent: drops(|r| r.drop_ap_percent),
    })
}
