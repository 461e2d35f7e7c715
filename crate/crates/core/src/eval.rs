//! Ranking metrics, ID/OOD reports and the relative performance drop.
//!
//! Metric values are fractions in `[0, 1]`; tables render them in percent. The
//! drop is a percentage either way since it is a ratio.

use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Network;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            context: "metric inputs",
            expected: vec![scores.len()],
            actual: vec![labels.len()],
        });
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::contract("metric labels must be 0 or 1"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("metric scores contain NaN"));
    }
    Ok(())
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Area under the ROC curve: the probability that a random positive outscores a
/// random negative, ties counted one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative labels".into(),
        ));
    }
    // Walk tie groups from the top, counting negatives still below each positive.
    let order = descending(scores);
    let mut wins = 0.0;
    let mut neg_above = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        let group_neg = (j - i) - group_pos;
        let below = n_neg - neg_above - group_neg;
        wins += group_pos as f64 * (below as f64 + 0.5 * group_neg as f64);
        neg_above += group_neg;
        i = j;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Average precision with step interpolation: `Σ_k P@k · ΔR@k` over the distinct
/// score thresholds in descending order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive label".into(),
        ));
    }
    let order = descending(scores);
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut new_tp = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            new_tp += usize::from(labels[order[j]] == 1);
            j += 1;
        }
        tp += new_tp;
        seen += j - i;
        ap += (tp as f64 / seen as f64) * (new_tp as f64 / n_pos as f64);
        i = j;
    }
    Ok(ap)
}

/// Relative drop in percent, `100 · (id − ood) / id`.
pub fn drop(id_mean: f64, ood_mean: f64) -> Result<f64> {
    if !(id_mean > 0.0) {
        return Err(Error::contract(format!(
            "drop needs a positive ID mean, got {id_mean}"
        )));
    }
    Ok(100.0 * (id_mean - ood_mean) / id_mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Id,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    /// `None` when the class is single-valued in this split.
    pub auc: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: Split,
    pub classes: Vec<ClassMetrics>,
    pub mean_auc: f64,
    pub mean_ap: f64,
}

impl SplitReport {
    /// Metrics of a score matrix (`samples × classes`) against multi-hot labels.
    /// Classes whose metric is undefined are kept as `None` and left out of the
    /// corresponding mean.
    pub fn from_scores(
        split: Split,
        class_names: &[String],
        scores: &[Vec<f64>],
        labels: &[Vec<u8>],
    ) -> Result<Self> {
        let mut classes = Vec::with_capacity(class_names.len());
        for (c, name) in class_names.iter().enumerate() {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let y: Vec<u8> = labels.iter().map(|r| r[c]).collect();
            let defined = |r: Result<f64>| match r {
                Ok(v) => Ok(Some(v)),
                Err(Error::UndefinedMetric(m)) => {
                    log::warn!("class `{name}` excluded from the {split:?} mean: {m}");
                    Ok(None)
                }
                Err(other) => Err(Error::contract(format!("class `{name}`: {other}"))),
            };
            let auc_v = defined(auc(&s, &y))?;
            let ap_v = defined(average_precision(&s, &y))?;
            classes.push(ClassMetrics {
                name: name.clone(),
                auc: auc_v,
                ap: ap_v,
            });
        }
        let mean = |f: fn(&ClassMetrics) -> Option<f64>| {
            let v: Vec<f64> = classes.iter().filter_map(f).collect();
            if v.is_empty() {
                Err(Error::UndefinedMetric(format!(
                    "no class has a defined metric in the {split:?} split"
                )))
            } else {
                Ok(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        let mean_auc = mean(|m| m.auc)?;
        let mean_ap = mean(|m| m.ap)?;
        Ok(Self {
            split,
            classes,
            mean_auc,
            mean_ap,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub id: SplitReport,
    pub ood: Option<SplitReport>,
    pub drop_auc_percent: Option<f64>,
    pub drop_ap_percent: Option<f64>,
}

impl EvalReport {
    pub fn new(model: impl Into<String>, id: SplitReport, ood: Option<SplitReport>) -> Result<Self> {
        let (drop_auc_percent, drop_ap_percent) = match &ood {
            Some(o) => (Some(drop(id.mean_auc, o.mean_auc)?), Some(drop(id.mean_ap, o.mean_ap)?)),
            None => (None, None),
        };
        Ok(Self {
            model: model.into(),
            id,
            ood,
            drop_auc_percent,
            drop_ap_percent,
        })
    }

    /// Recomputes the drops from the stored means.
    pub fn recompute_drops(&mut self) -> Result<()> {
        let fresh = Self::new(self.model.clone(), self.id.clone(), self.ood.clone())?;
        self.drop_auc_percent = fresh.drop_auc_percent;
        self.drop_ap_percent = fresh.drop_ap_percent;
        Ok(())
    }
}

const PREDICT_CHUNK: usize = 64;

/// Disease scores (sigmoid of the prediction logits), one row per sample.
pub fn predict(network: &Network, dataset: &Dataset, use_intervened: bool) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(PREDICT_CHUNK) {
        let images = dataset.images(chunk, network.dtype())?;
        let logits = network.disease_logits(&images, use_intervened)?;
        let probs = candle_nn::ops::sigmoid(&logits)?;
        out.extend(probs.to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    Ok(out)
}

pub fn split_report(network: &Network, dataset: &Dataset, split: Split, use_intervened: bool) -> Result<SplitReport> {
    if dataset.is_empty() {
        return Err(Error::contract(format!("{split:?} dataset is empty")));
    }
    if dataset.n_classes() != network.config().n_c {
        return Err(Error::contract(format!(
            "dataset has {} classes, model predicts {}",
            dataset.n_classes(),
            network.config().n_c
        )));
    }
    let scores = predict(network, dataset, use_intervened)?;
    let labels: Vec<Vec<u8>> = dataset.samples.iter().map(|s| s.disease_labels.clone()).collect();
    SplitReport::from_scores(split, &dataset.class_names, &scores, &labels)
}

/// ID metrics, optional OOD metrics and the drop between them.
pub fn full_report(
    model_name: &str,
    network: &Network,
    dataset_id: &Dataset,
    dataset_ood: Option<&Dataset>,
    use_intervened: bool,
) -> Result<EvalReport> {
    let id = split_report(network, dataset_id, Split::Id, use_intervened)?;
    let ood = dataset_ood
        .map(|d| split_report(network, d, Split::Ood, use_intervened))
        .transpose()?;
    EvalReport::new(model_name, id, ood)
}

/// Macro-mean validation AUC used for early stopping.
pub fn mean_auc(network: &Network, dataset: &Dataset, use_intervened: bool) -> Result<f64> {
    Ok(split_report(network, dataset, Split::Id, use_intervened)?.mean_auc)
}

/// Several reports side by side, one column per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub columns: Vec<EvalReport>,
}

fn cell(auc: Option<f64>, ap: Option<f64>) -> String {
    let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
    format!("{}/{}", f(auc), f(ap))
}

fn drop_cell(r: &EvalReport) -> String {
    match (r.drop_auc_percent, r.drop_ap_percent) {
        (Some(a), Some(p)) => format!("{a:.2}/{p:.2}"),
        _ => "n/a".into(),
    }
}

impl Comparison {
    /// Aligned text table: per-class `AUC/AP` cells in percent for the ID block,
    /// the OOD block when present, their means, and the drop row.
    pub fn render_text(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["Finding".to_string()];
        header.extend(self.columns.iter().map(|c| c.model.clone()));
        rows.push(header);

        let names: Vec<String> = self
            .columns
            .first()
            .map(|c| c.id.classes.iter().map(|m| m.name.clone()).collect())
            .unwrap_or_default();
        let block = |rows: &mut Vec<Vec<String>>, title: &str, pick: &dyn Fn(&EvalReport) -> Option<&SplitReport>| {
            rows.push(vec![format!("[{title}]")]);
            for (i, name) in names.iter().enumerate() {
                let mut row = vec![name.clone()];
                for col in &self.columns {
                    row.push(pick(col).and_then(|s| s.classes.get(i)).map_or("n/a".into(), |m| cell(m.auc, m.ap)));
                }
                rows.push(row);
            }
            let mut mean = vec!["Mean".to_string()];
            for col in &self.columns {
                mean.push(pick(col).map_or("n/a".into(), |s| cell(Some(s.mean_auc), Some(s.mean_ap))));
            }
            rows.push(mean);
        };
        block(&mut rows, "In-distribution (ID)", &|c| Some(&c.id));
        if self.columns.iter().any(|c| c.ood.is_some()) {
            block(&mut rows, "Out-of-distribution (OOD)", &|c| c.ood.as_ref());
            let mut d = vec!["ID-OOD drop".to_string()];
            d.extend(self.columns.iter().map(drop_cell));
            rows.push(d);
        }

        let n_cols = self.columns.len() + 1;
        let widths: Vec<usize> = (0..n_cols)
            .map(|j| {
                rows.iter()
                    .filter(|r| r.len() == n_cols)
                    .map(|r| r[j].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for r in &rows {
            if r.len() == 1 {
                let _ = writeln!(out, "{}", r[0]);
                continue;
            }
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (s, &w))| if j == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join(" | ").trim_end());
        }
        out
    }

    /// Grouped bar chart of per-class AUC (ID and OOD) for each column, as SVG.
    pub fn render_svg(&self, metric: Metric) -> String {
        let names: Vec<String> = self
            .columns
            .first()
            .map(|c| c.id.classes.iter().map(|m| m.name.clone()).collect())
            .unwrap_or_default();
        let palette = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];
        let bars_per_group = self.columns.len() * 2;
        let (bar_w, gap, left, top, plot_h) = (10.0, 16.0, 50.0, 30.0, 200.0);
        let group_w = bar_w * bars_per_group as f64 + gap;
        let width = left + group_w * names.len().max(1) as f64 + 160.0;
        let height = top + plot_h + 90.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="10">"#
        );
        let _ = writeln!(s, r#"<text x="{left}" y="16">{} per class (solid ID, faded OOD)</text>"#, metric.label());
        let _ = writeln!(
            s,
            r#"<line x1="{left}" y1="{y}" x2="{x2:.0}" y2="{y}" stroke="black"/>"#,
            y = top + plot_h,
            x2 = width - 160.0
        );
        for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let y = top + plot_h * (1.0 - tick);
            let _ = writeln!(s, r#"<text x="{}" y="{y:.1}" text-anchor="end">{tick:.2}</text>"#, left - 4.0);
        }
        for (g, name) in names.iter().enumerate() {
            let x0 = left + gap / 2.0 + g as f64 * group_w;
            for (k, col) in self.columns.iter().enumerate() {
                let color = palette[k % palette.len()];
                let splits = [(Some(&col.id), 1.0), (col.ood.as_ref(), 0.5)];
                for (m, (split, opacity)) in splits.into_iter().enumerate() {
                    let v = split.and_then(|sp| sp.classes.get(g)).and_then(|c| metric.pick(c));
                    if let Some(v) = v {
                        let h = plot_h * v.clamp(0.0, 1.0);
                        let x = x0 + (2 * k + m) as f64 * bar_w;
                        let _ = writeln!(
                            s,
                            r#"<rect x="{x:.1}" y="{:.1}" width="{bar_w}" height="{h:.1}" fill="{color}" fill-opacity="{opacity}"/>"#,
                            top + plot_h - h
                        );
                    }
                }
            }
            let cx = x0 + bar_w * bars_per_group as f64 / 2.0;
            let _ = writeln!(
                s,
                r#"<text x="{cx:.1}" y="{:.1}" text-anchor="end" transform="rotate(-40 {cx:.1} {:.1})">{}</text>"#,
                top + plot_h + 14.0,
                top + plot_h + 14.0,
                xml_escape(name)
            );
        }
        for (k, col) in self.columns.iter().enumerate() {
            let y = top + 12.0 * k as f64;
            let x = width - 150.0;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.0}" y="{y:.0}" width="8" height="8" fill="{}"/><text x="{:.0}" y="{:.0}">{}</text>"#,
                palette[k % palette.len()],
                x + 12.0,
                y + 8.0,
                xml_escape(&col.model)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Auc,
    Ap,
}

impl Metric {
    fn label(self) -> &'static str {
        match self {
            Metric::Auc => "AUC",
            Metric::Ap => "AP",
        }
    }

    fn pick(self, c: &ClassMetrics) -> Option<f64> {
        match self {
            Metric::Auc => c.auc,
            Metric::Ap => c.ap,
        }
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Probabilities from a logits tensor, for callers outside [`predict`].
pub fn sigmoid_rows(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(candle_nn::ops::sigmoid(logits)?.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}
