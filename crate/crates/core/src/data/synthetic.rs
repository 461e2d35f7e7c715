//! Synthetic multi-domain benchmark with a controllable shortcut.
//!
//! Each image is a noisy chest-like background (two darker lung fields) whose
//! gain and offset depend on the domain, with three kinds of content on top:
//!
//! * **causal motifs**: one shape per positive finding, placed at a random spot in
//!   the central region. Motif pixels overwrite the background, so their
//!   distribution does not depend on the domain.
//! * **domain token**: a strip of small squares along the border, starting at a
//!   domain-specific corner. Its first square is an anchor whose intensity
//!   depends on the domain; the next squares are one slot per class. In
//!   in-distribution domains, with probability `ρ` a sample's slots copy its
//!   label vector; otherwise they are drawn independently at the class rates.
//!
//! The out-of-distribution role uses a held-out domain (its own gain, offset and
//! corner) and draws every slot independently of the labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::prior::CausalGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotifShape {
    Disk,
    Ring,
    Bar,
    Blob,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Id,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClass {
    pub name: String,
    /// `None` for classes defined only by the absence of everything else.
    pub motif: Option<MotifShape>,
    /// Rate of the class's own Bernoulli draw (and of its independent token).
    pub prevalence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CausalSignal {
    /// Motif intensity is uniform in `[intensity_lo, intensity_hi]`.
    pub intensity_lo: f64,
    pub intensity_hi: f64,
    /// Motif radius as a fraction of the image side.
    pub radius: f64,
}

impl Default for CausalSignal {
    fn default() -> Self {
        Self {
            intensity_lo: 0.65,
            intensity_hi: 0.85,
            radius: 0.09,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpuriousSignal {
    pub token_intensity: f64,
    /// Token side as a fraction of the image side.
    pub token_size: f64,
    /// Spread of per-domain gains around 1.
    pub contrast_shift: f64,
    pub marker_intensity: f64,
}

impl Default for SpuriousSignal {
    fn default() -> Self {
        Self {
            token_intensity: 1.0,
            token_size: 0.0625,
            contrast_shift: 0.25,
            marker_intensity: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of in-distribution domains; the held-out domain is extra.
    pub n_domains: usize,
    pub image_size: usize,
    pub classes: Vec<SyntheticClass>,
    /// `(parent, child)` class indices: a positive child makes the parent positive.
    pub parents: Vec<(usize, usize)>,
    /// Class that is positive exactly when no other class is.
    pub no_finding: Option<usize>,
    pub causal_signal: CausalSignal,
    pub spurious_signal: SpuriousSignal,
    /// Probability that a sample's label tokens copy its labels (ID role only).
    pub correlation_strength: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let class = |name: &str, motif, prevalence| SyntheticClass {
            name: name.to_string(),
            motif,
            prevalence,
        };
        Self {
            n_domains: 3,
            image_size: 64,
            classes: vec![
                class("opacity", Some(MotifShape::Blob), 0.15),
                class("consolidation", Some(MotifShape::Disk), 0.3),
                class("effusion", Some(MotifShape::Bar), 0.25),
                class("nodule", Some(MotifShape::Ring), 0.3),
                class("no_finding", None, 0.35),
            ],
            parents: vec![(0, 1), (0, 2)],
            no_finding: Some(4),
            causal_signal: CausalSignal::default(),
            spurious_signal: SpuriousSignal::default(),
            correlation_strength: 0.9,
            noise_std: 0.06,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// The label-generation graph doubles as the task prior.
    pub fn causal_graph(&self) -> Result<CausalGraph> {
        CausalGraph::new(self.class_names(), self.parents.iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.correlation_strength) {
            return fail(format!(
                "correlation_strength must lie in [0, 1], got {}",
                self.correlation_strength
            ));
        }
        if self.n_domains < 2 {
            return fail("synthetic data needs at least 2 in-distribution domains".into());
        }
        if self.classes.len() < 2 {
            return fail("synthetic data needs at least 2 classes".into());
        }
        if let Some(c) = self.classes.iter().find(|c| !(c.prevalence > 0.0 && c.prevalence < 1.0)) {
            return fail(format!("prevalence of `{}` must lie in (0, 1)", c.name));
        }
        if self.image_size < 16 {
            return fail("synthetic images must be at least 16 pixels wide".into());
        }
        let slot = self.token_side() + 1;
        if 1 + slot * (self.classes.len() + 1) > self.image_size / 2 {
            return fail("too many classes for the domain token at this image size".into());
        }
        if let Some(nf) = self.no_finding {
            if nf >= self.classes.len() {
                return fail(format!("no_finding index {nf} out of range"));
            }
        }
        self.causal_graph().map(|_| ())
    }

    fn token_side(&self) -> usize {
        ((self.spurious_signal.token_size * self.image_size as f64).round() as usize).max(2)
    }

    /// Gain and offset applied to the background of domain `d`. Index `n_domains`
    /// is the held-out domain.
    pub fn domain_style(&self, d: usize) -> (f64, f64) {
        let n = self.n_domains as f64;
        let shift = self.spurious_signal.contrast_shift;
        if d >= self.n_domains {
            (1.0 + 1.2 * shift, -0.12)
        } else {
            let t = d as f64 / (n - 1.0) - 0.5;
            (1.0 + shift * t, 0.08 * t)
        }
    }
}

/// Everything drawn for one sample, including what is invisible in the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    /// Token slot states, one per class.
    pub tokens: Vec<bool>,
    /// `(class, pixel indices)` of every rendered motif.
    pub motifs: Vec<(usize, Vec<usize>)>,
    /// Domain index in the generator's numbering (held-out = `n_domains`).
    pub raw_domain: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticDraw {
    pub dataset: Dataset,
    pub traces: Vec<SampleTrace>,
}

pub fn generate_synthetic(spec: &SyntheticSpec, n_samples: usize, role: Role) -> Result<Dataset> {
    Ok(generate_synthetic_detailed(spec, n_samples, role)?.dataset)
}

pub fn generate_synthetic_detailed(
    spec: &SyntheticSpec,
    n_samples: usize,
    role: Role,
) -> Result<SyntheticDraw> {
    spec.validate()?;
    let role_tag: u64 = match role {
        Role::Id => 0x1d,
        Role::Ood => 0x00d,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ role_tag);
    let domain_names: Vec<String> = match role {
        Role::Id => (0..spec.n_domains).map(|d| format!("domain{d}")).collect(),
        Role::Ood => vec![format!("domain{}", spec.n_domains)],
    };
    let prefix = match role {
        Role::Id => "id",
        Role::Ood => "ood",
    };

    let mut samples = Vec::with_capacity(n_samples);
    let mut traces = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let (domain_label, raw_domain) = match role {
            Role::Id => {
                let d = rng.random_range(0..spec.n_domains);
                (d, d)
            }
            Role::Ood => (0, spec.n_domains),
        };
        let (own, labels) = draw_labels(spec, &mut rng);
        let aligned = role == Role::Id && rng.random::<f64>() < spec.correlation_strength;
        let tokens: Vec<bool> = if aligned {
            labels.iter().map(|&y| y == 1).collect()
        } else {
            spec.classes.iter().map(|c| rng.random::<f64>() < c.prevalence).collect()
        };
        let (image, motifs) = render(spec, &mut rng, raw_domain, &own, &tokens);
        samples.push(Sample {
            image,
            disease_labels: labels,
            domain_label,
            sample_id: format!("{prefix}-{i:06}"),
        });
        traces.push(SampleTrace {
            tokens,
            motifs,
            raw_domain,
        });
    }
    let dataset = Dataset {
        class_names: spec.class_names(),
        domain_names,
        channels: 1,
        image_size: spec.image_size,
        samples,
    };
    Ok(SyntheticDraw { dataset, traces })
}

/// Returns the classes whose own draw fired (these get motifs) and the final
/// label vector after parent closure and the no-finding rule.
fn draw_labels(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Vec<bool>, Vec<u8>) {
    let n = spec.n_classes();
    let own: Vec<bool> = (0..n)
        .map(|c| {
            let fired = rng.random::<f64>() < spec.classes[c].prevalence;
            fired && Some(c) != spec.no_finding
        })
        .collect();
    let mut labels: Vec<u8> = own.iter().map(|&b| u8::from(b)).collect();
    loop {
        let mut changed = false;
        for &(p, ch) in &spec.parents {
            if labels[ch] == 1 && labels[p] == 0 {
                labels[p] = 1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    if let Some(nf) = spec.no_finding {
        let any = labels.iter().enumerate().any(|(c, &y)| c != nf && y == 1);
        labels[nf] = u8::from(!any);
    } else if !labels.contains(&1) {
        // guarantee non-empty supervision
        let c = rng.random_range(0..n);
        labels[c] = 1;
    }
    (own, labels)
}

fn render(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    raw_domain: usize,
    own: &[bool],
    tokens: &[bool],
) -> (Vec<f32>, Vec<(usize, Vec<usize>)>) {
    let s = spec.image_size;
    let sf = s as f64;
    let noise = Normal::new(0.0, spec.noise_std.max(1e-12)).expect("positive std");
    let (gain, offset) = spec.domain_style(raw_domain);

    let mut img = vec![0.0f64; s * s];
    for y in 0..s {
        for x in 0..s {
            let (fx, fy) = (x as f64 / sf, y as f64 / sf);
            let lung = |cx: f64| ((fx - cx) / 0.17).powi(2) + ((fy - 0.52) / 0.3).powi(2) <= 1.0;
            let base = if lung(0.3) || lung(0.7) { 0.3 } else { 0.45 };
            img[y * s + x] = gain * (base + noise.sample(rng)) + offset;
        }
    }

    let mut motifs = Vec::new();
    for (c, class) in spec.classes.iter().enumerate() {
        let Some(shape) = class.motif.filter(|_| own[c]) else {
            continue;
        };
        let r = spec.causal_signal.radius * sf * rng.random_range(0.85..1.15);
        let margin = 0.2 * sf + r;
        let cx = rng.random_range(margin..sf - margin);
        let cy = rng.random_range(margin..sf - margin);
        let level = rng.random_range(spec.causal_signal.intensity_lo..=spec.causal_signal.intensity_hi);
        let mut pixels = Vec::new();
        for y in 0..s {
            for x in 0..s {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if in_motif(shape, dx, dy, r) {
                    pixels.push(y * s + x);
                }
            }
        }
        for &p in &pixels {
            img[p] = level + noise.sample(rng) * 0.5;
        }
        motifs.push((c, pixels));
    }

    let side = spec.token_side();
    let mut fill = |x0: usize, y0: usize, v: f64| {
        for y in y0..(y0 + side).min(s) {
            for x in x0..(x0 + side).min(s) {
                img[y * s + x] = v;
            }
        }
    };
    // The strip runs along the top or bottom border, inward from the corner.
    let corner = raw_domain % 4;
    let y0 = if corner < 2 { s - side - 1 } else { 1 };
    let from_left = corner == 0 || corner == 3;
    let slot_x = |k: usize| {
        let offset = 1 + k * (side + 1);
        if from_left {
            offset
        } else {
            s - offset - side
        }
    };
    let anchor = spec.spurious_signal.marker_intensity - 0.1 * (raw_domain % 3) as f64;
    fill(slot_x(0), y0, anchor);
    for (c, &on) in tokens.iter().enumerate() {
        if on {
            fill(slot_x(c + 1), y0, spec.spurious_signal.token_intensity);
        }
    }

    let image = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    (image, motifs)
}

fn in_motif(shape: MotifShape, dx: f64, dy: f64, r: f64) -> bool {
    let d2 = dx * dx + dy * dy;
    match shape {
        MotifShape::Disk => d2 <= r * r,
        MotifShape::Ring => d2 <= r * r && d2 >= (0.55 * r).powi(2),
        MotifShape::Bar => dx.abs() <= 1.4 * r && dy.abs() <= 0.35 * r,
        MotifShape::Blob => (dx / (1.3 * r)).powi(2) + (dy / (0.8 * r)).powi(2) <= 1.0,
        MotifShape::Cross => (dx.abs() <= 0.3 * r || dy.abs() <= 0.3 * r) && dx.abs().max(dy.abs()) <= r,
    }
}
