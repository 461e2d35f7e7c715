#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use crocodile::data::synthetic::{MotifShape, SyntheticClass};
use crocodile::data::{generate_synthetic, Dataset, Role, SyntheticSpec};
use crocodile::model::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod criteria;
pub mod gradcheck;

/// 32-pixel images, 4×4 tokens, two decoder layers.
pub fn tiny_model(n_c: usize, n_d: usize) -> ModelConfig {
    ModelConfig {
        image_size: 32,
        channels: 1,
        n_c,
        n_d,
        h: 8,
        backbone_width: vec![4, 8, 8],
        n_heads: 2,
        n_layers: 2,
        drop_prob: 0.3,
    }
}

/// Small synthetic spec matching [`tiny_model`]: two motif classes plus an
/// optional no-finding class.
pub fn tiny_spec(n_domains: usize, with_no_finding: bool, seed: u64) -> SyntheticSpec {
    let class = |name: &str, motif, prevalence| SyntheticClass {
        name: name.to_string(),
        motif,
        prevalence,
    };
    let mut classes = vec![
        class("disk", Some(MotifShape::Disk), 0.45),
        class("ring", Some(MotifShape::Ring), 0.4),
    ];
    if with_no_finding {
        classes.push(class("none", None, 0.3));
    }
    SyntheticSpec {
        n_domains,
        image_size: 32,
        no_finding: with_no_finding.then_some(2),
        parents: Vec::new(),
        classes,
        causal_signal: crocodile::data::synthetic::CausalSignal {
            radius: 0.14,
            ..Default::default()
        },
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn tiny_data(n: usize, n_domains: usize, with_no_finding: bool, seed: u64) -> Dataset {
    generate_synthetic(&tiny_spec(n_domains, with_no_finding, seed), n, Role::Id).expect("valid tiny spec")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(values: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(values, shape, &Device::Cpu).expect("shape matches")
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn host(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}
