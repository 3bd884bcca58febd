//! Shared fixtures for the benchmarks under `benches/`.

use port_core::autodiff::ParamStore;
use port_core::data::{
    generate_synthetic, prepare_all, Batch, HashEmbedder, PreparedSample, Sample, SyntheticConfig,
};
use port_core::model::{ModelConfig, PortModel};

pub const VIDEO_DIM: usize = 128;
pub const QUERY_DIM: usize = 64;

pub fn samples(n: usize, len: usize) -> Vec<PreparedSample> {
    let syn = SyntheticConfig {
        num_samples: n,
        video_dim: VIDEO_DIM,
        query_dim: QUERY_DIM,
        seed: 1,
        ..SyntheticConfig::default()
    };
    let emb = HashEmbedder::new(QUERY_DIM);
    let raw: Vec<Sample> = generate_synthetic(&syn)
        .expect("valid synthetic config")
        .into_iter()
        .map(|s| Sample::from_synthetic(s, &emb))
        .collect();
    prepare_all(&raw, len).expect("non-empty videos")
}

pub fn model(len: usize, d: usize) -> (PortModel, ParamStore<f32>) {
    let cfg = ModelConfig {
        video_dim: VIDEO_DIM,
        query_dim: QUERY_DIM,
        d,
        len,
        ..ModelConfig::default()
    };
    PortModel::init(&cfg, 0).expect("valid model config")
}

pub fn batch(samples: &[PreparedSample]) -> Batch<f32> {
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    Batch::new(&refs).expect("non-empty batch")
}
