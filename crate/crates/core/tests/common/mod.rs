#![allow(dead_code)]

use flowfm_core::data::{normalize, synthesize, SignalBatch, SynthSpec};
use flowfm_core::model::{perturb, EncoderConfig, ModelBundle, VelocityNetConfig};
use flowfm_core::persist::RunConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        patch_size: 30,
        embed_dim: 16,
        depth: 1,
        heads: 2,
        rep_dim: 8,
        mlp_ratio: 2.0,
    }
}

pub fn tiny_velocity() -> VelocityNetConfig {
    VelocityNetConfig {
        patch_size: 30,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
    }
}

/// A tiny bundle with every parameter moved off its initial value, so that
/// zero-initialized heads no longer hide the other paths.
pub fn live_bundle(seed: u64) -> ModelBundle {
    let mut r = rng(seed);
    let mut b = ModelBundle::new(&tiny_encoder(), &tiny_velocity(), &mut r).unwrap();
    perturb(&mut b.encoder_params, 0.3, &mut r);
    perturb(&mut b.velocity_params, 0.3, &mut r);
    b
}

pub fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        num_classes: 3,
        subjects_per_class: 2,
        windows_per_subject: 4,
        base_freqs: vec![1.0, 1.7, 2.5],
        noise_std: 0.1,
        seed,
    }
}

pub fn small_data(seed: u64) -> SignalBatch {
    normalize(&synthesize(&small_spec(seed)).unwrap()).unwrap().0
}

/// Fast configuration for workflow tests.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth = small_spec(7);
    cfg.encoder = tiny_encoder();
    cfg.velocity = tiny_velocity();
    cfg.train_steps = 6;
    cfg.batch_size = 4;
    cfg.probe_epochs = 20;
    cfg.finetune_epochs = 1;
    cfg.finetune_batch_size = 4;
    cfg.text_steps = 3;
    cfg.diffusion_steps = 50;
    cfg
}
