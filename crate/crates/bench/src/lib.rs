//! Shared fixtures for the benchmarks.

use chunkstream::chunking::ChunkLayout;
use chunkstream::model::{Conditioning, Dit, Mode, ModelConfig};
use chunkstream::numerics::Tensor;
use chunkstream::schedule::gaussian;

/// Default-sized model with fixed weights.
pub fn model(model_dim: usize) -> Dit {
    let cfg = ModelConfig {
        model_dim,
        mlp_dim: 2 * model_dim,
        ..ModelConfig::default()
    };
    Dit::init(cfg, 1).expect("valid config")
}

/// Conditioning covering `frames` frames, all Speaking.
pub fn conditioning(dit: &Dit, frames: usize) -> Conditioning {
    let c = &dit.config;
    Conditioning {
        style: Tensor::zeros(&[c.model_dim]),
        reference_frame: gaussian(&[c.frame_tokens, c.latent_dim], 2),
        audio: gaussian(&[frames, c.audio_tokens_per_frame, c.audio_dim], 3),
        modes: vec![Mode::Speaking; frames],
    }
}

pub fn window(layout: &ChunkLayout, dit: &Dit) -> Tensor {
    gaussian(&[layout.window_frames(), dit.config.frame_tokens, dit.config.latent_dim], 4)
}
