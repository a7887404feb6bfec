use serde::{Deserialize, Serialize};

use crate::chunking::BIAS_BUCKETS;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frame_tokens: usize,
    pub latent_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_dim: usize,
    pub audio_dim: usize,
    pub audio_tokens_per_frame: usize,
    pub window_frames: usize,
    pub face_token_ids: Vec<usize>,
    /// Sinusoid frequencies for the timestep embedding (features = 2x this).
    pub time_freqs: usize,
    /// Start the audio projection's last layer at zero.
    pub zero_init_audio_out: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frame_tokens: 16,
            latent_dim: 16,
            model_dim: 32,
            heads: 2,
            blocks: 2,
            mlp_dim: 64,
            audio_dim: 8,
            audio_tokens_per_frame: 2,
            window_frames: 5,
            face_token_ids: vec![5, 6, 9, 10, 13, 14],
            time_freqs: 8,
            zero_init_audio_out: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        let positive = [
            self.frame_tokens,
            self.latent_dim,
            self.model_dim,
            self.heads,
            self.blocks,
            self.mlp_dim,
            self.audio_dim,
            self.audio_tokens_per_frame,
            self.window_frames,
            self.time_freqs,
        ];
        if positive.contains(&0) {
            return bad(format!("model sizes must be positive: {self:?}"));
        }
        if self.model_dim % self.heads != 0 {
            return bad(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.window_frames % 2 == 0 {
            return bad(format!("window_frames {} must be odd", self.window_frames));
        }
        if self.face_token_ids.is_empty() {
            return bad("face_token_ids is empty".into());
        }
        if let Some(&i) = self.face_token_ids.iter().find(|&&i| i >= self.frame_tokens) {
            return bad(format!("face token {i} outside frame of {}", self.frame_tokens));
        }
        let mut ids = self.face_token_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.face_token_ids.len() {
            return bad("face_token_ids has duplicates".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn window_tokens(&self) -> usize {
        self.window_frames * self.audio_tokens_per_frame
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, l, m) = (self.model_dim, self.latent_dim, self.mlp_dim);
        let stem = l * d + d + self.frame_tokens * d + l * d;
        let time = 2 * self.time_freqs * d + d + d * d + d + d;
        let audio = self.audio_dim * d + d + 2 * (d * d + d)
            + self.audio_tokens_per_frame * d
            + self.window_tokens() * d;
        let block = 3 * 2 * d + 3 * d * d + 4 * d * d + self.heads * BIAS_BUCKETS + 4 * d * d
            + d * m + m + m * d + d;
        let head = 2 * d + d * d + d * l + l;
        stem + time + audio + self.blocks * block + head
    }

    /// Face-region mask over one frame's tokens.
    pub fn face_query_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.frame_tokens];
        for &i in &self.face_token_ids {
            m[i] = true;
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Speaking,
    Silence,
}

/// Everything a forward pass is conditioned on besides the noisy latent and t.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// `[model_dim]`.
    pub style: Tensor,
    /// Clean latent of the first frame, `[frame_tokens, latent_dim]`.
    pub reference_frame: Tensor,
    /// `[frames, audio_tokens_per_frame, audio_dim]`.
    pub audio: Tensor,
    pub modes: Vec<Mode>,
}

impl Conditioning {
    pub fn frames(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.style.shape() != [cfg.model_dim] {
            return Err(Error::Conditioning(format!(
                "style {:?}, expected [{}]",
                self.style.shape(),
                cfg.model_dim
            )));
        }
        if self.reference_frame.shape() != [cfg.frame_tokens, cfg.latent_dim] {
            return Err(Error::Conditioning(format!(
                "reference frame {:?}, expected [{}, {}]",
                self.reference_frame.shape(),
                cfg.frame_tokens,
                cfg.latent_dim
            )));
        }
        let a = self.audio.shape();
        if a.len() != 3 || a[1] != cfg.audio_tokens_per_frame || a[2] != cfg.audio_dim {
            return Err(Error::Conditioning(format!(
                "audio {a:?}, expected [frames, {}, {}]",
                cfg.audio_tokens_per_frame, cfg.audio_dim
            )));
        }
        if self.modes.len() != a[0] {
            return Err(Error::Conditioning(format!(
                "{} mode flags for {} audio frames",
                self.modes.len(),
                a[0]
            )));
        }
        Ok(())
    }
}
