use crate::chunking::{AttnPattern, ChunkLayout, KVCache, PatternKind};
use crate::error::{Error, Result};
use crate::model::config::Conditioning;
use crate::model::dit::Dit;
use crate::numerics::Tensor;
use crate::schedule::{few_step_generate, ode_sample, window_noise, StudentSchedule};

fn frame_shape(dit: &Dit) -> [usize; 2] {
    [dit.config.frame_tokens, dit.config.latent_dim]
}

/// Few-step generation of a whole window in one pass per step.
pub fn generate_window(
    dit: &Dit,
    cond: &Conditioning,
    pattern: &AttnPattern,
    schedule: &StudentSchedule,
    seed: u64,
) -> Result<Tensor> {
    let frames = cond.frames();
    let fs = frame_shape(dit);
    let noise = window_noise(seed, 0, 0, frames, &fs)?;
    let renoise = (1..schedule.nfe())
        .map(|s| window_noise(seed, s, 0, frames, &fs))
        .collect::<Result<Vec<_>>>()?;
    let f = |x: &Tensor, t: f64| dit.forward_velocity(x, t, cond, pattern);
    few_step_generate(&f, schedule, &noise, &renoise)
}

/// Euler sampling of a whole window (teacher).
pub fn ode_window(dit: &Dit, cond: &Conditioning, pattern: &AttnPattern, steps: usize, seed: u64) -> Result<Tensor> {
    let noise = window_noise(seed, 0, 0, cond.frames(), &frame_shape(dit))?;
    let f = |x: &Tensor, t: f64| dit.forward_velocity(x, t, cond, pattern);
    ode_sample(&f, &noise, steps)
}

/// Chunk-by-chunk few-step generation with a KV cache.
///
/// Produces the same values as [`generate_window`] under the sparse causal
/// pattern, for as many chunks as the conditioning covers.
#[derive(Debug)]
pub struct ChunkGenerator {
    pub layout: ChunkLayout,
    pub schedule: StudentSchedule,
    pub seed: u64,
    cache: KVCache,
    next: usize,
}

impl ChunkGenerator {
    pub fn new(dit: &Dit, layout: ChunkLayout, schedule: StudentSchedule, seed: u64) -> Result<Self> {
        schedule.validate()?;
        layout.validate()?;
        if layout.frame_tokens != dit.config.frame_tokens {
            return Err(Error::Configuration(format!(
                "layout has {} tokens per frame, model {}",
                layout.frame_tokens, dit.config.frame_tokens
            )));
        }
        let cache = KVCache::new(
            dit.config.blocks,
            schedule.nfe(),
            dit.config.heads,
            layout.chunk_tokens(),
            dit.config.head_dim(),
        );
        Ok(ChunkGenerator {
            layout,
            schedule,
            seed,
            cache,
            next: 0,
        })
    }

    pub fn next_chunk_index(&self) -> usize {
        self.next
    }

    pub fn cache(&self) -> &KVCache {
        &self.cache
    }

    /// Generate the next chunk, `[frames_per_chunk, T, latent_dim]`.
    pub fn step(&mut self, dit: &Dit, cond: &Conditioning) -> Result<Tensor> {
        let chunk = self.next;
        let fpc = self.layout.frames_per_chunk;
        let first = chunk * fpc;
        let fs = frame_shape(dit);
        let levels = self.schedule.levels().to_vec();
        let mut x = window_noise(self.seed, 0, first, fpc, &fs)?;
        for (i, &s) in levels.iter().enumerate() {
            let u = dit.forward_chunk(&mut self.cache, &self.layout, chunk, i, &x, 1.0 - s, cond)?;
            let x1 = x.zip_map(&u, |a, b| a + s * b)?;
            match levels.get(i + 1) {
                Some(&next) => {
                    let e = window_noise(self.seed, i + 1, first, fpc, &fs)?;
                    x = x1.zip_map(&e, |a, n| (1.0 - next) * a + next * n)?;
                }
                None => x = x1,
            }
        }
        self.next += 1;
        Ok(x)
    }
}

/// Stream `chunks` chunks and stack them into one latent sequence.
pub fn generate_streaming(
    dit: &Dit,
    cond: &Conditioning,
    layout: &ChunkLayout,
    schedule: &StudentSchedule,
    seed: u64,
    chunks: usize,
) -> Result<Tensor> {
    let mut gen = ChunkGenerator::new(dit, *layout, schedule.clone(), seed)?;
    let parts = (0..chunks)
        .map(|_| gen.step(dit, cond))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_outer(&parts.iter().collect::<Vec<_>>())
}

/// Asserts a pattern is of the expected kind; used where the distillation
/// asymmetry must hold.
pub fn expect_pattern(pattern: &AttnPattern, kind: PatternKind, who: &str) -> Result<()> {
    if pattern.kind != kind {
        return Err(Error::Invariant(format!(
            "{who} must use {kind:?} attention, got {:?}",
            pattern.kind
        )));
    }
    Ok(())
}
