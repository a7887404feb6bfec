use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chunking::{
    stream_attend_graph, to_block, AttnPattern, CacheRole, ChunkLayout, EmbeddingKey, KVCache,
    KvBlock, BIAS_BUCKETS,
};
use crate::error::{Error, Result};
use crate::model::config::{Conditioning, Mode, ModelConfig};
use crate::numerics::{AttnMask, Bound, Graph, ParamSet, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Sinusoidal features of `t`, shape `[1, 2 * freqs]`.
pub fn time_features(t: f64, freqs: usize) -> Tensor {
    let mut f = Vec::with_capacity(2 * freqs);
    for k in 0..freqs {
        let w = if freqs == 1 {
            1.0
        } else {
            (100f64.ln() * k as f64 / (freqs - 1) as f64).exp()
        };
        f.push((w * t).sin());
        f.push((w * t).cos());
    }
    Tensor::new(vec![1, 2 * freqs], f).expect("shape matches")
}

/// Audio frames feeding frame `frame_idx`: a window centered on it, clamped
/// at the sequence edges by repeating the boundary frame.
pub fn window_sources(frame_idx: usize, frames: usize, window: usize) -> Vec<usize> {
    let half = (window / 2) as i64;
    (0..window as i64)
        .map(|w| (frame_idx as i64 + w - half).clamp(0, frames as i64 - 1) as usize)
        .collect()
}

/// Concatenated audio tokens of the window around `frame_idx`, `[window * A, audio_dim]`.
pub fn align_audio_window(audio: &Tensor, frame_idx: usize, window: usize) -> Result<Tensor> {
    let s = audio.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("audio must be [frames, A, dim], got {s:?}")));
    }
    if frame_idx >= s[0] {
        return Err(Error::dim(format!("frame {frame_idx} of {}", s[0])));
    }
    let per = s[1] * s[2];
    let mut out = Vec::with_capacity(window * per);
    for f in window_sources(frame_idx, s[0], window) {
        out.extend_from_slice(&audio.data()[f * per..(f + 1) * per]);
    }
    Tensor::new(vec![window * s[1], s[2]], out)
}

/// Where a forward pass gets its self-attention keys from.
pub enum AttnContext<'a> {
    /// One pass over a whole window with an explicit pattern.
    Window(&'a AttnPattern),
    /// One chunk of a stream; earlier chunks come from the cache, and this
    /// chunk's keys and values are written back after use.
    Stream {
        cache: &'a mut KVCache,
        layout: ChunkLayout,
        chunk: usize,
        step: usize,
    },
}

/// The toy diffusion transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dit {
    pub config: ModelConfig,
    pub params: ParamSet,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::randn(shape, std, rng)
}

impl Dit {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Dit> {
        config.validate()?;
        let c = &config;
        let (d, l, m) = (c.model_dim, c.latent_dim, c.mlp_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let r = &mut rng;
        p.insert("stem.in.w", normal(r, &[l, d], fan(l)))?;
        p.insert("stem.in.b", Tensor::zeros(&[d]))?;
        p.insert("stem.pos", normal(r, &[c.frame_tokens, d], 0.1))?;
        p.insert("stem.ref.w", normal(r, &[l, d], fan(l)))?;
        p.insert("time.w1", normal(r, &[2 * c.time_freqs, d], fan(2 * c.time_freqs)))?;
        p.insert("time.b1", Tensor::zeros(&[d]))?;
        p.insert("time.w2", normal(r, &[d, d], fan(d)))?;
        p.insert("time.b2", Tensor::zeros(&[d]))?;
        p.insert("style", Tensor::zeros(&[d]))?;
        p.insert("audio.w1", normal(r, &[c.audio_dim, d], fan(c.audio_dim)))?;
        p.insert("audio.b1", Tensor::zeros(&[d]))?;
        p.insert("audio.w2", normal(r, &[d, d], fan(d)))?;
        p.insert("audio.b2", Tensor::zeros(&[d]))?;
        let w3 = normal(r, &[d, d], fan(d));
        p.insert(
            "audio.w3",
            if c.zero_init_audio_out { Tensor::zeros(&[d, d]) } else { w3 },
        )?;
        p.insert("audio.b3", Tensor::zeros(&[d]))?;
        p.insert("audio.silence", Tensor::zeros(&[c.audio_tokens_per_frame, d]))?;
        p.insert("audio.slot", normal(r, &[c.window_tokens(), d], 0.1))?;
        let out_scale = fan(d) / (2.0 * c.blocks as f64).sqrt();
        for b in 0..c.blocks {
            let k = |s: &str| format!("blk{b}.{s}");
            for ln in ["ln1", "ln2", "ln3"] {
                p.insert(k(&format!("{ln}.g")), Tensor::full(&[d], 1.0))?;
                p.insert(k(&format!("{ln}.b")), Tensor::zeros(&[d]))?;
            }
            for md in ["mod1", "mod2", "mod3"] {
                p.insert(k(md), normal(r, &[d, d], 0.5 * fan(d)))?;
            }
            for w in ["wq", "wk", "wv"] {
                p.insert(k(&format!("attn.{w}")), normal(r, &[d, d], fan(d)))?;
            }
            p.insert(k("attn.wo"), normal(r, &[d, d], out_scale))?;
            p.insert(k("attn.bias"), Tensor::zeros(&[c.heads, BIAS_BUCKETS]))?;
            for w in ["wq", "wk", "wv"] {
                p.insert(k(&format!("xattn.{w}")), normal(r, &[d, d], fan(d)))?;
            }
            p.insert(k("xattn.wo"), normal(r, &[d, d], out_scale))?;
            p.insert(k("mlp.w1"), normal(r, &[d, m], fan(d)))?;
            p.insert(k("mlp.b1"), Tensor::zeros(&[m]))?;
            p.insert(k("mlp.w2"), normal(r, &[m, d], fan(m) / (2.0 * c.blocks as f64).sqrt()))?;
            p.insert(k("mlp.b2"), Tensor::zeros(&[d]))?;
        }
        p.insert("final.ln.g", Tensor::full(&[d], 1.0))?;
        p.insert("final.ln.b", Tensor::zeros(&[d]))?;
        p.insert("final.mod", normal(r, &[d, d], 0.5 * fan(d)))?;
        p.insert("final.out.w", normal(r, &[d, l], fan(d)))?;
        p.insert("final.out.b", Tensor::zeros(&[l]))?;
        Ok(Dit { config, params: p })
    }

    /// Wrap existing parameters, checking them against the config.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Dit> {
        let fresh = Dit::init(config.clone(), 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Format(format!(
                "{} parameters, config expects {}",
                params.len(),
                fresh.params.len()
            )));
        }
        for (name, t) in fresh.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Format(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` is {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Dit { config, params })
    }

    /// Velocity for a whole window without gradient tracking.
    pub fn forward_velocity(
        &self,
        x_t: &Tensor,
        t: f64,
        cond: &Conditioning,
        pattern: &AttnPattern,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params)?;
        let x = g.constant(x_t.clone())?;
        let v = velocity_graph(&mut g, &p, &self.config, x, t, cond, &mut AttnContext::Window(pattern))?;
        Ok(g.value(v).clone())
    }

    /// Velocity for chunk `chunk` of a stream at denoise step `step`.
    ///
    /// `x_chunk` is `[frames_per_chunk, frame_tokens, latent_dim]`; the audio
    /// and mode flags in `cond` are indexed by absolute stream frame.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_chunk(
        &self,
        cache: &mut KVCache,
        layout: &ChunkLayout,
        chunk: usize,
        step: usize,
        x_chunk: &Tensor,
        t: f64,
        cond: &Conditioning,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params)?;
        let x = g.constant(x_chunk.clone())?;
        let mut ctx = AttnContext::Stream {
            cache,
            layout: *layout,
            chunk,
            step,
        };
        let v = velocity_graph(&mut g, &p, &self.config, x, t, cond, &mut ctx)?;
        Ok(g.value(v).clone())
    }

    /// Projected audio tokens, `[frames, A, model_dim]`, with Silence frames
    /// replaced by the silence embedding.
    pub fn project_audio(&self, raw_audio: &Tensor, modes: &[Mode]) -> Result<Tensor> {
        let s = raw_audio.shape().to_vec();
        if s.len() != 3 || s[1] != self.config.audio_tokens_per_frame || s[2] != self.config.audio_dim {
            return Err(Error::dim(format!("raw audio {s:?}")));
        }
        if modes.len() != s[0] {
            return Err(Error::Conditioning(format!(
                "{} mode flags for {} frames",
                modes.len(),
                s[0]
            )));
        }
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params)?;
        let frames: Vec<usize> = (0..s[0]).collect();
        let src: Vec<Vec<usize>> = frames.iter().map(|&f| vec![f]).collect();
        let tok = gather_audio(&mut g, &p, &self.config, raw_audio, modes, &src)?;
        let out = g.value(tok).clone();
        out.reshape(&[s[0], s[1], self.config.model_dim])
    }

    /// Audio cross-attention of block `block` applied to one frame's tokens.
    ///
    /// `aligned_audio` is `[window * A, model_dim]` (already projected).
    /// Rows where `face_query_mask` is false are returned unchanged.
    pub fn audio_cross_attention(
        &self,
        block: usize,
        frame_tokens: &Tensor,
        aligned_audio: &Tensor,
        face_query_mask: &[bool],
    ) -> Result<Tensor> {
        let face: Vec<usize> = face_query_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        if face.is_empty() {
            return Err(Error::Configuration("face query mask selects no tokens".into()));
        }
        if face_query_mask.len() != frame_tokens.shape()[0] {
            return Err(Error::dim(format!(
                "face mask of {} for {:?}",
                face_query_mask.len(),
                frame_tokens.shape()
            )));
        }
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params)?;
        let h = g.constant(frame_tokens.clone())?;
        let a = g.constant(aligned_audio.clone())?;
        let idx: Arc<[usize]> = face.into();
        let out = cross_attend(&mut g, &p, &self.config, block, h, h, a, &idx, 1)?;
        Ok(g.value(out).clone())
    }
}

fn face_rows(cfg: &ModelConfig, frames: usize) -> Arc<[usize]> {
    (0..frames)
        .flat_map(|f| cfg.face_token_ids.iter().map(move |&i| f * cfg.frame_tokens + i))
        .collect()
}

/// Projected, silence-substituted audio tokens for a list of source-frame
/// groups, `[sum(len) * A, d]` in group order.
///
/// Only frames that are referenced and Speaking go through the projection
/// MLP; the MLP is per token, so results do not depend on which other frames
/// were projected alongside.
fn gather_audio(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    audio: &Tensor,
    modes: &[Mode],
    groups: &[Vec<usize>],
) -> Result<Var> {
    let a = cfg.audio_tokens_per_frame;
    let per = a * cfg.audio_dim;
    let needed: BTreeSet<usize> = groups
        .iter()
        .flatten()
        .copied()
        .filter(|&f| modes[f] == Mode::Speaking)
        .collect();
    let slot_of: std::collections::BTreeMap<usize, usize> =
        needed.iter().enumerate().map(|(i, &f)| (f, i)).collect();
    let silence = p.get("audio.silence")?;
    let table = if needed.is_empty() {
        silence
    } else {
        let mut raw = Vec::with_capacity(needed.len() * per);
        for &f in &needed {
            raw.extend_from_slice(&audio.data()[f * per..(f + 1) * per]);
        }
        let x = g.constant(Tensor::new(vec![needed.len() * a, cfg.audio_dim], raw)?)?;
        let h = g.linear(x, p.get("audio.w1")?, Some(p.get("audio.b1")?))?;
        let h = g.silu(h)?;
        let h = g.linear(h, p.get("audio.w2")?, Some(p.get("audio.b2")?))?;
        let h = g.silu(h)?;
        let h = g.linear(h, p.get("audio.w3")?, Some(p.get("audio.b3")?))?;
        g.concat_rows(&[h, silence])?
    };
    let sil_base = needed.len() * a;
    let idx: Arc<[usize]> = groups
        .iter()
        .flatten()
        .flat_map(|&f| {
            let base = slot_of.get(&f).map(|s| s * a).unwrap_or(sil_base);
            (0..a).map(move |k| base + k)
        })
        .collect();
    g.select_rows(table, &idx)
}

/// `silu(time_mlp(t) + style + cond.style)`, `[1, d]`.
fn conditioning_vector(g: &mut Graph, p: &Bound, cfg: &ModelConfig, t: f64, style: &Tensor) -> Result<Var> {
    let f = g.constant(time_features(t, cfg.time_freqs))?;
    let h = g.linear(f, p.get("time.w1")?, Some(p.get("time.b1")?))?;
    let h = g.silu(h)?;
    let h = g.linear(h, p.get("time.w2")?, Some(p.get("time.b2")?))?;
    let h = g.add_row(h, p.get("style")?)?;
    let h = g.add_const(h, &style.clone().reshape(&[1, cfg.model_dim])?)?;
    g.silu(h)
}

fn shift(g: &mut Graph, c: Var, w: Var, d: usize) -> Result<Var> {
    let s = g.matmul(c, w)?;
    g.reshape(s, &[d])
}

fn modulated_norm(g: &mut Graph, p: &Bound, prefix: &str, h: Var, c: Var, d: usize) -> Result<Var> {
    let n = g.layer_norm(
        h,
        p.get(&format!("{prefix}.g"))?,
        p.get(&format!("{prefix}.b"))?,
        LN_EPS,
    )?;
    let s = shift(g, c, p.get(&prefix.replace(".ln", ".mod"))?, d)?;
    g.add_row(n, s)
}

/// Face-token residual update from audio. `h` and `q_src` are
/// `[frames * T, d]`, `audio` is `[frames * window * A, d]`.
#[allow(clippy::too_many_arguments)]
fn cross_attend(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    block: usize,
    h: Var,
    q_src: Var,
    audio: Var,
    face: &Arc<[usize]>,
    frames: usize,
) -> Result<Var> {
    let k = |s: &str| format!("blk{block}.xattn.{s}");
    let qr = g.select_rows(q_src, face)?;
    let q = g.matmul(qr, p.get(&k("wq"))?)?;
    let kk = g.matmul(audio, p.get(&k("wk"))?)?;
    let vv = g.matmul(audio, p.get(&k("wv"))?)?;
    let q = g.split_heads(q, frames, cfg.heads)?;
    let kk = g.split_heads(kk, frames, cfg.heads)?;
    let vv = g.split_heads(vv, frames, cfg.heads)?;
    let lq = face.len() / frames;
    let lk = g.shape(audio)[0] / frames;
    let mask = Arc::new(AttnMask::full(lq, lk));
    let o = g.masked_attention(q, kk, vv, &mask, None)?;
    let o = g.merge_heads(o)?;
    let o = g.matmul(o, p.get(&k("wo"))?)?;
    g.index_add_rows(h, face, o)
}

/// The velocity network on a graph. `x` is `[frames, T, latent_dim]`.
pub fn velocity_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    x: Var,
    t: f64,
    cond: &Conditioning,
    ctx: &mut AttnContext<'_>,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("timestep {t} outside [0, 1]")));
    }
    cond.validate(cfg)?;
    let xs = g.shape(x).to_vec();
    if xs.len() != 3 || xs[1] != cfg.frame_tokens || xs[2] != cfg.latent_dim {
        return Err(Error::dim(format!(
            "latent {xs:?}, expected [frames, {}, {}]",
            cfg.frame_tokens, cfg.latent_dim
        )));
    }
    let frames = xs[0];
    let n = frames * cfg.frame_tokens;
    let d = cfg.model_dim;
    let first_frame = match ctx {
        AttnContext::Window(pattern) => {
            if pattern.tokens() != n {
                return Err(Error::dim(format!(
                    "attention pattern over {} tokens for {n} latent tokens",
                    pattern.tokens()
                )));
            }
            if cond.frames() != frames {
                return Err(Error::Conditioning(format!(
                    "{} conditioning frames for {frames} latent frames",
                    cond.frames()
                )));
            }
            0
        }
        AttnContext::Stream { layout, chunk, .. } => {
            if frames != layout.frames_per_chunk || layout.frame_tokens != cfg.frame_tokens {
                return Err(Error::dim(format!(
                    "chunk of {frames} frames for layout {layout:?}"
                )));
            }
            let first = *chunk * layout.frames_per_chunk;
            if first + frames > cond.frames() {
                return Err(Error::Conditioning(format!(
                    "chunk {chunk} needs frames up to {}, conditioning has {}",
                    first + frames,
                    cond.frames()
                )));
            }
            first
        }
    };

    // Step and reference embeddings: cached per stream, recomputed per window.
    let (c, ref_emb) = match ctx {
        AttnContext::Window(_) => {
            let c = conditioning_vector(g, p, cfg, t, &cond.style)?;
            let r = g.constant(cond.reference_frame.clone())?;
            let r = g.matmul(r, p.get("stem.ref.w")?)?;
            (c, r)
        }
        AttnContext::Stream { cache, step, .. } => {
            let step = *step;
            let ct = if let Some(t) = cache.embedding(&EmbeddingKey::Step(step)) {
                t.clone()
            } else {
                let c = conditioning_vector(g, p, cfg, t, &cond.style)?;
                let v = g.value(c).clone();
                cache.put_embedding(EmbeddingKey::Step(step), v.clone())?;
                v
            };
            let rt = if let Some(t) = cache.embedding(&EmbeddingKey::Reference) {
                t.clone()
            } else {
                let r = g.constant(cond.reference_frame.clone())?;
                let r = g.matmul(r, p.get("stem.ref.w")?)?;
                let v = g.value(r).clone();
                cache.put_embedding(EmbeddingKey::Reference, v.clone())?;
                v
            };
            (g.constant(ct)?, g.constant(rt)?)
        }
    };

    let flat = g.reshape(x, &[n, cfg.latent_dim])?;
    let h = g.linear(flat, p.get("stem.in.w")?, Some(p.get("stem.in.b")?))?;
    let h = g.add_tiled(h, p.get("stem.pos")?)?;
    let mut h = g.add_tiled(h, ref_emb)?;

    let groups: Vec<Vec<usize>> = (first_frame..first_frame + frames)
        .map(|f| window_sources(f, cond.frames(), cfg.window_frames))
        .collect();
    let audio = gather_audio(g, p, cfg, &cond.audio, &cond.modes, &groups)?;
    let audio = g.add_tiled(audio, p.get("audio.slot")?)?;
    let face = face_rows(cfg, frames);

    for b in 0..cfg.blocks {
        let k = |s: &str| format!("blk{b}.{s}");
        let a_in = modulated_norm(g, p, &k("ln1"), h, c, d)?;
        let q = g.matmul(a_in, p.get(&k("attn.wq"))?)?;
        let kk = g.matmul(a_in, p.get(&k("attn.wk"))?)?;
        let vv = g.matmul(a_in, p.get(&k("attn.wv"))?)?;
        let q = g.split_heads(q, 1, cfg.heads)?;
        let kk = g.split_heads(kk, 1, cfg.heads)?;
        let vv = g.split_heads(vv, 1, cfg.heads)?;
        let bias = p.get(&k("attn.bias"))?;
        let o = match ctx {
            AttnContext::Window(pattern) => g.masked_attention(q, kk, vv, &pattern.mask, Some(bias))?,
            AttnContext::Stream {
                cache,
                layout,
                chunk,
                step,
            } => {
                let o = stream_attend_graph(g, cache, layout, *chunk, b, *step, q, kk, vv, Some(bias))?;
                let role = if *chunk == 0 { CacheRole::Reference } else { CacheRole::Previous };
                let block = KvBlock {
                    chunk: *chunk,
                    k: to_block(g.value(kk))?,
                    v: to_block(g.value(vv))?,
                };
                cache.put(b, *step, role, block)?;
                o
            }
        };
        let o = g.merge_heads(o)?;
        let o = g.matmul(o, p.get(&k("attn.wo"))?)?;
        h = g.add(h, o)?;

        let x_in = modulated_norm(g, p, &k("ln2"), h, c, d)?;
        h = cross_attend(g, p, cfg, b, h, x_in, audio, &face, frames)?;

        let m_in = modulated_norm(g, p, &k("ln3"), h, c, d)?;
        let m = g.linear(m_in, p.get(&k("mlp.w1"))?, Some(p.get(&k("mlp.b1"))?))?;
        let m = g.silu(m)?;
        let m = g.linear(m, p.get(&k("mlp.w2"))?, Some(p.get(&k("mlp.b2"))?))?;
        h = g.add(h, m)?;
    }

    let f = g.layer_norm(h, p.get("final.ln.g")?, p.get("final.ln.b")?, LN_EPS)?;
    let s = shift(g, c, p.get("final.mod")?, d)?;
    let f = g.add_row(f, s)?;
    let out = g.linear(f, p.get("final.out.w")?, Some(p.get("final.out.b")?))?;
    g.reshape(out, &[frames, cfg.frame_tokens, cfg.latent_dim])
}
