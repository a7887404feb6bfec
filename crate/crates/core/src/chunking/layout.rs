use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::AttnMask;

/// Partition of a latent window into equal chunks of frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkLayout {
    pub frames_per_chunk: usize,
    pub chunks_per_window: usize,
    pub frame_tokens: usize,
}

impl Default for ChunkLayout {
    fn default() -> Self {
        ChunkLayout {
            frames_per_chunk: 3,
            chunks_per_window: 7,
            frame_tokens: 16,
        }
    }
}

impl ChunkLayout {
    pub fn new(frames_per_chunk: usize, chunks_per_window: usize, frame_tokens: usize) -> Result<Self> {
        let l = ChunkLayout {
            frames_per_chunk,
            chunks_per_window,
            frame_tokens,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames_per_chunk == 0 || self.chunks_per_window == 0 || self.frame_tokens == 0 {
            return Err(Error::Configuration(format!(
                "chunk layout fields must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn window_frames(&self) -> usize {
        self.frames_per_chunk * self.chunks_per_window
    }

    pub fn window_tokens(&self) -> usize {
        self.window_frames() * self.frame_tokens
    }

    pub fn chunk_tokens(&self) -> usize {
        self.frames_per_chunk * self.frame_tokens
    }

    pub fn chunk_of_frame(&self, frame: usize) -> usize {
        frame / self.frames_per_chunk
    }

    pub fn chunk_frames(&self, chunk: usize) -> std::ops::Range<usize> {
        chunk * self.frames_per_chunk..(chunk + 1) * self.frames_per_chunk
    }
}

/// Key chunks visible from query chunk `t`: `{0}` for `t = 0`, otherwise
/// `{0, t - 1, t}`.
pub fn allowed_key_chunks(t: i64) -> Result<BTreeSet<usize>> {
    if t < 0 {
        return Err(Error::contract(format!("negative chunk index {t}")));
    }
    let t = t as usize;
    let mut s = BTreeSet::from([0, t]);
    if t > 0 {
        s.insert(t - 1);
    }
    Ok(s)
}

/// Frame offsets beyond this are clamped when choosing a bias bucket.
pub const REL_SPAN: usize = 6;
/// Bucket 0 is the reference chunk; buckets `1..` encode the clamped frame
/// offset `key - query` in `[-REL_SPAN, REL_SPAN]`.
pub const BIAS_BUCKETS: usize = 2 * REL_SPAN + 2;

/// Logit-bias bucket for a query/key frame pair.
///
/// Keys in chunk 0 seen from a later chunk use the reference bucket; all
/// other pairs use their relative frame offset. The bucket depends only on
/// relative position, so it is the same in a full-window pass and in chunked
/// streaming at any stream position.
pub fn bias_bucket(layout: &ChunkLayout, query_frame: usize, key_frame: usize) -> u8 {
    let qc = layout.chunk_of_frame(query_frame);
    let kc = layout.chunk_of_frame(key_frame);
    if kc == 0 && qc != 0 {
        return 0;
    }
    let off = key_frame as i64 - query_frame as i64;
    let clamped = off.clamp(-(REL_SPAN as i64), REL_SPAN as i64);
    (1 + clamped + REL_SPAN as i64) as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternKind {
    /// Bidirectional over the whole window (teacher, fake score).
    Full,
    /// `{c0, c_{t-1}, c_t}` per chunk (student).
    SparseCausal,
}

/// Token-level self-attention pattern for one window.
#[derive(Clone, Debug)]
pub struct AttnPattern {
    pub kind: PatternKind,
    pub layout: ChunkLayout,
    pub mask: Arc<AttnMask>,
}

/// The student's sparse causal pattern. Alias kept for readability at call sites.
pub type SparseCausalMask = AttnPattern;

impl AttnPattern {
    pub fn tokens(&self) -> usize {
        self.mask.lq()
    }

    /// Frame-level predicate of the pattern.
    pub fn frame_allowed(&self, query_frame: usize, key_frame: usize) -> bool {
        let t = self.layout.frame_tokens;
        self.mask.allowed(query_frame * t, key_frame * t)
    }
}

fn window_buckets(layout: &ChunkLayout) -> Vec<u8> {
    let n = layout.window_tokens();
    let t = layout.frame_tokens;
    let f = layout.window_frames();
    let frame_level: Vec<u8> = (0..f * f)
        .map(|p| bias_bucket(layout, p / f, p % f))
        .collect();
    (0..n * n)
        .map(|p| frame_level[(p / n / t) * f + (p % n) / t])
        .collect()
}

/// Sparse causal mask: `mask[q, k]` iff `chunk(k)` is in
/// [`allowed_key_chunks`]`(chunk(q))`.
pub fn build_sparse_mask(layout: &ChunkLayout) -> Result<SparseCausalMask> {
    layout.validate()?;
    let n = layout.window_tokens();
    let chunk_tokens = layout.chunk_tokens();
    let mask = AttnMask::from_fn(n, n, |qi, kj| {
        let qc = qi / chunk_tokens;
        let kc = kj / chunk_tokens;
        kc == 0 || kc == qc || kc + 1 == qc
    })?
    .with_buckets(window_buckets(layout))?;
    Ok(AttnPattern {
        kind: PatternKind::SparseCausal,
        layout: *layout,
        mask: Arc::new(mask),
    })
}

/// Bidirectional mask over the whole window, with the same bias buckets.
pub fn build_full_mask(layout: &ChunkLayout) -> Result<AttnPattern> {
    layout.validate()?;
    let n = layout.window_tokens();
    let mask = AttnMask::full(n, n).with_buckets(window_buckets(layout))?;
    Ok(AttnPattern {
        kind: PatternKind::Full,
        layout: *layout,
        mask: Arc::new(mask),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunks_seen(p: &AttnPattern, query_chunk: usize) -> BTreeSet<usize> {
        let l = p.layout;
        let qf = query_chunk * l.frames_per_chunk;
        (0..l.window_frames())
            .filter(|&kf| p.frame_allowed(qf, kf))
            .map(|kf| l.chunk_of_frame(kf))
            .collect()
    }

    #[test]
    fn attend_sets() {
        let p = build_sparse_mask(&ChunkLayout::default()).unwrap();
        assert_eq!(chunks_seen(&p, 0), BTreeSet::from([0]));
        assert_eq!(chunks_seen(&p, 1), BTreeSet::from([0, 1]));
        assert_eq!(chunks_seen(&p, 4), BTreeSet::from([0, 3, 4]));
    }

    #[test]
    fn allowed_key_chunk_sets() {
        assert_eq!(allowed_key_chunks(0).unwrap(), BTreeSet::from([0]));
        assert_eq!(allowed_key_chunks(1).unwrap(), BTreeSet::from([0, 1]));
        assert_eq!(allowed_key_chunks(6).unwrap(), BTreeSet::from([0, 5, 6]));
        assert!(allowed_key_chunks(-1).is_err());
    }

    #[test]
    fn within_chunk_is_bidirectional() {
        let l = ChunkLayout::default();
        let p = build_sparse_mask(&l).unwrap();
        assert!(p.frame_allowed(9, 11) && p.frame_allowed(11, 9));
        assert!(!p.frame_allowed(8, 9));
    }

    #[test]
    fn buckets_are_translation_invariant() {
        let l = ChunkLayout::default();
        assert_eq!(bias_bucket(&l, 10, 9), bias_bucket(&l, 100, 99));
        assert_eq!(bias_bucket(&l, 10, 1), 0);
        assert_eq!(bias_bucket(&l, 1, 0), (1 + REL_SPAN - 1) as u8);
        assert_eq!(bias_bucket(&l, 20, 3), 1);
        assert!((bias_bucket(&l, 3, 20) as usize) < BIAS_BUCKETS);
    }

    #[test]
    fn full_mask_is_all_true() {
        let p = build_full_mask(&ChunkLayout::default()).unwrap();
        assert!(p.mask.is_full());
        assert_eq!(p.tokens(), 21 * 16);
    }
}
