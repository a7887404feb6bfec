use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chunking::layout::{bias_bucket, ChunkLayout};
use crate::error::{Error, Result};
use crate::numerics::{AttnMask, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CacheRole {
    Reference,
    Previous,
}

/// Cached keys and values of one chunk at one layer and denoise step.
#[derive(Clone, Debug, PartialEq)]
pub struct KvBlock {
    pub chunk: usize,
    pub k: Tensor,
    pub v: Tensor,
}

/// Key for the embedding cache.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EmbeddingKey {
    /// Timestep plus style conditioning vector for a denoise step.
    Step(usize),
    /// Reference-frame token embedding.
    Reference,
    Other(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub kv_bytes: usize,
    pub embedding_bytes: usize,
    pub blocks: usize,
    pub puts: u64,
    pub evictions: u64,
    pub hits: u64,
}

/// Per-stream cache of K/V blocks for the reference chunk and the previous
/// chunk, one pair per (layer, denoise step), plus step embeddings.
///
/// Blocks have a fixed shape `[heads, chunk_tokens, head_dim]`, so resident
/// memory is bounded by [`KVCache::capacity_bytes`] whatever the stream length.
#[derive(Clone, Debug)]
pub struct KVCache {
    layers: usize,
    steps: usize,
    heads: usize,
    chunk_tokens: usize,
    head_dim: usize,
    blocks: BTreeMap<(usize, usize, CacheRole), KvBlock>,
    embeddings: BTreeMap<EmbeddingKey, Tensor>,
    puts: u64,
    evictions: u64,
    hits: u64,
}

impl KVCache {
    pub fn new(layers: usize, steps: usize, heads: usize, chunk_tokens: usize, head_dim: usize) -> Self {
        KVCache {
            layers,
            steps,
            heads,
            chunk_tokens,
            head_dim,
            blocks: BTreeMap::new(),
            embeddings: BTreeMap::new(),
            puts: 0,
            evictions: 0,
            hits: 0,
        }
    }

    pub fn block_shape(&self) -> [usize; 3] {
        [self.heads, self.chunk_tokens, self.head_dim]
    }

    /// Bytes held by K/V blocks once both roles are resident everywhere:
    /// `layers * steps * 2 roles * 2 (K, V) * heads * chunk_tokens * head_dim * 8`.
    pub fn capacity_bytes(&self) -> usize {
        self.layers * self.steps * 2 * 2 * self.heads * self.chunk_tokens * self.head_dim * 8
    }

    fn check_slot(&self, layer: usize, step: usize) -> Result<()> {
        if layer >= self.layers || step >= self.steps {
            return Err(Error::contract(format!(
                "cache slot (layer {layer}, step {step}) outside {}x{}",
                self.layers, self.steps
            )));
        }
        Ok(())
    }

    /// Store a block. `Previous` replaces the resident previous block;
    /// `Reference` can be written once per (layer, step).
    pub fn put(&mut self, layer: usize, step: usize, role: CacheRole, block: KvBlock) -> Result<()> {
        self.check_slot(layer, step)?;
        let want = self.block_shape();
        if block.k.shape() != want || block.v.shape() != want {
            return Err(Error::dim(format!(
                "cache block k {:?} v {:?}, expected {want:?}",
                block.k.shape(),
                block.v.shape()
            )));
        }
        let key = (layer, step, role);
        match role {
            CacheRole::Reference if self.blocks.contains_key(&key) => {
                return Err(Error::contract(format!(
                    "reference block for layer {layer} step {step} is already written"
                )));
            }
            CacheRole::Previous => {
                if let Some(old) = self.blocks.get(&key) {
                    if block.chunk <= old.chunk {
                        return Err(Error::StreamingOrder(format!(
                            "previous block for chunk {} after chunk {}",
                            block.chunk, old.chunk
                        )));
                    }
                    self.evictions += 1;
                }
            }
            CacheRole::Reference => {}
        }
        self.blocks.insert(key, block);
        self.puts += 1;
        Ok(())
    }

    pub fn get(&mut self, layer: usize, step: usize, role: CacheRole) -> Result<&KvBlock> {
        self.check_slot(layer, step)?;
        match self.blocks.get(&(layer, step, role)) {
            Some(b) => {
                self.hits += 1;
                Ok(b)
            }
            None => Err(Error::StreamingOrder(format!(
                "no {role:?} block for layer {layer} step {step}"
            ))),
        }
    }

    pub fn peek(&self, layer: usize, step: usize, role: CacheRole) -> Option<&KvBlock> {
        self.blocks.get(&(layer, step, role))
    }

    /// Cached embedding for `key`, computing it on first use. Entries are
    /// never replaced.
    pub fn embedding_or_insert(
        &mut self,
        key: EmbeddingKey,
        make: impl FnOnce() -> Result<Tensor>,
    ) -> Result<&Tensor> {
        if !self.embeddings.contains_key(&key) {
            let t = make()?;
            self.embeddings.insert(key.clone(), t);
        } else {
            self.hits += 1;
        }
        Ok(&self.embeddings[&key])
    }

    pub fn embedding(&self, key: &EmbeddingKey) -> Option<&Tensor> {
        self.embeddings.get(key)
    }

    /// Write an embedding; a second write to the same key is a contract error.
    pub fn put_embedding(&mut self, key: EmbeddingKey, t: Tensor) -> Result<()> {
        if self.embeddings.contains_key(&key) {
            return Err(Error::contract(format!("embedding {key:?} is already cached")));
        }
        self.embeddings.insert(key, t);
        Ok(())
    }

    pub fn kv_bytes(&self) -> usize {
        self.blocks.values().map(|b| (b.k.len() + b.v.len()) * 8).sum()
    }

    pub fn embedding_bytes(&self) -> usize {
        self.embeddings.values().map(|t| t.len() * 8).sum()
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            kv_bytes: self.kv_bytes(),
            embedding_bytes: self.embedding_bytes(),
            blocks: self.blocks.len(),
            puts: self.puts,
            evictions: self.evictions,
            hits: self.hits,
        }
    }
}

/// Insert a `[H, L, D]` block into the graph as a `[1, H, L, D]` constant.
fn block_var(g: &mut Graph, t: &Tensor) -> Result<Var> {
    let s = t.shape();
    g.constant(t.clone().reshape(&[1, s[0], s[1], s[2]])?)
}

/// Attention mask for query chunk `chunk` against its streamed key context.
///
/// Keys are laid out `[reference | previous | current]` (chunk 1 has no
/// separate previous block, chunk 0 sees only itself). All pairs are
/// permitted; the bias buckets match [`build_sparse_mask`] at the same frames.
///
/// [`build_sparse_mask`]: crate::chunking::build_sparse_mask
pub fn stream_mask(layout: &ChunkLayout, chunk: usize) -> Result<AttnMask> {
    let ct = layout.chunk_tokens();
    let t = layout.frame_tokens;
    let fpc = layout.frames_per_chunk;
    let key_chunks: Vec<usize> = match chunk {
        0 => vec![0],
        1 => vec![0, 1],
        c => vec![0, c - 1, c],
    };
    let lk = key_chunks.len() * ct;
    let q0 = chunk * fpc;
    let buckets = (0..ct * lk)
        .map(|p| {
            let (qi, kj) = (p / lk, p % lk);
            let kc = key_chunks[kj / ct];
            let kf = kc * fpc + (kj % ct) / t;
            bias_bucket(layout, q0 + qi / t, kf)
        })
        .collect();
    AttnMask::full(ct, lk).with_buckets(buckets)
}

/// Attention of the current chunk's queries over `[reference | previous | current]`.
///
/// `q`, `k_cur`, `v_cur` are `[1, H, chunk_tokens, D]` graph values; the
/// cached blocks enter as constants. The result equals the rows of a
/// full-window sparse-masked attention belonging to `chunk`.
#[allow(clippy::too_many_arguments)]
pub fn stream_attend_graph(
    g: &mut Graph,
    cache: &mut KVCache,
    layout: &ChunkLayout,
    chunk: usize,
    layer: usize,
    step: usize,
    q: Var,
    k_cur: Var,
    v_cur: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let mut ks = Vec::with_capacity(3);
    let mut vs = Vec::with_capacity(3);
    if chunk >= 1 {
        let r = cache.get(layer, step, CacheRole::Reference)?.clone();
        ks.push(block_var(g, &r.k)?);
        vs.push(block_var(g, &r.v)?);
    }
    if chunk >= 2 {
        let p = cache.get(layer, step, CacheRole::Previous)?.clone();
        if p.chunk + 1 != chunk {
            return Err(Error::StreamingOrder(format!(
                "chunk {chunk} found previous block of chunk {}",
                p.chunk
            )));
        }
        ks.push(block_var(g, &p.k)?);
        vs.push(block_var(g, &p.v)?);
    }
    ks.push(k_cur);
    vs.push(v_cur);
    let k = g.concat(&ks, 2)?;
    let v = g.concat(&vs, 2)?;
    let mask = Arc::new(stream_mask(layout, chunk)?);
    g.masked_attention(q, k, v, &mask, bias)
}

/// Tensor-level [`stream_attend_graph`] without a bias table.
pub fn stream_attend(
    q: &Tensor,
    cache: &mut KVCache,
    k_cur: &Tensor,
    v_cur: &Tensor,
    layout: &ChunkLayout,
    chunk: usize,
    layer: usize,
    step: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let q = g.constant(q.clone())?;
    let k = g.constant(k_cur.clone())?;
    let v = g.constant(v_cur.clone())?;
    let o = stream_attend_graph(&mut g, cache, layout, chunk, layer, step, q, k, v, None)?;
    Ok(g.value(o).clone())
}

/// Split a `[1, H, L, D]` tensor into a `[H, L, D]` block.
pub fn to_block(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::dim(format!("expected [1, H, L, D], got {s:?}")));
    }
    t.clone().reshape(&s[1..])
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn block(chunk: usize, fill: f64) -> KvBlock {
        KvBlock {
            chunk,
            k: Tensor::full(&[2, 4, 3], fill),
            v: Tensor::full(&[2, 4, 3], -fill),
        }
    }

    #[test]
    fn reference_round_trip() {
        let mut c = KVCache::new(1, 1, 2, 4, 3);
        c.put(0, 0, CacheRole::Reference, block(0, 1.5)).unwrap();
        assert_eq!(c.get(0, 0, CacheRole::Reference).unwrap(), &block(0, 1.5));
    }

    #[test]
    fn previous_is_evicted() {
        let mut c = KVCache::new(1, 1, 2, 4, 3);
        c.put(0, 0, CacheRole::Previous, block(1, 1.0)).unwrap();
        c.put(0, 0, CacheRole::Previous, block(2, 2.0)).unwrap();
        assert_eq!(c.get(0, 0, CacheRole::Previous).unwrap().chunk, 2);
        assert_eq!(c.stats().evictions, 1);
        assert!(c.put(0, 0, CacheRole::Previous, block(1, 1.0)).is_err());
    }

    #[test]
    fn reference_rewrite_is_rejected() {
        let mut c = KVCache::new(1, 1, 2, 4, 3);
        c.put(0, 0, CacheRole::Reference, block(0, 1.0)).unwrap();
        let e = c.put(0, 0, CacheRole::Reference, block(0, 1.0));
        assert!(matches!(e, Err(Error::Contract(_))));
    }

    #[test]
    fn footprint_is_constant() {
        let mut c = KVCache::new(2, 2, 2, 4, 3);
        let mut at = Vec::new();
        for chunk in 0..100 {
            for l in 0..2 {
                for s in 0..2 {
                    let role = if chunk == 0 { CacheRole::Reference } else { CacheRole::Previous };
                    c.put(l, s, role, block(chunk, chunk as f64)).unwrap();
                }
            }
            at.push(c.kv_bytes());
        }
        assert_eq!(at[1], at[99]);
        assert_eq!(at[1], c.capacity_bytes());
    }

    #[test]
    fn miss_is_streaming_order_error() {
        let mut c = KVCache::new(1, 1, 2, 4, 3);
        assert!(matches!(
            c.get(0, 0, CacheRole::Previous),
            Err(Error::StreamingOrder(_))
        ));
    }

    #[test]
    fn embeddings_are_write_once() {
        let mut c = KVCache::new(1, 1, 1, 1, 1);
        c.put_embedding(EmbeddingKey::Step(0), Tensor::scalar(1.0)).unwrap();
        assert!(c.put_embedding(EmbeddingKey::Step(0), Tensor::scalar(2.0)).is_err());
        let got = c
            .embedding_or_insert(EmbeddingKey::Step(0), || Ok(Tensor::scalar(3.0)))
            .unwrap();
        assert_eq!(got.data()[0], 1.0);
    }

    #[test]
    fn context_length_is_three_chunks() {
        let l = ChunkLayout::new(3, 7, 4).unwrap();
        for c in 2..30 {
            assert_eq!(stream_mask(&l, c).unwrap().lk(), 3 * l.chunk_tokens());
        }
    }

    #[test]
    fn single_chunk_is_plain_self_attention() {
        let l = ChunkLayout::new(2, 1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = l.chunk_tokens();
        let q = Tensor::randn(&[1, 2, n, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 2, n, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[1, 2, n, 4], 1.0, &mut rng);
        let mut c = KVCache::new(1, 1, 2, n, 4);
        let s = stream_attend(&q, &mut c, &k, &v, &l, 0, 0, 0).unwrap();
        let d = crate::numerics::masked_attention(&q, &k, &v, &AttnMask::full(n, n)).unwrap();
        assert_eq!(s, d);
    }
}
