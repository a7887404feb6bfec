//! Chunk layout, the sparse causal attention pattern, and the streaming KV cache.

pub mod cache;
pub mod layout;

pub use cache::{
    stream_attend, stream_attend_graph, stream_mask, to_block, CacheRole, CacheStats, EmbeddingKey,
    KVCache, KvBlock,
};
pub use layout::{
    allowed_key_chunks, bias_bucket, build_full_mask, build_sparse_mask, AttnPattern, ChunkLayout,
    PatternKind, SparseCausalMask, BIAS_BUCKETS, REL_SPAN,
};
