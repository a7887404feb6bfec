use chunkstream::chunking::{build_sparse_mask, ChunkLayout};

/// Chunk-level rule written out independently of the library.
fn allowed(fpc: usize, qf: usize, kf: usize) -> bool {
    let (q, k) = (qf / fpc, kf / fpc);
    k == 0 || k == q || k + 1 == q
}

#[test]
fn sparse_mask_equals_brute_force_predicate() {
    for (fpc, chunks) in [(3, 7), (7, 3), (21, 1)] {
        let layout = ChunkLayout::new(fpc, chunks, 16).unwrap();
        let p = build_sparse_mask(&layout).unwrap();
        assert_eq!(layout.window_frames(), 21);
        for q in 0..21 {
            for k in 0..21 {
                assert_eq!(p.frame_allowed(q, k), allowed(fpc, q, k), "({fpc},{chunks}) q={q} k={k}");
                // every token of the frame pair agrees
                for (i, j) in [(0, 0), (5, 15), (15, 3)] {
                    assert_eq!(p.mask.allowed(q * 16 + i, k * 16 + j), allowed(fpc, q, k));
                }
            }
        }
    }
}
