//! The toy diffusion transformer and a small velocity MLP.

pub mod config;
pub mod dit;
pub mod generate;
pub mod mlp;

pub use config::{Conditioning, Mode, ModelConfig};
pub use dit::{align_audio_window, time_features, velocity_graph, window_sources, AttnContext, Dit};
pub use generate::{expect_pattern, generate_streaming, generate_window, ode_window, ChunkGenerator};
pub use mlp::{MlpConfig, VelocityMlp};

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::chunking::{build_full_mask, build_sparse_mask, AttnPattern, ChunkLayout, KVCache};
    use crate::numerics::{AttnMask, Tensor};

    fn small() -> ModelConfig {
        ModelConfig {
            frame_tokens: 4,
            latent_dim: 3,
            model_dim: 8,
            heads: 2,
            blocks: 2,
            mlp_dim: 12,
            audio_dim: 3,
            audio_tokens_per_frame: 2,
            window_frames: 5,
            face_token_ids: vec![1, 2],
            time_freqs: 3,
            zero_init_audio_out: false,
        }
    }

    fn cond(cfg: &ModelConfig, frames: usize, seed: u64) -> Conditioning {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Conditioning {
            style: Tensor::randn(&[cfg.model_dim], 0.3, &mut rng),
            reference_frame: Tensor::randn(&[cfg.frame_tokens, cfg.latent_dim], 1.0, &mut rng),
            audio: Tensor::randn(&[frames, cfg.audio_tokens_per_frame, cfg.audio_dim], 1.0, &mut rng),
            modes: vec![Mode::Speaking; frames],
        }
    }

    fn latent(cfg: &ModelConfig, frames: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[frames, cfg.frame_tokens, cfg.latent_dim], 1.0, &mut rng)
    }

    #[test]
    fn param_count_matches_formula() {
        for cfg in [small(), ModelConfig::default()] {
            let m = Dit::init(cfg.clone(), 1).unwrap();
            assert_eq!(m.params.scalar_count(), cfg.param_count());
        }
    }

    #[test]
    fn audio_window_alignment() {
        let audio = Tensor::new(vec![21, 1, 1], (0..21).map(f64::from).collect()).unwrap();
        assert_eq!(
            align_audio_window(&audio, 10, 5).unwrap().data(),
            &[8.0, 9.0, 10.0, 11.0, 12.0]
        );
        assert_eq!(
            align_audio_window(&audio, 0, 5).unwrap().data(),
            &[0.0, 0.0, 0.0, 1.0, 2.0]
        );
        assert_eq!(align_audio_window(&audio, 7, 1).unwrap().data(), &[7.0]);
        assert!(align_audio_window(&audio, 21, 5).is_err());
    }

    #[test]
    fn permissive_block_mask_equals_full_mask() {
        let cfg = small();
        let layout = ChunkLayout::new(2, 3, cfg.frame_tokens).unwrap();
        let full = build_full_mask(&layout).unwrap();
        let n = layout.window_tokens();
        let buckets = full.mask.buckets().unwrap().to_vec();
        let blocky = AttnMask::from_fn(n, n, |i, j| i / 8 <= 3 || j < n)
            .unwrap()
            .with_buckets(buckets)
            .unwrap();
        let blocky = AttnPattern {
            mask: Arc::new(blocky),
            ..full.clone()
        };
        let m = Dit::init(cfg.clone(), 2).unwrap();
        let c = cond(&cfg, 6, 3);
        let x = latent(&cfg, 6, 4);
        let a = m.forward_velocity(&x, 0.3, &c, &full).unwrap();
        let b = m.forward_velocity(&x, 0.3, &c, &blocky).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn silence_ignores_audio() {
        let cfg = small();
        let layout = ChunkLayout::new(2, 3, cfg.frame_tokens).unwrap();
        let pat = build_sparse_mask(&layout).unwrap();
        let m = Dit::init(cfg.clone(), 5).unwrap();
        let mut c1 = cond(&cfg, 6, 6);
        c1.modes = vec![Mode::Silence; 6];
        let mut c2 = c1.clone();
        c2.audio = cond(&cfg, 6, 7).audio;
        let x = latent(&cfg, 6, 8);
        let a = m.forward_velocity(&x, 0.6, &c1, &pat).unwrap();
        let b = m.forward_velocity(&x, 0.6, &c2, &pat).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projection_is_per_frame() {
        let mut cfg = small();
        cfg.zero_init_audio_out = true;
        let m = Dit::init(cfg.clone(), 9).unwrap();
        let modes = vec![Mode::Speaking; 4];
        let zero = Tensor::zeros(&[4, 2, 3]);
        assert!(m.project_audio(&zero, &modes).unwrap().data().iter().all(|&v| v == 0.0));

        let m = Dit::init(small(), 9).unwrap();
        let raw = cond(&cfg, 4, 10).audio;
        let out = m.project_audio(&raw, &modes).unwrap();
        let perm = [2usize, 0, 3, 1];
        let per_in = 2 * 3;
        let per_out = 2 * cfg.model_dim;
        let shuffled: Vec<f64> = perm
            .iter()
            .flat_map(|&f| raw.data()[f * per_in..(f + 1) * per_in].to_vec())
            .collect();
        let out2 = m
            .project_audio(&Tensor::new(vec![4, 2, 3], shuffled).unwrap(), &modes)
            .unwrap();
        for (i, &f) in perm.iter().enumerate() {
            assert_eq!(
                &out2.data()[i * per_out..(i + 1) * per_out],
                &out.data()[f * per_out..(f + 1) * per_out]
            );
        }
    }

    #[test]
    fn cross_attention_touches_only_face_tokens() {
        let cfg = small();
        let m = Dit::init(cfg.clone(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let a = Tensor::randn(&[10, 8], 1.0, &mut rng);
        let out = m.audio_cross_attention(0, &h, &a, &cfg.face_query_mask()).unwrap();
        for r in [0usize, 3] {
            assert_eq!(&out.data()[r * 8..(r + 1) * 8], &h.data()[r * 8..(r + 1) * 8]);
        }
        assert_ne!(out, h);
        assert!(matches!(
            m.audio_cross_attention(0, &h, &a, &[false; 4]),
            Err(crate::Error::Configuration(_))
        ));
    }

    #[test]
    fn one_face_token_one_audio_token() {
        let cfg = small();
        let m = Dit::init(cfg.clone(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let h = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let a = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let out = m
            .audio_cross_attention(0, &h, &a, &[false, false, true, false])
            .unwrap();
        let wv = m.params.get("blk0.xattn.wv").unwrap();
        let wo = m.params.get("blk0.xattn.wo").unwrap();
        let mul = |x: &[f64], w: &Tensor| -> Vec<f64> {
            (0..8).map(|j| (0..8).map(|i| x[i] * w.data()[i * 8 + j]).sum()).collect()
        };
        let expect = mul(&mul(a.data(), wv), wo);
        for j in 0..8 {
            let got = out.data()[16 + j] - h.data()[16 + j];
            assert!((got - expect[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn audio_influence_is_local() {
        let cfg = small();
        let frames = 9;
        let layout = ChunkLayout::new(1, frames, cfg.frame_tokens).unwrap();
        let base = build_full_mask(&layout).unwrap();
        let t = cfg.frame_tokens;
        let own_frame = AttnMask::from_fn(frames * t, frames * t, |i, j| i / t == j / t)
            .unwrap()
            .with_buckets(base.mask.buckets().unwrap().to_vec())
            .unwrap();
        let pat = AttnPattern {
            mask: Arc::new(own_frame),
            ..base
        };
        let m = Dit::init(cfg.clone(), 15).unwrap();
        let c = cond(&cfg, frames, 16);
        let x = latent(&cfg, frames, 17);
        let a = m.forward_velocity(&x, 0.4, &c, &pat).unwrap();
        let j = 4;
        let mut c2 = c.clone();
        let per = 2 * 3;
        for v in &mut c2.audio.data_mut()[j * per..(j + 1) * per] {
            *v += 1.0;
        }
        let b = m.forward_velocity(&x, 0.4, &c2, &pat).unwrap();
        let per_frame = t * cfg.latent_dim;
        for i in 0..frames {
            let same = a.data()[i * per_frame..(i + 1) * per_frame]
                == b.data()[i * per_frame..(i + 1) * per_frame];
            assert_eq!(same, (i as i64 - j as i64).abs() > 2, "frame {i}");
        }
    }

    #[test]
    fn streaming_matches_window_pass() {
        let cfg = small();
        let layout = ChunkLayout::new(2, 5, cfg.frame_tokens).unwrap();
        let pat = build_sparse_mask(&layout).unwrap();
        let m = Dit::init(cfg.clone(), 18).unwrap();
        let c = cond(&cfg, 10, 19);
        let x = latent(&cfg, 10, 20);
        let full = m.forward_velocity(&x, 0.5, &c, &pat).unwrap();
        let mut cache = KVCache::new(cfg.blocks, 1, cfg.heads, layout.chunk_tokens(), cfg.head_dim());
        let per_chunk = layout.chunk_tokens() * cfg.latent_dim;
        for chunk in 0..5 {
            let xc = x.slice_outer(chunk * 2, 2).unwrap();
            let v = m.forward_chunk(&mut cache, &layout, chunk, 0, &xc, 0.5, &c).unwrap();
            let want = &full.data()[chunk * per_chunk..(chunk + 1) * per_chunk];
            let diff = v
                .data()
                .iter()
                .zip(want)
                .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
            assert!(diff < 1e-12, "chunk {chunk}: {diff}");
        }
    }

    #[test]
    fn mode_length_mismatch_is_conditioning_error() {
        let cfg = small();
        let layout = ChunkLayout::new(2, 2, cfg.frame_tokens).unwrap();
        let pat = build_sparse_mask(&layout).unwrap();
        let m = Dit::init(cfg.clone(), 21).unwrap();
        let mut c = cond(&cfg, 4, 22);
        c.modes.pop();
        let e = m.forward_velocity(&latent(&cfg, 4, 23), 0.5, &c, &pat);
        assert!(matches!(e, Err(crate::Error::Conditioning(_))));
        let c = cond(&cfg, 4, 22);
        let e = m.forward_velocity(&latent(&cfg, 3, 23), 0.5, &c, &pat);
        assert!(matches!(e, Err(crate::Error::Dimension(_))));
    }
}
