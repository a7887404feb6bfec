use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chunkstream::chunking::{build_full_mask, build_sparse_mask, ChunkLayout};
use chunkstream::model::{velocity_graph, AttnContext, Conditioning, Dit, Mode, ModelConfig};
use chunkstream::numerics::{finite_diff_gradient, max_relative_error, Graph, ParamSet, Tensor};
use chunkstream::schedule::fm_loss_graph;

struct Case {
    cfg: ModelConfig,
    layout: ChunkLayout,
    sparse: bool,
    t: f64,
    cond: Conditioning,
    x0: Tensor,
    x1: Tensor,
}

fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.random_range(1..=2);
    let frame_tokens = rng.random_range(2..=4);
    let mut face: Vec<usize> = (0..frame_tokens).filter(|_| rng.random_bool(0.5)).collect();
    if face.is_empty() {
        face.push(rng.random_range(0..frame_tokens));
    }
    let cfg = ModelConfig {
        frame_tokens,
        latent_dim: rng.random_range(2..=3),
        model_dim: heads * rng.random_range(2..=4),
        heads,
        blocks: rng.random_range(1..=2),
        mlp_dim: rng.random_range(4..=8),
        audio_dim: rng.random_range(2..=3),
        audio_tokens_per_frame: rng.random_range(1..=2),
        window_frames: [1, 3][rng.random_range(0..2)],
        face_token_ids: face,
        time_freqs: 2,
        zero_init_audio_out: false,
    };
    let layout = ChunkLayout::new(rng.random_range(1..=2), rng.random_range(2..=3), frame_tokens).unwrap();
    let frames = layout.window_frames();
    let modes = (0..frames)
        .map(|_| if rng.random_bool(0.3) { Mode::Silence } else { Mode::Speaking })
        .collect();
    let cond = Conditioning {
        style: Tensor::randn(&[cfg.model_dim], 0.3, &mut rng),
        reference_frame: Tensor::randn(&[frame_tokens, cfg.latent_dim], 1.0, &mut rng),
        audio: Tensor::randn(&[frames, cfg.audio_tokens_per_frame, cfg.audio_dim], 1.0, &mut rng),
        modes,
    };
    let shape = [frames, frame_tokens, cfg.latent_dim];
    Case {
        sparse: rng.random_bool(0.5),
        t: rng.random_range(0.05..0.95),
        x0: Tensor::randn(&shape, 1.0, &mut rng),
        x1: Tensor::randn(&shape, 1.0, &mut rng),
        cfg,
        layout,
        cond,
    }
}

fn loss(c: &Case, params: &ParamSet, want_grad: bool) -> (f64, Option<std::collections::BTreeMap<String, Tensor>>) {
    let pattern = if c.sparse {
        build_sparse_mask(&c.layout).unwrap()
    } else {
        build_full_mask(&c.layout).unwrap()
    };
    let mut g = Graph::new();
    let p = g.bind(params).unwrap();
    let xt = c.x1.scale(c.t).add(&c.x0.scale(1.0 - c.t)).unwrap();
    let x = g.constant(xt).unwrap();
    let v = velocity_graph(&mut g, &p, &c.cfg, x, c.t, &c.cond, &mut AttnContext::Window(&pattern)).unwrap();
    let l = fm_loss_graph(&mut g, v, &c.x0, &c.x1).unwrap();
    let value = g.value(l).data()[0];
    let grads = want_grad.then(|| g.backward(l, params).unwrap());
    (value, grads)
}

#[test]
fn backward_matches_finite_differences_on_random_models() {
    let start = Instant::now();
    let mut checked = 0;
    for seed in 0..24 {
        let c = random_case(seed);
        let dit = Dit::init(c.cfg.clone(), seed + 100).unwrap();
        assert!(dit.params.scalar_count() <= 5000, "{} params", dit.params.scalar_count());
        let (_, analytic) = loss(&c, &dit.params, true);
        let numeric = finite_diff_gradient(|p| Ok(loss(&c, p, false).0), &dit.params, 1e-5).unwrap();
        let err = max_relative_error(&analytic.unwrap(), &numeric).unwrap();
        assert!(err < 1e-4, "seed {seed}: relative error {err:.3e} ({:?})", c.cfg);
        checked += 1;
    }
    assert!(checked >= 20);
    assert!(start.elapsed().as_secs() < 120, "took {:?}", start.elapsed());
}
