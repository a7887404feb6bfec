use std::thread;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Invertible per-patch orthogonal map between pixel frames and latent tokens.
///
/// Each `patch x patch` block of a frame becomes one token of dimension
/// `patch^2`; tokens are ordered row-major over the patch grid.
#[derive(Clone, Debug)]
pub struct PseudoVAE {
    pub grid: (usize, usize),
    pub patch: usize,
    /// Extra time charged by [`PseudoVAE::decode`], topped up with a sleep.
    pub simulated_decode_cost_ms: f64,
    q: Vec<f64>,
}

impl PseudoVAE {
    pub fn new(grid: (usize, usize), patch: usize, seed: u64) -> Result<Self> {
        if patch == 0 || grid.0 % patch != 0 || grid.1 % patch != 0 {
            return Err(Error::Configuration(format!(
                "grid {grid:?} is not tiled by {patch}x{patch} patches"
            )));
        }
        let n = patch * patch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        let q = m.qr().q();
        let q = (0..n * n).map(|i| q[(i / n, i % n)]).collect();
        Ok(PseudoVAE {
            grid,
            patch,
            simulated_decode_cost_ms: 0.0,
            q,
        })
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.grid.0 / self.patch) * (self.grid.1 / self.patch)
    }

    pub fn latent_dim(&self) -> usize {
        self.patch * self.patch
    }

    fn check(&self, t: &Tensor, want: [usize; 2], what: &str) -> Result<usize> {
        let s = t.shape();
        if s.len() != 3 || s[1] != want[0] || s[2] != want[1] {
            return Err(Error::dim(format!("{what} {s:?}, expected [F, {}, {}]", want[0], want[1])));
        }
        Ok(s[0])
    }

    /// `[F, H, W]` pixels to `[F, tokens, patch^2]` latents.
    pub fn encode(&self, frames: &Tensor) -> Result<Tensor> {
        let f = self.check(frames, [self.grid.0, self.grid.1], "frames")?;
        let (p, n, w) = (self.patch, self.latent_dim(), self.grid.1);
        let pc = w / p;
        let t = self.tokens_per_frame();
        let px = frames.data();
        let mut out = vec![0.0; f * t * n];
        let mut patch = vec![0.0; n];
        for fi in 0..f {
            let base = fi * self.grid.0 * w;
            for tok in 0..t {
                let (r0, c0) = ((tok / pc) * p, (tok % pc) * p);
                for i in 0..p {
                    for j in 0..p {
                        patch[i * p + j] = px[base + (r0 + i) * w + c0 + j];
                    }
                }
                let o = &mut out[(fi * t + tok) * n..(fi * t + tok + 1) * n];
                for (a, oa) in o.iter_mut().enumerate() {
                    // latent = Q^T patch
                    *oa = (0..n).map(|b| self.q[b * n + a] * patch[b]).sum();
                }
            }
        }
        Tensor::new(vec![f, t, n], out)
    }

    /// Inverse of [`PseudoVAE::encode`]; sleeps to reach `simulated_decode_cost_ms`.
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let start = Instant::now();
        let out = self.decode_now(latents)?;
        let target = Duration::from_secs_f64(self.simulated_decode_cost_ms.max(0.0) / 1e3);
        if let Some(rest) = target.checked_sub(start.elapsed()) {
            thread::sleep(rest);
        }
        Ok(out)
    }

    /// Decode without the simulated cost.
    pub fn decode_now(&self, latents: &Tensor) -> Result<Tensor> {
        let f = self.check(latents, [self.tokens_per_frame(), self.latent_dim()], "latents")?;
        let (p, n, w) = (self.patch, self.latent_dim(), self.grid.1);
        let pc = w / p;
        let t = self.tokens_per_frame();
        let z = latents.data();
        let mut out = vec![0.0; f * self.grid.0 * w];
        for fi in 0..f {
            let base = fi * self.grid.0 * w;
            for tok in 0..t {
                let (r0, c0) = ((tok / pc) * p, (tok % pc) * p);
                let lat = &z[(fi * t + tok) * n..(fi * t + tok + 1) * n];
                for b in 0..n {
                    let v: f64 = (0..n).map(|a| self.q[b * n + a] * lat[a]).sum();
                    out[base + (r0 + b / p) * w + c0 + b % p] = v;
                }
            }
        }
        Tensor::new(vec![f, self.grid.0, w], out)
    }
}
