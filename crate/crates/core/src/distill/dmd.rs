use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Lower clamp on the per-sample DMD normalizer.
pub const NORMALIZER_FLOOR: f64 = 1e-8;

fn check_t(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::contract(format!("score undefined at t = {t}; need 0 < t < 1")));
    }
    Ok(())
}

/// Forward diffusion of a clean sample: `t * x1 + (1 - t) * noise`.
pub fn diffuse(x1: &Tensor, noise: &Tensor, t: f64) -> Result<Tensor> {
    x1.zip_map(noise, |a, e| t * a + (1.0 - t) * e)
}

/// Marginal score from a velocity prediction: `s = (t u - x) / (1 - t)`.
pub fn score_from_velocity(x_t: &Tensor, u: &Tensor, t: f64) -> Result<Tensor> {
    check_t(t)?;
    x_t.zip_map(u, |x, u| (t * u - x) / (1.0 - t))
}

/// Inverse of [`score_from_velocity`]: `u = (x + (1 - t) s) / t`.
pub fn velocity_from_score(x_t: &Tensor, s: &Tensor, t: f64) -> Result<Tensor> {
    check_t(t)?;
    x_t.zip_map(s, |x, s| (x + (1.0 - t) * s) / t)
}

/// Clean-sample estimate implied by a velocity: `x + (1 - t) u`.
pub fn clean_estimate(x_t: &Tensor, u: &Tensor, t: f64) -> Result<Tensor> {
    x_t.zip_map(u, |x, u| x + (1.0 - t) * u)
}

/// Per-sample DMD update direction for the generator output.
#[derive(Clone, Debug)]
pub struct DmdGradient {
    /// `(x1_fake - x1_real) / normalizer`, shaped like `x_gen`.
    pub grad: Tensor,
    pub normalizer: Vec<f64>,
}

/// DMD direction for `samples` equal contiguous groups of `x_gen`, each
/// diffused to its own time `t[i]`. `u_real` and `u_fake` are the teacher and
/// fake-score velocities at `x_t`.
///
/// `x1_fake - x1_real` equals `(1 - t)^2 / t * (s_gen - s_data)`, so the
/// direction is the reverse-KL gradient under that time weighting.
pub fn dmd_gradient(
    x_gen: &Tensor,
    x_t: &Tensor,
    t: &[f64],
    u_real: &Tensor,
    u_fake: &Tensor,
) -> Result<DmdGradient> {
    for (x, what) in [(x_t, "x_t"), (u_real, "teacher velocity"), (u_fake, "fake velocity")] {
        x_gen.same_shape(x, what)?;
        x.ensure_finite(what)?;
    }
    let n = t.len();
    if n == 0 || x_gen.len() % n != 0 {
        return Err(Error::dim(format!("{} values into {n} samples", x_gen.len())));
    }
    let per = x_gen.len() / n;
    let mut grad = vec![0.0; x_gen.len()];
    let mut normalizer = Vec::with_capacity(n);
    for (i, &ti) in t.iter().enumerate() {
        check_t(ti)?;
        let r = i * per..(i + 1) * per;
        let (xg, xt) = (&x_gen.data()[r.clone()], &x_t.data()[r.clone()]);
        let (ur, uf) = (&u_real.data()[r.clone()], &u_fake.data()[r.clone()]);
        let real: Vec<f64> = xt.iter().zip(ur).map(|(x, u)| x + (1.0 - ti) * u).collect();
        let resid = real.iter().zip(xg).map(|(a, b)| (a - b).abs()).sum::<f64>() / per as f64;
        let norm = resid.max(NORMALIZER_FLOOR);
        for j in 0..per {
            let fake = xt[j] + (1.0 - ti) * uf[j];
            grad[r.start + j] = (fake - real[j]) / norm;
        }
        normalizer.push(norm);
    }
    let grad = Tensor::new(x_gen.shape().to_vec(), grad)?;
    grad.ensure_finite("DMD gradient")?;
    Ok(DmdGradient { grad, normalizer })
}

/// Surrogate `0.5 * mean((x - stopgrad(x - grad))^2)`; its gradient with
/// respect to `x_gen` is `grad / numel`.
pub fn dmd_loss_graph(g: &mut Graph, x_gen: Var, grad: &Tensor) -> Result<Var> {
    let target = g.value(x_gen).sub(grad)?;
    let l = g.mse_const(x_gen, &target)?;
    g.scale(l, 0.5)
}

/// Whether a training sample carries ground-truth latents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Real,
    Synthetic,
}

/// MSE between the student's final clean estimate and the ground truth.
pub fn regression_loss(prediction: &Tensor, truth: &Tensor, kind: SampleKind) -> Result<f64> {
    if kind == SampleKind::Synthetic {
        return Err(Error::contract("regression loss on a synthetic sample"));
    }
    prediction.same_shape(truth, "regression_loss")?;
    let se: f64 = prediction.data().iter().zip(truth.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(se / truth.len() as f64)
}

pub fn regression_loss_graph(g: &mut Graph, prediction: Var, truth: &Tensor, kind: SampleKind) -> Result<Var> {
    if kind == SampleKind::Synthetic {
        return Err(Error::contract("regression loss on a synthetic sample"));
    }
    g.mse_const(prediction, truth)
}

/// Real-only warmup, then a per-sample Bernoulli share of synthetic samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSchedule {
    pub warmup_steps: usize,
    pub synthetic_ratio: f64,
}

impl MixSchedule {
    /// Warmup over the first 40% of `total_steps`.
    pub fn for_total(total_steps: usize, synthetic_ratio: f64) -> Self {
        MixSchedule {
            warmup_steps: (total_steps as f64 * 0.4).round() as usize,
            synthetic_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.synthetic_ratio) {
            return Err(Error::Configuration(format!(
                "synthetic_ratio {} outside [0, 1]",
                self.synthetic_ratio
            )));
        }
        Ok(())
    }

    pub fn ratio_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps { 0.0 } else { self.synthetic_ratio }
    }

    /// Sample kinds for a batch of `n` at `step`.
    pub fn draw<R: Rng + ?Sized>(&self, step: usize, n: usize, rng: &mut R) -> Vec<SampleKind> {
        let p = self.ratio_at(step);
        (0..n)
            .map(|_| {
                if p > 0.0 && rng.random::<f64>() < p {
                    SampleKind::Synthetic
                } else {
                    SampleKind::Real
                }
            })
            .collect()
    }
}
