//! Flow-matching paths, timestep sampling, and samplers.
//!
//! Convention: `x_t = t * x1 + (1 - t) * x0`, with `t = 0` pure noise and
//! `t = 1` data. The model predicts the velocity `x1 - x0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("interpolation time {t} outside [0, 1]")));
    }
    x0.zip_map(x1, |a, b| t * b + (1.0 - t) * a)
}

pub fn velocity_target(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    x1.sub(x0)
}

/// Mean squared error between `predicted_v` and `x1 - x0`.
pub fn fm_loss(predicted_v: &Tensor, x0: &Tensor, x1: &Tensor) -> Result<f64> {
    for (t, what) in [(predicted_v, "prediction"), (x0, "x0"), (x1, "x1")] {
        t.ensure_finite(what)?;
    }
    let target = velocity_target(x0, x1)?;
    predicted_v.same_shape(&target, "fm_loss")?;
    let se: f64 = predicted_v
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, q)| (p - q) * (p - q))
        .sum();
    Ok(se / target.len() as f64)
}

/// [`fm_loss`] on a graph, differentiable in the prediction.
pub fn fm_loss_graph(g: &mut Graph, predicted_v: Var, x0: &Tensor, x1: &Tensor) -> Result<Var> {
    let target = velocity_target(x0, x1)?;
    if g.shape(predicted_v) != target.shape() {
        return Err(Error::dim(format!(
            "fm_loss: prediction {:?} vs target {:?}",
            g.shape(predicted_v),
            target.shape()
        )));
    }
    g.mse_const(predicted_v, &target)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `t = sigmoid(z)`, `z ~ N(mu, sigma^2)`.
#[derive(Clone, Debug)]
pub struct LogitNormalSampler {
    pub mu: f64,
    pub sigma: f64,
    normal: Normal<f64>,
    rng: ChaCha8Rng,
}

impl LogitNormalSampler {
    pub fn new(mu: f64, sigma: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(mu, sigma)
            .ok()
            .filter(|_| sigma > 0.0 && mu.is_finite())
            .ok_or_else(|| Error::Configuration(format!("logit-normal mu {mu} sigma {sigma}")))?;
        Ok(LogitNormalSampler {
            mu,
            sigma,
            normal,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn standard(seed: u64) -> Self {
        Self::new(0.0, 1.0, seed).expect("valid parameters")
    }

    /// One draw, strictly inside `(0, 1)`.
    pub fn sample(&mut self) -> f64 {
        let z = self.normal.sample(&mut self.rng);
        sigmoid(z).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
    }
}

pub fn sample_timestep(sampler: &mut LogitNormalSampler) -> f64 {
    sampler.sample()
}

/// Few-step generator schedule, given as noise levels: entry `s` means the
/// state `(1 - s) * x1 + s * noise`, i.e. model time `t = 1 - s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StudentSchedule {
    levels: Vec<f64>,
}

impl Default for StudentSchedule {
    fn default() -> Self {
        StudentSchedule {
            levels: vec![1.0, 0.5],
        }
    }
}

impl StudentSchedule {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        let s = StudentSchedule { levels };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.levels;
        if l.is_empty() {
            return Err(Error::Configuration("empty student schedule".into()));
        }
        if l[0] != 1.0 {
            return Err(Error::Configuration(format!("schedule must start at 1.0, got {l:?}")));
        }
        if l.iter().any(|&s| !(s > 0.0 && s <= 1.0)) || l.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Configuration(format!(
                "schedule must be strictly decreasing in (0, 1]: {l:?}"
            )));
        }
        Ok(())
    }

    /// Evenly spaced levels `1, 1 - 1/n, ...`.
    pub fn uniform(steps: usize) -> Result<Self> {
        Self::new((0..steps).map(|i| 1.0 - i as f64 / steps as f64).collect())
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn nfe(&self) -> usize {
        self.levels.len()
    }

    pub fn model_time(&self, step: usize) -> f64 {
        1.0 - self.levels[step]
    }
}

/// Anything that predicts a velocity for a state at time `t`.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

/// Euler integration from `t = 0` at `noise` to `t = 1` in `steps` uniform steps.
pub fn ode_sample(model: &dyn VelocityField, noise: &Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::contract("ode_sample needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = noise.clone();
    for i in 0..steps {
        let u = model.velocity(&x, i as f64 * dt)?;
        x = x.zip_map(&u, |a, b| a + dt * b)?;
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite state after Euler step {i}")));
        }
    }
    Ok(x)
}

/// Standard normal tensor, reproducible from `seed`.
pub fn gaussian(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Derive an independent seed for item `index` of a seeded collection.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix(seed ^ mix(index.wrapping_add(0x5EED)))
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Noise for one latent frame at generator step `step`. Step 0 is the
/// starting noise, later steps are the re-noising draws. Depends only on
/// `(seed, step, frame)`, so a stream can reproduce any slice of a window's noise.
pub fn frame_noise(seed: u64, step: usize, frame: usize, frame_shape: &[usize]) -> Tensor {
    let s = mix(seed ^ mix((step as u64) << 32 | frame as u64));
    gaussian(frame_shape, s)
}

/// [`frame_noise`] for frames `first..first + count`, stacked on the leading axis.
pub fn window_noise(seed: u64, step: usize, first: usize, count: usize, frame_shape: &[usize]) -> Result<Tensor> {
    let parts: Vec<Tensor> = (first..first + count)
        .map(|f| {
            let t = frame_noise(seed, step, f, frame_shape);
            let mut shape = vec![1];
            shape.extend_from_slice(frame_shape);
            t.reshape(&shape)
        })
        .collect::<Result<_>>()?;
    Tensor::concat_outer(&parts.iter().collect::<Vec<_>>())
}

/// Multi-step denoising generator.
///
/// At level `s_i` the model sees time `1 - s_i` and predicts `u`; the implied
/// clean sample is `x + s_i * u`. Between steps the clean estimate is
/// re-noised to the next level with `renoise[i]`. Exactly `nfe` model calls.
pub fn few_step_generate(
    model: &dyn VelocityField,
    schedule: &StudentSchedule,
    noise: &Tensor,
    renoise: &[Tensor],
) -> Result<Tensor> {
    schedule.validate()?;
    let levels = schedule.levels();
    if renoise.len() + 1 < levels.len() {
        return Err(Error::contract(format!(
            "{} re-noise tensors for {} steps",
            renoise.len(),
            levels.len()
        )));
    }
    let mut x = noise.clone();
    for (i, &s) in levels.iter().enumerate() {
        let u = model.velocity(&x, 1.0 - s)?;
        let x1 = x.zip_map(&u, |a, b| a + s * b)?;
        match levels.get(i + 1) {
            Some(&next) => x = x1.zip_map(&renoise[i], |a, e| (1.0 - next) * a + next * e)?,
            None => return Ok(x1),
        }
    }
    unreachable!("schedule is non-empty")
}

/// [`few_step_generate`] on a graph, differentiable through every step.
pub fn few_step_generate_graph(
    g: &mut Graph,
    model: &mut dyn FnMut(&mut Graph, Var, f64) -> Result<Var>,
    schedule: &StudentSchedule,
    noise: &Tensor,
    renoise: &[Tensor],
) -> Result<Var> {
    schedule.validate()?;
    let levels = schedule.levels();
    if renoise.len() + 1 < levels.len() {
        return Err(Error::contract(format!(
            "{} re-noise tensors for {} steps",
            renoise.len(),
            levels.len()
        )));
    }
    let mut x = g.constant(noise.clone())?;
    for (i, &s) in levels.iter().enumerate() {
        let u = model(g, x, 1.0 - s)?;
        let x1 = g.axpby(x, u, 1.0, s)?;
        match levels.get(i + 1) {
            Some(&next) => {
                let scaled = g.scale(x1, 1.0 - next)?;
                x = g.add_const(scaled, &renoise[i].scale(next))?;
            }
            None => return Ok(x1),
        }
    }
    unreachable!("schedule is non-empty")
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use statrs::distribution::{ContinuousCDF, Normal as SNormal};

    use super::*;

    #[test]
    fn interpolation_endpoints() {
        let x0 = gaussian(&[5], 1);
        let x1 = gaussian(&[5], 2);
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
        let mid = interpolate(&Tensor::scalar(0.0), &Tensor::scalar(2.0), 0.5).unwrap();
        assert_eq!(mid.data()[0], 1.0);
    }

    #[test]
    fn velocity_is_time_derivative_of_path() {
        let x0 = gaussian(&[7], 3);
        let x1 = gaussian(&[7], 4);
        let v = velocity_target(&x0, &x1).unwrap();
        assert_eq!(velocity_target(&x0, &x0).unwrap(), Tensor::zeros(&[7]));
        assert_eq!(velocity_target(&Tensor::zeros(&[7]), &x1).unwrap(), x1);
        let h = 1e-5;
        let a = interpolate(&x0, &x1, 0.4 + h).unwrap();
        let b = interpolate(&x0, &x1, 0.4 - h).unwrap();
        for i in 0..7 {
            let fd = (a.data()[i] - b.data()[i]) / (2.0 * h);
            assert!((fd - v.data()[i]).abs() < 1e-8);
            assert_eq!(v.data()[i], x1.data()[i] - x0.data()[i]);
        }
    }

    #[test]
    fn fm_loss_conventions() {
        let x0 = gaussian(&[4, 3], 5);
        let x1 = gaussian(&[4, 3], 6);
        let v = velocity_target(&x0, &x1).unwrap();
        assert_eq!(fm_loss(&v, &x0, &x1).unwrap(), 0.0);
        let ones = Tensor::full(&[6], 1.0);
        assert_eq!(fm_loss(&Tensor::zeros(&[6]), &Tensor::zeros(&[6]), &ones).unwrap(), 1.0);
        let p = gaussian(&[4, 3], 7);
        let mut want = 0.0;
        for i in 0..12 {
            let d = p.data()[i] - (x1.data()[i] - x0.data()[i]);
            want += d * d;
        }
        assert!((fm_loss(&p, &x0, &x1).unwrap() - want / 12.0).abs() < 1e-14);
        let mut g = Graph::new();
        let pv = g.constant(p.clone()).unwrap();
        let l = fm_loss_graph(&mut g, pv, &x0, &x1).unwrap();
        assert!((g.value(l).data()[0] - want / 12.0).abs() < 1e-14);
    }

    #[test]
    fn logit_normal_median_and_reproducibility() {
        let mut s = LogitNormalSampler::standard(11);
        let mut v: Vec<f64> = (0..100_000).map(|_| sample_timestep(&mut s)).collect();
        assert!(v.iter().all(|&t| t > 0.0 && t < 1.0));
        v.sort_by(f64::total_cmp);
        assert!((v[50_000] - 0.5).abs() < 0.01);
        let mut a = LogitNormalSampler::standard(3);
        let mut b = LogitNormalSampler::standard(3);
        for _ in 0..10 {
            assert_eq!(a.sample().to_bits(), b.sample().to_bits());
        }
        assert!(LogitNormalSampler::new(0.0, 0.0, 1).is_err());
    }

    #[test]
    fn logit_normal_ks_statistic() {
        let mut s = LogitNormalSampler::new(0.3, 0.8, 5).unwrap();
        let n = 100_000;
        let mut v: Vec<f64> = (0..n).map(|_| s.sample()).collect();
        v.sort_by(f64::total_cmp);
        let z = SNormal::new(0.3, 0.8).unwrap();
        let mut ks = 0.0f64;
        for (i, &t) in v.iter().enumerate() {
            let cdf = z.cdf((t / (1.0 - t)).ln());
            ks = ks.max((cdf - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - cdf).abs());
        }
        assert!(ks < 0.01, "ks {ks}");
    }

    #[test]
    fn constant_field_integrates_exactly() {
        let x0 = gaussian(&[3], 9);
        let c = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        for steps in [1, 3, 12] {
            let f = |_: &Tensor, _: f64| Ok(c.clone());
            let out = ode_sample(&f, &x0, steps).unwrap();
            assert!(out.max_abs_diff(&x0.add(&c).unwrap()).unwrap() < 1e-12);
        }
    }

    #[test]
    fn euler_is_first_order() {
        // Exact field of a point mass at c: u = (c - x) / (1 - t).
        // Euler gives x_N = c exactly here, so use a curved field instead:
        // u = -x * 2t has solution x(1) = x0 * exp(-1).
        let x0 = Tensor::scalar(1.5);
        let exact = 1.5 * (-1f64).exp();
        let f = |x: &Tensor, t: f64| Ok(x.scale(-2.0 * t));
        let e: Vec<f64> = [8, 16, 32]
            .iter()
            .map(|&n| (ode_sample(&f, &x0, n).unwrap().data()[0] - exact).abs())
            .collect();
        for w in e.windows(2) {
            let r = w[0] / w[1];
            assert!((r - 2.0).abs() < 0.2, "ratio {r}");
        }
    }

    #[test]
    fn point_mass_field_reaches_target() {
        let c = Tensor::from_vec(vec![2.0, -1.0]);
        let f = |x: &Tensor, t: f64| c.zip_map(x, |a, b| (a - b) / (1.0 - t));
        let noise = gaussian(&[2], 4);
        let out = ode_sample(&f, &noise, 12).unwrap();
        assert!(out.max_abs_diff(&c).unwrap() < 1e-12);
        let one = few_step_generate(&f, &StudentSchedule::new(vec![1.0]).unwrap(), &noise, &[]).unwrap();
        assert!(one.max_abs_diff(&c).unwrap() < 1e-12);
    }

    #[test]
    fn one_step_generator_equals_one_euler_step() {
        let f = |x: &Tensor, t: f64| Ok(x.map(|v| (v * 3.0 + t).sin()));
        let noise = gaussian(&[6], 8);
        let a = ode_sample(&f, &noise, 1).unwrap();
        let b = few_step_generate(&f, &StudentSchedule::new(vec![1.0]).unwrap(), &noise, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generator_calls_model_once_per_step() {
        let calls = Cell::new(0);
        let f = |x: &Tensor, _: f64| {
            calls.set(calls.get() + 1);
            Ok(x.scale(0.1))
        };
        let sched = StudentSchedule::new(vec![1.0, 0.75, 0.5, 0.25]).unwrap();
        let noise = gaussian(&[3], 1);
        let rn: Vec<Tensor> = (1..4).map(|i| gaussian(&[3], 100 + i)).collect();
        let a = few_step_generate(&f, &sched, &noise, &rn).unwrap();
        assert_eq!(calls.get(), 4);
        let b = few_step_generate(&f, &sched, &noise, &rn).unwrap();
        assert_eq!(a, b);
        assert!(few_step_generate(&f, &sched, &noise, &rn[..1]).is_err());
    }

    #[test]
    fn graph_generator_matches_tensor_generator() {
        let w = Tensor::from_vec(vec![0.3, -0.2, 0.5]);
        let f = |x: &Tensor, t: f64| x.zip_map(&w, |a, b| a * b + t);
        let sched = StudentSchedule::default();
        let noise = gaussian(&[3], 2);
        let rn = vec![gaussian(&[3], 3)];
        let a = few_step_generate(&f, &sched, &noise, &rn).unwrap();
        let mut g = Graph::new();
        let wv = g.constant(w.clone()).unwrap();
        let mut m = |g: &mut Graph, x: Var, t: f64| {
            let y = g.mul(x, wv)?;
            g.add_const(y, &Tensor::full(&[3], t))
        };
        let out = few_step_generate_graph(&mut g, &mut m, &sched, &noise, &rn).unwrap();
        assert!(g.value(out).max_abs_diff(&a).unwrap() < 1e-15);
    }

    #[test]
    fn schedule_validation() {
        assert!(StudentSchedule::new(vec![]).is_err());
        assert!(StudentSchedule::new(vec![0.9, 0.5]).is_err());
        assert!(StudentSchedule::new(vec![1.0, 1.0]).is_err());
        assert!(StudentSchedule::new(vec![1.0, 0.0]).is_err());
        assert_eq!(StudentSchedule::uniform(4).unwrap().levels(), &[1.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn window_noise_slices_agree() {
        let w = window_noise(5, 1, 0, 6, &[2, 3]).unwrap();
        let part = window_noise(5, 1, 2, 3, &[2, 3]).unwrap();
        assert_eq!(w.slice_outer(2, 3).unwrap(), part);
        assert_ne!(window_noise(5, 0, 0, 6, &[2, 3]).unwrap(), w);
    }
}
