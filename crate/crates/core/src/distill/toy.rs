//! One-dimensional flow-matching and DMD experiments on an MLP velocity field.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::distill::dmd::{dmd_gradient, dmd_loss_graph};
use crate::error::{Error, Result};
use crate::model::{MlpConfig, VelocityMlp};
use crate::numerics::{Adam, AdamConfig, Graph, Tensor};
use crate::schedule::{
    derive_seed, few_step_generate_graph, fm_loss_graph, gaussian, LogitNormalSampler, StudentSchedule,
};

/// Target distribution of the toy experiments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum ToyData {
    Gaussian { mean: f64, std: f64 },
    PointMass { at: f64 },
}

impl ToyData {
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        match *self {
            ToyData::Gaussian { mean, std } => {
                let d = Normal::new(mean, std).map_err(|e| Error::Configuration(e.to_string()))?;
                Ok(Tensor::new(vec![n, 1], (0..n).map(|_| d.sample(rng)).collect())?)
            }
            ToyData::PointMass { at } => Ok(Tensor::full(&[n, 1], at)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyFmConfig {
    pub data: ToyData,
    pub steps: usize,
    pub batch: usize,
    pub mlp: MlpConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ToyFmConfig {
    fn default() -> Self {
        ToyFmConfig {
            data: ToyData::Gaussian { mean: 2.0, std: 0.5 },
            steps: 2000,
            batch: 256,
            mlp: MlpConfig::default(),
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

/// Flow-matching training of a [`VelocityMlp`]; returns the model and the loss curve.
pub fn train_fm(cfg: &ToyFmConfig) -> Result<(VelocityMlp, Vec<f64>)> {
    let mut model = VelocityMlp::init(cfg.mlp.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut sampler = LogitNormalSampler::standard(derive_seed(cfg.seed, 2));
    let mut adam = Adam::new(cfg.adam);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let x1 = cfg.data.sample(cfg.batch, &mut rng)?;
        let x0 = gaussian(&[cfg.batch, 1], derive_seed(cfg.seed, 1000 + step as u64));
        losses.push(fm_step(&mut model, &mut adam, &x1, &x0, &mut sampler)?);
    }
    Ok((model, losses))
}

/// One flow-matching update with a fresh timestep per row.
pub fn fm_step(
    model: &mut VelocityMlp,
    adam: &mut Adam,
    x1: &Tensor,
    x0: &Tensor,
    sampler: &mut LogitNormalSampler,
) -> Result<f64> {
    let n = x1.shape()[0];
    let t: Vec<f64> = (0..n).map(|_| sampler.sample()).collect();
    let per = x1.len() / n;
    let xt = Tensor::new(
        x1.shape().to_vec(),
        (0..x1.len())
            .map(|i| t[i / per] * x1.data()[i] + (1.0 - t[i / per]) * x0.data()[i])
            .collect(),
    )?;
    let mut g = Graph::new();
    let p = g.bind(&model.params)?;
    let xv = g.constant(xt)?;
    let v = model.graph(&mut g, &p, xv, &t)?;
    let l = fm_loss_graph(&mut g, v, x0, x1)?;
    let loss = g.value(l).item()?;
    let grads = g.backward(l, &model.params)?;
    adam.step(&mut model.params, &grads, &|_| false)?;
    Ok(loss)
}

/// Euler sampling of `n` draws.
pub fn sample_ode(model: &VelocityMlp, n: usize, steps: usize, seed: u64) -> Result<Tensor> {
    let noise = gaussian(&[n, 1], seed);
    let f = |x: &Tensor, t: f64| model.velocity(x, &vec![t; n]);
    crate::schedule::ode_sample(&f, &noise, steps)
}

/// Few-step sampling of `n` draws.
pub fn sample_few_step(model: &VelocityMlp, schedule: &StudentSchedule, n: usize, seed: u64) -> Result<Tensor> {
    let noise = gaussian(&[n, 1], seed);
    let renoise: Vec<Tensor> = (1..schedule.nfe()).map(|s| gaussian(&[n, 1], derive_seed(seed, s as u64))).collect();
    let f = |x: &Tensor, t: f64| model.velocity(x, &vec![t; n]);
    crate::schedule::few_step_generate(&f, schedule, &noise, &renoise)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDistillConfig {
    pub steps: usize,
    pub batch: usize,
    pub schedule: StudentSchedule,
    pub student_adam: AdamConfig,
    pub fake_adam: AdamConfig,
    pub fake_steps_per_student: usize,
    pub seed: u64,
}

impl Default for ToyDistillConfig {
    fn default() -> Self {
        ToyDistillConfig {
            steps: 2000,
            batch: 256,
            schedule: StudentSchedule::default(),
            student_adam: AdamConfig {
                lr: 2e-4,
                ..AdamConfig::default()
            },
            fake_adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            fake_steps_per_student: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDistillMetrics {
    pub step: usize,
    pub dmd_loss: f64,
    pub fake_loss: f64,
    pub mean: f64,
    pub std: f64,
}

/// DMD distillation of a few-step student from a frozen 1-D teacher. Student
/// and fake score both start from the teacher.
pub struct ToyDistill {
    pub config: ToyDistillConfig,
    pub teacher: VelocityMlp,
    pub student: VelocityMlp,
    pub fake: VelocityMlp,
    student_adam: Adam,
    fake_adam: Adam,
    sampler: LogitNormalSampler,
    step: usize,
}

impl ToyDistill {
    pub fn new(teacher: VelocityMlp, config: ToyDistillConfig) -> Result<Self> {
        config.schedule.validate()?;
        Ok(ToyDistill {
            student: teacher.clone(),
            fake: teacher.clone(),
            student_adam: Adam::new(config.student_adam),
            fake_adam: Adam::new(config.fake_adam),
            sampler: LogitNormalSampler::standard(derive_seed(config.seed, 3)),
            teacher,
            config,
            step: 0,
        })
    }

    pub fn step(&mut self) -> Result<ToyDistillMetrics> {
        let n = self.config.batch;
        let base = derive_seed(self.config.seed, 10_000 + self.step as u64);
        let noise = gaussian(&[n, 1], base);
        let renoise: Vec<Tensor> = (1..self.config.schedule.nfe())
            .map(|s| gaussian(&[n, 1], derive_seed(base, s as u64)))
            .collect();

        let mut g = Graph::new();
        let p = g.bind(&self.student.params)?;
        let student = &self.student;
        let mut f = |g: &mut Graph, x, t: f64| student.graph(g, &p, x, &vec![t; n]);
        let x_gen = few_step_generate_graph(&mut g, &mut f, &self.config.schedule, &noise, &renoise)?;
        let xg = g.value(x_gen).clone();

        let t: Vec<f64> = (0..n).map(|_| self.sampler.sample()).collect();
        let eps = gaussian(&[n, 1], derive_seed(base, 77));
        let x_t = Tensor::new(
            vec![n, 1],
            (0..n).map(|i| t[i] * xg.data()[i] + (1.0 - t[i]) * eps.data()[i]).collect(),
        )?;
        let u_real = self.teacher.velocity(&x_t, &t)?;
        let u_fake = self.fake.velocity(&x_t, &t)?;
        let d = dmd_gradient(&xg, &x_t, &t, &u_real, &u_fake)?;
        let l = dmd_loss_graph(&mut g, x_gen, &d.grad)?;
        let dmd_loss = g.value(l).item()?;
        let grads = g.backward(l, &self.student.params)?;
        self.student_adam.step(&mut self.student.params, &grads, &|_| false)?;

        let mut fake_loss = 0.0;
        for k in 0..self.config.fake_steps_per_student {
            let x0 = gaussian(&[n, 1], derive_seed(base, 200 + k as u64));
            fake_loss = fm_step(&mut self.fake, &mut self.fake_adam, &xg, &x0, &mut self.sampler)?;
        }
        self.step += 1;
        let mean = xg.mean();
        let std = (xg.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        Ok(ToyDistillMetrics {
            step: self.step,
            dmd_loss,
            fake_loss,
            mean,
            std,
        })
    }

    pub fn run(&mut self) -> Result<Vec<ToyDistillMetrics>> {
        (0..self.config.steps).map(|_| self.step()).collect()
    }
}

/// Sample mean and population standard deviation.
pub fn moments(x: &Tensor) -> (f64, f64) {
    let m = x.mean();
    let v = x.data().iter().map(|a| (a - m).powi(2)).sum::<f64>() / x.len() as f64;
    (m, v.sqrt())
}
