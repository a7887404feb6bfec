use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunking::{build_full_mask, build_sparse_mask, AttnPattern, ChunkLayout, PatternKind};
use crate::distill::dmd::{dmd_gradient, dmd_loss_graph, regression_loss_graph, MixSchedule, SampleKind};
use crate::error::{Error, Result};
use crate::model::{
    expect_pattern, generate_streaming, generate_window, velocity_graph, AttnContext, Conditioning, Dit, Mode,
};
use crate::numerics::optim::{accumulate_grads, scale_grads};
use crate::numerics::{Adam, AdamConfig, Graph, ParamSet, Tensor};
use crate::schedule::{
    derive_seed, few_step_generate_graph, fm_loss_graph, gaussian, window_noise, LogitNormalSampler,
    StudentSchedule,
};
use crate::synthdata::{Clip, PseudoVAE};

/// One training example: conditioning plus, for real clips, the clean latents.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub kind: SampleKind,
    /// `[frames, frame_tokens, latent_dim]`.
    pub latents: Tensor,
    pub cond: Conditioning,
}

/// Encode a clip; its first frame becomes the reference image.
pub fn clip_sample(clip: &Clip, vae: &PseudoVAE, model_dim: usize) -> Result<Sample> {
    let latents = vae.encode(&clip.frames)?;
    let s = latents.shape().to_vec();
    let reference_frame = latents.slice_outer(0, 1)?.reshape(&s[1..])?;
    Ok(Sample {
        kind: SampleKind::Real,
        latents,
        cond: Conditioning {
            style: Tensor::zeros(&[model_dim]),
            reference_frame,
            audio: clip.audio.clone(),
            modes: clip.modes.clone(),
        },
    })
}

fn sample_noise(latents_shape: &[usize], seed: u64) -> Result<Tensor> {
    window_noise(seed, 0, 0, latents_shape[0], &latents_shape[1..])
}

fn tag_numeric(e: Error, what: &str, t: f64, seed: u64, input: &Tensor) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!(
            "{m} [{what}: t={t}, seed={seed}, input checksum {:016x}]",
            input.checksum()
        )),
        other => other,
    }
}

/// Flow-matching loss and parameter gradients of `model` on one window.
fn fm_grads(
    params: &ParamSet,
    model: &Dit,
    pattern: &AttnPattern,
    x1: &Tensor,
    cond: &Conditioning,
    t: f64,
    seed: u64,
) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
    let x0 = sample_noise(x1.shape(), seed)?;
    let xt = x0.zip_map(x1, |a, b| t * b + (1.0 - t) * a)?;
    let mut g = Graph::new();
    let p = g.bind(params)?;
    let x = g.constant(xt)?;
    let v = velocity_graph(&mut g, &p, &model.config, x, t, cond, &mut AttnContext::Window(pattern))?;
    let l = fm_loss_graph(&mut g, v, &x0, x1)?;
    let loss = g.value(l).item()?;
    Ok((loss, g.backward(l, params)?))
}

/// Audio-path parameters, the only ones trained in audio-only mode.
pub fn is_audio_param(name: &str) -> bool {
    name.starts_with("audio.") || name.contains(".xattn.")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Train only the audio path, leaving everything else frozen.
    pub audio_only: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            steps: 5000,
            batch: 1,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            seed: 0,
            audio_only: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherMetrics {
    pub step: usize,
    pub fm_loss: f64,
    pub wall_ms: f64,
}

/// Flow-matching trainer for the bidirectional teacher.
pub struct TeacherTrainer {
    pub model: Dit,
    pub config: TeacherConfig,
    pattern: AttnPattern,
    adam: Adam,
    sampler: LogitNormalSampler,
    step: usize,
}

impl TeacherTrainer {
    pub fn new(model: Dit, layout: &ChunkLayout, config: TeacherConfig) -> Result<Self> {
        if config.batch == 0 {
            return Err(Error::Configuration("teacher batch must be positive".into()));
        }
        Ok(TeacherTrainer {
            pattern: build_full_mask(layout)?,
            adam: Adam::new(config.adam),
            sampler: LogitNormalSampler::standard(derive_seed(config.seed, 1)),
            model,
            config,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update on `batch`; each sample gets its own timestep.
    pub fn step(&mut self, batch: &[Sample]) -> Result<TeacherMetrics> {
        let start = Instant::now();
        let mut acc = std::collections::BTreeMap::new();
        let mut total = 0.0;
        for (i, s) in batch.iter().enumerate() {
            let t = self.sampler.sample();
            let seed = derive_seed(self.config.seed, (self.step * batch.len() + i) as u64 + 1_000_000);
            let (loss, grads) = fm_grads(&self.model.params, &self.model, &self.pattern, &s.latents, &s.cond, t, seed)
                .map_err(|e| tag_numeric(e, "teacher", t, seed, &s.latents))?;
            total += loss;
            accumulate_grads(&mut acc, &grads)?;
        }
        scale_grads(&mut acc, 1.0 / batch.len() as f64);
        let audio_only = self.config.audio_only;
        self.adam
            .step(&mut self.model.params, &acc, &|n| audio_only && !is_audio_param(n))?;
        self.step += 1;
        Ok(TeacherMetrics {
            step: self.step,
            fm_loss: total / batch.len() as f64,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch: usize,
    pub schedule: StudentSchedule,
    pub lambda_reg: f64,
    pub synthetic_ratio: f64,
    /// Real-only phase; `None` means 40% of `steps`.
    pub warmup_steps: Option<usize>,
    pub fake_steps_per_student: usize,
    pub student_adam: AdamConfig,
    pub fake_adam: AdamConfig,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 3000,
            batch: 1,
            schedule: StudentSchedule::default(),
            lambda_reg: 0.25,
            synthetic_ratio: 0.5,
            warmup_steps: None,
            fake_steps_per_student: 1,
            student_adam: AdamConfig {
                lr: 2e-4,
                ..AdamConfig::default()
            },
            fake_adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn mix(&self) -> MixSchedule {
        match self.warmup_steps {
            Some(w) => MixSchedule {
                warmup_steps: w,
                synthetic_ratio: self.synthetic_ratio,
            },
            None => MixSchedule::for_total(self.steps, self.synthetic_ratio),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillMetrics {
    pub step: usize,
    pub dmd_loss: f64,
    pub reg_loss: f64,
    pub fake_loss: f64,
    pub mix_fraction: f64,
    pub wall_ms: f64,
}

/// Teacher, student and fake score for asymmetric distillation.
pub struct DistillState {
    pub teacher: Dit,
    pub student: Dit,
    pub fake: Dit,
    pub layout: ChunkLayout,
    pub config: DistillConfig,
    pub mix: MixSchedule,
    sparse: AttnPattern,
    full: AttnPattern,
    student_adam: Adam,
    fake_adam: Adam,
    sampler: LogitNormalSampler,
    rng: ChaCha8Rng,
    step: usize,
    teacher_checksum: u64,
}

impl DistillState {
    /// Student and fake score both start as copies of the teacher.
    pub fn new(teacher: Dit, layout: ChunkLayout, config: DistillConfig) -> Result<Self> {
        config.schedule.validate()?;
        let mix = config.mix();
        mix.validate()?;
        if config.batch == 0 || config.lambda_reg < 0.0 {
            return Err(Error::Configuration(format!(
                "batch {} and lambda_reg {} must be positive",
                config.batch, config.lambda_reg
            )));
        }
        if layout.frame_tokens != teacher.config.frame_tokens {
            return Err(Error::Configuration(format!(
                "layout has {} tokens per frame, model {}",
                layout.frame_tokens, teacher.config.frame_tokens
            )));
        }
        Ok(DistillState {
            student: teacher.clone(),
            fake: teacher.clone(),
            teacher_checksum: teacher.params.checksum(),
            teacher,
            sparse: build_sparse_mask(&layout)?,
            full: build_full_mask(&layout)?,
            student_adam: Adam::new(config.student_adam),
            fake_adam: Adam::new(config.fake_adam),
            sampler: LogitNormalSampler::standard(derive_seed(config.seed, 11)),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 12)),
            step: 0,
            layout,
            mix,
            config,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Checks that the teacher still has its initial parameters.
    pub fn verify_teacher_frozen(&self) -> Result<()> {
        if self.teacher.params.checksum() != self.teacher_checksum {
            return Err(Error::Invariant("teacher parameters changed during distillation".into()));
        }
        Ok(())
    }

    /// Few-step student window on `g`, differentiable in the student parameters.
    fn student_forward(&self, g: &mut Graph, cond: &Conditioning, shape: &[usize], seed: u64) -> Result<crate::numerics::Var> {
        expect_pattern(&self.sparse, PatternKind::SparseCausal, "student")?;
        let frames = shape[0];
        let fs = &shape[1..];
        let noise = window_noise(seed, 0, 0, frames, fs)?;
        let renoise = (1..self.config.schedule.nfe())
            .map(|s| window_noise(seed, s, 0, frames, fs))
            .collect::<Result<Vec<_>>>()?;
        let p = g.bind(&self.student.params)?;
        let cfg = &self.student.config;
        let sparse = &self.sparse;
        let mut f = |g: &mut Graph, x, t: f64| velocity_graph(g, &p, cfg, x, t, cond, &mut AttnContext::Window(sparse));
        few_step_generate_graph(g, &mut f, &self.config.schedule, &noise, &renoise)
    }

    fn synthesize(&self, real: &Sample, seed: u64) -> Result<Sample> {
        let latents = generate_synthetic(&self.student, &self.layout, &self.config.schedule, &real.cond, seed)?;
        let s = latents.shape().to_vec();
        let reference_frame = latents.slice_outer(0, 1)?.reshape(&s[1..])?;
        Ok(Sample {
            kind: SampleKind::Synthetic,
            latents,
            cond: Conditioning {
                reference_frame,
                ..real.cond.clone()
            },
        })
    }

    /// One student update followed by `fake_steps_per_student` fake-score updates.
    pub fn distill_step(&mut self, batch: &[Sample]) -> Result<DistillMetrics> {
        let start = Instant::now();
        if batch.is_empty() {
            return Err(Error::contract("empty distillation batch"));
        }
        expect_pattern(&self.full, PatternKind::Full, "teacher")?;
        let kinds = self.mix.draw(self.step, batch.len(), &mut self.rng);
        let n_syn = kinds.iter().filter(|k| **k == SampleKind::Synthetic).count();

        let mut student_grads = std::collections::BTreeMap::new();
        let mut outputs = Vec::with_capacity(batch.len());
        let (mut dmd_total, mut reg_total, mut n_real) = (0.0, 0.0, 0usize);
        for (i, (real, kind)) in batch.iter().zip(&kinds).enumerate() {
            let seed = derive_seed(self.config.seed, (self.step * batch.len() + i) as u64 + 2_000_000);
            let sample = match kind {
                SampleKind::Real => real.clone(),
                SampleKind::Synthetic => self.synthesize(real, derive_seed(seed, 5))?,
            };
            // One timestep for the whole window, shared by every chunk.
            let t = self.sampler.sample();
            let tag = |e: Error| tag_numeric(e, "distill", t, seed, &sample.latents);

            let mut g = Graph::new();
            let x_gen = self.student_forward(&mut g, &sample.cond, sample.latents.shape(), seed).map_err(tag)?;
            let xg = g.value(x_gen).clone();
            let eps = gaussian(xg.shape(), derive_seed(seed, 1));
            let x_t = xg.zip_map(&eps, |a, e| t * a + (1.0 - t) * e)?;
            let u_real = self.teacher.forward_velocity(&x_t, t, &sample.cond, &self.full).map_err(tag)?;
            let u_fake = self.fake.forward_velocity(&x_t, t, &sample.cond, &self.full).map_err(tag)?;
            let d = dmd_gradient(&xg, &x_t, &[t], &u_real, &u_fake).map_err(tag)?;
            let mut loss = dmd_loss_graph(&mut g, x_gen, &d.grad)?;
            dmd_total += g.value(loss).item()?;
            if sample.kind == SampleKind::Real && self.config.lambda_reg > 0.0 {
                let r = regression_loss_graph(&mut g, x_gen, &sample.latents, SampleKind::Real)?;
                reg_total += g.value(r).item()?;
                n_real += 1;
                loss = g.axpby(loss, r, 1.0, self.config.lambda_reg)?;
            }
            let grads = g.backward(loss, &self.student.params).map_err(tag)?;
            accumulate_grads(&mut student_grads, &grads)?;
            outputs.push((xg, sample.cond, seed));
        }
        scale_grads(&mut student_grads, 1.0 / batch.len() as f64);
        self.student_adam.step(&mut self.student.params, &student_grads, &|_| false)?;

        let mut fake_loss = 0.0;
        for k in 0..self.config.fake_steps_per_student {
            let mut acc = std::collections::BTreeMap::new();
            let mut total = 0.0;
            for (xg, cond, seed) in &outputs {
                let t = self.sampler.sample();
                let s = derive_seed(*seed, 100 + k as u64);
                let (l, grads) = fm_grads(&self.fake.params, &self.fake, &self.full, xg, cond, t, s)
                    .map_err(|e| tag_numeric(e, "fake score", t, s, xg))?;
                total += l;
                accumulate_grads(&mut acc, &grads)?;
            }
            scale_grads(&mut acc, 1.0 / outputs.len() as f64);
            self.fake_adam.step(&mut self.fake.params, &acc, &|_| false)?;
            fake_loss = total / outputs.len() as f64;
        }
        self.step += 1;
        Ok(DistillMetrics {
            step: self.step,
            dmd_loss: dmd_total / batch.len() as f64,
            reg_loss: if n_real > 0 { reg_total / n_real as f64 } else { 0.0 },
            fake_loss,
            mix_fraction: n_syn as f64 / batch.len() as f64,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// A full window from the student, generated chunk by chunk with the cache.
pub fn generate_synthetic(
    student: &Dit,
    layout: &ChunkLayout,
    schedule: &StudentSchedule,
    cond: &Conditioning,
    seed: u64,
) -> Result<Tensor> {
    generate_streaming(student, cond, layout, schedule, seed, layout.chunks_per_window)
}

/// Append one JSON object per line.
pub fn write_jsonl<W: Write + ?Sized, T: Serialize>(w: &mut W, record: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, record)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Lip-sync of student generations, pooled over a set of clips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncEval {
    pub speaking: f64,
    pub silence: f64,
    /// Mean squared error between generated and ground-truth latents.
    pub latent_mse: f64,
}

/// [`evaluate_sync_with`] for few-step student windows under the sparse mask.
pub fn evaluate_sync(
    student: &Dit,
    layout: &ChunkLayout,
    schedule: &StudentSchedule,
    vae: &PseudoVAE,
    spec: &crate::synthdata::PuppetSpec,
    clips: &[Clip],
    seed: u64,
) -> Result<SyncEval> {
    let pattern = build_sparse_mask(layout)?;
    let gen = |c: &Conditioning, s: u64| generate_window(student, c, &pattern, schedule, s);
    evaluate_sync_with(&gen, student.config.model_dim, vae, spec, clips, seed)
}

/// Generate each clip's window with `gen`, decode, and correlate mouth
/// openness with the ground-truth amplitude.
///
/// Frames are pooled across clips per mode. A constant openness track has no
/// correlation; it is scored 0.
pub fn evaluate_sync_with(
    gen: &dyn Fn(&Conditioning, u64) -> Result<Tensor>,
    model_dim: usize,
    vae: &PseudoVAE,
    spec: &crate::synthdata::PuppetSpec,
    clips: &[Clip],
    seed: u64,
) -> Result<SyncEval> {
    let mut amp = Vec::new();
    let mut open = Vec::new();
    let mut modes = Vec::new();
    let (mut se, mut count) = (0.0, 0usize);
    for (i, clip) in clips.iter().enumerate() {
        let s = clip_sample(clip, vae, model_dim)?;
        let gen = gen(&s.cond, derive_seed(seed, i as u64))?;
        se += gen.sub(&s.latents)?.data().iter().map(|v| v * v).sum::<f64>();
        count += gen.len();
        let frames = vae.decode_now(&gen)?;
        open.extend(crate::synthdata::openness_track(&frames, spec)?);
        amp.extend_from_slice(&clip.amplitude);
        modes.extend_from_slice(&clip.modes);
    }
    let score = |m: Mode| -> Result<f64> {
        let (a, o): (Vec<f64>, Vec<f64>) = modes
            .iter()
            .zip(amp.iter().zip(&open))
            .filter(|(x, _)| **x == m)
            .map(|(_, (a, o))| (*a, *o))
            .unzip();
        if a.len() < 8 {
            return Err(Error::contract(format!("only {} {m:?} frames to score", a.len())));
        }
        match crate::synthdata::pearson(&a, &o) {
            Err(Error::UndefinedCorrelation(_)) => Ok(0.0),
            r => r,
        }
    };
    Ok(SyncEval {
        speaking: score(Mode::Speaking)?,
        silence: score(Mode::Silence)?,
        latent_mse: se / count as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthdata::{generate_clip, PuppetSpec};

    fn tiny() -> (Dit, ChunkLayout, Vec<Sample>) {
        let cfg = ModelConfig {
            model_dim: 8,
            heads: 2,
            blocks: 1,
            mlp_dim: 8,
            ..ModelConfig::default()
        };
        let spec = PuppetSpec {
            frames: 6,
            ..PuppetSpec::default()
        };
        let vae = PseudoVAE::new(spec.grid, 4, 1).unwrap();
        let layout = ChunkLayout::new(2, 3, 16).unwrap();
        let mut modes = vec![Mode::Speaking; 6];
        modes[4] = Mode::Silence;
        let samples = (0..2)
            .map(|s| clip_sample(&generate_clip(&spec, s, &modes).unwrap(), &vae, 8).unwrap())
            .collect();
        (Dit::init(cfg, 4).unwrap(), layout, samples)
    }

    #[test]
    fn audio_only_training_freezes_the_rest() {
        let (dit, layout, batch) = tiny();
        let mut tr = TeacherTrainer::new(
            dit.clone(),
            &layout,
            TeacherConfig {
                audio_only: true,
                ..TeacherConfig::default()
            },
        )
        .unwrap();
        tr.step(&batch).unwrap();
        for (name, t) in tr.model.params.iter() {
            let before = dit.params.get(name).unwrap();
            if is_audio_param(name) {
                continue;
            }
            assert_eq!(t, before, "{name} changed");
        }
        assert_ne!(tr.model.params.get("audio.w1").unwrap(), dit.params.get("audio.w1").unwrap());
    }

    #[test]
    fn teacher_loss_goes_down() {
        let (dit, layout, batch) = tiny();
        let mut tr = TeacherTrainer::new(dit, &layout, TeacherConfig::default()).unwrap();
        let first: f64 = (0..5).map(|_| tr.step(&batch).unwrap().fm_loss).sum();
        for _ in 0..60 {
            tr.step(&batch).unwrap();
        }
        let last: f64 = (0..5).map(|_| tr.step(&batch).unwrap().fm_loss).sum();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn distill_freezes_teacher_and_respects_warmup() {
        let (dit, layout, batch) = tiny();
        let mut st = DistillState::new(
            dit,
            layout,
            DistillConfig {
                steps: 4,
                batch: 2,
                synthetic_ratio: 1.0,
                ..DistillConfig::default()
            },
        )
        .unwrap();
        assert_eq!(st.mix.warmup_steps, 2);
        let m: Vec<_> = (0..4).map(|_| st.distill_step(&batch).unwrap()).collect();
        assert_eq!(m[0].mix_fraction, 0.0);
        assert_eq!(m[1].mix_fraction, 0.0);
        assert_eq!(m[2].mix_fraction, 1.0);
        assert_eq!(m[3].reg_loss, 0.0);
        st.verify_teacher_frozen().unwrap();
        assert_ne!(st.student.params, st.teacher.params);
        let mut out = Vec::new();
        write_jsonl(&mut out, &m[0]).unwrap();
        let line = String::from_utf8(out).unwrap();
        assert!(line.ends_with('\n') && line.contains("\"mix_fraction\":0.0"));
    }

    #[test]
    fn no_regression_and_matched_fake_leave_student_unchanged() {
        let (dit, layout, batch) = tiny();
        let mut st = DistillState::new(
            dit,
            layout,
            DistillConfig {
                lambda_reg: 0.0,
                synthetic_ratio: 0.0,
                ..DistillConfig::default()
            },
        )
        .unwrap();
        let before = st.student.params.clone();
        let m = st.distill_step(&batch).unwrap();
        assert_eq!(m.dmd_loss, 0.0);
        assert_eq!(st.student.params, before);
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let (dit, layout, batch) = tiny();
        let sched = StudentSchedule::default();
        let a = generate_synthetic(&dit, &layout, &sched, &batch[0].cond, 3).unwrap();
        let b = generate_synthetic(&dit, &layout, &sched, &batch[0].cond, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), batch[0].latents.shape());
    }
}
