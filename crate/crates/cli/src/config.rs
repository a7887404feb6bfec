use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use chunkstream::chunking::ChunkLayout;
use chunkstream::distill::{DistillConfig, TeacherConfig};
use chunkstream::model::ModelConfig;
use chunkstream::numerics::AdamConfig;
use chunkstream::pipeline::{Case, CostModel, RealtimeRule, StreamOptions, Topology, Transport};
use chunkstream::schedule::StudentSchedule;
use chunkstream::synthdata::{DatasetConfig, PseudoVAE, PuppetSpec};
use chunkstream::{Error, Result};

/// Dataset and pseudo-VAE settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub clips: usize,
    pub seed: u64,
    pub silence_prob: f64,
    pub val_fraction: f64,
    pub spec: PuppetSpec,
    /// Side of the square pixel patch folded into one latent token.
    pub vae_patch: usize,
    pub vae_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        DataSection {
            clips: d.clips,
            seed: d.seed,
            silence_prob: d.silence_prob,
            val_fraction: d.val_fraction,
            spec: d.spec,
            vae_patch: 4,
            vae_seed: 7,
        }
    }
}

impl DataSection {
    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            clips: self.clips,
            seed: self.seed,
            silence_prob: self.silence_prob,
            val_fraction: self.val_fraction,
            spec: self.spec.clone(),
        }
    }

    pub fn vae(&self) -> Result<PseudoVAE> {
        PseudoVAE::new(self.spec.grid, self.vae_patch, self.vae_seed)
    }
}

/// Chunking and the student's noise levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub frames_per_chunk: usize,
    pub chunks_per_window: usize,
    /// Noise level at each student step, starting at 1.
    pub student: StudentSchedule,
    /// Euler steps when sampling the teacher.
    pub teacher_ode_steps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let l = ChunkLayout::default();
        ScheduleSection {
            frames_per_chunk: l.frames_per_chunk,
            chunks_per_window: l.chunks_per_window,
            student: StudentSchedule::default(),
            teacher_ode_steps: 12,
        }
    }
}

/// Distillation settings; the step schedule comes from `schedule.student`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub steps: usize,
    pub batch: usize,
    pub lambda_reg: f64,
    pub synthetic_ratio: f64,
    pub warmup_steps: Option<usize>,
    pub fake_steps_per_student: usize,
    pub student_adam: AdamConfig,
    pub fake_adam: AdamConfig,
    pub seed: u64,
    /// Held-out clips generated by the student for the sync evaluation.
    pub eval_clips: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            steps: d.steps,
            batch: d.batch,
            lambda_reg: d.lambda_reg,
            synthetic_ratio: d.synthetic_ratio,
            warmup_steps: d.warmup_steps,
            fake_steps_per_student: d.fake_steps_per_student,
            student_adam: d.student_adam,
            fake_adam: d.fake_adam,
            seed: d.seed,
            eval_clips: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub case: Case,
    pub cost: CostModel,
    /// Score workers; `None` uses the case's own count.
    pub workers: Option<usize>,
    pub fps: f64,
    pub n_chunks: usize,
    pub queue_depth: usize,
    pub transport: Transport,
    pub realtime_rule: RealtimeRule,
    /// Turn-taking script such as `"0:speak,40:silence"`.
    pub mode_script: Option<String>,
    /// Seed of the streamed puppet track and the stream noise.
    pub seed: u64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            case: Case::Disagg1Plus1,
            cost: CostModel::default(),
            workers: None,
            fps: 25.0,
            n_chunks: 100,
            queue_depth: 2,
            transport: Transport::InProcess,
            realtime_rule: RealtimeRule::P95,
            mode_script: None,
            seed: 0,
        }
    }
}

impl PipelineSection {
    pub fn topology(&self, case: Case) -> Topology {
        let mut t = Topology::new(case, self.cost);
        if let Some(w) = self.workers {
            t.workers = w;
        }
        t
    }

    pub fn options(&self) -> StreamOptions {
        StreamOptions {
            queue_depth: self.queue_depth,
            transport: self.transport,
        }
    }
}

/// Every setting of every command, in one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub schedule: ScheduleSection,
    pub teacher: TeacherConfig,
    pub distill: DistillSection,
    pub pipeline: PipelineSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSection::default(),
            model: ModelConfig::default(),
            schedule: ScheduleSection::default(),
            teacher: TeacherConfig::default(),
            distill: DistillSection::default(),
            pipeline: PipelineSection::default(),
        }
    }
}

impl RunConfig {
    /// Load `path` (or defaults) and apply `path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Configuration(format!("cannot read {}: {e}", p.display())))?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| Error::Configuration(format!("{}: {e}", p.display())))?;
                // Round trip through the typed config so unknown keys fail here.
                serde_json::to_value(from_value(v)?)?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg = from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.layout()?;
        self.schedule.student.validate()?;
        self.data.spec.validate()?;
        let vae = self.data.vae()?;
        if vae.tokens_per_frame() != self.model.frame_tokens || vae.latent_dim() != self.model.latent_dim {
            return Err(Error::Configuration(format!(
                "pseudo-VAE gives {} tokens of {} values per frame, model expects {} of {}",
                vae.tokens_per_frame(),
                vae.latent_dim(),
                self.model.frame_tokens,
                self.model.latent_dim
            )));
        }
        if self.data.spec.audio_rate != self.model.audio_tokens_per_frame || self.data.spec.audio_dim != self.model.audio_dim {
            return Err(Error::Configuration("puppet audio shape does not match model.audio_*".into()));
        }
        if self.layout()?.window_frames() != self.data.spec.frames {
            return Err(Error::Configuration(format!(
                "window of {} frames but clips have {}",
                self.layout()?.window_frames(),
                self.data.spec.frames
            )));
        }
        if !(self.pipeline.fps > 0.0) {
            return Err(Error::Configuration(format!("fps {} must be positive", self.pipeline.fps)));
        }
        self.pipeline.topology(self.pipeline.case).validate()?;
        Ok(())
    }

    pub fn layout(&self) -> Result<ChunkLayout> {
        ChunkLayout::new(
            self.schedule.frames_per_chunk,
            self.schedule.chunks_per_window,
            self.model.frame_tokens,
        )
    }

    pub fn distill_config(&self) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            steps: d.steps,
            batch: d.batch,
            schedule: self.schedule.student.clone(),
            lambda_reg: d.lambda_reg,
            synthetic_ratio: d.synthetic_ratio,
            warmup_steps: d.warmup_steps,
            fake_steps_per_student: d.fake_steps_per_student,
            student_adam: d.student_adam,
            fake_adam: d.fake_adam,
            seed: d.seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Write the resolved config as `resolved_config.json` in `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("resolved_config.json"), self.to_json()?)?;
        Ok(())
    }
}

fn from_value(v: Value) -> Result<RunConfig> {
    serde_json::from_value(v).map_err(|e| Error::Configuration(format!("config: {e}")))
}

/// Set `a.b.c=value` in `doc`. The value is parsed as JSON, falling back to a
/// plain string. Every path segment must already exist.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Configuration(format!("override `{spec}` is not path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.trim().split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Configuration(format!("`{}` is not a section", keys[..i].join("."))))?;
        node = obj
            .get_mut(*k)
            .ok_or_else(|| Error::Configuration(format!("unknown config key `{}`", keys[..=i].join("."))))?;
    }
    *node = value;
    Ok(())
}
