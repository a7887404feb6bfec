use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use chunkstream::distill::{
    clip_sample, evaluate_sync, write_jsonl, DistillMetrics, DistillState, Sample, SyncEval, TeacherMetrics,
    TeacherTrainer,
};
use chunkstream::model::{Dit, Mode};
use chunkstream::numerics::serialize::write_tensor;
use chunkstream::numerics::Tensor;
use chunkstream::pipeline::{
    parse_mode_script, realtime_check, run_stream, simulate_topology, Case, StreamSession, TTBCReport,
};
use chunkstream::schedule::{derive_seed, StudentSchedule};
use chunkstream::synthdata::{
    generate_clip, load_dataset, openness_track, pearson, write_dataset, Clip, Manifest, PuppetSpec,
};
use chunkstream::{Error, Result};

use crate::checkpoint;
use crate::config::RunConfig;

fn numeric_guard(what: &str, step: usize, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} is {value} at step {step}")))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Write a dataset into `out`, which must be empty unless `force`.
pub fn datagen(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        if !force {
            return Err(Error::Configuration(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        fs::remove_dir_all(out)?;
    }
    let m = write_dataset(out, &cfg.data.dataset())?;
    cfg.write_resolved(out)?;
    Ok(m)
}

/// Real samples of one split, checked against the configured puppet spec.
pub fn load_samples(cfg: &RunConfig, data: &Path, split: &str) -> Result<(Vec<Clip>, Vec<Sample>)> {
    let (manifest, clips) = load_dataset(data, Some(split))?;
    if manifest.spec != cfg.data.spec {
        return Err(Error::Configuration(format!(
            "dataset {} was generated with a different puppet spec",
            data.display()
        )));
    }
    if clips.is_empty() {
        return Err(Error::Configuration(format!("dataset {} has no {split} clips", data.display())));
    }
    let vae = cfg.data.vae()?;
    let samples = clips
        .iter()
        .map(|c| clip_sample(c, &vae, cfg.model.model_dim))
        .collect::<Result<Vec<_>>>()?;
    Ok((clips, samples))
}

/// Deterministic pseudo-random pick of `n` samples for one step.
fn pick(samples: &[Sample], seed: u64, step: usize, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| samples[derive_seed(seed, (step * n + i) as u64) as usize % samples.len()].clone())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub steps: usize,
    /// Mean FM loss over the first and last `min(100, steps)` steps.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Flow-matching training of the teacher; writes `teacher.{params,json}`,
/// `metrics.jsonl`, `summary.json` and the resolved config into `out`.
pub fn train_teacher(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TeacherSummary> {
    let (_, samples) = load_samples(cfg, data, "train")?;
    let layout = cfg.layout()?;
    fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    let model = Dit::init(cfg.model.clone(), derive_seed(cfg.teacher.seed, 0))?;
    let mut trainer = TeacherTrainer::new(model, &layout, cfg.teacher.clone())?;
    let mut log = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let mut losses = Vec::with_capacity(cfg.teacher.steps);
    for step in 0..cfg.teacher.steps {
        let batch = pick(&samples, derive_seed(cfg.teacher.seed, 2), step, cfg.teacher.batch);
        let m: TeacherMetrics = trainer.step(&batch)?;
        write_jsonl(&mut log, &m)?;
        numeric_guard("flow-matching loss", m.step, m.fm_loss)?;
        losses.push(m.fm_loss);
    }
    log.flush()?;
    checkpoint::save(&out.join("teacher"), &trainer.model, "teacher", cfg.teacher.steps)?;
    let k = losses.len().clamp(1, 100);
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let summary = TeacherSummary {
        steps: cfg.teacher.steps,
        initial_loss: mean(&losses[..k.min(losses.len())]),
        final_loss: mean(&losses[losses.len().saturating_sub(k)..]),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub steps: usize,
    pub last: Option<DistillMetrics>,
    pub eval: SyncEval,
}

fn eval_clips<'a>(cfg: &RunConfig, clips: &'a [Clip]) -> &'a [Clip] {
    &clips[..cfg.distill.eval_clips.min(clips.len())]
}

/// Distill `teacher` into a sparse-causal few-step student; returns the state
/// and the held-out evaluation.
pub fn distill_in_memory(
    cfg: &RunConfig,
    teacher: Dit,
    train: &[Sample],
    val: &[Clip],
    log: &mut dyn Write,
) -> Result<(DistillState, DistillSummary)> {
    let layout = cfg.layout()?;
    let dc = cfg.distill_config();
    let mut state = DistillState::new(teacher, layout, dc.clone())?;
    let mut last = None;
    for step in 0..dc.steps {
        let batch = pick(train, derive_seed(dc.seed, 3), step, dc.batch);
        let m = state.distill_step(&batch)?;
        write_jsonl(log, &m)?;
        numeric_guard("distillation loss", m.step, m.dmd_loss + m.reg_loss + m.fake_loss)?;
        last = Some(m);
    }
    state.verify_teacher_frozen()?;
    let eval = evaluate_sync(
        &state.student,
        &layout,
        &dc.schedule,
        &cfg.data.vae()?,
        &cfg.data.spec,
        eval_clips(cfg, val),
        derive_seed(dc.seed, 99),
    )?;
    Ok((
        state,
        DistillSummary {
            steps: dc.steps,
            last,
            eval,
        },
    ))
}

/// Writes `student.*`, `fake.*`, `metrics.jsonl`, `summary.json` into `out`.
pub fn distill(cfg: &RunConfig, data: &Path, teacher: &Path, out: &Path) -> Result<DistillSummary> {
    let (teacher, _) = checkpoint::load(teacher)?;
    if teacher.config != cfg.model {
        return Err(Error::Configuration("teacher checkpoint does not match model config".into()));
    }
    let (_, train) = load_samples(cfg, data, "train")?;
    let (val, _) = load_samples(cfg, data, "val")?;
    fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    let mut log = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let (state, summary) = distill_in_memory(cfg, teacher, &train, &val, &mut log)?;
    log.flush()?;
    checkpoint::save(&out.join("student"), &state.student, "student", summary.steps)?;
    checkpoint::save(&out.join("fake"), &state.fake, "fake", summary.steps)?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// A long puppet track for streaming, with modes from the configured script.
pub fn stream_track(cfg: &RunConfig) -> Result<(Clip, PuppetSpec, Vec<(usize, Mode)>)> {
    let p = &cfg.pipeline;
    let fpc = cfg.schedule.frames_per_chunk;
    let script = match &p.mode_script {
        Some(s) => parse_mode_script(s)?,
        None => Vec::new(),
    };
    let frames = p.n_chunks * fpc;
    let mut modes = vec![Mode::Speaking; frames];
    for (i, &(chunk, mode)) in script.iter().enumerate() {
        let end = script.get(i + 1).map_or(p.n_chunks, |n| n.0).min(p.n_chunks);
        if chunk < end {
            modes[chunk * fpc..end * fpc].fill(mode);
        }
    }
    let spec = PuppetSpec {
        frames,
        ..cfg.data.spec.clone()
    };
    let clip = generate_clip(&spec, derive_seed(p.seed, 5), &modes)?;
    Ok((clip, spec, script))
}

/// Pooled per-mode sync of decoded frames; `None` when a mode has too few frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSync {
    pub speaking: Option<f64>,
    pub silence: Option<f64>,
}

pub fn segment_sync(frames: &Tensor, clip: &Clip, spec: &PuppetSpec) -> Result<SegmentSync> {
    let n = frames.shape()[0];
    let open = openness_track(frames, spec)?;
    let score = |m: Mode| -> Result<Option<f64>> {
        let (a, o): (Vec<f64>, Vec<f64>) = (0..n)
            .filter(|&i| clip.modes[i] == m)
            .map(|i| (clip.amplitude[i], open[i]))
            .unzip();
        if a.len() < 8 {
            return Ok(None);
        }
        match pearson(&a, &o) {
            Ok(r) => Ok(Some(r)),
            Err(Error::UndefinedCorrelation(_)) => Ok(Some(0.0)),
            Err(e) => Err(e),
        }
    };
    Ok(SegmentSync {
        speaking: score(Mode::Speaking)?,
        silence: score(Mode::Silence)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub report: TTBCReport,
    pub realtime: bool,
    pub predicted_realtime: bool,
    pub predicted_mean_ms: f64,
    pub sync: SegmentSync,
}

/// Stream the configured track through `case`; decoded frames are returned in order.
pub fn stream_student(cfg: &RunConfig, student: &Dit, case: Case) -> Result<(StreamSummary, Tensor)> {
    let p = &cfg.pipeline;
    let layout = cfg.layout()?;
    let (clip, spec, script) = stream_track(cfg)?;
    let vae = cfg.data.vae()?;
    let sample = clip_sample(&clip, &vae, cfg.model.model_dim)?;
    let schedule: StudentSchedule = cfg.schedule.student.clone();
    let mut session = StreamSession::new(student.clone(), layout, schedule, sample.cond, derive_seed(p.seed, 6))?;
    for &(chunk, mode) in &script {
        if chunk < p.n_chunks {
            session.switch_mode(chunk, mode)?;
        }
    }
    let topo = p.topology(case);
    let mut frames = Vec::with_capacity(p.n_chunks * layout.frames_per_chunk * spec.grid.0 * spec.grid.1);
    let report = run_stream(&topo, &mut session, &vae, p.n_chunks, &p.options(), &mut |_, f| {
        frames.extend_from_slice(f.data());
        Ok(())
    })?;
    if let Some(why) = &report.aborted {
        return Err(Error::Invariant(format!("stream aborted: {why}")));
    }
    let decoded = Tensor::new(vec![report.len() * layout.frames_per_chunk, spec.grid.0, spec.grid.1], frames)?;
    let predicted = simulate_topology(&topo, p.n_chunks, p.queue_depth)?;
    let sync = segment_sync(&decoded, &clip, &spec)?;
    let fpc = layout.frames_per_chunk;
    Ok((
        StreamSummary {
            realtime: realtime_check(&report, p.fps, fpc, p.realtime_rule)?,
            predicted_realtime: realtime_check(&predicted, p.fps, fpc, p.realtime_rule)?,
            predicted_mean_ms: predicted.mean_ms,
            report,
            sync,
        },
        decoded,
    ))
}

/// Writes `report.json`, `ttbc.csv` (when `csv`), `frames.bin` and `summary.json`.
pub fn stream(cfg: &RunConfig, student: &Path, out: &Path, csv: bool) -> Result<StreamSummary> {
    let (dit, _) = checkpoint::load(student)?;
    fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    let (summary, frames) = stream_student(cfg, &dit, cfg.pipeline.case)?;
    write_json(&out.join("report.json"), &summary.report)?;
    if csv {
        summary.report.write_csv(File::create(out.join("ttbc.csv"))?)?;
    }
    let mut w = BufWriter::new(File::create(out.join("frames.bin"))?);
    write_tensor(&mut w, &frames)?;
    w.flush()?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub case: Case,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub realtime: bool,
    pub predicted_mean_ms: f64,
    pub slope_ms_per_chunk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    /// Named strict orderings of mean TTBC and whether each held.
    pub orderings: Vec<(String, bool)>,
}

impl BenchTable {
    pub fn row(&self, case: Case) -> &BenchRow {
        self.rows.iter().find(|r| r.case == case).expect("every case is benchmarked")
    }

    /// CSV with columns `case,mean_ms,p95_ms,realtime`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
        out.write_record(["case", "mean_ms", "p95_ms", "realtime"]).map_err(err)?;
        for r in &self.rows {
            out.write_record([
                format!("{:?}", r.case),
                format!("{:.3}", r.mean_ms),
                format!("{:.3}", r.p95_ms),
                r.realtime.to_string(),
            ])
            .map_err(err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Run all four topologies with one student and cost model.
pub fn bench_student(cfg: &RunConfig, student: &Dit) -> Result<BenchTable> {
    let mut rows = Vec::with_capacity(4);
    for case in Case::ALL {
        let (s, _) = stream_student(cfg, student, case)?;
        rows.push(BenchRow {
            case,
            mean_ms: s.report.mean_ms,
            p95_ms: s.report.p95_ms,
            max_ms: s.report.max_ms,
            realtime: s.realtime,
            predicted_mean_ms: s.predicted_mean_ms,
            slope_ms_per_chunk: s.report.ttbc_slope().unwrap_or(0.0),
        });
    }
    let mean = |c: Case| rows.iter().find(|r| r.case == c).map(|r| r.mean_ms).unwrap_or(f64::NAN);
    let orderings = vec![
        ("case3 < case2".to_string(), mean(Case::Disagg1Plus1) < mean(Case::SelfContained2SP)),
        ("case4 < case2".to_string(), mean(Case::Disagg2Plus1) < mean(Case::SelfContained2SP)),
        ("case2 < case1".to_string(), mean(Case::SelfContained2SP) < mean(Case::SelfContained1)),
        ("case4 < case3".to_string(), mean(Case::Disagg2Plus1) < mean(Case::Disagg1Plus1)),
    ];
    Ok(BenchTable { rows, orderings })
}

/// Writes `bench.json` and `bench.csv`.
pub fn bench(cfg: &RunConfig, student: &Path, out: &Path) -> Result<BenchTable> {
    let (dit, _) = checkpoint::load(student)?;
    fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    let table = bench_student(cfg, &dit)?;
    write_json(&out.join("bench.json"), &table)?;
    table.write_csv(File::create(out.join("bench.csv"))?)?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub frames_per_chunk: usize,
    pub steps: usize,
    pub sync_speaking: f64,
    pub sync_silence: f64,
    /// Latent MSE against held-out ground truth; lower is better.
    pub latent_mse: f64,
    /// Modeled score-stage time per chunk, scaled linearly from a 3-frame chunk.
    pub score_ms_per_chunk: f64,
}

/// The chunk-size by step-count grid.
pub const ABLATION_GRID: [(usize, usize); 4] = [(3, 2), (3, 4), (7, 2), (7, 4)];

pub fn ablate_in_memory(cfg: &RunConfig, teacher: &Dit, train: &[Sample], val: &[Clip]) -> Result<Vec<AblationCell>> {
    let window = cfg.layout()?.window_frames();
    let mut cells = Vec::with_capacity(4);
    for (fpc, steps) in ABLATION_GRID {
        if window % fpc != 0 {
            return Err(Error::Configuration(format!("window of {window} frames is not split by {fpc}")));
        }
        let mut c = cfg.clone();
        c.schedule.frames_per_chunk = fpc;
        c.schedule.chunks_per_window = window / fpc;
        c.schedule.student = StudentSchedule::uniform(steps)?;
        let (_, s) = distill_in_memory(&c, teacher.clone(), train, val, &mut std::io::sink())?;
        cells.push(AblationCell {
            frames_per_chunk: fpc,
            steps,
            sync_speaking: s.eval.speaking,
            sync_silence: s.eval.silence,
            latent_mse: s.eval.latent_mse,
            score_ms_per_chunk: cfg.pipeline.cost.score_ms_per_chunk_per_step * steps as f64 * fpc as f64 / 3.0,
        });
    }
    Ok(cells)
}

/// Writes `ablation.json` and `ablation.csv`.
pub fn ablate(cfg: &RunConfig, data: &Path, teacher: &Path, out: &Path) -> Result<Vec<AblationCell>> {
    let (teacher, _) = checkpoint::load(teacher)?;
    let (_, train) = load_samples(cfg, data, "train")?;
    let (val, _) = load_samples(cfg, data, "val")?;
    fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    let cells = ablate_in_memory(cfg, &teacher, &train, &val)?;
    write_json(&out.join("ablation.json"), &cells)?;
    let mut w = csv::Writer::from_writer(File::create(out.join("ablation.csv"))?);
    let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(["frames_per_chunk", "steps", "sync_speaking", "sync_silence", "latent_mse", "score_ms_per_chunk"])
        .map_err(err)?;
    for c in &cells {
        w.write_record([
            c.frames_per_chunk.to_string(),
            c.steps.to_string(),
            format!("{:.6}", c.sync_speaking),
            format!("{:.6}", c.sync_silence),
            format!("{:.6}", c.latent_mse),
            format!("{:.3}", c.score_ms_per_chunk),
        ])
        .map_err(err)?;
    }
    w.flush()?;
    Ok(cells)
}
