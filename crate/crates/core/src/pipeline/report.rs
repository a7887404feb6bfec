use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::chunking::CacheStats;
use crate::error::{Error, Result};
use crate::pipeline::topology::Case;

/// Per-chunk timestamps (ms from stream start) and their summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTBCReport {
    pub case: Case,
    pub chunk_ready_ms: Vec<f64>,
    pub decode_done_ms: Vec<f64>,
    pub emitted_ms: Vec<f64>,
    /// `emitted[i] - emitted[i - 1]`; the first entry is the first chunk's latency.
    pub ttbc_ms: Vec<f64>,
    pub score_stage_ms: Vec<f64>,
    pub decode_stage_ms: Vec<f64>,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    /// Time the score stage spent blocked on a full queue.
    pub stall_ms: f64,
    pub cache_stats: Option<CacheStats>,
    /// Set when a stage failed and the stream stopped early.
    pub aborted: Option<String>,
}

/// Nearest-rank quantile; `q` in (0, 1].
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

impl TTBCReport {
    pub fn from_timestamps(
        case: Case,
        chunk_ready_ms: Vec<f64>,
        decode_done_ms: Vec<f64>,
        emitted_ms: Vec<f64>,
        score_stage_ms: Vec<f64>,
        decode_stage_ms: Vec<f64>,
    ) -> Self {
        let ttbc_ms: Vec<f64> = emitted_ms
            .iter()
            .enumerate()
            .map(|(i, e)| if i == 0 { *e } else { e - emitted_ms[i - 1] })
            .collect();
        let mut r = TTBCReport {
            case,
            chunk_ready_ms,
            decode_done_ms,
            emitted_ms,
            ttbc_ms,
            score_stage_ms,
            decode_stage_ms,
            mean_ms: 0.0,
            p95_ms: 0.0,
            max_ms: 0.0,
            stall_ms: 0.0,
            cache_stats: None,
            aborted: None,
        };
        r.summarize();
        r
    }

    fn summarize(&mut self) {
        let n = self.ttbc_ms.len();
        if n == 0 {
            return;
        }
        self.mean_ms = self.ttbc_ms.iter().sum::<f64>() / n as f64;
        self.p95_ms = quantile(&self.ttbc_ms, 0.95).unwrap_or(0.0);
        self.max_ms = self.ttbc_ms.iter().copied().fold(f64::MIN, f64::max);
    }

    pub fn len(&self) -> usize {
        self.ttbc_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ttbc_ms.is_empty()
    }

    /// Least-squares slope of ttbc against chunk index, in ms per chunk.
    pub fn ttbc_slope(&self) -> Option<f64> {
        let n = self.ttbc_ms.len();
        if n < 2 {
            return None;
        }
        let xm = (n - 1) as f64 / 2.0;
        let ym = self.mean_ms;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (i, y) in self.ttbc_ms.iter().enumerate() {
            let dx = i as f64 - xm;
            sxy += dx * (y - ym);
            sxx += dx * dx;
        }
        Some(sxy / sxx)
    }

    /// Per-chunk CSV: `chunk_idx,ttbc_ms,score_ms,decode_ms,emitted_ms`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["chunk_idx", "ttbc_ms", "score_ms", "decode_ms", "emitted_ms"])
            .map_err(csv_err)?;
        for i in 0..self.len() {
            out.write_record([
                i.to_string(),
                format!("{:.3}", self.ttbc_ms[i]),
                format!("{:.3}", self.score_stage_ms.get(i).copied().unwrap_or(f64::NAN)),
                format!("{:.3}", self.decode_stage_ms.get(i).copied().unwrap_or(f64::NAN)),
                format!("{:.3}", self.emitted_ms[i]),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Which statistic must beat the chunk duration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RealtimeRule {
    #[default]
    P95,
    Max,
}

/// Real time iff the chosen ttbc statistic is below `frames_per_chunk / fps`.
pub fn realtime_check(report: &TTBCReport, fps: f64, frames_per_chunk: usize, rule: RealtimeRule) -> Result<bool> {
    if !(fps > 0.0) || frames_per_chunk == 0 {
        return Err(Error::Configuration(format!(
            "fps {fps} and frames_per_chunk {frames_per_chunk} must be positive"
        )));
    }
    if report.is_empty() {
        return Err(Error::contract("real-time check on an empty report"));
    }
    let budget = frames_per_chunk as f64 / fps * 1e3;
    let stat = match rule {
        RealtimeRule::P95 => report.p95_ms,
        RealtimeRule::Max => report.max_ms,
    };
    Ok(stat < budget)
}
