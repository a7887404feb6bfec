use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::report::TTBCReport;

/// Server layouts compared in the latency study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Case {
    /// One device does scoring, transfer and decoding in sequence.
    SelfContained1,
    /// Two devices split each scoring pass (sequence parallel), then decode.
    SelfContained2SP,
    /// One score worker and one decoder, overlapped.
    Disagg1Plus1,
    /// Two sequence-parallel score workers and one decoder, overlapped.
    Disagg2Plus1,
}

impl Case {
    pub const ALL: [Case; 4] = [
        Case::SelfContained1,
        Case::SelfContained2SP,
        Case::Disagg1Plus1,
        Case::Disagg2Plus1,
    ];

    pub fn score_workers(self) -> usize {
        match self {
            Case::SelfContained1 | Case::Disagg1Plus1 => 1,
            Case::SelfContained2SP | Case::Disagg2Plus1 => 2,
        }
    }

    pub fn disaggregated(self) -> bool {
        matches!(self, Case::Disagg1Plus1 | Case::Disagg2Plus1)
    }

    pub fn number(self) -> usize {
        match self {
            Case::SelfContained1 => 1,
            Case::SelfContained2SP => 2,
            Case::Disagg1Plus1 => 3,
            Case::Disagg2Plus1 => 4,
        }
    }
}

impl std::str::FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Case> {
        let k = s.to_ascii_lowercase().replace(['-', '_'], "");
        Ok(match k.as_str() {
            "1" | "case1" | "selfcontained1" => Case::SelfContained1,
            "2" | "case2" | "selfcontained2sp" => Case::SelfContained2SP,
            "3" | "case3" | "disagg1plus1" => Case::Disagg1Plus1,
            "4" | "case4" | "disagg2plus1" => Case::Disagg2Plus1,
            _ => return Err(Error::Configuration(format!("unknown topology `{s}`"))),
        })
    }
}

/// Modeled per-stage costs in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    /// One denoising step for one chunk on a single worker.
    pub score_ms_per_chunk_per_step: f64,
    /// Denoising steps per chunk.
    pub steps: usize,
    pub decode_ms: f64,
    pub transfer_ms: f64,
    /// Added once per step when scoring is split over several workers.
    pub collective_ms: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            score_ms_per_chunk_per_step: 60.0,
            steps: 2,
            decode_ms: 25.0,
            transfer_ms: 5.0,
            collective_ms: 8.0,
        }
    }
}

impl CostModel {
    pub fn zero(steps: usize) -> Self {
        CostModel {
            score_ms_per_chunk_per_step: 0.0,
            steps,
            decode_ms: 0.0,
            transfer_ms: 0.0,
            collective_ms: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = [
            self.score_ms_per_chunk_per_step,
            self.decode_ms,
            self.transfer_ms,
            self.collective_ms,
        ];
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) || self.steps == 0 {
            return Err(Error::Configuration(format!("invalid cost model {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub case: Case,
    pub cost: CostModel,
    /// Score workers; decoders are always one.
    pub workers: usize,
}

impl Topology {
    pub fn new(case: Case, cost: CostModel) -> Self {
        Topology {
            case,
            cost,
            workers: case.score_workers(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cost.validate()?;
        if self.workers == 0 {
            return Err(Error::Configuration("topology needs at least one score worker".into()));
        }
        Ok(())
    }

    /// Modeled time of one denoising step on the score stage.
    pub fn step_ms(&self) -> f64 {
        let c = &self.cost;
        let collective = if self.workers > 1 { c.collective_ms } else { 0.0 };
        c.score_ms_per_chunk_per_step / self.workers as f64 + collective
    }

    pub fn score_ms(&self) -> f64 {
        self.step_ms() * self.cost.steps as f64
    }

    /// Transfer plus decode, the decoder stage's share.
    pub fn decode_stage_ms(&self) -> f64 {
        self.cost.transfer_ms + self.cost.decode_ms
    }

    /// Steady-state time between chunks.
    pub fn steady_ttbc_ms(&self) -> f64 {
        if self.case.disaggregated() {
            self.score_ms().max(self.decode_stage_ms())
        } else {
            self.score_ms() + self.decode_stage_ms()
        }
    }
}

/// Event-driven prediction of a stream's timestamps, with no model execution.
///
/// Disaggregated cases hand chunks to the decoder through a queue of
/// `queue_depth` slots; the score stage stalls only when it is full.
pub fn simulate_topology(topology: &Topology, n_chunks: usize, queue_depth: usize) -> Result<TTBCReport> {
    topology.validate()?;
    if n_chunks == 0 || queue_depth == 0 {
        return Err(Error::Configuration("simulation needs chunks and a queue".into()));
    }
    let score = topology.score_ms();
    let dec = topology.decode_stage_ms();
    let mut ready = Vec::with_capacity(n_chunks);
    let mut done = Vec::with_capacity(n_chunks);
    let mut take: Vec<f64> = Vec::with_capacity(n_chunks);
    let mut free_at = 0.0;
    for i in 0..n_chunks {
        let r = free_at + score;
        if topology.case.disaggregated() {
            let tk = r.max(done.last().copied().unwrap_or(0.0));
            // Send returns once fewer than `queue_depth` chunks are waiting.
            let sent = if i >= queue_depth { r.max(take[i - queue_depth]) } else { r };
            done.push(tk + dec);
            take.push(tk);
            free_at = sent;
        } else {
            done.push(r + dec);
            take.push(r);
            free_at = r + dec;
        }
        ready.push(r);
    }
    Ok(TTBCReport::from_timestamps(
        topology.case,
        ready,
        done.clone(),
        done,
        vec![score; n_chunks],
        vec![dec; n_chunks],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn steady(case: Case, cost: CostModel) -> f64 {
        let r = simulate_topology(&Topology::new(case, cost), 50, 2).unwrap();
        r.ttbc_ms[10..].iter().sum::<f64>() / 40.0
    }

    #[test]
    fn default_cost_model_values() {
        let c = CostModel::default();
        assert!((steady(Case::SelfContained1, c) - 150.0).abs() < 1e-9);
        assert!((steady(Case::SelfContained2SP, c) - 106.0).abs() < 1e-9);
        assert!((steady(Case::Disagg1Plus1, c) - 120.0).abs() < 1e-9);
        assert!((steady(Case::Disagg2Plus1, c) - 76.0).abs() < 1e-9);
    }

    #[test]
    fn free_decode_makes_cases_agree() {
        let c = CostModel {
            decode_ms: 0.0,
            transfer_ms: 0.0,
            ..CostModel::default()
        };
        assert_eq!(steady(Case::SelfContained1, c), steady(Case::Disagg1Plus1, c));
        assert_eq!(steady(Case::SelfContained2SP, c), steady(Case::Disagg2Plus1, c));
    }

    #[test]
    fn larger_score_cost_keeps_case4_ahead_of_case2() {
        let c = CostModel {
            score_ms_per_chunk_per_step: 60.0,
            steps: 2,
            decode_ms: 40.0,
            transfer_ms: 5.0,
            collective_ms: 8.0,
        };
        assert!(steady(Case::Disagg2Plus1, c) < steady(Case::SelfContained2SP, c));
    }

    #[test]
    fn sp_without_collective_halves_score() {
        let c = CostModel {
            collective_ms: 0.0,
            ..CostModel::default()
        };
        let one = Topology::new(Case::SelfContained1, c).score_ms();
        let two = Topology::new(Case::SelfContained2SP, c).score_ms();
        assert_eq!(two * 2.0, one);
    }

    #[test]
    fn slow_decoder_becomes_the_bottleneck() {
        let c = CostModel {
            decode_ms: 200.0,
            ..CostModel::default()
        };
        assert!((steady(Case::Disagg1Plus1, c) - 205.0).abs() < 1e-9);
    }

    #[test]
    fn parse_case_names() {
        assert_eq!("disagg-1-plus-1".parse::<Case>().unwrap(), Case::Disagg1Plus1);
        assert_eq!("Case4".parse::<Case>().unwrap(), Case::Disagg2Plus1);
        assert!("case5".parse::<Case>().is_err());
    }
}
