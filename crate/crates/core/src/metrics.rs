//! Online error aggregation, the adaptation-rate composite and the
//! initial-domain forgetting probe.

use serde::{Deserialize, Serialize};

use crate::engine::ensemble;
use crate::error::{Error, Result};
use crate::numnet::{forward, softmax, Matrix, NetworkParams, NetworkSpec, StatsMode};
use crate::streams::LabeledSet;
use crate::trio::ModelTrio;

pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_STABILITY_WEIGHT: f64 = 1.0;

/// Value `i` is the mean of the last `min(i + 1, k)` entries.
pub fn moving_average(trace: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidConfig("moving-average window must be >= 1".into()));
    }
    Ok((0..trace.len())
        .map(|i| {
            let w = &trace[(i + 1).saturating_sub(k)..=i];
            // shifted by the first value so constant windows stay exact
            w[0] + w.iter().map(|v| v - w[0]).sum::<f64>() / w.len() as f64
        })
        .collect())
}

fn smoothed(trace: &[f64], k: usize, min_len: usize) -> Result<Vec<f64>> {
    if trace.len() < min_len {
        return Err(Error::BatchTooSmall { context: "accuracy trace", needed: min_len, got: trace.len() });
    }
    if trace.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("accuracy trace"));
    }
    moving_average(trace, k)
}

/// Time to plateau: first 1-based step whose moving average reaches 80% of
/// the segment maximum.
pub fn ttp(trace: &[f64], k: usize) -> Result<usize> {
    let ma = smoothed(trace, k, 1)?;
    let max = ma.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = 0.8 * max;
    Ok(ma.iter().position(|&v| v >= threshold).expect("the maximum qualifies") + 1)
}

/// Mean of the positive consecutive differences of the moving average.
pub fn aps(trace: &[f64], k: usize) -> Result<f64> {
    let ma = smoothed(trace, k, 2)?;
    let pos: Vec<f64> = ma.windows(2).map(|w| w[1] - w[0]).filter(|&d| d > 0.0).collect();
    Ok(if pos.is_empty() { 0.0 } else { pos.iter().sum::<f64>() / pos.len() as f64 })
}

/// Population standard deviation of the moving average.
pub fn stability_std(trace: &[f64], k: usize) -> Result<f64> {
    let ma = smoothed(trace, k, 2)?;
    let n = ma.len() as f64;
    let mean = ma.iter().sum::<f64>() / n;
    Ok((ma.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationScores {
    pub ttp: usize,
    pub aps: f64,
    pub std: f64,
    pub rate: f64,
}

/// `APS / TTP − λ·STD`.
pub fn adaptation_rate(trace: &[f64], k: usize, lambda_stab: f64) -> Result<f64> {
    Ok(adaptation_scores(trace, k, lambda_stab)?.rate)
}

pub fn adaptation_scores(trace: &[f64], k: usize, lambda_stab: f64) -> Result<AdaptationScores> {
    let t = ttp(trace, k)?;
    let a = aps(trace, k)?;
    let s = stability_std(trace, k)?;
    Ok(AdaptationScores { ttp: t, aps: a, std: s, rate: a / t as f64 - lambda_stab * s })
}

/// Accuracies of every model on one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub student: f64,
    pub t1: f64,
    pub t2: f64,
    pub ensemble: f64,
}

impl ProbeResult {
    pub fn minus(&self, other: &ProbeResult) -> ProbeResult {
        ProbeResult {
            student: self.student - other.student,
            t1: self.t1 - other.t1,
            t2: self.t2 - other.t2,
            ensemble: self.ensemble - other.ensemble,
        }
    }
}

fn running_probs(spec: &NetworkSpec, p: &NetworkParams, x: &Matrix) -> Result<Matrix> {
    softmax(&forward(spec, p, x, StatsMode::Running)?.logits)
}

fn hit_rate(pred: &[usize], y: &[usize]) -> f64 {
    pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len().max(1) as f64
}

/// Running-statistics accuracy of the student, both teachers and the
/// student/slow-teacher ensemble. Takes the trio by shared reference, so the
/// live run is untouched.
pub fn forgetting_probe(trio: &ModelTrio, eval: &LabeledSet) -> Result<ProbeResult> {
    if eval.is_empty() {
        return Err(Error::BatchTooSmall { context: "forgetting_probe", needed: 1, got: 0 });
    }
    let ps = running_probs(&trio.spec, &trio.student, &eval.x)?;
    let p1 = running_probs(&trio.spec, &trio.t1, &eval.x)?;
    let p2 = running_probs(&trio.spec, &trio.t2, &eval.x)?;
    let pe = ensemble(&ps, &p2)?;
    Ok(ProbeResult {
        student: hit_rate(&ps.argmax_rows(), &eval.y),
        t1: hit_rate(&p1.argmax_rows(), &eval.y),
        t2: hit_rate(&p2.argmax_rows(), &eval.y),
        ensemble: hit_rate(&pe.argmax_rows(), &eval.y),
    })
}

/// Per-batch outcome fed into the report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub step: usize,
    pub domain_id: usize,
    pub cycle: usize,
    pub errors: usize,
    pub samples: usize,
}

impl BatchOutcome {
    pub fn accuracy(&self) -> f64 {
        1.0 - self.errors as f64 / self.samples as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCount {
    pub key: usize,
    pub errors: usize,
    pub samples: usize,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScore {
    pub domain_id: usize,
    pub start_step: usize,
    pub batches: usize,
    /// `None` for segments shorter than two batches.
    pub scores: Option<AdaptationScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingPoint {
    /// Last step of the segment after which the probe ran.
    pub after_step: usize,
    pub domain_id: usize,
    pub accuracy: ProbeResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub overall_error: f64,
    pub samples: usize,
    pub per_domain: Vec<ErrorCount>,
    pub per_cycle: Vec<ErrorCount>,
    pub window: usize,
    pub stability_weight: f64,
    pub segments: Vec<SegmentScore>,
    pub whole_stream: Option<AdaptationScores>,
    pub forgetting: Vec<ForgettingPoint>,
    /// First probe minus last probe; positive means accuracy was lost.
    pub forgetting_drop: Option<ProbeResult>,
}

fn tally(outcomes: &[BatchOutcome], key: impl Fn(&BatchOutcome) -> usize) -> Vec<ErrorCount> {
    let mut map = std::collections::BTreeMap::<usize, (usize, usize)>::new();
    for o in outcomes {
        let e = map.entry(key(o)).or_default();
        e.0 += o.errors;
        e.1 += o.samples;
    }
    map.into_iter()
        .map(|(key, (errors, samples))| ErrorCount { key, errors, samples, error: errors as f64 / samples as f64 })
        .collect()
}

/// Maximal runs of consecutive batches from the same domain.
pub fn segments(outcomes: &[BatchOutcome]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=outcomes.len() {
        if i == outcomes.len() || outcomes[i].domain_id != outcomes[start].domain_id {
            if i > start {
                out.push(start..i);
            }
            start = i;
        }
    }
    out
}

pub fn build_report(
    outcomes: &[BatchOutcome],
    window: usize,
    stability_weight: f64,
    forgetting: Vec<ForgettingPoint>,
) -> Result<RunReport> {
    if outcomes.is_empty() {
        return Err(Error::BatchTooSmall { context: "run report", needed: 1, got: 0 });
    }
    if outcomes.iter().any(|o| o.samples == 0 || o.errors > o.samples) {
        return Err(Error::InvalidConfig("batch outcome with no samples or too many errors".into()));
    }
    let errors: usize = outcomes.iter().map(|o| o.errors).sum();
    let samples: usize = outcomes.iter().map(|o| o.samples).sum();
    let mut segs = Vec::new();
    for r in segments(outcomes) {
        let trace: Vec<f64> = outcomes[r.clone()].iter().map(BatchOutcome::accuracy).collect();
        segs.push(SegmentScore {
            domain_id: outcomes[r.start].domain_id,
            start_step: outcomes[r.start].step,
            batches: r.len(),
            scores: if trace.len() >= 2 { Some(adaptation_scores(&trace, window, stability_weight)?) } else { None },
        });
    }
    let whole: Vec<f64> = outcomes.iter().map(BatchOutcome::accuracy).collect();
    let forgetting_drop = match (forgetting.first(), forgetting.last()) {
        (Some(a), Some(b)) => Some(a.accuracy.minus(&b.accuracy)),
        _ => None,
    };
    Ok(RunReport {
        overall_error: errors as f64 / samples as f64,
        samples,
        per_domain: tally(outcomes, |o| o.domain_id),
        per_cycle: tally(outcomes, |o| o.cycle),
        window,
        stability_weight,
        segments: segs,
        whole_stream: if whole.len() >= 2 { Some(adaptation_scores(&whole, window, stability_weight)?) } else { None },
        forgetting,
        forgetting_drop,
    })
}
