//! Empirical simplicity-bias measurements on training traces.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::attention::ModelParams;
use crate::error::{Error, Result};
use crate::linalg;
use crate::optimizers::TrainingTrace;
use crate::spectra::{fixed_point_m_target, CovarianceSpec};
use crate::theory::{entropy, TimeSequence};

pub const DEFAULT_THETA: f64 = 0.9;
pub const DEFAULT_SMOOTHING_WINDOW: usize = 101;
pub const DEFAULT_DROP_RATIO: f64 = 0.25;

/// Falls smaller than this fraction of the curve's total range are ignored.
const DROP_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMethod {
    ProgressThreshold,
    LossDrops,
}

/// Per-feature completion step and time (`step · η`); `None` when the feature
/// was never learned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningTimes {
    pub steps: Vec<Option<usize>>,
    pub times: Vec<Option<f64>>,
    pub method: DetectionMethod,
}

impl LearningTimes {
    pub fn learned(&self) -> usize {
        self.times.iter().filter(|t| t.is_some()).count()
    }

    /// Feature indices ordered by completion time.
    pub fn order(&self) -> Vec<usize> {
        let mut ix: Vec<usize> = (0..self.steps.len()).filter(|&i| self.steps[i].is_some()).collect();
        ix.sort_by_key(|&i| (self.steps[i], i));
        ix
    }
}

/// Feature i counts as learned at the first logged step where
/// m_i ≥ θ · target_i.
pub fn detect_learning_times(
    trace: &TrainingTrace,
    spec: &CovarianceSpec,
    n_ctx: usize,
    theta: f64,
    eta: f64,
) -> Result<LearningTimes> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Argument(format!("theta must lie in (0, 1), got {theta}")));
    }
    if trace.feature_progress_series.is_empty() {
        return Err(Error::Argument("trace has no feature progress series".into()));
    }
    let d = spec.dim();
    let targets = (0..d).map(|i| fixed_point_m_target(spec, n_ctx, i)).collect::<Result<Vec<_>>>()?;
    let mut steps = vec![None; d];
    for (step, m) in &trace.feature_progress_series {
        if m.len() != d {
            return Err(Error::Dimension { expected: d, actual: m.len() });
        }
        for i in 0..d {
            if steps[i].is_none() && *step > 0 && m[i] >= theta * targets[i] {
                steps[i] = Some(*step);
            }
        }
    }
    Ok(LearningTimes {
        times: steps.iter().map(|s| s.map(|s| s as f64 * eta)).collect(),
        steps,
        method: DetectionMethod::ProgressThreshold,
    })
}

/// Centered moving average; the window shrinks at the ends.
pub fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let mut prefix = vec![0.0; xs.len() + 1];
    for (i, x) in xs.iter().enumerate() {
        prefix[i + 1] = prefix[i] + x;
    }
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(xs.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Indices of abrupt drops in a loss curve.
///
/// After smoothing, index t is flagged when the smoothed loss falls, over the
/// next `window` points, by at least `drop_ratio` of its remaining gap to the
/// final smoothed value. Each run of consecutive flagged indices is one drop,
/// reported at the centre of the fall.
pub fn detect_loss_drops(losses: &[f64], smoothing_window: usize, drop_ratio: f64) -> Result<Vec<usize>> {
    if smoothing_window == 0 {
        return Err(Error::Argument("smoothing window must be at least 1".into()));
    }
    if !(drop_ratio > 0.0 && drop_ratio <= 1.0) {
        return Err(Error::Argument(format!("drop_ratio must lie in (0, 1], got {drop_ratio}")));
    }
    let w = smoothing_window;
    if losses.len() <= w {
        return Ok(Vec::new());
    }
    let s = smooth(losses, w);
    let last = *s.last().unwrap();
    let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    let floor = DROP_FLOOR * (hi - lo);
    if hi - lo <= 0.0 {
        return Ok(Vec::new());
    }
    let flagged: Vec<bool> = (0..s.len() - w)
        .map(|t| {
            let fall = s[t] - s[t + w];
            fall > floor && fall >= drop_ratio * (s[t] - last)
        })
        .collect();
    let mut drops = Vec::new();
    let mut t = 0;
    while t < flagged.len() {
        if flagged[t] {
            let start = t;
            while t < flagged.len() && flagged[t] {
                t += 1;
            }
            drops.push(((start + t - 1) / 2 + w / 2).min(s.len() - 1));
        } else {
            t += 1;
        }
    }
    Ok(drops)
}

/// Learning times read off loss drops: the k-th drop marks the k-th feature
/// in decreasing-eigenvalue order.
pub fn learning_times_from_drops(trace_steps: &[usize], drops: &[usize], d: usize, eta: f64) -> LearningTimes {
    let mut steps = vec![None; d];
    for (slot, &ix) in steps.iter_mut().zip(drops) {
        *slot = trace_steps.get(ix).copied();
    }
    LearningTimes {
        times: steps.iter().map(|s| s.map(|s| s as f64 * eta)).collect(),
        steps,
        method: DetectionMethod::LossDrops,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub times: Vec<f64>,
    #[serde(skip)]
    pub masses: Vec<f64>,
    pub entropy: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub method: DetectionMethod,
}

/// Entropy of normalized learning times over the learned features.
pub fn entropy_report(times: &LearningTimes) -> Result<EntropyReport> {
    let learned: Vec<f64> = times.times.iter().flatten().copied().collect();
    if learned.is_empty() {
        return Err(Error::NoFeaturesLearned);
    }
    let ts = TimeSequence::new(learned)?;
    Ok(EntropyReport { masses: ts.normalized(), entropy: entropy(&ts), m: ts.len(), method: times.method, times: ts.times })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeadAlignment {
    pub head: usize,
    pub cos_k: f64,
    pub cos_q: f64,
}

/// The head contributing most to m_feature, and how well its key and query
/// point along e_feature (sign ignored).
pub fn head_alignment(params: &ModelParams, feature: usize) -> Result<HeadAlignment> {
    params.validate()?;
    if feature >= params.dim() {
        return Err(Error::Index { index: feature, len: params.dim() });
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (h, p) in params.heads.iter().enumerate() {
        let c = (p.v * p.k[feature] * p.q[feature]).abs();
        if c > best.1 {
            best = (h, c);
        }
    }
    let p = &params.heads[best.0];
    let mut e = vec![0.0; params.dim()];
    e[feature] = 1.0;
    Ok(HeadAlignment { head: best.0, cos_k: linalg::abs_cosine(&p.k, &e), cos_q: linalg::abs_cosine(&p.q, &e) })
}

/// Reads a `step,loss,m_1..m_d` trace CSV.
pub fn read_trace_csv<R: BufRead>(reader: R) -> Result<TrainingTrace> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| Error::Parse { line: 1, msg: "empty trace file".into() })??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 2 || cols[0] != "step" || cols[1] != "loss" {
        return Err(Error::Parse { line: 1, msg: format!("expected header step,loss,m_1..,m_d; got {header}") });
    }
    let d = cols.len() - 2;
    let mut trace = TrainingTrace {
        step_losses: Vec::new(),
        test_losses: Vec::new(),
        feature_progress_series: Vec::new(),
        snapshots: Vec::new(),
        per_example_losses: None,
        final_params: ModelParams { heads: Vec::new() },
    };
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != d + 2 {
            return Err(Error::Parse { line: lineno, msg: format!("expected {} fields, found {}", d + 2, fields.len()) });
        }
        let step: usize =
            fields[0].parse().map_err(|e| Error::Parse { line: lineno, msg: format!("bad step: {e}") })?;
        let nums = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| Error::Parse { line: lineno, msg: format!("bad number {f:?}: {e}") }))
            .collect::<Result<Vec<_>>>()?;
        if let Some((last, _)) = trace.step_losses.last() {
            if step <= *last {
                return Err(Error::Parse { line: lineno, msg: "steps must be strictly increasing".into() });
            }
        }
        trace.step_losses.push((step, nums[0]));
        trace.test_losses.push((step, nums[0]));
        trace.feature_progress_series.push((step, nums[1..].to_vec()));
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_with(progress: Vec<(usize, Vec<f64>)>) -> TrainingTrace {
        TrainingTrace {
            step_losses: progress.iter().map(|(s, _)| (*s, 0.0)).collect(),
            test_losses: Vec::new(),
            feature_progress_series: progress,
            snapshots: Vec::new(),
            per_example_losses: None,
            final_params: ModelParams { heads: Vec::new() },
        }
    }

    #[test]
    fn zero_step_trace_learns_nothing() {
        let s = crate::spectra::make_spectrum(2, &[2.0, 1.0]).unwrap();
        let t = detect_learning_times(&trace_with(vec![(0, vec![0.0, 0.0])]), &s, 8, 0.9, 0.01).unwrap();
        assert_eq!(t.learned(), 0);
        assert!(matches!(entropy_report(&t), Err(Error::NoFeaturesLearned)));
    }

    #[test]
    fn threshold_crossing_is_first_and_sticky() {
        let s = crate::spectra::make_spectrum(2, &[2.0, 1.0]).unwrap();
        let t1 = fixed_point_m_target(&s, 8, 0).unwrap();
        let t2 = fixed_point_m_target(&s, 8, 1).unwrap();
        let tr = trace_with(vec![
            (0, vec![0.0, 0.0]),
            (10, vec![t1, 0.0]),
            (20, vec![0.5 * t1, 0.95 * t2]),
            (30, vec![t1, t2]),
        ]);
        let lt = detect_learning_times(&tr, &s, 8, 0.9, 0.5).unwrap();
        assert_eq!(lt.steps, vec![Some(10), Some(20)]);
        assert_eq!(lt.times, vec![Some(5.0), Some(10.0)]);
        assert_eq!(lt.order(), vec![0, 1]);
    }

    #[test]
    fn entropy_report_cases() {
        let same = LearningTimes { steps: vec![Some(1); 3], times: vec![Some(4.0); 3], method: DetectionMethod::ProgressThreshold };
        assert!((entropy_report(&same).unwrap().entropy - 3f64.ln()).abs() < 1e-15);
        let one = LearningTimes { steps: vec![Some(1), None], times: vec![Some(4.0), None], method: DetectionMethod::LossDrops };
        let r = entropy_report(&one).unwrap();
        assert_eq!((r.entropy, r.m), (0.0, 1));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json, serde_json::json!({"times": [4.0], "entropy": 0.0, "M": 1, "method": "loss_drops"}));
    }

    #[test]
    fn drop_detector_controls() {
        assert!(detect_loss_drops(&[1.0; 500], 11, 0.25).unwrap().is_empty());
        let exp: Vec<f64> = (0..2000).map(|t| (-(t as f64) / 300.0).exp()).collect();
        assert!(detect_loss_drops(&exp, 101, 0.25).unwrap().len() <= 1);
        let mut stair = vec![];
        for (level, len) in [(4.0, 500), (3.0, 500), (1.5, 500), (0.5, 500)] {
            stair.extend(std::iter::repeat_n(level, len));
        }
        let d = detect_loss_drops(&stair, 51, 0.25).unwrap();
        assert_eq!(d.len(), 3, "{d:?}");
        for (got, want) in d.iter().zip([500usize, 1000, 1500]) {
            assert!(got.abs_diff(want) <= 51, "{got} vs {want}");
        }
        assert!(detect_loss_drops(&stair, 0, 0.25).is_err());
    }

    #[test]
    fn alignment_picks_dominant_head() {
        let p = ModelParams::from_flat(2, 2, &[0.1, 0.0, 0.1, 0.0, 0.1, 1.0, 0.9, 0.1, 0.8, -0.05]).unwrap();
        let a = head_alignment(&p, 0).unwrap();
        assert_eq!(a.head, 1);
        assert!(a.cos_k > 0.99 && a.cos_q > 0.99);
    }

    #[test]
    fn csv_round_trip() {
        let tr = trace_with(vec![(0, vec![0.0, 0.0]), (5, vec![0.25, 1e-9])]);
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let back = read_trace_csv(&buf[..]).unwrap();
        assert_eq!(back.feature_progress_series, tr.feature_progress_series);
        assert_eq!(back.step_losses, tr.step_losses);
        assert!(matches!(read_trace_csv(&b"step,loss\n0,x\n"[..]), Err(Error::Parse { line: 2, .. })));
    }
}
