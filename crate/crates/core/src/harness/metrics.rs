//! Error series and summary statistics.

use std::collections::BTreeMap;

use crate::estimator::{pose_error, GatingCounters};
use crate::initializer::InitReport;
use crate::kinematics::VehicleState;
use crate::{Error, Result, VehicleId};

/// Timestamps must agree to this when matching estimate and truth.
pub const TIME_MATCH_TOL: f64 = 1e-9;

/// Poses of several vehicles at common timestamps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseSeries {
    pub times: Vec<f64>,
    pub poses: BTreeMap<VehicleId, Vec<VehicleState>>,
}

impl PoseSeries {
    pub fn new(ids: &[VehicleId]) -> Self {
        Self {
            times: Vec::new(),
            poses: ids.iter().map(|id| (*id, Vec::new())).collect(),
        }
    }

    /// Appends one sample; `lookup` must know every tracked vehicle.
    pub fn push(&mut self, time: f64, mut lookup: impl FnMut(VehicleId) -> Option<VehicleState>) -> Result<()> {
        for (id, track) in self.poses.iter_mut() {
            track.push(lookup(*id).ok_or_else(|| Error::InvalidArgument(format!("no pose for vehicle {id}")))?);
        }
        self.times.push(time);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Per-step position (m) and wrapped heading (rad) errors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorSeries {
    pub times: Vec<f64>,
    pub position: BTreeMap<VehicleId, Vec<f64>>,
    pub heading: BTreeMap<VehicleId, Vec<f64>>,
    pub position_rmse: f64,
    pub heading_rmse: f64,
}

fn rms<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

impl ErrorSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Fleet position RMSE over steps `[from·n, to·n)`.
    pub fn window_rmse(&self, from: f64, to: f64) -> f64 {
        let n = self.len();
        let a = ((from * n as f64).floor() as usize).min(n);
        let b = ((to * n as f64).floor() as usize).clamp(a, n);
        rms(self.position.values().flat_map(|e| e[a..b].iter()))
    }

    /// RMSE over the first, second and last third of the run.
    pub fn thirds(&self) -> [f64; 3] {
        [
            self.window_rmse(0.0, 1.0 / 3.0),
            self.window_rmse(1.0 / 3.0, 2.0 / 3.0),
            self.window_rmse(2.0 / 3.0, 1.0),
        ]
    }

    /// RMS over vehicles of the position error at the last step.
    pub fn final_position_error(&self) -> f64 {
        rms(self.position.values().filter_map(|e| e.last()))
    }
}

/// Errors of `estimate` against `truth` over the run phase.
pub fn compute_metrics(estimate: &PoseSeries, truth: &PoseSeries) -> Result<ErrorSeries> {
    if estimate.len() != truth.len() {
        return Err(Error::LengthMismatch(estimate.len(), truth.len()));
    }
    for (a, b) in estimate.times.iter().zip(&truth.times) {
        if (a - b).abs() > TIME_MATCH_TOL {
            return Err(Error::InvalidArgument(format!("unmatched timestamps {a} and {b}")));
        }
    }
    let mut out = ErrorSeries {
        times: truth.times.clone(),
        ..ErrorSeries::default()
    };
    for (id, est) in &estimate.poses {
        let tru = truth
            .poses
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no truth for vehicle {id}")))?;
        if est.len() != tru.len() {
            return Err(Error::LengthMismatch(est.len(), tru.len()));
        }
        let (pos, head): (Vec<f64>, Vec<f64>) = est
            .iter()
            .zip(tru)
            .map(|(e, t)| {
                let d = pose_error(e, t);
                (d.x.hypot(d.y), d.z)
            })
            .unzip();
        out.position.insert(*id, pos);
        out.heading.insert(*id, head);
    }
    out.position_rmse = rms(out.position.values().flatten());
    out.heading_rmse = rms(out.heading.values().flatten());
    Ok(out)
}

/// Everything a run reports.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub seed: u64,
    pub estimate: ErrorSeries,
    /// Dead reckoning from the true pose at the start of the run phase.
    pub baseline: ErrorSeries,
    pub counters: GatingCounters,
    /// Mean normalized estimation error squared per vehicle and step (3 dof).
    pub mean_nees: f64,
    /// Present when the motion-based initialization ran.
    pub init: Option<InitReport>,
}

impl RunMetrics {
    /// Last 20% over middle 20% of the collaborative position RMSE.
    pub fn boundedness_ratio(&self) -> f64 {
        self.estimate.window_rmse(0.8, 1.0) / self.estimate.window_rmse(0.4, 0.6)
    }

    pub fn beats_baseline(&self) -> bool {
        self.estimate.final_position_error() < self.baseline.final_position_error()
    }

    pub fn thirds_increasing(&self) -> bool {
        let [a, b, c] = self.estimate.thirds();
        a < b && b < c
    }

    /// `key,value` rows for `summary.csv`.
    pub fn summary_rows(&self) -> Vec<(String, String)> {
        let [t1, t2, t3] = self.estimate.thirds();
        let mut rows = vec![
            ("seed", self.seed.to_string()),
            ("steps", self.estimate.len().to_string()),
            ("position_rmse", self.estimate.position_rmse.to_string()),
            ("heading_rmse", self.estimate.heading_rmse.to_string()),
            ("baseline_position_rmse", self.baseline.position_rmse.to_string()),
            ("baseline_heading_rmse", self.baseline.heading_rmse.to_string()),
            ("final_position_error", self.estimate.final_position_error().to_string()),
            ("baseline_final_position_error", self.baseline.final_position_error().to_string()),
            ("rmse_middle_20", self.estimate.window_rmse(0.4, 0.6).to_string()),
            ("rmse_last_20", self.estimate.window_rmse(0.8, 1.0).to_string()),
            ("rmse_third_1", t1.to_string()),
            ("rmse_third_2", t2.to_string()),
            ("rmse_third_3", t3.to_string()),
            ("mean_nees", self.mean_nees.to_string()),
            ("ranges_used", self.counters.used.to_string()),
            ("ranges_gated", self.counters.gated.to_string()),
            ("ranges_degenerate", self.counters.degenerate.to_string()),
            ("updates_skipped", self.counters.skipped_updates.to_string()),
            ("motion_held", self.counters.held_motion.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect::<Vec<_>>();
        if let Some(init) = &self.init {
            rows.push(("init_baseline".into(), init.frame.baseline.to_string()));
            rows.push(("init_stress".into(), init.stress_final.to_string()));
        }
        rows
    }
}

/// Aggregate of a Monte Carlo batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    pub runs: usize,
    pub failures: usize,
    pub bounded: usize,
    pub beats_baseline: usize,
    pub thirds_increasing: usize,
    pub mean_position_rmse: f64,
    pub mean_baseline_rmse: f64,
    pub mean_nees: f64,
}

impl BatchSummary {
    pub fn from_runs(runs: &[Result<RunMetrics>], bound_ratio: f64) -> Self {
        let ok: Vec<&RunMetrics> = runs.iter().filter_map(|r| r.as_ref().ok()).collect();
        let mean = |f: &dyn Fn(&RunMetrics) -> f64| {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|m| f(m)).sum::<f64>() / ok.len() as f64
            }
        };
        Self {
            runs: runs.len(),
            failures: runs.len() - ok.len(),
            bounded: ok.iter().filter(|m| m.boundedness_ratio() <= bound_ratio).count(),
            beats_baseline: ok.iter().filter(|m| m.beats_baseline()).count(),
            thirds_increasing: ok.iter().filter(|m| m.thirds_increasing()).count(),
            mean_position_rmse: mean(&|m| m.estimate.position_rmse),
            mean_baseline_rmse: mean(&|m| m.baseline.position_rmse),
            mean_nees: mean(&|m| m.mean_nees),
        }
    }

    pub fn rows(&self) -> Vec<(String, String)> {
        [
            ("runs", self.runs.to_string()),
            ("failures", self.failures.to_string()),
            ("bounded", self.bounded.to_string()),
            ("beats_baseline", self.beats_baseline.to_string()),
            ("thirds_increasing", self.thirds_increasing.to_string()),
            ("mean_position_rmse", self.mean_position_rmse.to_string()),
            ("mean_baseline_position_rmse", self.mean_baseline_rmse.to_string()),
            ("mean_nees", self.mean_nees.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}
