//! Scenarios, simulation driver, metrics and file output.

pub mod io;
pub mod metrics;
pub mod run;
pub mod scenario;
pub mod truth;

use std::collections::BTreeSet;

pub use io::{write_batch, write_outputs};
pub use metrics::{compute_metrics, BatchSummary, ErrorSeries, PoseSeries, RunMetrics};
pub use run::{monte_carlo, replay, run_initialization, run_scenario, PacketSource, ReferenceFrame, RunOutput, Timeline};
pub use scenario::{InitMode, Scenario, TrajectorySpec, VehicleSpec};

use crate::observability::{fleet_matrix, numerical_rank, FleetConfig, RankReport, DEFAULT_REL_TOL};
use crate::Result;

/// Ratio of last-20% to middle-20% RMSE below which a run counts as bounded.
pub const BOUNDED_RATIO: f64 = 1.5;

/// Rank of the fleet observability matrix at the true configuration at time
/// `at` (seconds from scenario start; `None` for the initial poses), with
/// every pair measured except static–static.
pub fn observability_report(s: &Scenario, at: Option<f64>) -> Result<RankReport> {
    s.validate_geometry()?;
    let mut states = s.vehicles.iter().map(|v| (v.id, v.pose())).collect::<Vec<_>>();
    if let Some(t) = at {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(crate::Error::InvalidArgument(format!("time must be >= 0, got {t}")));
        }
        let timeline = Timeline::new(s, &run::network_config(s))?;
        let mut truth = truth::TruthSim::new(s, timeline.phases());
        truth.advance_to((t * 1000.0).round() as u64)?;
        states = s
            .vehicles
            .iter()
            .map(|v| (v.id, truth.state(v.id).unwrap_or_else(|| v.pose())))
            .collect();
    }
    let statics: BTreeSet<_> = s.static_ids().into_iter().collect();
    let matrix = fleet_matrix(&FleetConfig::complete(states, statics))?;
    Ok(numerical_rank(&matrix, DEFAULT_REL_TOL))
}
