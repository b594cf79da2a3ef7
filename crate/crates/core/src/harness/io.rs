//! CSV, gnuplot and packet-log files of a run.

use std::fs;
use std::path::{Path, PathBuf};

use super::metrics::BatchSummary;
use super::run::RunOutput;
use crate::Result;

/// Writes `key,value` rows with a header.
pub fn write_key_values(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["key", "value"])?;
    for (k, v) in rows {
        w.write_record([k, v])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `trajectory_<id>.csv`, `errors.csv`, `summary.csv`, `plot.gp` and,
/// when recorded, `packets.log` into `dir`. Returns the written paths.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    for (id, truth) in &out.truth.poses {
        let path = dir.join(format!("trajectory_{id}.csv"));
        let est = &out.estimate.poses[id];
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["t", "x_true", "y_true", "theta_true", "x_est", "y_est", "theta_est"])?;
        for ((t, x), e) in out.truth.times.iter().zip(truth).zip(est) {
            w.write_record(
                [*t, x.x(), x.y(), x.heading(), e.x(), e.y(), e.heading()]
                    .iter()
                    .map(|v| v.to_string()),
            )?;
        }
        w.flush()?;
        written.push(path);
    }

    let m = &out.metrics;
    let path = dir.join("errors.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["t".to_string()];
    for id in m.estimate.position.keys() {
        header.push(format!("pos_err_{id}"));
        header.push(format!("heading_err_{id}"));
        header.push(format!("baseline_pos_err_{id}"));
    }
    w.write_record(&header)?;
    for (k, t) in m.estimate.times.iter().enumerate() {
        let mut row = vec![t.to_string()];
        for id in m.estimate.position.keys() {
            row.push(m.estimate.position[id][k].to_string());
            row.push(m.estimate.heading[id][k].to_string());
            row.push(m.baseline.position[id][k].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("summary.csv");
    let mut rows = vec![("scenario".to_string(), out.scenario_name.clone())];
    rows.extend(m.summary_rows());
    write_key_values(&path, &rows)?;
    written.push(path);

    let path = dir.join("plot.gp");
    fs::write(&path, gnuplot_script(out))?;
    written.push(path);

    if let Some(log) = &out.packet_log {
        let path = dir.join("packets.log");
        fs::write(&path, log)?;
        written.push(path);
    }
    Ok(written)
}

/// Gnuplot script drawing trajectories and error curves from the CSVs next to it.
pub fn gnuplot_script(out: &RunOutput) -> String {
    let ids: Vec<_> = out.truth.poses.keys().collect();
    let mut s = String::new();
    s.push_str("set datafile separator ','\nset key outside\n");
    s.push_str("set terminal pngcairo size 1200,600\nset output 'trajectories.png'\n");
    s.push_str("set size ratio -1\nset xlabel 'x [m]'\nset ylabel 'y [m]'\nplot \\\n");
    let traj: Vec<String> = ids
        .iter()
        .flat_map(|id| {
            [
                format!("  'trajectory_{id}.csv' skip 1 using 2:3 with lines title 'true {id}'"),
                format!("  'trajectory_{id}.csv' skip 1 using 5:6 with lines dt 2 title 'est {id}'"),
            ]
        })
        .collect();
    s.push_str(&traj.join(", \\\n"));
    s.push_str("\n\nset output 'errors.png'\nset size noratio\nset xlabel 't [s]'\nset ylabel 'position error [m]'\nplot \\\n");
    let errs: Vec<String> = ids
        .iter()
        .enumerate()
        .flat_map(|(k, id)| {
            [
                format!("  'errors.csv' skip 1 using 1:{} with lines title 'collaborative {id}'", 2 + 3 * k),
                format!("  'errors.csv' skip 1 using 1:{} with lines dt 2 title 'odometry {id}'", 4 + 3 * k),
            ]
        })
        .collect();
    s.push_str(&errs.join(", \\\n"));
    s.push('\n');
    s
}

/// Writes the per-run summaries and the aggregate of a Monte Carlo batch.
pub fn write_batch(dir: &Path, runs: &[Result<super::metrics::RunMetrics>], summary: &BatchSummary) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let path = dir.join("runs.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "seed",
        "position_rmse",
        "baseline_position_rmse",
        "final_position_error",
        "baseline_final_position_error",
        "boundedness_ratio",
        "mean_nees",
        "error",
    ])?;
    for r in runs {
        match r {
            Ok(m) => w.write_record([
                m.seed.to_string(),
                m.estimate.position_rmse.to_string(),
                m.baseline.position_rmse.to_string(),
                m.estimate.final_position_error().to_string(),
                m.baseline.final_position_error().to_string(),
                m.boundedness_ratio().to_string(),
                m.mean_nees.to_string(),
                String::new(),
            ])?,
            Err(e) => w.write_record(["", "", "", "", "", "", "", &e.to_string()])?,
        }
    }
    w.flush()?;
    let summary_path = dir.join("summary.csv");
    write_key_values(&summary_path, &summary.rows())?;
    Ok(vec![path, summary_path])
}
