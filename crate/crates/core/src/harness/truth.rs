//! Ground-truth motion at 1 kHz.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::scenario::{Scenario, TrajectorySpec};
use crate::kinematics::{propagate_exact, wrap_angle, VehicleState};
use crate::{stream_rng, Result, VehicleId};

pub const TRUTH_STEP_MS: u64 = 1;
pub const MAX_ACCEL: f64 = 1.0;
pub const MAX_ANGULAR_ACCEL: f64 = 3.0;
/// Pure-pursuit heading gain, 1/s.
pub const STEERING_GAIN: f64 = 1.5;
/// A waypoint counts as reached within this distance.
pub const WAYPOINT_RADIUS: f64 = 0.5;

pub const STREAM_TRAJECTORY_BASE: u64 = 1000;

/// Phase boundaries in milliseconds from scenario start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseTimes {
    pub linear_start_ms: u64,
    pub run_start_ms: u64,
}

#[derive(Debug, Clone)]
enum Controller {
    Parked,
    Pursuit {
        speed: f64,
        max_turn_rate: f64,
        targets: Targets,
    },
    Profile {
        segments: Vec<[f64; 3]>,
        period: f64,
    },
}

#[derive(Debug, Clone)]
enum Targets {
    Random {
        lo: [f64; 2],
        hi: [f64; 2],
        current: [f64; 2],
        rng: ChaCha8Rng,
    },
    Fixed {
        points: Vec<[f64; 2]>,
        next: usize,
        cyclic: bool,
        done: bool,
    },
}

impl Targets {
    fn current(&self) -> Option<[f64; 2]> {
        match self {
            Targets::Random { current, .. } => Some(*current),
            Targets::Fixed { points, next, done, .. } => (!*done).then(|| points[*next]),
        }
    }

    fn advance(&mut self) {
        match self {
            Targets::Random { lo, hi, current, rng } => {
                *current = [rng.random_range(lo[0]..=hi[0]), rng.random_range(lo[1]..=hi[1])];
            }
            Targets::Fixed {
                points,
                next,
                cyclic,
                done,
            } => {
                if *next + 1 < points.len() {
                    *next += 1;
                } else if *cyclic {
                    *next = 0;
                } else {
                    *done = true;
                }
            }
        }
    }
}

/// Rows of a back-and-forth sweep, visited forward then backward.
fn lawnmower_points(arena: [f64; 2], spacing: f64, margin: f64) -> Vec<[f64; 2]> {
    let (x0, x1) = (margin, arena[0] - margin);
    let mut rows = Vec::new();
    let mut y = margin;
    while y <= arena[1] - margin + 1e-9 {
        rows.push(y);
        y += spacing;
    }
    let mut forward = Vec::new();
    for (k, y) in rows.iter().enumerate() {
        if k % 2 == 0 {
            forward.extend([[x0, *y], [x1, *y]]);
        } else {
            forward.extend([[x1, *y], [x0, *y]]);
        }
    }
    let mut points = forward.clone();
    points.extend(forward.iter().rev().skip(1).take(forward.len().saturating_sub(2)));
    points
}

#[derive(Debug, Clone)]
struct VehicleTruth {
    id: VehicleId,
    state: VehicleState,
    v: f64,
    omega: f64,
    is_static: bool,
    controller: Controller,
}

impl VehicleTruth {
    fn command(&mut self, phase: u8, t_run: f64, linear_speed: f64) -> (f64, f64) {
        if self.is_static || phase == 0 {
            return (0.0, 0.0);
        }
        if phase == 1 {
            return (linear_speed, 0.0);
        }
        match &mut self.controller {
            Controller::Parked => (0.0, 0.0),
            Controller::Profile { segments, period } => {
                let mut t = t_run.rem_euclid(*period);
                for s in segments.iter() {
                    if t < s[0] {
                        return (s[1], s[2]);
                    }
                    t -= s[0];
                }
                let last = segments[segments.len() - 1];
                (last[1], last[2])
            }
            Controller::Pursuit {
                speed,
                max_turn_rate,
                targets,
            } => {
                let p = self.state.position();
                let mut target = targets.current();
                for _ in 0..8 {
                    match target {
                        Some(t) if (t[0] - p.x).hypot(t[1] - p.y) < WAYPOINT_RADIUS => {
                            targets.advance();
                            target = targets.current();
                        }
                        _ => break,
                    }
                }
                let Some(t) = target else {
                    return (0.0, 0.0);
                };
                let bearing = (t[1] - p.y).atan2(t[0] - p.x);
                let e = wrap_angle(bearing - self.state.heading());
                let omega = (STEERING_GAIN * e).clamp(-*max_turn_rate, *max_turn_rate);
                let v = *speed * (0.3 + 0.7 * e.cos().max(0.0));
                (v, omega)
            }
        }
    }
}

/// Exact-arc integration of every vehicle on a 1 ms grid.
#[derive(Debug, Clone)]
pub struct TruthSim {
    vehicles: Vec<VehicleTruth>,
    phases: PhaseTimes,
    linear_speed: f64,
    now_ms: u64,
}

impl TruthSim {
    pub fn new(scenario: &Scenario, phases: PhaseTimes) -> Self {
        let [w, h] = scenario.arena;
        let vehicles = scenario
            .vehicles
            .iter()
            .map(|spec| {
                let rng = stream_rng(scenario.seed, STREAM_TRAJECTORY_BASE + spec.id as u64);
                let controller = match (&spec.trajectory, spec.is_static) {
                    (_, true) | (None, _) => Controller::Parked,
                    (Some(TrajectorySpec::RandomWaypoint { speed, max_turn_rate, margin }), _) => {
                        let mut targets = Targets::Random {
                            lo: [*margin, *margin],
                            hi: [w - margin, h - margin],
                            current: [0.0, 0.0],
                            rng,
                        };
                        targets.advance();
                        Controller::Pursuit {
                            speed: *speed,
                            max_turn_rate: *max_turn_rate,
                            targets,
                        }
                    }
                    (
                        Some(TrajectorySpec::Lawnmower {
                            speed,
                            spacing,
                            max_turn_rate,
                            margin,
                        }),
                        _,
                    ) => Controller::Pursuit {
                        speed: *speed,
                        max_turn_rate: *max_turn_rate,
                        targets: Targets::Fixed {
                            points: lawnmower_points(scenario.arena, *spacing, *margin),
                            next: 0,
                            cyclic: true,
                            done: false,
                        },
                    },
                    (
                        Some(TrajectorySpec::Waypoints {
                            speed,
                            points,
                            cyclic,
                            max_turn_rate,
                        }),
                        _,
                    ) => Controller::Pursuit {
                        speed: *speed,
                        max_turn_rate: *max_turn_rate,
                        targets: Targets::Fixed {
                            points: points.clone(),
                            next: 0,
                            cyclic: *cyclic,
                            done: false,
                        },
                    },
                    (Some(TrajectorySpec::Profile { segments }), _) => Controller::Profile {
                        period: segments.iter().map(|s| s[0]).sum(),
                        segments: segments.clone(),
                    },
                };
                VehicleTruth {
                    id: spec.id,
                    state: spec.pose(),
                    v: 0.0,
                    omega: 0.0,
                    is_static: spec.is_static,
                    controller,
                }
            })
            .collect();
        Self {
            vehicles,
            phases,
            linear_speed: scenario.init.linear_speed,
            now_ms: 0,
        }
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn time(&self) -> f64 {
        self.now_ms as f64 * 1e-3
    }

    /// Integrates up to `t_ms`; earlier targets are a no-op.
    pub fn advance_to(&mut self, t_ms: u64) -> Result<()> {
        let dt = TRUTH_STEP_MS as f64 * 1e-3;
        while self.now_ms < t_ms {
            let phase = if self.now_ms < self.phases.linear_start_ms {
                0
            } else if self.now_ms < self.phases.run_start_ms {
                1
            } else {
                2
            };
            let t_run = (self.now_ms.saturating_sub(self.phases.run_start_ms)) as f64 * 1e-3;
            for v in &mut self.vehicles {
                let (v_cmd, w_cmd) = v.command(phase, t_run, self.linear_speed);
                v.v += (v_cmd - v.v).clamp(-MAX_ACCEL * dt, MAX_ACCEL * dt);
                v.omega += (w_cmd - v.omega).clamp(-MAX_ANGULAR_ACCEL * dt, MAX_ANGULAR_ACCEL * dt);
                v.state = propagate_exact(&v.state, v.v, v.omega, dt)?;
            }
            self.now_ms += TRUTH_STEP_MS;
        }
        Ok(())
    }

    pub fn state(&self, id: VehicleId) -> Option<VehicleState> {
        self.vehicles.iter().find(|v| v.id == id).map(|v| v.state)
    }

    /// True body velocities currently applied.
    pub fn velocity(&self, id: VehicleId) -> Option<(f64, f64)> {
        self.vehicles.iter().find(|v| v.id == id).map(|v| (v.v, v.omega))
    }

    pub fn states(&self) -> BTreeMap<VehicleId, VehicleState> {
        self.vehicles.iter().map(|v| (v.id, v.state)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(trajectory: &str) -> Scenario {
        Scenario::from_toml(&format!(
            r#"
name = "truth"
arena = [12.0, 12.0]
noise = {{ sigma_v = 0.0, sigma_omega = 0.0, sigma_range = 0.0 }}
[[vehicles]]
id = 1
x = 1.0
y = 1.0
static = true
[[vehicles]]
id = 2
x = 6.0
y = 3.0
theta = 1.5707963267948966
trajectory = {trajectory}
"#
        ))
        .unwrap()
    }

    const PHASES: PhaseTimes = PhaseTimes {
        linear_start_ms: 1000,
        run_start_ms: 3000,
    };

    #[test]
    fn phases_park_then_drive_straight() {
        let s = scenario(r#"{ kind = "profile", segments = [[1.0, 0.5, 0.5]] }"#);
        let mut sim = TruthSim::new(&s, PHASES);
        sim.advance_to(1000).unwrap();
        assert_eq!(sim.state(2).unwrap(), s.vehicles[1].pose());
        sim.advance_to(3000).unwrap();
        let p = sim.state(2).unwrap();
        // 1 s ramp to 1 m/s then 1 s cruise: 0.5 + 1.0 m, straight up
        assert!((p.y() - 4.5).abs() < 1e-3, "{p:?}");
        assert!((p.x() - 6.0).abs() < 1e-12);
        assert_eq!(sim.state(1).unwrap(), s.vehicles[0].pose());
    }

    #[test]
    fn profile_reaches_commanded_rates() {
        let s = scenario(r#"{ kind = "profile", segments = [[100.0, 0.5, 0.3]] }"#);
        let mut sim = TruthSim::new(&s, PHASES);
        sim.advance_to(6000).unwrap();
        let (v, w) = sim.velocity(2).unwrap();
        assert!((v - 0.5).abs() < 1e-12 && (w - 0.3).abs() < 1e-12);
    }

    #[test]
    fn random_waypoints_stay_near_arena() {
        let s = scenario(r#"{ kind = "random_waypoint", speed = 0.8 }"#);
        let mut sim = TruthSim::new(&s, PHASES);
        for k in 1..=300 {
            sim.advance_to(k * 1000).unwrap();
            let p = sim.state(2).unwrap();
            assert!(p.x() > -1.0 && p.x() < 13.0 && p.y() > -1.0 && p.y() < 13.0, "{p:?}");
        }
    }

    #[test]
    fn lawnmower_visits_rows() {
        let pts = lawnmower_points([12.0, 12.0], 2.5, 1.0);
        assert_eq!(pts.len(), 10 + 8);
        assert_eq!(pts[0], [1.0, 1.0]);
        assert_eq!(pts[1], [11.0, 1.0]);
        assert_eq!(pts[2], [11.0, 3.5]);
        let s = scenario(r#"{ kind = "lawnmower", speed = 1.0, spacing = 2.5 }"#);
        let mut sim = TruthSim::new(&s, PHASES);
        let mut max_y: f64 = 0.0;
        for k in 1..=120 {
            sim.advance_to(k * 1000).unwrap();
            max_y = max_y.max(sim.state(2).unwrap().y());
        }
        assert!(max_y > 9.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let s = scenario(r#"{ kind = "random_waypoint", speed = 0.8 }"#);
        let run = |seed| {
            let mut s = s.clone();
            s.seed = seed;
            let mut sim = TruthSim::new(&s, PHASES);
            sim.advance_to(60_000).unwrap();
            sim.state(2).unwrap()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
