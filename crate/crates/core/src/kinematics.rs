//! Vehicle state, unicycle motion model, range model and Gaussian noise injection.

use std::f64::consts::PI;

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, VehicleId};

/// Below this |ω·dt| the straight-line limit is used instead of the arc solution.
pub const ARC_THRESHOLD: f64 = 1e-8;

/// Wraps an angle into (−π, π].
pub fn wrap_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Planar pose of one vehicle. The heading is kept in (−π, π].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    position: Vector2<f64>,
    heading: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            position: Vector2::new(x, y),
            heading: wrap_angle(heading),
        }
    }

    pub fn from_position(position: Vector2<f64>, heading: f64) -> Self {
        Self {
            position,
            heading: wrap_angle(heading),
        }
    }

    pub fn position(&self) -> Vector2<f64> {
        self.position
    }

    pub fn x(&self) -> f64 {
        self.position.x
    }

    pub fn y(&self) -> f64 {
        self.position.y
    }

    pub fn heading(&self) -> f64 {
        self.heading
    }

    pub fn is_finite(&self) -> bool {
        self.position.x.is_finite() && self.position.y.is_finite() && self.heading.is_finite()
    }

    /// Adds an error-state correction `(δx, δy, δθ)` to the pose.
    pub fn inject(&mut self, dx: f64, dy: f64, dtheta: f64) {
        self.position.x += dx;
        self.position.y += dy;
        self.heading = wrap_angle(self.heading + dtheta);
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.position.x, self.position.y, self.heading]
    }
}

/// One wheel-encoder sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionMeasurement {
    pub vehicle_id: VehicleId,
    pub timestamp: f64,
    pub linear_velocity: f64,
    pub turn_rate: f64,
}

impl MotionMeasurement {
    pub fn new(vehicle_id: VehicleId, timestamp: f64, linear_velocity: f64, turn_rate: f64) -> Self {
        Self {
            vehicle_id,
            timestamp,
            linear_velocity,
            turn_rate,
        }
    }
}

/// Inter-vehicle distance for an ordered pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeMeasurement {
    pub id_a: VehicleId,
    pub id_b: VehicleId,
    pub distance: f64,
    pub timestamp: f64,
}

impl RangeMeasurement {
    pub fn new(id_a: VehicleId, id_b: VehicleId, distance: f64, timestamp: f64) -> Result<Self> {
        if id_a == id_b {
            return Err(Error::InvalidArgument(format!(
                "range endpoints must differ (both {id_a})"
            )));
        }
        if !(distance >= 0.0) || !distance.is_finite() {
            return Err(Error::InvalidArgument(format!("bad distance {distance}")));
        }
        Ok(Self {
            id_a,
            id_b,
            distance,
            timestamp,
        })
    }

    /// The pair with the smaller id first.
    pub fn key(&self) -> (VehicleId, VehicleId) {
        if self.id_a < self.id_b {
            (self.id_a, self.id_b)
        } else {
            (self.id_b, self.id_a)
        }
    }
}

/// Standard deviations of the encoder and ranging noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// m/s, per 20 Hz sample.
    pub sigma_v: f64,
    /// rad/s, per 20 Hz sample.
    pub sigma_omega: f64,
    /// m.
    pub sigma_range: f64,
}

impl NoiseSpec {
    pub fn new(sigma_v: f64, sigma_omega: f64, sigma_range: f64) -> Result<Self> {
        let spec = Self {
            sigma_v,
            sigma_omega,
            sigma_range,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn zero() -> Self {
        Self {
            sigma_v: 0.0,
            sigma_omega: 0.0,
            sigma_range: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("sigma_v", self.sigma_v),
            ("sigma_omega", self.sigma_omega),
            ("sigma_range", self.sigma_range),
        ] {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("non-finite input {values:?}")))
    }
}

/// Advances a pose by the unicycle model with constant `(v, omega)` over `dt`.
pub fn propagate_exact(state: &VehicleState, v: f64, omega: f64, dt: f64) -> Result<VehicleState> {
    check_finite(&[state.x(), state.y(), state.heading(), v, omega, dt])?;
    if dt <= 0.0 {
        return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    let theta = state.heading();
    let dtheta = omega * dt;
    let delta = if dtheta.abs() < ARC_THRESHOLD {
        Vector2::new(v * dt * theta.cos(), v * dt * theta.sin())
    } else {
        let radius = v / omega;
        let end = theta + dtheta;
        Vector2::new(radius * (end.sin() - theta.sin()), radius * (theta.cos() - end.cos()))
    };
    Ok(VehicleState::from_position(state.position() + delta, theta + dtheta))
}

/// Midpoint integration step between two consecutive encoder samples.
///
/// The mean of the two samples drives the step, and the position increment is
/// taken along the heading at the middle of the interval.
pub fn propagate_midpoint(
    state: &VehicleState,
    u_k: &MotionMeasurement,
    u_k1: &MotionMeasurement,
) -> Result<VehicleState> {
    if u_k.vehicle_id != u_k1.vehicle_id {
        return Err(Error::InvalidArgument(format!(
            "motion samples from different vehicles ({} / {})",
            u_k.vehicle_id, u_k1.vehicle_id
        )));
    }
    let dt = u_k1.timestamp - u_k.timestamp;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("non-positive dt {dt}")));
    }
    let (v, omega) = midpoint_input(u_k, u_k1);
    Ok(midpoint_step(state, v, omega, dt))
}

pub(crate) fn midpoint_input(u_k: &MotionMeasurement, u_k1: &MotionMeasurement) -> (f64, f64) {
    (
        0.5 * (u_k.linear_velocity + u_k1.linear_velocity),
        0.5 * (u_k.turn_rate + u_k1.turn_rate),
    )
}

/// Midpoint heading used by both the nominal step and its Jacobian.
pub(crate) fn midpoint_heading(theta: f64, omega: f64, dt: f64) -> f64 {
    theta + 0.5 * omega * dt
}

pub(crate) fn midpoint_step(state: &VehicleState, v: f64, omega: f64, dt: f64) -> VehicleState {
    let theta_mid = midpoint_heading(state.heading(), omega, dt);
    let delta = Vector2::new(theta_mid.cos(), theta_mid.sin()) * (v * dt);
    VehicleState::from_position(state.position() + delta, state.heading() + omega * dt)
}

/// Euclidean distance between the two vehicles.
pub fn true_range(a: &VehicleState, b: &VehicleState) -> f64 {
    (a.position() - b.position()).norm()
}

/// Adds a zero-mean Gaussian sample with standard deviation `sigma`.
///
/// One standard-normal draw is consumed per call regardless of `sigma`, so the
/// draw order of a stream does not depend on the noise levels.
pub fn corrupt<R: Rng + ?Sized>(value: f64, sigma: f64, rng: &mut R) -> Result<f64> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    let z: f64 = rng.sample(StandardNormal);
    Ok(value + sigma * z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    /// RK4 integration of the continuous unicycle model with inputs that vary
    /// linearly in time between `(v0, w0)` and `(v1, w1)`.
    fn rk4_reference(start: [f64; 3], v: (f64, f64), w: (f64, f64), dt: f64, steps: usize) -> [f64; 3] {
        let input = |t: f64| {
            let s = t / dt;
            (v.0 + (v.1 - v.0) * s, w.0 + (w.1 - w.0) * s)
        };
        let f = |t: f64, x: [f64; 3]| {
            let (vv, ww) = input(t);
            [vv * x[2].cos(), vv * x[2].sin(), ww]
        };
        let h = dt / steps as f64;
        let mut x = start;
        for k in 0..steps {
            let t = k as f64 * h;
            let add = |x: [f64; 3], k: [f64; 3], s: f64| [x[0] + s * k[0], x[1] + s * k[1], x[2] + s * k[2]];
            let k1 = f(t, x);
            let k2 = f(t + h / 2.0, add(x, k1, h / 2.0));
            let k3 = f(t + h / 2.0, add(x, k2, h / 2.0));
            let k4 = f(t + h, add(x, k3, h));
            for i in 0..3 {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        x
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -FRAC_PI_2, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(0.1 - 4.0 * PI), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn exact_straight_line() {
        let s = propagate_exact(&VehicleState::new(0.0, 0.0, 0.0), 1.0, 0.0, 1.0).unwrap();
        assert_eq!(s.as_array(), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn exact_pure_rotation() {
        let s = propagate_exact(&VehicleState::new(0.0, 0.0, 0.0), 0.0, FRAC_PI_2, 1.0).unwrap();
        assert_abs_diff_eq!(s.x(), 0.0);
        assert_abs_diff_eq!(s.y(), 0.0);
        assert_abs_diff_eq!(s.heading(), FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn exact_quarter_arc_matches_fine_integration() {
        let s = propagate_exact(&VehicleState::new(0.0, 0.0, 0.0), FRAC_PI_2, FRAC_PI_2, 1.0).unwrap();
        let reference = rk4_reference([0.0, 0.0, 0.0], (FRAC_PI_2, FRAC_PI_2), (FRAC_PI_2, FRAC_PI_2), 1.0, 2000);
        assert_abs_diff_eq!(reference[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(reference[1], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(s.x(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.y(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.heading(), FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn exact_rejects_bad_input() {
        let s = VehicleState::new(0.0, 0.0, 0.0);
        assert!(matches!(propagate_exact(&s, f64::NAN, 0.0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(propagate_exact(&s, 1.0, f64::INFINITY, 1.0), Err(Error::InvalidArgument(_))));
        assert!(propagate_exact(&s, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn midpoint_constant_input() {
        let u0 = MotionMeasurement::new(1, 0.0, 1.0, 0.0);
        let u1 = MotionMeasurement::new(1, 0.05, 1.0, 0.0);
        let s = propagate_midpoint(&VehicleState::new(0.0, 0.0, 0.0), &u0, &u1).unwrap();
        assert_abs_diff_eq!(s.x(), 0.05, epsilon = 1e-15);
        assert_eq!(s.y(), 0.0);
        assert_eq!(s.heading(), 0.0);
    }

    #[test]
    fn midpoint_ramp_turn_rate() {
        let u0 = MotionMeasurement::new(1, 0.0, 1.0, 0.0);
        let u1 = MotionMeasurement::new(1, 0.05, 1.0, 0.2);
        let s = propagate_midpoint(&VehicleState::new(0.0, 0.0, 0.0), &u0, &u1).unwrap();
        assert_abs_diff_eq!(s.heading(), 0.005, epsilon = 1e-15);
        let reference = rk4_reference([0.0; 3], (1.0, 1.0), (0.0, 0.2), 0.05, 1000);
        let err = ((s.x() - reference[0]).powi(2) + (s.y() - reference[1]).powi(2)).sqrt();
        // O(dt^3) with dt = 0.05 and unit-scale inputs
        assert!(err < 0.05f64.powi(3), "err = {err}");
    }

    #[test]
    fn midpoint_static_vehicle() {
        let start = VehicleState::new(2.0, -1.0, 0.7);
        let u0 = MotionMeasurement::new(4, 1.0, 0.0, 0.0);
        let u1 = MotionMeasurement::new(4, 1.05, 0.0, 0.0);
        assert_eq!(propagate_midpoint(&start, &u0, &u1).unwrap(), start);
    }

    #[test]
    fn midpoint_rejects_bad_dt_and_mixed_vehicles() {
        let s = VehicleState::new(0.0, 0.0, 0.0);
        let u0 = MotionMeasurement::new(1, 1.0, 1.0, 0.0);
        assert!(propagate_midpoint(&s, &u0, &u0).is_err());
        let u1 = MotionMeasurement::new(2, 1.05, 1.0, 0.0);
        assert!(propagate_midpoint(&s, &u0, &u1).is_err());
    }

    #[test]
    fn midpoint_error_is_third_order() {
        // Smooth inputs: v and ω vary linearly over the step.
        let start = [0.3, -0.2, 0.4];
        let single_step_error = |dt: f64| {
            let (v0, v1) = (0.8, 0.8 + 2.0 * dt);
            let (w0, w1) = (0.5, 0.5 + 4.0 * dt);
            let u0 = MotionMeasurement::new(1, 0.0, v0, w0);
            let u1 = MotionMeasurement::new(1, dt, v1, w1);
            let s = propagate_midpoint(&VehicleState::new(start[0], start[1], start[2]), &u0, &u1).unwrap();
            let r = rk4_reference(start, (v0, v1), (w0, w1), dt, 400);
            ((s.x() - r[0]).powi(2) + (s.y() - r[1]).powi(2)).sqrt()
        };
        for dt in [0.1, 0.05, 0.025] {
            let ratio = single_step_error(dt) / single_step_error(dt / 2.0);
            assert!(ratio >= 4.0, "dt = {dt}: ratio {ratio}");
        }
    }

    #[test]
    fn range_examples() {
        let o = VehicleState::new(0.0, 0.0, 0.0);
        assert_eq!(true_range(&o, &VehicleState::new(3.0, 4.0, 1.0)), 5.0);
        assert_eq!(true_range(&o, &o), 0.0);
        let d = true_range(&VehicleState::new(1.0, 1.0, 0.0), &VehicleState::new(2.0, 2.0, 0.0));
        assert_abs_diff_eq!(d, 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn corrupt_noiseless_and_negative_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(corrupt(3.25, 0.0, &mut rng).unwrap(), 3.25);
        assert!(matches!(corrupt(1.0, -0.1, &mut rng), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn corrupt_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|_| corrupt(1.5, 0.1, &mut rng).unwrap()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((mean - 1.5).abs() < 0.001, "mean {mean}");
        assert!((var.sqrt() - 0.1).abs() < 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn corrupt_is_deterministic() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32).map(|_| corrupt(0.0, 0.3, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn range_measurement_invariants() {
        assert!(RangeMeasurement::new(1, 1, 2.0, 0.0).is_err());
        assert!(RangeMeasurement::new(1, 2, -0.5, 0.0).is_err());
        assert_eq!(RangeMeasurement::new(5, 2, 1.0, 0.0).unwrap().key(), (2, 5));
    }

    proptest! {
        #[test]
        fn straight_line_translation(x in -10.0..10.0f64, y in -10.0..10.0f64, th in -3.1..3.1f64,
                                     v in -2.0..2.0f64, dt in 0.001..2.0f64) {
            let s = propagate_exact(&VehicleState::new(x, y, th), v, 0.0, dt).unwrap();
            prop_assert!((s.x() - (x + v * dt * th.cos())).abs() < 1e-12);
            prop_assert!((s.y() - (y + v * dt * th.sin())).abs() < 1e-12);
            prop_assert!((s.heading() - th).abs() < 1e-15);
        }

        #[test]
        fn exact_subdivision(x in -10.0..10.0f64, y in -10.0..10.0f64, th in -3.1..3.1f64,
                             v in -2.0..2.0f64, w in -2.0..2.0f64, dt in 0.001..1.0f64) {
            let s0 = VehicleState::new(x, y, th);
            let full = propagate_exact(&s0, v, w, dt).unwrap();
            let half = propagate_exact(&s0, v, w, dt / 2.0).unwrap();
            let twice = propagate_exact(&half, v, w, dt / 2.0).unwrap();
            prop_assert!((full.x() - twice.x()).abs() < 1e-12);
            prop_assert!((full.y() - twice.y()).abs() < 1e-12);
            prop_assert!(wrap_angle(full.heading() - twice.heading()).abs() < 1e-12);
        }

        #[test]
        fn heading_always_normalized(th in -100.0..100.0f64, w in -50.0..50.0f64, dt in 0.001..3.0f64) {
            let s = propagate_exact(&VehicleState::new(0.0, 0.0, th), 1.0, w, dt).unwrap();
            prop_assert!(s.heading() > -PI && s.heading() <= PI);
        }

        #[test]
        fn range_is_symmetric(ax in -50.0..50.0f64, ay in -50.0..50.0f64, bx in -50.0..50.0f64, by in -50.0..50.0f64) {
            let a = VehicleState::new(ax, ay, 0.0);
            let b = VehicleState::new(bx, by, 1.0);
            prop_assert_eq!(true_range(&a, &b), true_range(&b, &a));
        }
    }
}
