use nalgebra::{Matrix2, Vector2};

use super::clock::Stamp;
use super::SPEED_OF_LIGHT;
use crate::{Error, Result, VehicleId};

/// Timestamps of one reciprocal exchange between `a` and `b` (a < b).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReciprocalObservation {
    pub frame: u64,
    /// a's packet: tx at a, rx at b.
    pub tx_a: Stamp,
    pub rx_b: Stamp,
    /// b's packet: tx at b, rx at a.
    pub tx_b: Stamp,
    pub rx_a: Stamp,
}

impl ReciprocalObservation {
    /// Half difference of the two one-way residuals; the flight time cancels.
    pub fn offset_measurement(&self) -> f64 {
        let forward = (self.rx_b - self.tx_a).as_secs();
        let backward = (self.rx_a - self.tx_b).as_secs();
        0.5 * (forward - backward)
    }

    /// Time of the measurement on a's clock.
    pub fn epoch(&self) -> Stamp {
        Stamp((self.tx_a.0 + self.rx_a.0).div_euclid(2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncConfig {
    /// Relative offset random-walk density of the pair, s²/s.
    pub offset_density: f64,
    /// Relative skew random-walk density, s²/s³.
    pub skew_density: f64,
    /// Variance of one offset measurement, s².
    pub measurement_var: f64,
    pub skew_prior_var: f64,
    /// Updates needed before ranges are extracted.
    pub min_updates: u32,
    /// Frames after the last update at which the estimate counts as stale.
    pub stale_frames: u64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            offset_density: 2e-21,
            skew_density: 2e-23,
            measurement_var: 1e-24,
            skew_prior_var: 1e-8,
            min_updates: 20,
            stale_frames: 5,
        }
    }
}

/// Estimate of b's clock relative to a's at `reference` (a's clock).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockEstimate {
    pub pair: (VehicleId, VehicleId),
    pub offset: f64,
    pub skew: f64,
    pub reference: Stamp,
    pub last_frame: Option<u64>,
    pub updates: u32,
}

impl ClockEstimate {
    /// Offset at time `t` on a's clock.
    pub fn offset_at(&self, t: Stamp) -> f64 {
        self.offset + self.skew * (t - self.reference).as_secs()
    }

    /// Offset at the instant b's clock reads `t_b`.
    pub fn offset_at_b(&self, t_b: Stamp) -> f64 {
        let guess = self.offset_at(t_b);
        self.offset_at(t_b - Stamp::from_secs(guess))
    }
}

/// Two-state (relative offset, relative skew) Kalman filter of one pair.
#[derive(Debug, Clone)]
pub struct ClockSync {
    pair: (VehicleId, VehicleId),
    config: SyncConfig,
    x: Vector2<f64>,
    p: Matrix2<f64>,
    reference: Stamp,
    updates: u32,
    last_frame: Option<u64>,
}

impl ClockSync {
    pub fn new(a: VehicleId, b: VehicleId, config: SyncConfig) -> Result<Self> {
        if a == b {
            return Err(Error::InvalidArgument("clock sync pair must differ".into()));
        }
        Ok(Self {
            pair: (a.min(b), a.max(b)),
            config,
            x: Vector2::zeros(),
            p: Matrix2::zeros(),
            reference: Stamp::ZERO,
            updates: 0,
            last_frame: None,
        })
    }

    pub fn pair(&self) -> (VehicleId, VehicleId) {
        self.pair
    }

    pub fn estimate(&self) -> ClockEstimate {
        ClockEstimate {
            pair: self.pair,
            offset: self.x[0],
            skew: self.x[1],
            reference: self.reference,
            last_frame: self.last_frame,
            updates: self.updates,
        }
    }

    pub fn covariance(&self) -> Matrix2<f64> {
        self.p
    }

    pub fn is_ready(&self, frame: u64) -> bool {
        self.updates >= self.config.min_updates.max(1)
            && self
                .last_frame
                .is_some_and(|f| frame.saturating_sub(f) <= self.config.stale_frames)
    }

    fn predict(&mut self, to: Stamp) {
        let dt = (to - self.reference).as_secs();
        if dt <= 0.0 || self.updates == 0 {
            return;
        }
        let f = Matrix2::new(1.0, dt, 0.0, 1.0);
        let (qo, qs) = (self.config.offset_density, self.config.skew_density);
        let q = Matrix2::new(
            qo * dt + qs * dt.powi(3) / 3.0,
            qs * dt * dt / 2.0,
            qs * dt * dt / 2.0,
            qs * dt,
        );
        self.x = f * self.x;
        self.p = f * self.p * f.transpose() + q;
        self.reference = to;
    }
}

/// One filter step: predict to the observation epoch and fuse the offset
/// measurement, or predict to `now` when no reciprocal pair was observed.
pub fn clock_sync_update(filter: &mut ClockSync, obs: Option<&ReciprocalObservation>, now: Stamp) -> ClockEstimate {
    match obs {
        None => filter.predict(now),
        Some(o) => {
            let z = o.offset_measurement();
            let t = o.epoch();
            if filter.updates == 0 {
                filter.x = Vector2::new(z, 0.0);
                filter.p = Matrix2::new(filter.config.measurement_var, 0.0, 0.0, filter.config.skew_prior_var);
                filter.reference = t;
            } else {
                filter.predict(t);
                let innovation = z - filter.x[0];
                let s = filter.p[(0, 0)] + filter.config.measurement_var;
                let k = filter.p.column(0) / s;
                filter.x += k * innovation;
                // Joseph form with H = [1, 0]
                let ikh = Matrix2::identity() - k * Vector2::new(1.0, 0.0).transpose();
                filter.p = ikh * filter.p * ikh.transpose() + k * k.transpose() * filter.config.measurement_var;
                filter.p = 0.5 * (filter.p + filter.p.transpose());
            }
            filter.updates += 1;
            filter.last_frame = Some(o.frame);
        }
    }
    filter.estimate()
}

/// Two-way flight time of a reciprocal exchange after clock correction, as a distance.
pub fn extract_tof(obs: &ReciprocalObservation, filter: &ClockSync) -> Result<f64> {
    if !filter.is_ready(obs.frame) {
        return Err(Error::NotReady(format!(
            "clock sync {:?}: {} updates, last frame {:?}, now {}",
            filter.pair, filter.updates, filter.last_frame, obs.frame
        )));
    }
    let est = filter.estimate();
    let forward = (obs.rx_b - obs.tx_a).as_secs() - est.offset_at(obs.tx_a);
    let backward = (obs.rx_a - obs.tx_b).as_secs() + est.offset_at_b(obs.tx_b);
    Ok(0.5 * (forward + backward) * SPEED_OF_LIGHT)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FRAME: i128 = 10_000_000_000_000_000;

    /// Exchange between clocks with offsets `off(t)` (b relative to true, a ideal)
    /// at flight time `tau`, a sending at slot 0 and b at `gap`.
    fn exchange(frame: u64, tau: f64, gap: f64, off_b: impl Fn(f64) -> f64) -> ReciprocalObservation {
        let t0 = Stamp(FRAME * frame as i128);
        let t1 = t0 + Stamp::from_secs(gap);
        let local_b = |t: Stamp| t + Stamp::from_secs(off_b((t - Stamp::ZERO).as_secs()));
        ReciprocalObservation {
            frame,
            tx_a: t0,
            rx_b: local_b(t0 + Stamp::from_secs(tau)),
            tx_b: local_b(t1),
            rx_a: t1 + Stamp::from_secs(tau),
        }
    }

    #[test]
    fn noiseless_offset_converges() {
        let config = SyncConfig {
            offset_density: 0.0,
            skew_density: 0.0,
            ..SyncConfig::default()
        };
        let mut f = ClockSync::new(1, 2, config).unwrap();
        for k in 0..10 {
            let o = exchange(k, 2e-8, 0.004, |_| 1e-6);
            clock_sync_update(&mut f, Some(&o), o.epoch());
        }
        assert!((f.estimate().offset - 1e-6).abs() < 1e-10);
    }

    #[test]
    fn identical_clocks_stay_at_zero() {
        let mut f = ClockSync::new(1, 2, SyncConfig::default()).unwrap();
        for k in 0..50 {
            let o = exchange(k, 3e-8, 0.002, |_| 0.0);
            clock_sync_update(&mut f, Some(&o), o.epoch());
        }
        assert!(f.estimate().offset.abs() < 1e-15);
        assert!(f.estimate().skew.abs() < 1e-12);
    }

    #[test]
    fn skew_tracked_within_one_ppm() {
        let mut f = ClockSync::new(1, 2, SyncConfig::default()).unwrap();
        for k in 0..100 {
            let o = exchange(k, 3e-8, 0.004, |t| 1e-6 + 20e-6 * t);
            clock_sync_update(&mut f, Some(&o), o.epoch());
        }
        assert!((f.estimate().skew - 20e-6).abs() < 1e-6);
    }

    #[test]
    fn missing_frames_predict_and_go_stale() {
        let mut f = ClockSync::new(1, 2, SyncConfig::default()).unwrap();
        for k in 0..30 {
            let o = exchange(k, 3e-8, 0.004, |t| 5e-6 * t);
            clock_sync_update(&mut f, Some(&o), o.epoch());
        }
        let p_before = f.covariance()[(0, 0)];
        clock_sync_update(&mut f, None, Stamp(FRAME * 31));
        assert!(f.covariance()[(0, 0)] >= p_before);
        let late = exchange(36, 3e-8, 0.004, |t| 5e-6 * t);
        assert!(matches!(extract_tof(&late, &f), Err(Error::NotReady(_))));
        let on_time = exchange(34, 3e-8, 0.004, |t| 5e-6 * t);
        assert!(extract_tof(&on_time, &f).is_ok());
    }

    #[test]
    fn skew_corrected_two_way_range() {
        let tau = 10.0 / SPEED_OF_LIGHT;
        let mut f = ClockSync::new(1, 2, SyncConfig::default()).unwrap();
        let mut last = 0.0;
        for k in 0..100 {
            let o = exchange(k, tau, 0.008, |t| 1e-6 + 20e-6 * t);
            clock_sync_update(&mut f, Some(&o), o.epoch());
            if let Ok(d) = extract_tof(&o, &f) {
                last = d;
            }
        }
        assert!((last - 10.0).abs() < 0.01, "{last}");
        // without skew correction the same exchange is biased by c·skew·gap/2
        let o = exchange(100, tau, 0.008, |t| 1e-6 + 20e-6 * t);
        let raw = 0.5 * ((o.rx_b - o.tx_a).as_secs() + (o.rx_a - o.tx_b).as_secs()) * SPEED_OF_LIGHT;
        assert!((raw - 10.0).abs() > 1.0);
    }
}
