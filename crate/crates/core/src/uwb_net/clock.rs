use std::fmt;
use std::ops::{Add, Sub};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

pub const ATTOS_PER_SECOND: i128 = 1_000_000_000_000_000_000;

/// Time on the attosecond grid. Absolute times stay exact over hours of
/// simulation; only small increments go through floating point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Stamp(pub i128);

impl Stamp {
    pub const ZERO: Stamp = Stamp(0);

    /// Rounds `seconds` to the nearest attosecond. Meant for small
    /// quantities (offsets, flight times); f64 carries ~16 digits.
    pub fn from_secs(seconds: f64) -> Self {
        Stamp((seconds * ATTOS_PER_SECOND as f64).round() as i128)
    }

    pub fn as_secs(self) -> f64 {
        let whole = self.0.div_euclid(ATTOS_PER_SECOND);
        let frac = self.0.rem_euclid(ATTOS_PER_SECOND);
        whole as f64 + frac as f64 / ATTOS_PER_SECOND as f64
    }

    pub fn attos(self) -> i128 {
        self.0
    }

    /// Rounds to the nearest multiple of `resolution` (no-op for resolution ≤ 0).
    pub fn quantize(self, resolution: Stamp) -> Self {
        if resolution.0 <= 0 {
            return self;
        }
        let r = resolution.0;
        let down = self.0.div_euclid(r) * r;
        if 2 * (self.0 - down) >= r {
            Stamp(down + r)
        } else {
            Stamp(down)
        }
    }
}

impl Add for Stamp {
    type Output = Stamp;
    fn add(self, rhs: Stamp) -> Stamp {
        Stamp(self.0 + rhs.0)
    }
}

impl Sub for Stamp {
    type Output = Stamp;
    fn sub(self, rhs: Stamp) -> Stamp {
        Stamp(self.0 - rhs.0)
    }
}

impl fmt::Display for Stamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Largest skew accepted for a crystal oscillator (100 ppm).
pub const MAX_SKEW: f64 = 1e-4;

/// Local clock of one vehicle: `local = true + offset`, with the offset
/// drifting at `skew`. Both follow random walks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockState {
    /// Seconds.
    pub offset: f64,
    /// Dimensionless (s/s).
    pub skew: f64,
    /// Offset random-walk density, s²/s.
    pub offset_density: f64,
    /// Skew random-walk density, s²/s³.
    pub skew_density: f64,
}

pub const DEFAULT_OFFSET_DENSITY: f64 = 1e-21;
pub const DEFAULT_SKEW_DENSITY: f64 = 1e-23;

impl ClockState {
    pub fn new(offset: f64, skew: f64, offset_density: f64, skew_density: f64) -> Result<Self> {
        if !offset.is_finite() || !skew.is_finite() {
            return Err(Error::InvalidArgument("non-finite clock parameters".into()));
        }
        if skew.abs() >= MAX_SKEW {
            return Err(Error::InvalidArgument(format!("|skew| {skew} exceeds {MAX_SKEW}")));
        }
        if !(offset_density >= 0.0) || !(skew_density >= 0.0) {
            return Err(Error::InvalidArgument("clock noise densities must be >= 0".into()));
        }
        Ok(Self {
            offset,
            skew,
            offset_density,
            skew_density,
        })
    }

    pub fn ideal() -> Self {
        Self {
            offset: 0.0,
            skew: 0.0,
            offset_density: 0.0,
            skew_density: 0.0,
        }
    }

    /// Offset `elapsed` seconds after the state's epoch.
    pub fn offset_after(&self, elapsed: f64) -> f64 {
        self.offset + self.skew * elapsed
    }
}

/// Advances the clock by `true_dt`. Two standard-normal draws are consumed per call.
pub fn advance_clock<R: Rng + ?Sized>(c: &ClockState, true_dt: f64, rng: &mut R) -> Result<ClockState> {
    if !(true_dt > 0.0) {
        return Err(Error::InvalidArgument(format!("true_dt must be > 0, got {true_dt}")));
    }
    let z_offset: f64 = rng.sample(StandardNormal);
    let z_skew: f64 = rng.sample(StandardNormal);
    Ok(ClockState {
        offset: c.offset + c.skew * true_dt + (c.offset_density * true_dt).sqrt() * z_offset,
        skew: c.skew + (c.skew_density * true_dt).sqrt() * z_skew,
        ..*c
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stamp_round_trip_and_quantize() {
        let s = Stamp::from_secs(1e-8);
        assert_eq!(s.0, 10_000_000_000);
        assert_eq!(Stamp(ATTOS_PER_SECOND * 300 + 5).as_secs(), 300.0);
        let q = Stamp(15_650_000);
        assert_eq!(Stamp(7_825_000).quantize(q), q);
        assert_eq!(Stamp(7_824_999).quantize(q), Stamp(0));
        assert_eq!(Stamp(-7_825_001).quantize(q), Stamp(-15_650_000));
        assert_eq!(Stamp(123).quantize(Stamp(0)), Stamp(123));
    }

    #[test]
    fn deterministic_drift() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = ClockState::new(0.0, 1e-6, 0.0, 0.0).unwrap();
        let next = advance_clock(&c, 1.0, &mut rng).unwrap();
        assert!((next.offset - 1e-6).abs() < 1e-20);
        let still = ClockState::new(2e-6, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(advance_clock(&still, 1.0, &mut rng).unwrap().offset, 2e-6);
        assert!(advance_clock(&c, 0.0, &mut rng).is_err());
        assert!(ClockState::new(0.0, 2e-4, 0.0, 0.0).is_err());
    }

    #[test]
    fn skew_random_walk_variance() {
        let density = 1e-12;
        let (steps, dt) = (10, 0.1);
        let runs = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sum_sq = 0.0;
        for _ in 0..runs {
            let mut c = ClockState::new(0.0, 0.0, 0.0, density).unwrap();
            for _ in 0..steps {
                c = advance_clock(&c, dt, &mut rng).unwrap();
            }
            sum_sq += c.skew * c.skew;
        }
        let var = sum_sq / runs as f64;
        let expect = density * steps as f64 * dt;
        assert!((var / expect - 1.0).abs() < 0.1, "{var} vs {expect}");
    }
}
