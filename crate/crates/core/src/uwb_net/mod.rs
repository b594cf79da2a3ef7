//! Simulated UWB broadcast network.
//!
//! Every vehicle owns one TDMA slot per frame and broadcasts a packet stamped
//! with its local clock; every other vehicle stamps the arrival on its own
//! clock. A host-side sniffer sees all delivered packets, keeps one
//! clock-sync filter per pair and turns reciprocal exchanges into ranges.
//! Geometry is frozen at the frame epoch: a frame lasts 10 ms, during which a
//! vehicle at 1 m/s moves 1 cm.

mod clock;
mod log;
mod sniffer;
mod sync;
mod tdma;

use std::collections::BTreeMap;

use nalgebra::Vector2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use clock::{advance_clock, ClockState, Stamp, ATTOS_PER_SECOND, DEFAULT_OFFSET_DENSITY, DEFAULT_SKEW_DENSITY, MAX_SKEW};
pub use log::{read_packet_log, PacketLogWriter, LOG_HEADER};
pub use sniffer::{sniffer_collect, FrameReport, Sniffer};
pub use sync::{clock_sync_update, extract_tof, ClockEstimate, ClockSync, ReciprocalObservation, SyncConfig};
pub use tdma::{
    broadcast_slot, local_time, ChannelModel, FrameContext, Packet, TdmaSchedule, DEFAULT_FRAME_RATE,
    DEFAULT_QUANTIZATION,
};

use crate::kinematics::MotionMeasurement;
use crate::{stream_rng, Error, Result, VehicleId};

/// Meters per second.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub const STREAM_CLOCKS: u64 = 10;
pub const STREAM_DROPS: u64 = 11;
pub const STREAM_JITTER: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    pub frame_rate: f64,
    pub slot_duration: Option<f64>,
    pub channel: ChannelModel,
    pub sync: SyncConfig,
    /// Motion payloads ride on every `motion_divider`-th frame.
    pub motion_divider: u64,
}

impl NetworkConfig {
    /// Perfect channel: no jitter, no quantization, no loss.
    pub fn ideal() -> Self {
        Self {
            frame_rate: DEFAULT_FRAME_RATE,
            slot_duration: None,
            channel: ChannelModel::ideal(),
            sync: SyncConfig::default(),
            motion_divider: 5,
        }
    }

    /// Jitter chosen so that two-way ranges have standard deviation
    /// `sigma_range`, default timestamp quantization, clock filter tuned to match.
    pub fn for_range_sigma(sigma_range: f64, drop_probability: f64) -> Self {
        let channel = ChannelModel {
            drop_probability,
            jitter_sigma: ChannelModel::jitter_for_range_sigma(sigma_range),
            quantization: Stamp::from_secs(DEFAULT_QUANTIZATION),
            max_range: f64::INFINITY,
        };
        let mut config = Self {
            channel,
            ..Self::ideal()
        };
        config.sync.measurement_var = Self::measurement_var(&channel);
        config
    }

    /// Variance of the half-difference offset measurement under this channel.
    pub fn measurement_var(channel: &ChannelModel) -> f64 {
        let q = channel.quantization.as_secs();
        0.5 * channel.jitter_sigma.powi(2) + q * q / 24.0 + 1e-24
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        if self.motion_divider == 0 {
            return Err(Error::InvalidArgument("motion divider must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draws initial clocks uniformly within ±`max_offset` and ±`max_skew`.
pub fn random_clocks<R: Rng + ?Sized>(
    ids: &[VehicleId],
    max_offset: f64,
    max_skew: f64,
    offset_density: f64,
    skew_density: f64,
    rng: &mut R,
) -> Result<BTreeMap<VehicleId, ClockState>> {
    ids.iter()
        .map(|id| {
            let offset = rng.random_range(-1.0..=1.0) * max_offset;
            let skew = rng.random_range(-1.0..=1.0) * max_skew;
            Ok((*id, ClockState::new(offset, skew, offset_density, skew_density)?))
        })
        .collect()
}

/// Discrete-event loop over TDMA frames.
#[derive(Debug, Clone)]
pub struct Network {
    schedule: TdmaSchedule,
    config: NetworkConfig,
    clocks: BTreeMap<VehicleId, ClockState>,
    clock_frame: Option<u64>,
    rng_clocks: ChaCha8Rng,
    rng_drops: ChaCha8Rng,
    rng_jitter: ChaCha8Rng,
    sniffer: Sniffer,
}

impl Network {
    /// `slot_order` assigns slots; `clocks` holds the state of each clock at frame 0.
    pub fn new(
        slot_order: Vec<VehicleId>,
        clocks: BTreeMap<VehicleId, ClockState>,
        config: NetworkConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let schedule = TdmaSchedule::new(slot_order, config.frame_rate, config.slot_duration)?;
        for id in schedule.order() {
            if !clocks.contains_key(id) {
                return Err(Error::InvalidArgument(format!("no clock for vehicle {id}")));
            }
        }
        let sniffer = Sniffer::new(schedule.clone(), config.sync)?;
        Ok(Self {
            schedule,
            config,
            clocks,
            clock_frame: None,
            rng_clocks: stream_rng(seed, STREAM_CLOCKS),
            rng_drops: stream_rng(seed, STREAM_DROPS),
            rng_jitter: stream_rng(seed, STREAM_JITTER),
            sniffer,
        })
    }

    pub fn schedule(&self) -> &TdmaSchedule {
        &self.schedule
    }

    pub fn sniffer(&self) -> &Sniffer {
        &self.sniffer
    }

    pub fn clocks(&self) -> &BTreeMap<VehicleId, ClockState> {
        &self.clocks
    }

    pub fn carries_motion(&self, frame: u64) -> bool {
        frame % self.config.motion_divider == 0
    }

    fn advance_clocks_to(&mut self, frame: u64) -> Result<()> {
        match self.clock_frame {
            None => {}
            Some(prev) if frame <= prev => {
                return Err(Error::OutOfOrder {
                    last: self.schedule.frame_time(prev),
                    got: self.schedule.frame_time(frame),
                })
            }
            Some(prev) => {
                let dt = (self.schedule.frame_start(frame) - self.schedule.frame_start(prev)).as_secs();
                for clock in self.clocks.values_mut() {
                    *clock = advance_clock(clock, dt, &mut self.rng_clocks)?;
                }
            }
        }
        self.clock_frame = Some(frame);
        Ok(())
    }

    /// Runs one frame with positions frozen at its epoch. Returns the delivered
    /// packets in slot order and the sniffer's report.
    pub fn run_frame(
        &mut self,
        frame: u64,
        positions: &BTreeMap<VehicleId, Vector2<f64>>,
        motions: &BTreeMap<VehicleId, MotionMeasurement>,
    ) -> Result<(Vec<Packet>, FrameReport)> {
        self.advance_clocks_to(frame)?;
        let ctx = FrameContext {
            frame,
            positions,
            clocks: &self.clocks,
        };
        let carries_motion = self.carries_motion(frame);
        let mut delivered = Vec::with_capacity(self.schedule.len());
        for &sender in self.schedule.order() {
            let mut packet = broadcast_slot(
                &self.schedule,
                &ctx,
                sender,
                &self.config.channel,
                &mut self.rng_drops,
                &mut self.rng_jitter,
            )?;
            if !packet.is_delivered() {
                continue;
            }
            if carries_motion {
                packet.motion = motions.get(&sender).copied();
            }
            packet.clock_params = self
                .schedule
                .order()
                .iter()
                .filter(|n| **n != sender)
                .filter_map(|n| self.sniffer.relative_clock(sender, *n).map(|(o, s)| (*n, o, s)))
                .collect();
            delivered.push(packet);
        }
        let report = sniffer_collect(&mut self.sniffer, frame, &delivered)?;
        Ok((delivered, report))
    }
}
