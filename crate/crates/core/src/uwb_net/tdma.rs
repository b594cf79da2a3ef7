use std::collections::BTreeMap;

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::clock::{ClockState, Stamp, ATTOS_PER_SECOND};
use super::SPEED_OF_LIGHT;
use crate::kinematics::MotionMeasurement;
use crate::{Error, Result, VehicleId};

/// Frame timing and slot assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct TdmaSchedule {
    frame_rate: f64,
    frame_period: Stamp,
    slot_duration: Stamp,
    /// Vehicle ids in slot order.
    order: Vec<VehicleId>,
}

pub const DEFAULT_FRAME_RATE: f64 = 100.0;

impl TdmaSchedule {
    /// Slots are assigned in the order of `ids`. Without an explicit slot
    /// duration the frame is split evenly.
    pub fn new(ids: Vec<VehicleId>, frame_rate: f64, slot_duration: Option<f64>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one vehicle".into()));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != ids.len() {
            return Err(Error::InvalidArgument("duplicate vehicle in slot assignment".into()));
        }
        if !(frame_rate > 0.0) || !frame_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("frame rate must be > 0, got {frame_rate}")));
        }
        let frame_period = Stamp((ATTOS_PER_SECOND as f64 / frame_rate).round() as i128);
        let slot_duration = match slot_duration {
            Some(s) if !(s > 0.0) => {
                return Err(Error::InvalidArgument(format!("slot duration must be > 0, got {s}")));
            }
            Some(s) => Stamp::from_secs(s),
            None => Stamp(frame_period.0 / ids.len() as i128),
        };
        if slot_duration.0 * ids.len() as i128 > frame_period.0 {
            return Err(Error::InvalidArgument(format!(
                "{} slots of {} s exceed the frame period",
                ids.len(),
                slot_duration.as_secs()
            )));
        }
        Ok(Self {
            frame_rate,
            frame_period,
            slot_duration,
            order: ids,
        })
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn frame_period(&self) -> Stamp {
        self.frame_period
    }

    pub fn slot_duration(&self) -> Stamp {
        self.slot_duration
    }

    pub fn order(&self) -> &[VehicleId] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn slot_of(&self, id: VehicleId) -> Option<u32> {
        self.order.iter().position(|v| *v == id).map(|s| s as u32)
    }

    pub fn owner(&self, slot: u32) -> Option<VehicleId> {
        self.order.get(slot as usize).copied()
    }

    pub fn frame_start(&self, frame: u64) -> Stamp {
        Stamp(self.frame_period.0 * frame as i128)
    }

    pub fn frame_time(&self, frame: u64) -> f64 {
        self.frame_start(frame).as_secs()
    }

    pub fn slot_start(&self, frame: u64, slot: u32) -> Stamp {
        self.frame_start(frame) + Stamp(self.slot_duration.0 * slot as i128)
    }
}

/// One broadcast. Timestamps are local to the sender (tx) and receivers (rx).
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub sender_id: VehicleId,
    pub slot_index: u32,
    pub frame_index: u64,
    pub tx_timestamp: Stamp,
    /// Sender's current (offset, skew) estimate of each neighbor relative to itself.
    pub clock_params: Vec<(VehicleId, f64, f64)>,
    pub motion: Option<MotionMeasurement>,
    pub rx_records: Vec<(VehicleId, Stamp)>,
}

impl Packet {
    pub fn rx_of(&self, receiver: VehicleId) -> Option<Stamp> {
        self.rx_records.iter().find(|(id, _)| *id == receiver).map(|(_, s)| *s)
    }

    pub fn is_delivered(&self) -> bool {
        !self.rx_records.is_empty()
    }
}

/// Line-of-sight channel with timestamp jitter, quantization and whole-packet loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModel {
    pub drop_probability: f64,
    /// Standard deviation of receive-timestamp jitter, seconds.
    pub jitter_sigma: f64,
    /// Timestamp resolution; zero disables quantization.
    pub quantization: Stamp,
    pub max_range: f64,
}

pub const DEFAULT_QUANTIZATION: f64 = 15.65e-12;

impl ChannelModel {
    pub fn ideal() -> Self {
        Self {
            drop_probability: 0.0,
            jitter_sigma: 0.0,
            quantization: Stamp::ZERO,
            max_range: f64::INFINITY,
        }
    }

    /// Jitter giving a two-way range standard deviation of `sigma_range`.
    pub fn jitter_for_range_sigma(sigma_range: f64) -> f64 {
        std::f64::consts::SQRT_2 * sigma_range / SPEED_OF_LIGHT
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(Error::InvalidArgument(format!(
                "drop probability must be in [0, 1], got {}",
                self.drop_probability
            )));
        }
        if !(self.jitter_sigma >= 0.0) || self.quantization.0 < 0 || !(self.max_range > 0.0) {
            return Err(Error::InvalidArgument("invalid channel parameters".into()));
        }
        Ok(())
    }
}

/// Local reading of a clock whose state refers to `epoch`, at true time `t`.
pub fn local_time(clock: &ClockState, epoch: Stamp, t: Stamp) -> Stamp {
    t + Stamp::from_secs(clock.offset_after((t - epoch).as_secs()))
}

/// Geometry and clocks frozen at a frame epoch.
#[derive(Debug, Clone, Copy)]
pub struct FrameContext<'a> {
    pub frame: u64,
    pub positions: &'a BTreeMap<VehicleId, Vector2<f64>>,
    pub clocks: &'a BTreeMap<VehicleId, ClockState>,
}

/// Emits the sender's packet in its slot and records its arrival at every
/// other vehicle in range. One uniform (drop) and one normal per receiver
/// (jitter) are drawn whatever the outcome.
pub fn broadcast_slot<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    schedule: &TdmaSchedule,
    ctx: &FrameContext<'_>,
    sender: VehicleId,
    channel: &ChannelModel,
    drop_rng: &mut R1,
    jitter_rng: &mut R2,
) -> Result<Packet> {
    let slot = schedule
        .slot_of(sender)
        .ok_or_else(|| Error::InvalidArgument(format!("vehicle {sender} owns no slot")))?;
    let epoch = schedule.frame_start(ctx.frame);
    let lookup = |id: VehicleId| -> Result<(Vector2<f64>, ClockState)> {
        let p = ctx
            .positions
            .get(&id)
            .ok_or_else(|| Error::InvalidArgument(format!("no position for vehicle {id}")))?;
        let c = ctx
            .clocks
            .get(&id)
            .ok_or_else(|| Error::InvalidArgument(format!("no clock for vehicle {id}")))?;
        Ok((*p, *c))
    };
    let (p_tx, clock_tx) = lookup(sender)?;
    // Transmission is scheduled on the quantized local tick, so the stamp is exact.
    let slot_true = schedule.slot_start(ctx.frame, slot);
    let tx_raw = local_time(&clock_tx, epoch, slot_true);
    let tx_timestamp = tx_raw.quantize(channel.quantization);
    let tx_true = slot_true + (tx_timestamp - tx_raw);

    let dropped = drop_rng.random::<f64>() < channel.drop_probability;
    let mut rx_records = Vec::with_capacity(schedule.len().saturating_sub(1));
    for &receiver in schedule.order() {
        if receiver == sender {
            continue;
        }
        let z: f64 = jitter_rng.sample(StandardNormal);
        let (p_rx, clock_rx) = lookup(receiver)?;
        let distance = (p_rx - p_tx).norm();
        if dropped || distance > channel.max_range {
            continue;
        }
        let arrival = tx_true + Stamp::from_secs(distance / SPEED_OF_LIGHT);
        let rx = local_time(&clock_rx, epoch, arrival) + Stamp::from_secs(channel.jitter_sigma * z);
        rx_records.push((receiver, rx.quantize(channel.quantization)));
    }
    Ok(Packet {
        sender_id: sender,
        slot_index: slot,
        frame_index: ctx.frame,
        tx_timestamp,
        clock_params: Vec::new(),
        motion: None,
        rx_records,
    })
}
