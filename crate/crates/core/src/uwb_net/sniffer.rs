use std::collections::BTreeMap;

use super::clock::Stamp;
use super::sync::{clock_sync_update, extract_tof, ClockEstimate, ClockSync, ReciprocalObservation, SyncConfig};
use super::tdma::{Packet, TdmaSchedule};
use crate::kinematics::{MotionMeasurement, RangeMeasurement};
use crate::{Error, Result, VehicleId};

/// Everything the sniffer decoded from one frame, tagged with network time.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub frame: u64,
    pub time: f64,
    pub ranges: Vec<RangeMeasurement>,
    pub motions: Vec<MotionMeasurement>,
    pub clocks: Vec<ClockEstimate>,
}

/// Host-side collector; keeps one clock-sync filter per vehicle pair.
#[derive(Debug, Clone)]
pub struct Sniffer {
    schedule: TdmaSchedule,
    filters: BTreeMap<(VehicleId, VehicleId), ClockSync>,
}

impl Sniffer {
    pub fn new(schedule: TdmaSchedule, config: SyncConfig) -> Result<Self> {
        let mut ids = schedule.order().to_vec();
        ids.sort_unstable();
        let mut filters = BTreeMap::new();
        for (k, a) in ids.iter().enumerate() {
            for b in &ids[k + 1..] {
                filters.insert((*a, *b), ClockSync::new(*a, *b, config)?);
            }
        }
        Ok(Self { schedule, filters })
    }

    pub fn schedule(&self) -> &TdmaSchedule {
        &self.schedule
    }

    pub fn filter(&self, a: VehicleId, b: VehicleId) -> Option<&ClockSync> {
        self.filters.get(&(a.min(b), a.max(b)))
    }

    /// Estimate of `neighbor`'s clock relative to `own`, as (offset, skew).
    pub fn relative_clock(&self, own: VehicleId, neighbor: VehicleId) -> Option<(f64, f64)> {
        let est = self.filter(own, neighbor)?.estimate();
        if est.updates == 0 {
            return None;
        }
        let sign = if own < neighbor { 1.0 } else { -1.0 };
        Some((sign * est.offset, sign * est.skew))
    }
}

fn reciprocal(frame: u64, a: &Packet, b: &Packet) -> Option<ReciprocalObservation> {
    Some(ReciprocalObservation {
        frame,
        tx_a: a.tx_timestamp,
        rx_b: a.rx_of(b.sender_id)?,
        tx_b: b.tx_timestamp,
        rx_a: b.rx_of(a.sender_id)?,
    })
}

/// Decodes the delivered packets of one frame: clock filters are updated,
/// ranges are formed for every pair whose filter is synchronized, and motion
/// payloads are passed through.
pub fn sniffer_collect(sniffer: &mut Sniffer, frame: u64, packets: &[Packet]) -> Result<FrameReport> {
    let mut by_sender: BTreeMap<VehicleId, &Packet> = BTreeMap::new();
    for p in packets {
        if p.frame_index != frame {
            return Err(Error::InvalidArgument(format!(
                "packet of frame {} handed in frame {frame}",
                p.frame_index
            )));
        }
        by_sender.insert(p.sender_id, p);
    }
    let time = sniffer.schedule.frame_time(frame);
    let now: Stamp = sniffer.schedule.frame_start(frame);
    let mut ranges = Vec::new();
    let mut clocks = Vec::with_capacity(sniffer.filters.len());
    for (&(a, b), filter) in sniffer.filters.iter_mut() {
        let obs = match (by_sender.get(&a), by_sender.get(&b)) {
            (Some(pa), Some(pb)) => reciprocal(frame, pa, pb),
            _ => None,
        };
        clocks.push(clock_sync_update(filter, obs.as_ref(), now));
        if let Some(o) = obs {
            match extract_tof(&o, filter) {
                Ok(d) => ranges.push(RangeMeasurement::new(a, b, d.max(0.0), time)?),
                Err(Error::NotReady(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    let mut motions: Vec<MotionMeasurement> = by_sender.values().filter_map(|p| p.motion).collect();
    motions.sort_by_key(|m| m.vehicle_id);
    Ok(FrameReport {
        frame,
        time,
        ranges,
        motions,
        clocks,
    })
}
