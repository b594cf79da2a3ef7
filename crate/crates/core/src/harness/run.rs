//! Three-phase simulation driver: static ranging, straight drive, filtered run.

use std::collections::BTreeMap;
use std::io::Read;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::metrics::{compute_metrics, ErrorSeries, PoseSeries, RunMetrics};
use super::scenario::{InitMode, Scenario};
use super::truth::{PhaseTimes, TruthSim};
use crate::estimator::{pose_error, Estimator, FleetBelief};
use crate::initializer::{establish_frame, AdjacencyBuilder, HeadingInitConfig, HeadingInitializer, InitReport, RefineConfig};
use crate::kinematics::{corrupt, wrap_angle, MotionMeasurement, VehicleState};
use crate::uwb_net::{
    random_clocks, read_packet_log, sniffer_collect, FrameReport, Network, NetworkConfig, Packet, PacketLogWriter,
    Sniffer, Stamp, ATTOS_PER_SECOND,
};
use crate::{stream_rng, Error, Result, VehicleId};

pub const STREAM_CLOCK_INIT: u64 = 13;
pub const STREAM_KNOWN_INIT: u64 = 14;
pub const STREAM_ENCODER_BASE: u64 = 2000;

const ATTOS_PER_MS: i128 = ATTOS_PER_SECOND / 1000;

/// Frame indices of the phase boundaries. Every boundary is a motion frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timeline {
    pub frame_ms: u64,
    pub motion_divider: u64,
    /// First frame of the straight drive.
    pub linear_start: u64,
    /// Frame at which initialization completes and the filter starts.
    pub run_start: u64,
    pub end: u64,
}

impl Timeline {
    pub fn new(s: &Scenario, config: &NetworkConfig) -> Result<Self> {
        let period = (ATTOS_PER_SECOND as f64 / config.frame_rate).round() as i128;
        if period % ATTOS_PER_MS != 0 {
            return Err(Error::Scenario(format!(
                "frame period of {} Hz is not a whole number of milliseconds",
                config.frame_rate
            )));
        }
        let div = config.motion_divider;
        let frames = |secs: f64| {
            let n = (secs * config.frame_rate).round().max(1.0) as u64;
            n.div_ceil(div) * div
        };
        let linear_start = frames(s.durations.static_init);
        let run_start = linear_start + frames(s.durations.linear_motion);
        Ok(Self {
            frame_ms: (period / ATTOS_PER_MS) as u64,
            motion_divider: div,
            linear_start,
            run_start,
            end: run_start + frames(s.durations.run),
        })
    }

    pub fn phases(&self) -> PhaseTimes {
        PhaseTimes {
            linear_start_ms: self.linear_start * self.frame_ms,
            run_start_ms: self.run_start * self.frame_ms,
        }
    }

    pub fn is_motion_frame(&self, frame: u64) -> bool {
        frame % self.motion_divider == 0
    }
}

/// Network parameters implied by a scenario.
pub fn network_config(s: &Scenario) -> NetworkConfig {
    let n = &s.network;
    let mut config = NetworkConfig::for_range_sigma(s.noise.sigma_range, n.drop_probability);
    config.frame_rate = n.frame_rate;
    config.slot_duration = n.slot_duration;
    if !n.quantization {
        config.channel.quantization = Stamp::ZERO;
    }
    config.sync.measurement_var = NetworkConfig::measurement_var(&config.channel);
    // relative clock of a pair: both random walks add up
    config.sync.offset_density = 2.0 * n.offset_density;
    config.sync.skew_density = 2.0 * n.skew_density;
    config.sync.min_updates = n.sync_min_updates;
    config
}

/// Rigid map from arena coordinates into the frame the filter runs in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceFrame {
    pub origin: Vector2<f64>,
    pub angle: f64,
}

impl ReferenceFrame {
    pub fn identity() -> Self {
        Self {
            origin: Vector2::zeros(),
            angle: 0.0,
        }
    }

    /// Anchor 1 at the origin, anchor 2 on the positive x-axis.
    pub fn from_anchors(a1: Vector2<f64>, a2: Vector2<f64>) -> Self {
        let d = a2 - a1;
        Self {
            origin: a1,
            angle: d.y.atan2(d.x),
        }
    }

    pub fn for_scenario(s: &Scenario) -> Self {
        match s.anchors() {
            Some((a, b)) => {
                let pa = s.vehicle(a).map(|v| v.pose().position()).unwrap_or_default();
                let pb = s.vehicle(b).map(|v| v.pose().position()).unwrap_or_default();
                Self::from_anchors(pa, pb)
            }
            None => Self::identity(),
        }
    }

    pub fn point(&self, p: Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.angle.sin_cos();
        Matrix2::new(c, s, -s, c) * (p - self.origin)
    }

    pub fn pose(&self, x: &VehicleState) -> VehicleState {
        VehicleState::from_position(self.point(x.position()), wrap_angle(x.heading() - self.angle))
    }
}

/// Where frame reports come from.
#[derive(Debug, Clone)]
pub enum PacketSource {
    Live(Box<Network>),
    Recorded {
        frames: BTreeMap<u64, Vec<Packet>>,
        sniffer: Box<Sniffer>,
        motion_divider: u64,
    },
}

impl PacketSource {
    pub fn live(s: &Scenario) -> Result<Self> {
        let config = network_config(s);
        let ids: Vec<VehicleId> = s.vehicles.iter().map(|v| v.id).collect();
        let n = &s.network;
        let clocks = random_clocks(
            &ids,
            n.max_clock_offset,
            n.max_clock_skew,
            n.offset_density,
            n.skew_density,
            &mut stream_rng(s.seed, STREAM_CLOCK_INIT),
        )?;
        Ok(Self::Live(Box::new(Network::new(ids, clocks, config, s.seed)?)))
    }

    pub fn recorded<R: Read>(log: R, s: &Scenario) -> Result<Self> {
        let config = network_config(s);
        let ids: Vec<VehicleId> = s.vehicles.iter().map(|v| v.id).collect();
        let schedule = crate::uwb_net::TdmaSchedule::new(ids, config.frame_rate, config.slot_duration)?;
        Ok(Self::Recorded {
            frames: read_packet_log(log)?,
            sniffer: Box::new(Sniffer::new(schedule, config.sync)?),
            motion_divider: config.motion_divider,
        })
    }

    fn frame_time(&self, frame: u64) -> f64 {
        match self {
            Self::Live(net) => net.schedule().frame_time(frame),
            Self::Recorded { sniffer, .. } => sniffer.schedule().frame_time(frame),
        }
    }

    fn next(
        &mut self,
        frame: u64,
        positions: &BTreeMap<VehicleId, Vector2<f64>>,
        motions: &BTreeMap<VehicleId, MotionMeasurement>,
    ) -> Result<(Vec<Packet>, FrameReport)> {
        match self {
            Self::Live(net) => net.run_frame(frame, positions, motions),
            Self::Recorded {
                frames,
                sniffer,
                motion_divider,
            } => {
                let mut packets = frames.remove(&frame).unwrap_or_default();
                if frame % *motion_divider == 0 {
                    for p in &mut packets {
                        p.motion = motions.get(&p.sender_id).copied();
                    }
                }
                let report = sniffer_collect(sniffer, frame, &packets)?;
                Ok((packets, report))
            }
        }
    }
}

/// Full record of one run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scenario_name: String,
    pub metrics: RunMetrics,
    /// Truth in the filter's reference frame.
    pub truth: PoseSeries,
    pub estimate: PoseSeries,
    pub baseline: PoseSeries,
    pub packet_log: Option<Vec<u8>>,
}

enum InitStage {
    Ranging(AdjacencyBuilder),
    Heading(Box<HeadingInitializer>),
    Known,
}

/// Simulates the scenario end to end with a live network and records the packet log.
pub fn run_scenario(s: &Scenario) -> Result<RunOutput> {
    run_with_source(s, PacketSource::live(s)?, true)
}

/// Feeds a recorded packet log instead of the live network; truth and
/// encoder samples are regenerated from the scenario.
pub fn replay<R: Read>(log: R, s: &Scenario) -> Result<RunOutput> {
    run_with_source(s, PacketSource::recorded(log, s)?, false)
}

/// Runs only the initialization phases.
pub fn run_initialization(s: &Scenario) -> Result<InitReport> {
    let mut short = s.clone();
    short.init.mode = InitMode::Motion;
    short.validate()?;
    let mut source = PacketSource::live(&short)?;
    let timeline = Timeline::new(&short, &network_config(&short))?;
    let mut driver = Driver::new(&short, timeline)?;
    for frame in 0..=timeline.run_start {
        driver.init_frame(&mut source, frame, None)?;
    }
    driver.finish_init(&source)
}

/// Independent runs with seeds `s.seed, s.seed + 1, …`, in parallel.
pub fn monte_carlo(s: &Scenario, runs: usize) -> Vec<Result<RunMetrics>> {
    (0..runs as u64)
        .into_par_iter()
        .map(|k| {
            let mut one = s.clone();
            one.seed = s.seed.wrapping_add(k);
            run_with_source(&one, PacketSource::live(&one)?, false).map(|o| o.metrics)
        })
        .collect()
}

struct Driver<'a> {
    s: &'a Scenario,
    timeline: Timeline,
    truth: TruthSim,
    dynamic: Vec<VehicleId>,
    encoders: BTreeMap<VehicleId, rand_chacha::ChaCha8Rng>,
    last_motion: BTreeMap<VehicleId, MotionMeasurement>,
    reference: ReferenceFrame,
    stage: InitStage,
}

impl<'a> Driver<'a> {
    fn new(s: &'a Scenario, timeline: Timeline) -> Result<Self> {
        let dynamic = s.dynamic_ids();
        let stage = match s.init.mode {
            InitMode::Motion => InitStage::Ranging(AdjacencyBuilder::new(
                s.vehicles.iter().map(|v| v.id).collect(),
                s.init.samples_per_pair,
            )),
            InitMode::Known => InitStage::Known,
        };
        Ok(Self {
            s,
            timeline,
            truth: TruthSim::new(s, timeline.phases()),
            encoders: dynamic
                .iter()
                .map(|id| (*id, stream_rng(s.seed, STREAM_ENCODER_BASE + *id as u64)))
                .collect(),
            dynamic,
            last_motion: BTreeMap::new(),
            reference: ReferenceFrame::for_scenario(s),
            stage,
        })
    }

    /// Advances truth, samples encoders and runs the network for one frame.
    fn frame(&mut self, source: &mut PacketSource, frame: u64) -> Result<(Vec<Packet>, FrameReport)> {
        self.truth.advance_to(frame * self.timeline.frame_ms)?;
        let time = source.frame_time(frame);
        let mut motions = BTreeMap::new();
        if self.timeline.is_motion_frame(frame) {
            for id in &self.dynamic {
                let (v, w) = self.truth.velocity(*id).unwrap_or_default();
                let rng = self.encoders.get_mut(id).expect("encoder per dynamic vehicle");
                let v = corrupt(v, self.s.noise.sigma_v, rng)?;
                let w = corrupt(w, self.s.noise.sigma_omega, rng)?;
                motions.insert(*id, MotionMeasurement::new(*id, time, v, w));
            }
        }
        let positions = self.truth.states().into_iter().map(|(id, x)| (id, x.position())).collect();
        let (packets, report) = source.next(frame, &positions, &motions)?;
        for m in &report.motions {
            self.last_motion.insert(m.vehicle_id, *m);
        }
        Ok((packets, report))
    }

    fn init_frame(
        &mut self,
        source: &mut PacketSource,
        frame: u64,
        log: Option<&mut PacketLogWriter<Vec<u8>>>,
    ) -> Result<()> {
        let (packets, report) = self.frame(source, frame)?;
        if let Some(log) = log {
            for p in &packets {
                log.append(p)?;
            }
        }
        if frame == self.timeline.linear_start {
            if let InitStage::Ranging(builder) = &self.stage {
                self.stage = InitStage::Heading(Box::new(self.start_heading(builder)?));
            }
        }
        match &mut self.stage {
            InitStage::Ranging(builder) => {
                for r in &report.ranges {
                    builder.push(r);
                }
            }
            InitStage::Heading(h) => {
                for m in &report.motions {
                    h.push_motion(m);
                }
                for r in &report.ranges {
                    h.push_range(r);
                }
            }
            InitStage::Known => {}
        }
        Ok(())
    }

    fn start_heading(&self, builder: &AdjacencyBuilder) -> Result<HeadingInitializer> {
        if !builder.is_full() {
            return Err(Error::Initialization(format!(
                "fewer than {} ranges per pair during the static phase",
                self.s.init.samples_per_pair
            )));
        }
        let (a1, a2) = self
            .s
            .anchors()
            .ok_or_else(|| Error::Initialization("motion initialization needs two static vehicles".into()))?;
        // side of the anchor baseline each vehicle starts on
        let hints: BTreeMap<VehicleId, f64> = self
            .s
            .vehicles
            .iter()
            .filter(|v| v.id != a1 && v.id != a2)
            .map(|v| (v.id, self.reference.point(v.pose().position()).y.signum()))
            .collect();
        let established = establish_frame(&builder.build(), a1, a2, &hints, &RefineConfig::default())?;
        let n = &self.s.noise;
        let mut config = HeadingInitConfig::from_noise(n.sigma_v, n.sigma_omega, n.sigma_range);
        config.window_size = self.s.init.window;
        HeadingInitializer::new(established, &self.dynamic, config)
    }

    fn finish_init(&self, source: &PacketSource) -> Result<InitReport> {
        match &self.stage {
            InitStage::Heading(h) => h.finish(source.frame_time(self.timeline.run_start)),
            InitStage::Ranging(_) => Err(Error::Initialization("static phase never completed".into())),
            InitStage::Known => Err(Error::Initialization("known initialization has no report".into())),
        }
    }

    /// Initial belief of the filter and the init report, if any.
    fn initial_belief(&self, source: &PacketSource) -> Result<(FleetBelief, Option<InitReport>)> {
        let t0 = source.frame_time(self.timeline.run_start);
        if let InitStage::Known = self.stage {
            let mut rng = stream_rng(self.s.seed, STREAM_KNOWN_INIT);
            let (sp, sh) = (self.s.init.known_sigma_position, self.s.init.known_sigma_heading);
            let cov = Matrix3::from_diagonal(&Vector3::new(sp * sp, sp * sp, sh * sh));
            let mut initial = Vec::new();
            for id in &self.dynamic {
                let x = self.reference.pose(&self.truth_state(*id)?);
                let guess = VehicleState::new(
                    corrupt(x.x(), sp, &mut rng)?,
                    corrupt(x.y(), sp, &mut rng)?,
                    corrupt(x.heading(), sh, &mut rng)?,
                );
                initial.push((*id, guess, cov));
            }
            let anchors = self
                .s
                .static_ids()
                .into_iter()
                .map(|id| Ok((id, self.reference.point(self.truth_state(id)?.position()))))
                .collect::<Result<_>>()?;
            return Ok((FleetBelief::new(initial, anchors, t0)?, None));
        }
        let report = self.finish_init(source)?;
        let initial = self
            .dynamic
            .iter()
            .map(|id| {
                let pose = report
                    .dynamic
                    .get(id)
                    .ok_or_else(|| Error::Initialization(format!("vehicle {id} missing from init report")))?;
                Ok((*id, pose.state, pose.covariance))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((FleetBelief::new(initial, report.anchors.clone(), t0)?, Some(report)))
    }

    fn truth_state(&self, id: VehicleId) -> Result<VehicleState> {
        self.truth
            .state(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown vehicle {id}")))
    }

    /// Seeds the previous encoder sample of every dynamic vehicle.
    fn seed(&self, estimator: &mut Estimator, t0: f64) {
        for id in &self.dynamic {
            let m = self
                .last_motion
                .get(id)
                .copied()
                .unwrap_or(MotionMeasurement::new(*id, t0, 0.0, 0.0));
            estimator.seed_motion(m);
        }
    }
}

fn run_with_source(s: &Scenario, mut source: PacketSource, record: bool) -> Result<RunOutput> {
    s.validate()?;
    let timeline = Timeline::new(s, &network_config(s))?;
    let mut driver = Driver::new(s, timeline)?;
    let mut log = if record {
        Some(PacketLogWriter::new(Vec::new())?)
    } else {
        None
    };

    for frame in 0..=timeline.run_start {
        driver.init_frame(&mut source, frame, log.as_mut())?;
    }
    let t0 = source.frame_time(timeline.run_start);
    let (belief, init) = driver.initial_belief(&source)?;
    let mut estimator = Estimator::new(belief, s.noise, s.estimator.to_config())?;
    driver.seed(&mut estimator, t0);

    let reference = driver.reference;
    let truth_belief = FleetBelief::new(
        driver
            .dynamic
            .iter()
            .map(|id| Ok((*id, reference.pose(&driver.truth_state(*id)?), Matrix3::zeros())))
            .collect::<Result<Vec<_>>>()?,
        BTreeMap::new(),
        t0,
    )?;
    let mut dead_reckoning = Estimator::new(truth_belief, s.noise, s.estimator.to_config())?;
    driver.seed(&mut dead_reckoning, t0);

    let ids = driver.dynamic.clone();
    let mut truth = PoseSeries::new(&ids);
    let mut estimate = PoseSeries::new(&ids);
    let mut baseline = PoseSeries::new(&ids);
    let (mut nees_sum, mut nees_count) = (0.0, 0usize);

    for frame in timeline.run_start + 1..=timeline.end {
        let (packets, report) = driver.frame(&mut source, frame)?;
        if let Some(log) = log.as_mut() {
            for p in &packets {
                log.append(p)?;
            }
        }
        for r in &report.ranges {
            estimator.push_range(*r)?;
        }
        if !timeline.is_motion_frame(frame) {
            continue;
        }
        let (snapshot, _) = estimator.step(report.time, &report.motions)?;
        dead_reckoning.step(report.time, &report.motions)?;

        let true_now: BTreeMap<VehicleId, VehicleState> =
            ids.iter().map(|id| Ok((*id, reference.pose(&driver.truth_state(*id)?)))).collect::<Result<_>>()?;
        for (id, x, p) in &snapshot.poses {
            let e = pose_error(x, &true_now[id]);
            if let Some(inv) = p.try_inverse() {
                nees_sum += (e.transpose() * inv * e)[(0, 0)];
                nees_count += 1;
            }
        }
        truth.push(report.time, |id| true_now.get(&id).copied())?;
        estimate.push(report.time, |id| estimator.belief().state(id).copied())?;
        baseline.push(report.time, |id| dead_reckoning.belief().state(id).copied())?;
    }

    let est_errors = compute_metrics(&estimate, &truth)?;
    let dr_errors: ErrorSeries = compute_metrics(&baseline, &truth)?;
    let packet_log = log.map(|l| l.finish()).transpose()?;
    Ok(RunOutput {
        scenario_name: s.name.clone(),
        metrics: RunMetrics {
            seed: s.seed,
            estimate: est_errors,
            baseline: dr_errors,
            counters: estimator.counters(),
            mean_nees: if nees_count > 0 {
                nees_sum / nees_count as f64
            } else {
                f64::NAN
            },
            init,
        },
        truth,
        estimate,
        baseline,
        packet_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_frame_puts_anchors_on_axis() {
        let f = ReferenceFrame::from_anchors(Vector2::new(1.0, 1.0), Vector2::new(4.0, 5.0));
        let a = f.point(Vector2::new(1.0, 1.0));
        let b = f.point(Vector2::new(4.0, 5.0));
        assert!(a.norm() < 1e-15);
        assert!((b.x - 5.0).abs() < 1e-12 && b.y.abs() < 1e-12);
        let x = f.pose(&VehicleState::new(1.0, 1.0, 0.0));
        assert!((x.heading() + (4.0f64).atan2(3.0)).abs() < 1e-12);
    }
}
