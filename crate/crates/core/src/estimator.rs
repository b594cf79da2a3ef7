//! Centralized error-state Kalman filter over all dynamic vehicles.
//!
//! The nominal state is propagated with the midpoint unicycle step at the
//! encoder rate; smoothed inter-vehicle ranges correct it. Static vehicles are
//! not part of the state, their positions are constants.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector, Matrix3, Vector2};

use crate::kinematics::{midpoint_heading, midpoint_step, wrap_angle, MotionMeasurement, NoiseSpec, RangeMeasurement, VehicleState};
use crate::{Error, Result, VehicleId};

#[derive(Debug, Clone)]
pub struct FleetBelief {
    dynamic_ids: Vec<VehicleId>,
    nominal: Vec<VehicleState>,
    covariance: DMatrix<f64>,
    static_anchors: BTreeMap<VehicleId, Vector2<f64>>,
    last_update_time: f64,
}

impl FleetBelief {
    /// `initial` holds one pose and 3×3 covariance per dynamic vehicle, in state order.
    pub fn new(
        initial: Vec<(VehicleId, VehicleState, Matrix3<f64>)>,
        static_anchors: BTreeMap<VehicleId, Vector2<f64>>,
        time: f64,
    ) -> Result<Self> {
        if initial.is_empty() {
            return Err(Error::InvalidArgument("belief needs at least one dynamic vehicle".into()));
        }
        let n = initial.len();
        let mut covariance = DMatrix::zeros(3 * n, 3 * n);
        let mut dynamic_ids = Vec::with_capacity(n);
        let mut nominal = Vec::with_capacity(n);
        for (k, (id, state, cov)) in initial.into_iter().enumerate() {
            if dynamic_ids.contains(&id) || static_anchors.contains_key(&id) {
                return Err(Error::InvalidArgument(format!("vehicle {id} listed twice")));
            }
            if !state.is_finite() || cov.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("non-finite initial belief for {id}")));
            }
            covariance.fixed_view_mut::<3, 3>(3 * k, 3 * k).copy_from(&(0.5 * (cov + cov.transpose())));
            dynamic_ids.push(id);
            nominal.push(state);
        }
        Ok(Self {
            dynamic_ids,
            nominal,
            covariance,
            static_anchors,
            last_update_time: time,
        })
    }

    pub fn dynamic_ids(&self) -> &[VehicleId] {
        &self.dynamic_ids
    }

    pub fn nominal(&self) -> &[VehicleState] {
        &self.nominal
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn static_anchors(&self) -> &BTreeMap<VehicleId, Vector2<f64>> {
        &self.static_anchors
    }

    pub fn last_update_time(&self) -> f64 {
        self.last_update_time
    }

    pub fn dimension(&self) -> usize {
        3 * self.dynamic_ids.len()
    }

    pub fn index_of(&self, id: VehicleId) -> Option<usize> {
        self.dynamic_ids.iter().position(|v| *v == id)
    }

    pub fn state(&self, id: VehicleId) -> Option<&VehicleState> {
        self.index_of(id).map(|k| &self.nominal[k])
    }

    pub fn block(&self, id: VehicleId) -> Option<Matrix3<f64>> {
        self.index_of(id)
            .map(|k| self.covariance.fixed_view::<3, 3>(3 * k, 3 * k).into_owned())
    }

    /// Position of a dynamic vehicle (nominal) or a static anchor.
    pub fn position_of(&self, id: VehicleId) -> Option<Vector2<f64>> {
        self.state(id)
            .map(|s| s.position())
            .or_else(|| self.static_anchors.get(&id).copied())
    }

    fn resymmetrize(&mut self) {
        let t = self.covariance.transpose();
        self.covariance = (&self.covariance + t) * 0.5;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProcessNoiseSpec {
    pub noise: NoiseSpec,
    pub dt: f64,
}

impl ProcessNoiseSpec {
    pub fn new(noise: NoiseSpec, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
        }
        noise.validate()?;
        Ok(Self { noise, dt })
    }
}

/// Error-state transition block of one vehicle, evaluated at the midpoint heading.
pub fn transition_block(theta: f64, v: f64, omega: f64, dt: f64) -> Matrix3<f64> {
    let th = midpoint_heading(theta, omega, dt);
    Matrix3::new(1.0, 0.0, -th.sin() * v * dt, 0.0, 1.0, th.cos() * v * dt, 0.0, 0.0, 1.0)
}

/// Diagonal process noise of one vehicle: `diag((cosθ σ_v dt)², (sinθ σ_v dt)², (σ_ω dt)²)`.
pub fn process_noise_block(theta: f64, sigma_v: f64, sigma_omega: f64, dt: f64) -> Matrix3<f64> {
    Matrix3::from_diagonal(&nalgebra::Vector3::new(
        (theta.cos() * sigma_v * dt).powi(2),
        (theta.sin() * sigma_v * dt).powi(2),
        (sigma_omega * dt).powi(2),
    ))
}

/// Per-vehicle input of one propagation step.
#[derive(Debug, Clone, Copy)]
pub struct StepInput {
    pub v: f64,
    pub omega: f64,
    /// Multiplier applied to the vehicle's process noise.
    pub q_scale: f64,
}

/// Advances every dynamic vehicle with the mean of two consecutive samples.
///
/// `motions` must hold one `(previous, current)` pair per dynamic vehicle.
pub fn propagate(
    belief: &FleetBelief,
    motions: &[(MotionMeasurement, MotionMeasurement)],
    process: &ProcessNoiseSpec,
) -> Result<FleetBelief> {
    let mut inputs = Vec::with_capacity(belief.dynamic_ids.len());
    for id in &belief.dynamic_ids {
        let (a, b) = motions
            .iter()
            .find(|(a, _)| a.vehicle_id == *id)
            .ok_or(Error::StaleInput(*id))?;
        if b.vehicle_id != *id {
            return Err(Error::InvalidArgument(format!("motion pair for {id} mixes vehicles")));
        }
        inputs.push(StepInput {
            v: 0.5 * (a.linear_velocity + b.linear_velocity),
            omega: 0.5 * (a.turn_rate + b.turn_rate),
            q_scale: 1.0,
        });
    }
    let mut out = belief.clone();
    propagate_inputs(&mut out, &inputs, process)?;
    Ok(out)
}

/// Propagation with explicit per-vehicle inputs, in state order.
pub fn propagate_inputs(belief: &mut FleetBelief, inputs: &[StepInput], process: &ProcessNoiseSpec) -> Result<()> {
    let n = belief.dynamic_ids.len();
    if inputs.len() != n {
        return Err(Error::LengthMismatch(inputs.len(), n));
    }
    let dt = process.dt;
    let dim = 3 * n;
    let mut f = DMatrix::zeros(dim, dim);
    let mut q = DMatrix::zeros(dim, dim);
    for (k, input) in inputs.iter().enumerate() {
        if !input.v.is_finite() || !input.omega.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite motion for vehicle {}",
                belief.dynamic_ids[k]
            )));
        }
        let state = belief.nominal[k];
        let theta_mid = midpoint_heading(state.heading(), input.omega, dt);
        f.fixed_view_mut::<3, 3>(3 * k, 3 * k)
            .copy_from(&transition_block(state.heading(), input.v, input.omega, dt));
        q.fixed_view_mut::<3, 3>(3 * k, 3 * k).copy_from(
            &(process_noise_block(theta_mid, process.noise.sigma_v, process.noise.sigma_omega, dt) * input.q_scale),
        );
        belief.nominal[k] = midpoint_step(&state, input.v, input.omega, dt);
    }
    belief.covariance = &f * &belief.covariance * f.transpose() + q;
    belief.resymmetrize();
    Ok(())
}

/// Weighted sliding window over the ranges of one vehicle pair.
#[derive(Debug, Clone)]
pub struct SmoothingQueue {
    pair: (VehicleId, VehicleId),
    /// `weights[age]`, age 0 being the newest sample.
    weights: Vec<f64>,
    buffer: VecDeque<RangeMeasurement>,
}

impl SmoothingQueue {
    /// Raw weights are normalized; the window length is `weights.len()`.
    pub fn with_weights(pair: (VehicleId, VehicleId), weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("smoothing weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !(weights[0] > 0.0) {
            return Err(Error::InvalidArgument("newest smoothing weight must be positive".into()));
        }
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(Self {
            pair: (pair.0.min(pair.1), pair.0.max(pair.1)),
            weights,
            buffer: VecDeque::new(),
        })
    }

    /// Weights proportional to `decay^age`.
    pub fn exponential(pair: (VehicleId, VehicleId), window: usize, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::InvalidArgument(format!("decay must be in (0, 1], got {decay}")));
        }
        Self::with_weights(pair, (0..window).map(|age| decay.powi(age as i32)).collect())
    }

    pub fn uniform(pair: (VehicleId, VehicleId), window: usize) -> Result<Self> {
        Self::with_weights(pair, vec![1.0; window])
    }

    pub fn window(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Sum of squared effective weights over the current fill; the variance
    /// of the smoothed value of i.i.d. samples relative to a single sample.
    pub fn variance_factor(&self) -> f64 {
        let active = &self.weights[..self.buffer.len().max(1)];
        let total: f64 = active.iter().sum();
        active.iter().map(|w| (w / total).powi(2)).sum()
    }
}

/// Pushes `incoming` and returns the weighted average over the window,
/// timestamped at the newest sample. A partially filled queue renormalizes the
/// weights of the samples it has.
pub fn smooth_range(queue: &mut SmoothingQueue, incoming: RangeMeasurement) -> Result<RangeMeasurement> {
    if incoming.key() != queue.pair {
        return Err(Error::InvalidArgument(format!(
            "range {:?} pushed into queue {:?}",
            incoming.key(),
            queue.pair
        )));
    }
    queue.buffer.push_front(incoming);
    queue.buffer.truncate(queue.weights.len());
    let mut total = 0.0;
    let mut acc = 0.0;
    for (w, r) in queue.weights.iter().zip(&queue.buffer) {
        total += w;
        acc += w * r.distance;
    }
    Ok(RangeMeasurement {
        distance: acc / total,
        ..incoming
    })
}

/// Predicted distance between two vehicles of the belief (dynamic or static).
pub fn predicted_range(belief: &FleetBelief, id_a: VehicleId, id_b: VehicleId) -> Result<f64> {
    let pa = belief
        .position_of(id_a)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown vehicle {id_a}")))?;
    let pb = belief
        .position_of(id_b)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown vehicle {id_b}")))?;
    Ok((pa - pb).norm())
}

/// Distances closer than this make the range direction undefined.
pub const DEGENERATE_RANGE: f64 = 1e-9;

/// Measurement Jacobian row of the range between `id_a` and `id_b`.
pub fn range_jacobian_row(belief: &FleetBelief, id_a: VehicleId, id_b: VehicleId) -> Result<DVector<f64>> {
    let ka = belief.index_of(id_a);
    let kb = belief.index_of(id_b);
    if ka.is_none() && kb.is_none() {
        return Err(Error::InvalidArgument(format!(
            "range {id_a}-{id_b} involves no dynamic vehicle"
        )));
    }
    let pa = belief
        .position_of(id_a)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown vehicle {id_a}")))?;
    let pb = belief
        .position_of(id_b)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown vehicle {id_b}")))?;
    let diff = pa - pb;
    let dist = diff.norm();
    if dist < DEGENERATE_RANGE {
        return Err(Error::DegenerateGeometry(format!("vehicles {id_a} and {id_b} coincide")));
    }
    let e = diff / dist;
    let mut row = DVector::zeros(belief.dimension());
    if let Some(k) = ka {
        row[3 * k] = e.x;
        row[3 * k + 1] = e.y;
    }
    if let Some(k) = kb {
        row[3 * k] = -e.x;
        row[3 * k + 1] = -e.y;
    }
    Ok(row)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateStats {
    pub used: usize,
    pub gated: usize,
    pub degenerate: usize,
    /// Static–static pairs and unknown ids.
    pub ignored: usize,
    pub skipped_singular: bool,
}

/// Rows whose innovation exceeds this many standard deviations are dropped.
pub const DEFAULT_GATE_SIGMA: f64 = 6.0;

/// Stacked range update with per-row gating and a Joseph-form covariance reset.
pub fn update(
    belief: &FleetBelief,
    ranges: &[RangeMeasurement],
    sigma_range: f64,
    gate_sigma: f64,
) -> Result<(FleetBelief, UpdateStats)> {
    if !(sigma_range >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_range must be >= 0, got {sigma_range}")));
    }
    let r_var = sigma_range * sigma_range;
    let mut stats = UpdateStats::default();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut innovations = Vec::new();
    for m in ranges {
        if belief.index_of(m.id_a).is_none() && belief.index_of(m.id_b).is_none() {
            stats.ignored += 1;
            continue;
        }
        let row = match range_jacobian_row(belief, m.id_a, m.id_b) {
            Ok(row) => row,
            Err(Error::DegenerateGeometry(_)) => {
                stats.degenerate += 1;
                continue;
            }
            Err(_) => {
                stats.ignored += 1;
                continue;
            }
        };
        let innovation = m.distance - predicted_range(belief, m.id_a, m.id_b)?;
        let row_var = (row.transpose() * &belief.covariance * &row)[(0, 0)] + r_var;
        if innovation.abs() > gate_sigma * row_var.max(0.0).sqrt() {
            stats.gated += 1;
            continue;
        }
        rows.push(row);
        innovations.push(innovation);
    }
    let mut out = belief.clone();
    if rows.is_empty() {
        return Ok((out, stats));
    }
    let m = rows.len();
    let dim = belief.dimension();
    let h = DMatrix::from_fn(m, dim, |i, j| rows[i][j]);
    let r = DVector::from_vec(innovations);
    let r_mat = DMatrix::identity(m, m) * r_var;
    let p = &belief.covariance;
    let pht = p * h.transpose();
    let s = &h * &pht + &r_mat;
    let Some(chol) = s.clone().cholesky() else {
        log::warn!("innovation covariance not positive definite; update skipped");
        stats.skipped_singular = true;
        return Ok((out, stats));
    };
    let gain = chol.solve(&pht.transpose()).transpose();
    let dx = &gain * r;
    for k in 0..belief.dynamic_ids.len() {
        out.nominal[k].inject(dx[3 * k], dx[3 * k + 1], dx[3 * k + 2]);
    }
    let ikh = DMatrix::identity(dim, dim) - &gain * &h;
    out.covariance = &ikh * p * ikh.transpose() + &gain * r_mat * gain.transpose();
    out.resymmetrize();
    stats.used = m;
    Ok((out, stats))
}

#[derive(Debug, Clone, Copy)]
pub struct EstimatorConfig {
    pub smoothing_window: usize,
    /// Ratio between the weights of consecutive samples, newest first.
    pub smoothing_decay: f64,
    pub gate_sigma: f64,
    /// Ticks a missing motion sample is replaced by the last one before the
    /// process noise is inflated.
    pub hold_ticks: usize,
    pub hold_inflation: f64,
    /// Smoothed ranges older than this at step time are not used.
    pub max_range_age: f64,
    /// Lower bounds applied to the noise levels used by the filter.
    pub sigma_floor_range: f64,
    pub sigma_floor_v: f64,
    pub sigma_floor_omega: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            smoothing_window: 5,
            smoothing_decay: 0.6,
            gate_sigma: DEFAULT_GATE_SIGMA,
            hold_ticks: 3,
            hold_inflation: 10.0,
            max_range_age: 0.06,
            sigma_floor_range: 1e-3,
            sigma_floor_v: 1e-3,
            sigma_floor_omega: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatingCounters {
    pub used: usize,
    pub gated: usize,
    pub degenerate: usize,
    pub skipped_updates: usize,
    pub held_motion: usize,
}

/// Per-step output handed to the harness.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub time: f64,
    pub poses: Vec<(VehicleId, VehicleState, Matrix3<f64>)>,
    pub counters: GatingCounters,
}

/// Filter driver: owns the belief, the smoothing queues and the hold logic.
#[derive(Debug, Clone)]
pub struct Estimator {
    belief: FleetBelief,
    config: EstimatorConfig,
    noise: NoiseSpec,
    queues: BTreeMap<(VehicleId, VehicleId), SmoothingQueue>,
    pending: BTreeMap<(VehicleId, VehicleId), RangeMeasurement>,
    last_motion: BTreeMap<VehicleId, MotionMeasurement>,
    missing: BTreeMap<VehicleId, usize>,
    counters: GatingCounters,
}

impl Estimator {
    pub fn new(belief: FleetBelief, noise: NoiseSpec, config: EstimatorConfig) -> Result<Self> {
        noise.validate()?;
        if config.smoothing_window == 0 {
            return Err(Error::InvalidArgument("smoothing window must be >= 1".into()));
        }
        Ok(Self {
            belief,
            config,
            noise: NoiseSpec {
                sigma_v: noise.sigma_v.max(config.sigma_floor_v),
                sigma_omega: noise.sigma_omega.max(config.sigma_floor_omega),
                sigma_range: noise.sigma_range.max(config.sigma_floor_range),
            },
            queues: BTreeMap::new(),
            pending: BTreeMap::new(),
            last_motion: BTreeMap::new(),
            missing: BTreeMap::new(),
            counters: GatingCounters::default(),
        })
    }

    pub fn belief(&self) -> &FleetBelief {
        &self.belief
    }

    pub fn counters(&self) -> GatingCounters {
        self.counters
    }

    /// Seeds the previous motion sample of a vehicle, e.g. the last encoder
    /// reading of the initialization phase.
    pub fn seed_motion(&mut self, m: MotionMeasurement) {
        self.last_motion.insert(m.vehicle_id, m);
    }

    /// Smooths an incoming range; the newest smoothed value per pair waits for
    /// the next step. Ranges between two static vehicles are ignored.
    pub fn push_range(&mut self, r: RangeMeasurement) -> Result<()> {
        if self.belief.index_of(r.id_a).is_none() && self.belief.index_of(r.id_b).is_none() {
            return Ok(());
        }
        let key = r.key();
        let queue = match self.queues.get_mut(&key) {
            Some(q) => q,
            None => {
                let q = SmoothingQueue::exponential(key, self.config.smoothing_window, self.config.smoothing_decay)?;
                self.queues.entry(key).or_insert(q)
            }
        };
        let smoothed = smooth_range(queue, r)?;
        self.pending.insert(key, smoothed);
        Ok(())
    }

    /// Propagates to `time` with the given motion samples (missing vehicles are
    /// held), then updates with the pending smoothed ranges.
    pub fn step(&mut self, time: f64, motions: &[MotionMeasurement]) -> Result<(Snapshot, UpdateStats)> {
        let last = self.belief.last_update_time;
        if !(time > last) {
            return Err(Error::OutOfOrder { last, got: time });
        }
        let dt = time - last;
        let mut inputs = Vec::with_capacity(self.belief.dynamic_ids.len());
        for id in self.belief.dynamic_ids.clone() {
            let current = match motions.iter().find(|m| m.vehicle_id == id) {
                Some(m) => {
                    self.missing.insert(id, 0);
                    *m
                }
                None => {
                    let held = self.last_motion.get(&id).copied().ok_or(Error::StaleInput(id))?;
                    *self.missing.entry(id).or_insert(0) += 1;
                    self.counters.held_motion += 1;
                    MotionMeasurement { timestamp: time, ..held }
                }
            };
            let previous = self.last_motion.get(&id).copied().unwrap_or(current);
            let q_scale = if self.missing[&id] > self.config.hold_ticks {
                self.config.hold_inflation
            } else {
                1.0
            };
            inputs.push(StepInput {
                v: 0.5 * (previous.linear_velocity + current.linear_velocity),
                omega: 0.5 * (previous.turn_rate + current.turn_rate),
                q_scale,
            });
            self.last_motion.insert(id, current);
        }
        let process = ProcessNoiseSpec::new(self.noise, dt)?;
        propagate_inputs(&mut self.belief, &inputs, &process)?;

        let oldest = time - self.config.max_range_age;
        let ranges: Vec<RangeMeasurement> = std::mem::take(&mut self.pending)
            .into_values()
            .filter(|r| r.timestamp > oldest && r.timestamp <= time + 1e-9)
            .collect();
        let (updated, stats) = update(&self.belief, &ranges, self.noise.sigma_range, self.config.gate_sigma)?;
        self.belief = updated;
        self.belief.last_update_time = time;
        self.counters.used += stats.used;
        self.counters.gated += stats.gated;
        self.counters.degenerate += stats.degenerate;
        self.counters.skipped_updates += stats.skipped_singular as usize;
        Ok((self.snapshot(), stats))
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            time: self.belief.last_update_time,
            poses: self
                .belief
                .dynamic_ids
                .iter()
                .zip(&self.belief.nominal)
                .map(|(id, s)| (*id, *s, self.belief.block(*id).unwrap_or_else(Matrix3::zeros)))
                .collect(),
            counters: self.counters,
        }
    }
}

/// Pose difference `estimate − truth` with the heading wrapped.
pub fn pose_error(estimate: &VehicleState, truth: &VehicleState) -> nalgebra::Vector3<f64> {
    nalgebra::Vector3::new(
        estimate.x() - truth.x(),
        estimate.y() - truth.y(),
        wrap_angle(estimate.heading() - truth.heading()),
    )
}
