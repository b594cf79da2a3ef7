//! Observability matrices built from gradients of Lie derivatives of the
//! squared-range measurement `h = d²/2`, plus numerical rank and RREF tools.
//!
//! Column layout for a pair `(i, j)` is `[x_i, y_i, θ_i, x_j, y_j, θ_j]`; for a
//! fleet every dynamic vehicle occupies three consecutive columns in the order
//! it appears in the configuration. Static vehicles with known position
//! contribute rows but no columns.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{DMatrix, Matrix3, Vector2};

use crate::kinematics::VehicleState;
use crate::{Error, Result, VehicleId};

/// Default relative singular-value threshold used for rank decisions.
pub const DEFAULT_REL_TOL: f64 = 1e-9;

/// Minimum separation below which a measured pair counts as coincident.
pub const COINCIDENCE_TOL: f64 = 1e-9;

/// Lie derivatives of `h = ½‖p_i − p_j‖²` between two dynamic vehicles.
///
/// `V*`/`W*` name the linear-velocity and turn-rate vector fields of vehicle
/// `i` or `j`, applied left to right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PairDerivative {
    Zeroth,
    Vi,
    Vj,
    ViVj,
    ViWi,
    VjWj,
    ViVjWi,
    ViWiWi,
    VjWjWj,
}

impl PairDerivative {
    /// The seven rows stacked into the two-vehicle observability matrix.
    pub const MATRIX_ROWS: [PairDerivative; 7] = [
        PairDerivative::Zeroth,
        PairDerivative::Vi,
        PairDerivative::Vj,
        PairDerivative::ViVj,
        PairDerivative::ViWi,
        PairDerivative::VjWj,
        PairDerivative::ViVjWi,
    ];

    pub const ALL: [PairDerivative; 9] = [
        PairDerivative::Zeroth,
        PairDerivative::Vi,
        PairDerivative::Vj,
        PairDerivative::ViVj,
        PairDerivative::ViWi,
        PairDerivative::VjWj,
        PairDerivative::ViVjWi,
        PairDerivative::ViWiWi,
        PairDerivative::VjWjWj,
    ];

    pub fn order(self) -> usize {
        use PairDerivative::*;
        match self {
            Zeroth => 0,
            Vi | Vj => 1,
            ViVj | ViWi | VjWj => 2,
            ViVjWi | ViWiWi | VjWjWj => 3,
        }
    }

    /// Scalar value of the Lie derivative at `x = [x_i, y_i, θ_i, x_j, y_j, θ_j]`.
    pub fn value(self, x: &[f64; 6]) -> f64 {
        use PairDerivative::*;
        let g = PairGeometry::new(x);
        match self {
            Zeroth => 0.5 * (g.dx * g.dx + g.dy * g.dy),
            Vi => g.ci * g.dx + g.si * g.dy,
            Vj => -g.cj * g.dx - g.sj * g.dy,
            ViVj => -(g.ti - g.tj).cos(),
            ViWi => -g.di_minus,
            VjWj => g.dj_minus,
            ViVjWi => (g.ti - g.tj).sin(),
            ViWiWi => -g.di_plus,
            VjWjWj => g.dj_plus,
        }
    }

    /// Analytic gradient of [`value`](Self::value) with respect to `x`.
    pub fn gradient(self, x: &[f64; 6]) -> [f64; 6] {
        use PairDerivative::*;
        let g = PairGeometry::new(x);
        let sd = (g.ti - g.tj).sin();
        let cd = (g.ti - g.tj).cos();
        match self {
            Zeroth => [g.dx, g.dy, 0.0, -g.dx, -g.dy, 0.0],
            Vi => [g.ci, g.si, -g.di_minus, -g.ci, -g.si, 0.0],
            Vj => [-g.cj, -g.sj, 0.0, g.cj, g.sj, g.dj_minus],
            ViVj => [0.0, 0.0, sd, 0.0, 0.0, -sd],
            ViWi => [-g.si, g.ci, -g.di_plus, g.si, -g.ci, 0.0],
            VjWj => [g.sj, -g.cj, 0.0, -g.sj, g.cj, g.dj_plus],
            ViVjWi => [0.0, 0.0, cd, 0.0, 0.0, -cd],
            ViWiWi => [-g.ci, -g.si, g.di_minus, g.ci, g.si, 0.0],
            VjWjWj => [g.cj, g.sj, 0.0, -g.cj, -g.sj, -g.dj_minus],
        }
    }
}

/// Lie derivatives of `h = ½‖p_i − p_k‖²` for a dynamic vehicle against a
/// static vehicle at a known position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AnchorDerivative {
    Zeroth,
    V,
    VW,
    VWW,
}

impl AnchorDerivative {
    pub const MATRIX_ROWS: [AnchorDerivative; 3] =
        [AnchorDerivative::Zeroth, AnchorDerivative::V, AnchorDerivative::VW];

    pub const ALL: [AnchorDerivative; 4] = [
        AnchorDerivative::Zeroth,
        AnchorDerivative::V,
        AnchorDerivative::VW,
        AnchorDerivative::VWW,
    ];

    pub fn order(self) -> usize {
        match self {
            AnchorDerivative::Zeroth => 0,
            AnchorDerivative::V => 1,
            AnchorDerivative::VW => 2,
            AnchorDerivative::VWW => 3,
        }
    }

    pub fn value(self, x: &[f64; 3], anchor: &Vector2<f64>) -> f64 {
        let (dx, dy) = (x[0] - anchor.x, x[1] - anchor.y);
        let (s, c) = x[2].sin_cos();
        match self {
            AnchorDerivative::Zeroth => 0.5 * (dx * dx + dy * dy),
            AnchorDerivative::V => c * dx + s * dy,
            AnchorDerivative::VW => -(s * dx - c * dy),
            AnchorDerivative::VWW => -(c * dx + s * dy),
        }
    }

    pub fn gradient(self, x: &[f64; 3], anchor: &Vector2<f64>) -> [f64; 3] {
        let (dx, dy) = (x[0] - anchor.x, x[1] - anchor.y);
        let (s, c) = x[2].sin_cos();
        let d_minus = s * dx - c * dy;
        let d_plus = c * dx + s * dy;
        match self {
            AnchorDerivative::Zeroth => [dx, dy, 0.0],
            AnchorDerivative::V => [c, s, -d_minus],
            AnchorDerivative::VW => [-s, c, -d_plus],
            AnchorDerivative::VWW => [-c, -s, d_minus],
        }
    }
}

/// Intermediate scalars shared by the pair rows: Δx, Δy, D_i^±, D_j^±.
struct PairGeometry {
    dx: f64,
    dy: f64,
    ti: f64,
    tj: f64,
    ci: f64,
    si: f64,
    cj: f64,
    sj: f64,
    di_minus: f64,
    di_plus: f64,
    dj_minus: f64,
    dj_plus: f64,
}

impl PairGeometry {
    fn new(x: &[f64; 6]) -> Self {
        let dx = x[0] - x[3];
        let dy = x[1] - x[4];
        let (si, ci) = x[2].sin_cos();
        let (sj, cj) = x[5].sin_cos();
        Self {
            dx,
            dy,
            ti: x[2],
            tj: x[5],
            ci,
            si,
            cj,
            sj,
            di_minus: si * dx - ci * dy,
            di_plus: ci * dx + si * dy,
            dj_minus: sj * dx - cj * dy,
            dj_plus: cj * dx + sj * dy,
        }
    }
}

/// Which Lie derivative of which measured pair produced a row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowLabel {
    Pair {
        i: VehicleId,
        j: VehicleId,
        derivative: PairDerivative,
    },
    Anchor {
        vehicle: VehicleId,
        anchor: VehicleId,
        derivative: AnchorDerivative,
    },
    /// Row of a matrix produced by row reduction or supplied directly.
    Derived(usize),
}

impl fmt::Display for RowLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowLabel::Pair { i, j, derivative } => {
                write!(f, "pair({i},{j}):L{}:{derivative:?}", derivative.order())
            }
            RowLabel::Anchor {
                vehicle,
                anchor,
                derivative,
            } => write!(f, "anchor({vehicle},{anchor}):L{}:{derivative:?}", derivative.order()),
            RowLabel::Derived(k) => write!(f, "row{k}"),
        }
    }
}

/// Observability regimes with a closed-form rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    DynamicOnlyPair,
    DynamicOnlyFleet,
    OneAnchor,
    TwoAnchors,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Regime::DynamicOnlyPair => "dynamic-only-pair",
            Regime::DynamicOnlyFleet => "dynamic-only-fleet",
            Regime::OneAnchor => "one-anchor",
            Regime::TwoAnchors => "two-anchors",
        };
        f.write_str(s)
    }
}

/// Shape of the fleet a matrix was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetSummary {
    pub dynamic: usize,
    /// Distinct static vehicles that appear on at least one measured edge.
    pub anchors: usize,
    /// Every dynamic pair and every dynamic–anchor pair is measured.
    pub complete: bool,
    pub connected: bool,
}

impl FleetSummary {
    pub fn regime(&self) -> Regime {
        match (self.anchors, self.dynamic) {
            (0, 2) => Regime::DynamicOnlyPair,
            (0, _) => Regime::DynamicOnlyFleet,
            (1, _) => Regime::OneAnchor,
            _ => Regime::TwoAnchors,
        }
    }

    /// Closed-form rank for complete measurement graphs; `None` otherwise.
    pub fn predicted_rank(&self) -> Option<usize> {
        if !self.complete || !self.connected {
            return None;
        }
        let n = self.dynamic;
        Some(match self.anchors {
            0 => 3 * n.saturating_sub(1),
            1 => 3 * n - 1,
            _ => 3 * n,
        })
    }

    pub fn state_dimension(&self) -> usize {
        3 * self.dynamic
    }
}

/// Stacked Lie-derivative gradients with per-row provenance.
#[derive(Debug, Clone)]
pub struct ObservabilityMatrix {
    entries: DMatrix<f64>,
    row_labels: Vec<RowLabel>,
    summary: Option<FleetSummary>,
}

impl ObservabilityMatrix {
    /// Wraps an arbitrary matrix; rows get [`RowLabel::Derived`] labels.
    pub fn from_entries(entries: DMatrix<f64>) -> Result<Self> {
        if entries.ncols() % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "column count {} is not a multiple of 3",
                entries.ncols()
            )));
        }
        let row_labels = (0..entries.nrows()).map(RowLabel::Derived).collect();
        Ok(Self {
            entries,
            row_labels,
            summary: None,
        })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn row_labels(&self) -> &[RowLabel] {
        &self.row_labels
    }

    pub fn summary(&self) -> Option<&FleetSummary> {
        self.summary.as_ref()
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    /// True when the measured edges did not connect the fleet.
    pub fn disconnected(&self) -> bool {
        self.summary.as_ref().map(|s| !s.connected).unwrap_or(false)
    }

    /// Rows that are entirely zero, e.g. the parallel-heading row.
    pub fn row(&self, k: usize) -> Vec<f64> {
        self.entries.row(k).iter().copied().collect()
    }
}

fn pair_vector(xi: &VehicleState, xj: &VehicleState) -> [f64; 6] {
    [xi.x(), xi.y(), xi.heading(), xj.x(), xj.y(), xj.heading()]
}

fn check_separation(a: Vector2<f64>, b: Vector2<f64>, what: &str) -> Result<()> {
    if (a - b).norm() <= COINCIDENCE_TOL {
        Err(Error::DegenerateConfiguration(format!("coincident {what}")))
    } else {
        Ok(())
    }
}

/// The 7×6 observability matrix of two dynamic vehicles.
pub fn pair_matrix_dynamic(xi: &VehicleState, xj: &VehicleState) -> Result<ObservabilityMatrix> {
    check_separation(xi.position(), xj.position(), "vehicles")?;
    let x = pair_vector(xi, xj);
    let mut entries = DMatrix::zeros(7, 6);
    let mut row_labels = Vec::with_capacity(7);
    for (r, d) in PairDerivative::MATRIX_ROWS.iter().enumerate() {
        let g = d.gradient(&x);
        for (c, v) in g.iter().enumerate() {
            entries[(r, c)] = *v;
        }
        row_labels.push(RowLabel::Pair {
            i: 0,
            j: 1,
            derivative: *d,
        });
    }
    Ok(ObservabilityMatrix {
        entries,
        row_labels,
        summary: Some(FleetSummary {
            dynamic: 2,
            anchors: 0,
            complete: true,
            connected: true,
        }),
    })
}

/// The 3×3 observability matrix of a dynamic vehicle ranging to a known anchor.
pub fn pair_matrix_anchor(xi: &VehicleState, anchor: &Vector2<f64>) -> Result<ObservabilityMatrix> {
    check_separation(xi.position(), *anchor, "vehicle and anchor")?;
    let x = xi.as_array();
    let mut entries = DMatrix::zeros(3, 3);
    let mut row_labels = Vec::with_capacity(3);
    for (r, d) in AnchorDerivative::MATRIX_ROWS.iter().enumerate() {
        let g = d.gradient(&x, anchor);
        for (c, v) in g.iter().enumerate() {
            entries[(r, c)] = *v;
        }
        row_labels.push(RowLabel::Anchor {
            vehicle: 0,
            anchor: 1,
            derivative: *d,
        });
    }
    Ok(ObservabilityMatrix {
        entries,
        row_labels,
        summary: Some(FleetSummary {
            dynamic: 1,
            anchors: 1,
            complete: true,
            connected: true,
        }),
    })
}

/// A fleet with a set of static vehicles at known positions and the measured edges.
#[derive(Debug, Clone, Default)]
pub struct FleetConfig {
    pub vehicles: Vec<(VehicleId, VehicleState)>,
    pub static_set: BTreeSet<VehicleId>,
    pub edges: Vec<(VehicleId, VehicleId)>,
}

impl FleetConfig {
    /// Every pair of vehicles measured, except static–static pairs.
    pub fn complete(vehicles: Vec<(VehicleId, VehicleState)>, static_set: BTreeSet<VehicleId>) -> Self {
        let mut edges = Vec::new();
        for (a, (ia, _)) in vehicles.iter().enumerate() {
            for (ib, _) in vehicles.iter().skip(a + 1) {
                if !(static_set.contains(ia) && static_set.contains(ib)) {
                    edges.push((*ia, *ib));
                }
            }
        }
        Self {
            vehicles,
            static_set,
            edges,
        }
    }

    pub fn dynamic_ids(&self) -> Vec<VehicleId> {
        self.vehicles
            .iter()
            .filter(|(id, _)| !self.static_set.contains(id))
            .map(|(id, _)| *id)
            .collect()
    }
}

/// Stacks pair and anchor blocks for every measured edge of the fleet.
///
/// A disconnected measurement graph is reported through the summary rather
/// than rejected; a coincident measured pair is an error.
pub fn fleet_matrix(config: &FleetConfig) -> Result<ObservabilityMatrix> {
    let states: BTreeMap<VehicleId, VehicleState> = config.vehicles.iter().copied().collect();
    if states.len() != config.vehicles.len() {
        return Err(Error::InvalidArgument("duplicate vehicle id".into()));
    }
    let dynamic = config.dynamic_ids();
    let column: BTreeMap<VehicleId, usize> = dynamic.iter().enumerate().map(|(k, id)| (*id, 3 * k)).collect();
    let ncols = 3 * dynamic.len();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut row_labels = Vec::new();
    let mut used_anchors = BTreeSet::new();
    let mut measured = BTreeSet::new();

    for &(a, b) in &config.edges {
        let sa = states
            .get(&a)
            .ok_or_else(|| Error::InvalidArgument(format!("edge references unknown vehicle {a}")))?;
        let sb = states
            .get(&b)
            .ok_or_else(|| Error::InvalidArgument(format!("edge references unknown vehicle {b}")))?;
        if a == b {
            return Err(Error::InvalidArgument(format!("self edge on {a}")));
        }
        measured.insert((a.min(b), a.max(b)));
        let (a_static, b_static) = (config.static_set.contains(&a), config.static_set.contains(&b));
        match (a_static, b_static) {
            (true, true) => continue,
            (false, false) => {
                check_separation(sa.position(), sb.position(), &format!("vehicles {a} and {b}"))?;
                let x = pair_vector(sa, sb);
                for d in PairDerivative::MATRIX_ROWS {
                    let g = d.gradient(&x);
                    let mut row = vec![0.0; ncols];
                    row[column[&a]..column[&a] + 3].copy_from_slice(&g[..3]);
                    row[column[&b]..column[&b] + 3].copy_from_slice(&g[3..]);
                    rows.push(row);
                    row_labels.push(RowLabel::Pair { i: a, j: b, derivative: d });
                }
            }
            _ => {
                let (dyn_id, anchor_id) = if a_static { (b, a) } else { (a, b) };
                let state = states[&dyn_id];
                let anchor = states[&anchor_id].position();
                check_separation(state.position(), anchor, &format!("vehicle {dyn_id} and anchor {anchor_id}"))?;
                used_anchors.insert(anchor_id);
                let x = state.as_array();
                for d in AnchorDerivative::MATRIX_ROWS {
                    let g = d.gradient(&x, &anchor);
                    let mut row = vec![0.0; ncols];
                    row[column[&dyn_id]..column[&dyn_id] + 3].copy_from_slice(&g);
                    rows.push(row);
                    row_labels.push(RowLabel::Anchor {
                        vehicle: dyn_id,
                        anchor: anchor_id,
                        derivative: d,
                    });
                }
            }
        }
    }

    let mut complete = true;
    for (k, a) in dynamic.iter().enumerate() {
        for b in dynamic.iter().skip(k + 1) {
            complete &= measured.contains(&(*a.min(b), *a.max(b)));
        }
        for anchor in &used_anchors {
            complete &= measured.contains(&(*a.min(anchor), *a.max(anchor)));
        }
    }

    let connected = is_connected(config);
    if !connected {
        log::warn!("measurement graph does not connect the fleet");
    }

    let entries = DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]);
    Ok(ObservabilityMatrix {
        entries,
        row_labels,
        summary: Some(FleetSummary {
            dynamic: dynamic.len(),
            anchors: used_anchors.len(),
            complete,
            connected,
        }),
    })
}

fn is_connected(config: &FleetConfig) -> bool {
    let ids: Vec<VehicleId> = config.vehicles.iter().map(|(id, _)| *id).collect();
    if ids.len() <= 1 {
        return true;
    }
    let index: BTreeMap<VehicleId, usize> = ids.iter().enumerate().map(|(k, id)| (*id, k)).collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (a, b) in &config.edges {
        if let (Some(&ia), Some(&ib)) = (index.get(a), index.get(b)) {
            let (ra, rb) = (find(&mut parent, ia), find(&mut parent, ib));
            parent[ra] = rb;
        }
    }
    let root = find(&mut parent, 0);
    (1..ids.len()).all(|k| find(&mut parent, k) == root)
}

/// Rank decision together with the closed-form expectation, when one exists.
#[derive(Debug, Clone)]
pub struct RankReport {
    pub rank: usize,
    /// Descending.
    pub singular_values: Vec<f64>,
    pub predicted_rank: Option<usize>,
    pub regime: Option<Regime>,
    pub state_dimension: usize,
}

impl RankReport {
    pub fn is_full(&self) -> bool {
        self.rank == self.state_dimension
    }

    pub fn deficiency(&self) -> usize {
        self.state_dimension - self.rank
    }
}

impl fmt::Display for RankReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let regime = self.regime.map(|r| r.to_string()).unwrap_or_else(|| "unspecified".into());
        writeln!(f, "regime: {regime}")?;
        writeln!(f, "rank: {} of {}", self.rank, self.state_dimension)?;
        match self.predicted_rank {
            Some(p) => writeln!(f, "predicted_rank: {p}")?,
            None => writeln!(f, "predicted_rank: n/a (incomplete measurement graph)")?,
        }
        if self.is_full() {
            write!(f, "verdict: FULL")
        } else {
            write!(f, "verdict: DEFICIENT by {}", self.deficiency())
        }
    }
}

/// Descending singular values.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Counts singular values above `rel_tol · σ_max`.
pub fn numerical_rank(m: &ObservabilityMatrix, rel_tol: f64) -> RankReport {
    let singular_values = singular_values(&m.entries);
    let largest = singular_values.first().copied().unwrap_or(0.0);
    let rank = if largest > 0.0 {
        singular_values.iter().filter(|s| **s > rel_tol * largest).count()
    } else {
        0
    };
    RankReport {
        rank,
        singular_values,
        predicted_rank: m.summary.as_ref().and_then(|s| s.predicted_rank()),
        regime: m.summary.as_ref().map(|s| s.regime()),
        state_dimension: m.ncols(),
    }
}

/// Row-reduced echelon form by Gauss–Jordan elimination with partial pivoting.
///
/// Entries smaller than `tol` in magnitude are flushed to zero; a column whose
/// best pivot is below `tol` is skipped.
pub fn rref(m: &ObservabilityMatrix, tol: f64) -> ObservabilityMatrix {
    let mut a = m.entries.clone();
    let (rows, cols) = a.shape();
    let mut lead = 0;
    for c in 0..cols {
        if lead >= rows {
            break;
        }
        let (pivot_row, pivot_abs) = (lead..rows)
            .map(|r| (r, a[(r, c)].abs()))
            .fold((lead, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot_abs < tol {
            for r in lead..rows {
                a[(r, c)] = 0.0;
            }
            continue;
        }
        a.swap_rows(lead, pivot_row);
        let p = a[(lead, c)];
        for k in 0..cols {
            a[(lead, k)] /= p;
        }
        for r in 0..rows {
            if r != lead {
                let factor = a[(r, c)];
                if factor != 0.0 {
                    for k in 0..cols {
                        a[(r, k)] -= factor * a[(lead, k)];
                    }
                }
            }
        }
        lead += 1;
    }
    a.apply(|v| {
        if v.abs() < tol {
            *v = 0.0
        }
    });
    ObservabilityMatrix {
        entries: a,
        row_labels: (0..rows).map(RowLabel::Derived).collect(),
        summary: m.summary.clone(),
    }
}

/// Number of rows with at least one nonzero entry.
pub fn nonzero_rows(m: &ObservabilityMatrix) -> usize {
    m.entries.row_iter().filter(|r| r.iter().any(|v| *v != 0.0)).count()
}

/// The 3×3 block describing the gauge freedom between two vehicles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaugeBlock(pub Matrix3<f64>);

impl GaugeBlock {
    pub fn entries(&self) -> &Matrix3<f64> {
        &self.0
    }
}

pub fn gauge_block(pi: &Vector2<f64>, pj: &Vector2<f64>) -> GaugeBlock {
    let d = pi - pj;
    GaugeBlock(Matrix3::new(-1.0, 0.0, d.y, 0.0, -1.0, -d.x, 0.0, 0.0, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_state(rng: &mut ChaCha8Rng) -> VehicleState {
        VehicleState::new(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-PI..PI),
        )
    }

    #[test]
    fn pair_first_row_example() {
        let m = pair_matrix_dynamic(&VehicleState::new(1.0, 0.0, 0.0), &VehicleState::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(m.row(0), vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
        assert_eq!(m.nrows(), 7);
        assert_eq!(m.ncols(), 6);
    }

    #[test]
    fn parallel_headings_zero_row() {
        let m = pair_matrix_dynamic(&VehicleState::new(1.0, 2.0, 0.4), &VehicleState::new(-3.0, 0.5, 0.4)).unwrap();
        assert!(m.row(3).iter().all(|v| *v == 0.0));
        assert!(matches!(
            m.row_labels()[3],
            RowLabel::Pair {
                derivative: PairDerivative::ViVj,
                ..
            }
        ));
    }

    #[test]
    fn coincident_pair_rejected() {
        let s = VehicleState::new(1.0, 1.0, 0.0);
        assert!(matches!(pair_matrix_dynamic(&s, &s), Err(Error::DegenerateConfiguration(_))));
        assert!(matches!(
            pair_matrix_anchor(&s, &Vector2::new(1.0, 1.0)),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn generic_pair_rank_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = pair_matrix_dynamic(&random_state(&mut rng), &random_state(&mut rng)).unwrap();
            let r = numerical_rank(&m, DEFAULT_REL_TOL);
            assert_eq!(r.rank, 3);
            assert_eq!(r.predicted_rank, Some(3));
            assert_eq!(r.regime, Some(Regime::DynamicOnlyPair));
        }
    }

    #[test]
    fn anchor_matrix_example() {
        let m = pair_matrix_anchor(&VehicleState::new(1.0, 0.0, 0.0), &Vector2::new(0.0, 0.0)).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -1.0]);
        assert_eq!(m.entries(), &expected);
        assert_eq!(numerical_rank(&m, DEFAULT_REL_TOL).rank, 2);
    }

    #[test]
    fn two_anchors_full_rank() {
        let mut config = FleetConfig::default();
        config.vehicles = vec![
            (1, VehicleState::new(0.0, 0.0, 0.0)),
            (2, VehicleState::new(6.0, 0.0, 0.0)),
            (3, VehicleState::new(2.0, 3.0, 0.7)),
        ];
        config.static_set = [1, 2].into_iter().collect();
        config.edges = vec![(1, 3), (2, 3)];
        let r = numerical_rank(&fleet_matrix(&config).unwrap(), DEFAULT_REL_TOL);
        assert_eq!(r.rank, 3);
        assert_eq!(r.predicted_rank, Some(3));
        assert!(r.is_full());
    }

    #[test]
    fn trivial_rank_cases() {
        let zero = ObservabilityMatrix::from_entries(DMatrix::zeros(4, 6)).unwrap();
        assert_eq!(numerical_rank(&zero, DEFAULT_REL_TOL).rank, 0);
        let eye = ObservabilityMatrix::from_entries(DMatrix::identity(6, 6)).unwrap();
        assert_eq!(numerical_rank(&eye, DEFAULT_REL_TOL).rank, 6);
        assert!(ObservabilityMatrix::from_entries(DMatrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn rref_of_pair_matches_gauge_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (xi, xj) = (random_state(&mut rng), random_state(&mut rng));
            let m = pair_matrix_dynamic(&xi, &xj).unwrap();
            let red = rref(&m, 1e-9);
            assert_eq!(nonzero_rows(&red), 3);
            let g = gauge_block(&xi.position(), &xj.position());
            for r in 0..3 {
                for c in 0..3 {
                    let eye = if r == c { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(red.entries()[(r, c)], eye, epsilon = 1e-9);
                    assert_abs_diff_eq!(red.entries()[(r, c + 3)], g.0[(r, c)], epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn rref_of_anchor_matrix() {
        let xi = VehicleState::new(2.5, -1.0, 1.1);
        let anchor = Vector2::new(0.5, 2.0);
        let red = rref(&pair_matrix_anchor(&xi, &anchor).unwrap(), 1e-9);
        let d = xi.position() - anchor;
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, d.y, 0.0, 1.0, -d.x, 0.0, 0.0, 0.0]);
        assert!((red.entries() - expected).abs().max() < 1e-12);
    }

    #[test]
    fn rref_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = pair_matrix_dynamic(&random_state(&mut rng), &random_state(&mut rng)).unwrap();
        let once = rref(&m, 1e-9);
        let twice = rref(&once, 1e-9);
        assert!((once.entries() - twice.entries()).abs().max() < 1e-12);
        let eye = ObservabilityMatrix::from_entries(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(rref(&eye, 1e-12).entries(), eye.entries());
    }

    #[test]
    fn gauge_block_examples() {
        let g = gauge_block(&Vector2::new(1.0, 1.0), &Vector2::new(1.0, 1.0));
        assert_eq!(g.0, -Matrix3::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p: Vec<Vector2<f64>> = (0..3)
                .map(|_| Vector2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)))
                .collect();
            let chain = gauge_block(&p[0], &p[1]).0 * gauge_block(&p[1], &p[2]).0;
            assert!((chain + gauge_block(&p[0], &p[2]).0).abs().max() < 1e-12);
            assert_abs_diff_eq!(gauge_block(&p[0], &p[1]).0.determinant(), -1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn disconnected_graph_is_flagged() {
        let config = FleetConfig {
            vehicles: vec![
                (1, VehicleState::new(0.0, 0.0, 0.0)),
                (2, VehicleState::new(1.0, 0.0, 0.5)),
                (3, VehicleState::new(5.0, 5.0, 1.0)),
                (4, VehicleState::new(6.0, 4.0, -1.0)),
            ],
            static_set: BTreeSet::new(),
            edges: vec![(1, 2), (3, 4)],
        };
        let m = fleet_matrix(&config).unwrap();
        assert!(m.disconnected());
        let r = numerical_rank(&m, DEFAULT_REL_TOL);
        assert_eq!(r.predicted_rank, None);
        assert_eq!(r.rank, 6);
    }

    #[test]
    fn coincident_edge_in_fleet_rejected() {
        let config = FleetConfig::complete(
            vec![
                (1, VehicleState::new(0.0, 0.0, 0.0)),
                (2, VehicleState::new(0.0, 0.0, 0.5)),
                (3, VehicleState::new(5.0, 5.0, 1.0)),
            ],
            BTreeSet::new(),
        );
        assert!(matches!(fleet_matrix(&config), Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn rank_report_display() {
        let m = pair_matrix_anchor(&VehicleState::new(2.0, 1.0, 0.3), &Vector2::new(0.0, 0.0)).unwrap();
        let text = numerical_rank(&m, DEFAULT_REL_TOL).to_string();
        assert!(text.contains("rank: 2 of 3"));
        assert!(text.contains("DEFICIENT by 1"));
        assert!(text.contains("one-anchor"));
    }
}
