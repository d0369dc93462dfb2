//! Measurement models and association machinery.
//!
//! Covers the standard detection likelihood (per-object ψ factors with
//! Poisson clutter), the extended association maps that carry death/miss/
//! detection decisions per label, the two scenario sensors, and the merged
//! bearing-cell likelihood in which one measurement can be shared by a whole
//! group of objects.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::densities::{ut_transform, Gaussian, UtParams};
use crate::rfs::{Label, LabeledState};
use crate::{wrap_angle, wrap_bearing, Error, Result};

pub type Measurement = DVector<f64>;

// ---------------------------------------------------------------------------
// Association maps
// ---------------------------------------------------------------------------

/// Plain association map θ: label → {0..M}, 0 meaning misdetection.
/// Positive indices are distinct (positive 1-1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssociationMap {
    assignments: BTreeMap<Label, u32>,
}

impl AssociationMap {
    pub fn new(entries: impl IntoIterator<Item = (Label, u32)>) -> Result<Self> {
        let assignments: BTreeMap<Label, u32> = entries.into_iter().collect();
        validate_positive_one_one(assignments.values().map(|&v| v as i64))?;
        Ok(Self { assignments })
    }

    pub fn get(&self, l: &Label) -> Option<u32> {
        self.assignments.get(l).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Label, &u32)> {
        self.assignments.iter()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

/// Extended association map γ: label → {−1..M}; −1 records death at this
/// scan, 0 misdetection, j ≥ 1 assignment to measurement j. Live labels are
/// those with γ(ℓ) ≥ 0. Inherits positive 1-1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtendedAssociationMap {
    assignments: BTreeMap<Label, i64>,
}

impl ExtendedAssociationMap {
    pub fn new(entries: impl IntoIterator<Item = (Label, i64)>) -> Result<Self> {
        let assignments: BTreeMap<Label, i64> = entries.into_iter().collect();
        for &v in assignments.values() {
            if v < -1 {
                return Err(Error::InvalidInput(format!(
                    "association value {v} below -1"
                )));
            }
        }
        validate_positive_one_one(assignments.values().copied())?;
        Ok(Self { assignments })
    }

    pub fn empty() -> Self {
        Self {
            assignments: BTreeMap::new(),
        }
    }

    pub fn get(&self, l: &Label) -> Option<i64> {
        self.assignments.get(l).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Label, &i64)> {
        self.assignments.iter()
    }

    pub fn labels(&self) -> impl Iterator<Item = &Label> {
        self.assignments.keys()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn live_labels(&self) -> BTreeSet<Label> {
        self.assignments
            .iter()
            .filter(|(_, &v)| v >= 0)
            .map(|(l, _)| *l)
            .collect()
    }

    /// Replaces one label's assignment, revalidating positive 1-1.
    pub fn set(&mut self, l: Label, v: i64) -> Result<()> {
        if v < -1 {
            return Err(Error::InvalidInput(format!("association value {v} below -1")));
        }
        if v > 0
            && self
                .assignments
                .iter()
                .any(|(other, &u)| *other != l && u == v)
        {
            return Err(Error::InvalidInput(format!(
                "measurement {v} already taken"
            )));
        }
        self.assignments.insert(l, v);
        Ok(())
    }

    /// Restriction to live labels as a plain map.
    pub fn to_plain(&self) -> AssociationMap {
        AssociationMap {
            assignments: self
                .assignments
                .iter()
                .filter(|(_, &v)| v >= 0)
                .map(|(l, &v)| (*l, v as u32))
                .collect(),
        }
    }

    /// Rebuilds the extended map from a plain map plus the set of labels that
    /// die at this scan.
    pub fn from_plain(plain: &AssociationMap, dead: impl IntoIterator<Item = Label>) -> Result<Self> {
        let mut entries: Vec<(Label, i64)> = plain
            .iter()
            .map(|(l, &v)| (*l, v as i64))
            .collect();
        for l in dead {
            if plain.get(&l).is_some() {
                return Err(Error::InvalidInput(format!(
                    "label {l} both live and dead"
                )));
            }
            entries.push((l, -1));
        }
        Self::new(entries)
    }

    pub fn canonical_token(&self) -> String {
        if self.assignments.is_empty() {
            return "standard -".into();
        }
        let body: Vec<String> = self
            .assignments
            .iter()
            .map(|(l, v)| format!("{}={v}", l.token()))
            .collect();
        format!("standard {}", body.join(" "))
    }
}

fn validate_positive_one_one(values: impl Iterator<Item = i64>) -> Result<()> {
    let mut taken = BTreeSet::new();
    for v in values {
        if v > 0 && !taken.insert(v) {
            return Err(Error::InvalidInput(format!(
                "measurement index {v} assigned twice"
            )));
        }
    }
    Ok(())
}

/// One group of a merged-measurement partition with its measurement
/// assignment (0 = the whole group missed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedGroup {
    pub members: BTreeSet<Label>,
    pub assignment: u32,
}

/// Merged-scan association: dead labels plus a partition of the live labels
/// into groups, each group assigned to at most one measurement (group-level
/// positive 1-1). The grouping of missed labels matters: one missed group of
/// two costs one misdetection factor, two singleton misses cost two.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedAssociation {
    dead: BTreeSet<Label>,
    groups: Vec<MergedGroup>,
}

impl MergedAssociation {
    pub fn new(dead: BTreeSet<Label>, mut groups: Vec<MergedGroup>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut taken = BTreeSet::new();
        for g in &groups {
            if g.members.is_empty() {
                return Err(Error::InvalidInput("empty merged group".into()));
            }
            for m in &g.members {
                if dead.contains(m) {
                    return Err(Error::InvalidInput(format!("label {m} both live and dead")));
                }
                if !seen.insert(*m) {
                    return Err(Error::InvalidInput(format!(
                        "label {m} in two merged groups"
                    )));
                }
            }
            if g.assignment > 0 && !taken.insert(g.assignment) {
                return Err(Error::InvalidInput(format!(
                    "measurement index {} assigned to two groups",
                    g.assignment
                )));
            }
        }
        groups.sort_by_key(|g| g.members.first().copied());
        Ok(Self { dead, groups })
    }

    pub fn dead(&self) -> &BTreeSet<Label> {
        &self.dead
    }

    pub fn groups(&self) -> &[MergedGroup] {
        &self.groups
    }

    pub fn live_labels(&self) -> BTreeSet<Label> {
        self.groups
            .iter()
            .flat_map(|g| g.members.iter().copied())
            .collect()
    }

    pub fn canonical_token(&self) -> String {
        if self.dead.is_empty() && self.groups.is_empty() {
            return "merged -".into();
        }
        let mut parts: Vec<String> = self.dead.iter().map(|l| format!("d:{}", l.token())).collect();
        for g in &self.groups {
            let members: Vec<String> = g.members.iter().map(|l| l.token()).collect();
            parts.push(format!("g:{}={}", members.join("+"), g.assignment));
        }
        format!("merged {}", parts.join(" "))
    }
}

/// Per-scan association record inside a hypothesis history: a standard
/// extended map, or a merged partition record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScanAssociation {
    Standard(ExtendedAssociationMap),
    Merged(MergedAssociation),
}

impl ScanAssociation {
    pub fn live_labels(&self) -> BTreeSet<Label> {
        match self {
            Self::Standard(m) => m.live_labels(),
            Self::Merged(m) => m.live_labels(),
        }
    }

    /// All labels mentioned, dead ones included.
    pub fn labels(&self) -> BTreeSet<Label> {
        match self {
            Self::Standard(m) => m.labels().copied().collect(),
            Self::Merged(m) => {
                let mut s = m.live_labels();
                s.extend(m.dead().iter().copied());
                s
            }
        }
    }

    /// Measurement index seen by a label: −1 dead, 0 missed, j ≥ 1 detected
    /// (shared by the whole group in merged scans).
    pub fn assignment_of(&self, l: &Label) -> Option<i64> {
        match self {
            Self::Standard(m) => m.get(l),
            Self::Merged(m) => {
                if m.dead().contains(l) {
                    return Some(-1);
                }
                m.groups()
                    .iter()
                    .find(|g| g.members.contains(l))
                    .map(|g| g.assignment as i64)
            }
        }
    }

    pub fn canonical_token(&self) -> String {
        match self {
            Self::Standard(m) => m.canonical_token(),
            Self::Merged(m) => m.canonical_token(),
        }
    }

    pub fn parse_token(s: &str) -> Result<Self> {
        let mut it = s.split_whitespace();
        match it.next() {
            Some("standard") => {
                let mut entries = Vec::new();
                for tok in it {
                    if tok == "-" {
                        continue;
                    }
                    let (l, v) = tok
                        .split_once('=')
                        .ok_or_else(|| Error::Parse(format!("bad assignment `{tok}`")))?;
                    entries.push((
                        Label::parse_token(l)?,
                        v.parse::<i64>()
                            .map_err(|_| Error::Parse(format!("bad assignment `{tok}`")))?,
                    ));
                }
                Ok(Self::Standard(ExtendedAssociationMap::new(entries)?))
            }
            Some("merged") => {
                let mut dead = BTreeSet::new();
                let mut groups = Vec::new();
                for tok in it {
                    if tok == "-" {
                        continue;
                    }
                    if let Some(l) = tok.strip_prefix("d:") {
                        dead.insert(Label::parse_token(l)?);
                    } else if let Some(body) = tok.strip_prefix("g:") {
                        let (members, v) = body
                            .split_once('=')
                            .ok_or_else(|| Error::Parse(format!("bad group `{tok}`")))?;
                        let members: BTreeSet<Label> = members
                            .split('+')
                            .map(Label::parse_token)
                            .collect::<Result<_>>()?;
                        groups.push(MergedGroup {
                            members,
                            assignment: v
                                .parse()
                                .map_err(|_| Error::Parse(format!("bad group `{tok}`")))?,
                        });
                    } else {
                        return Err(Error::Parse(format!("bad merged token `{tok}`")));
                    }
                }
                Ok(Self::Merged(MergedAssociation::new(dead, groups)?))
            }
            other => Err(Error::Parse(format!(
                "unknown association kind `{}`",
                other.unwrap_or("<empty>")
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Sensors and clutter
// ---------------------------------------------------------------------------

/// Kinematic state layout is [p_x, v_x, p_y, v_y]; bearings are measured
/// from the y-axis (atan2 of x over y) and wrapped to [0, 2π).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum SensorModel {
    BearingRangeStatic { sigma_bearing: f64, sigma_range: f64 },
    BearingOnlyMoving { sigma_bearing: f64 },
    /// Direct noisy observation of [p_x, p_y]; linear, so unscented updates
    /// against it are exact (oracle and diagnostic use).
    PlanarPosition { sigma: f64 },
}

impl SensorModel {
    pub fn meas_dim(&self) -> usize {
        match self {
            Self::BearingRangeStatic { .. } | Self::PlanarPosition { .. } => 2,
            Self::BearingOnlyMoving { .. } => 1,
        }
    }

    pub fn noise_cov(&self) -> DMatrix<f64> {
        match self {
            Self::BearingRangeStatic {
                sigma_bearing,
                sigma_range,
            } => DMatrix::from_diagonal(&DVector::from_row_slice(&[
                sigma_bearing * sigma_bearing,
                sigma_range * sigma_range,
            ])),
            Self::BearingOnlyMoving { sigma_bearing } => {
                DMatrix::from_row_slice(1, 1, &[sigma_bearing * sigma_bearing])
            }
            Self::PlanarPosition { sigma } => DMatrix::identity(2, 2) * (sigma * sigma),
        }
    }

    /// Angular output components (the bearing), for wrap-aware updates.
    pub fn angular_components(&self) -> &'static [usize] {
        match self {
            Self::PlanarPosition { .. } => &[],
            _ => &[0],
        }
    }

    /// Sensor position at a scan. The moving sensor alternates between two
    /// circular orbits of radius 1000 (odd scans) and 800 (even scans).
    pub fn position(&self, scan: u32) -> (f64, f64) {
        match self {
            Self::BearingRangeStatic { .. } | Self::PlanarPosition { .. } => (0.0, 0.0),
            Self::BearingOnlyMoving { .. } => {
                let k = scan as f64;
                if scan % 2 == 1 {
                    let a = (scan / 2) as f64 * std::f64::consts::FRAC_PI_4;
                    (1000.0 * a.cos(), 1000.0 * a.sin())
                } else {
                    let a = (k - 1.0) * std::f64::consts::PI / 8.0;
                    (800.0 * a.cos(), 800.0 * a.sin())
                }
            }
        }
    }

    /// Noise-free observation of one object state.
    pub fn observe(&self, x: &DVector<f64>, scan: u32) -> Measurement {
        if let Self::PlanarPosition { .. } = self {
            return DVector::from_row_slice(&[x[0], x[2]]);
        }
        let (sx, sy) = self.position(scan);
        let bearing = wrap_bearing((x[0] - sx).atan2(x[2] - sy));
        match self {
            Self::BearingRangeStatic { .. } => {
                let range = (x[0] * x[0] + x[2] * x[2]).sqrt();
                DVector::from_row_slice(&[bearing, range])
            }
            _ => DVector::from_row_slice(&[bearing]),
        }
    }

    /// Tag used in measurement files.
    pub fn kind_tag(&self) -> &'static str {
        match self {
            Self::BearingRangeStatic { .. } => "br",
            Self::BearingOnlyMoving { .. } => "bo",
            Self::PlanarPosition { .. } => "xy",
        }
    }
}

/// Poisson clutter, uniform over the observation region.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClutterModel {
    pub rate: f64,
    pub region: ClutterRegion,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ClutterRegion {
    BearingRange { max_range: f64 },
    Bearing,
    Rect { half_width: f64 },
}

impl ClutterModel {
    pub fn volume(&self) -> f64 {
        match self.region {
            ClutterRegion::BearingRange { max_range } => 2.0 * std::f64::consts::PI * max_range,
            ClutterRegion::Bearing => 2.0 * std::f64::consts::PI,
            ClutterRegion::Rect { half_width } => 4.0 * half_width * half_width,
        }
    }

    fn contains(&self, z: &Measurement) -> bool {
        match self.region {
            ClutterRegion::BearingRange { max_range } => {
                z.len() == 2 && z[1] >= 0.0 && z[1] <= max_range
            }
            ClutterRegion::Bearing => z.len() == 1,
            ClutterRegion::Rect { half_width } => {
                z.len() == 2 && z.iter().all(|v| v.abs() <= half_width)
            }
        }
    }

    /// Clutter intensity κ(z): rate × uniform density, zero off-region.
    pub fn intensity(&self, z: &Measurement) -> f64 {
        if self.contains(z) {
            self.rate / self.volume()
        } else {
            0.0
        }
    }

    pub fn sample_count<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.rate <= 0.0 {
            return 0;
        }
        Poisson::new(self.rate).expect("positive rate").sample(rng) as usize
    }

    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Measurement {
        match self.region {
            ClutterRegion::BearingRange { max_range } => DVector::from_row_slice(&[
                rng.random_range(0.0..2.0 * std::f64::consts::PI),
                rng.random_range(0.0..max_range),
            ]),
            ClutterRegion::Bearing => {
                DVector::from_row_slice(&[rng.random_range(0.0..2.0 * std::f64::consts::PI)])
            }
            ClutterRegion::Rect { half_width } => DVector::from_row_slice(&[
                rng.random_range(-half_width..half_width),
                rng.random_range(-half_width..half_width),
            ]),
        }
    }
}

/// Equal-width bearing cells covering [0, 2π).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CellPartition {
    width: f64,
    n_cells: usize,
}

impl CellPartition {
    pub fn new(width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::InvalidInput("cell width must be positive".into()));
        }
        let ratio = 2.0 * std::f64::consts::PI / width;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 || n < 1.0 {
            return Err(Error::InvalidInput(format!(
                "cell width {width} does not tile the circle"
            )));
        }
        Ok(Self {
            width,
            n_cells: n as usize,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn cell_index(&self, bearing: f64) -> usize {
        let b = wrap_bearing(bearing);
        ((b / self.width) as usize).min(self.n_cells - 1)
    }

    pub fn cell_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.width
    }
}

// ---------------------------------------------------------------------------
// Likelihood factors
// ---------------------------------------------------------------------------

/// ψ input: a concrete object state, or a Gaussian current-scan density
/// (the factor is then the marginal likelihood ⟨p, ψ⟩ via the UT).
pub enum PsiInput<'a> {
    State(&'a DVector<f64>),
    Density(&'a Gaussian),
}

/// Standard per-object detection factor: P_D g(z_j|x)/κ(z_j) for j ≥ 1,
/// 1 − P_D for j = 0.
#[allow(clippy::too_many_arguments)]
pub fn psi(
    input: PsiInput<'_>,
    j: usize,
    z: &[Measurement],
    sensor: &SensorModel,
    scan: u32,
    clutter: &ClutterModel,
    p_d: f64,
    ut: &UtParams,
) -> Result<f64> {
    Ok(log_psi(input, j, z, sensor, scan, clutter, p_d, ut)?.exp())
}

/// Log-domain ψ; j = 0 returns ln(1 − P_D).
#[allow(clippy::too_many_arguments)]
pub fn log_psi(
    input: PsiInput<'_>,
    j: usize,
    z: &[Measurement],
    sensor: &SensorModel,
    scan: u32,
    clutter: &ClutterModel,
    p_d: f64,
    ut: &UtParams,
) -> Result<f64> {
    if j > z.len() {
        return Err(Error::InvalidInput(format!(
            "measurement index {j} out of range 0..={}",
            z.len()
        )));
    }
    if j == 0 {
        return Ok((1.0 - p_d).ln());
    }
    let zj = &z[j - 1];
    let kappa = clutter.intensity(zj);
    if !(kappa > 0.0) {
        return Err(Error::InvalidInput(
            "clutter density must be positive where measurements occur".into(),
        ));
    }
    let r = sensor.noise_cov();
    let log_g = match input {
        PsiInput::State(x) => {
            let pred = sensor.observe(x, scan);
            log_normal(zj, &pred, &r, sensor.angular_components())?
        }
        PsiInput::Density(p) => {
            let obs = ut_transform(p, &|x| sensor.observe(x, scan), sensor.angular_components(), ut)?;
            let s = obs.out.cov() + &r;
            log_normal(zj, obs.out.mean(), &s, sensor.angular_components())?
        }
    };
    Ok(p_d.ln() + log_g - kappa.ln())
}

fn log_normal(
    z: &Measurement,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    angular: &[usize],
) -> Result<f64> {
    let mut innov = z - mean;
    for &a in angular {
        innov[a] = wrap_angle(innov[a]);
    }
    Gaussian::new(DVector::zeros(innov.len()), cov.clone())?.log_pdf(&innov)
}

/// Merged-group input: member states, or the stacked group block of a joint
/// Gaussian (members in the stacking order, `state_dim` entries each).
pub enum GroupInput<'a> {
    States(&'a [DVector<f64>]),
    Density { block: &'a Gaussian, state_dim: usize },
}

/// Group bearing: wrap-aware average of the member bearings.
pub fn group_bearing(sensor: &SensorModel, scan: u32, states: &[DVector<f64>]) -> f64 {
    let first = sensor.observe(&states[0], scan)[0];
    let mut acc = 0.0;
    for x in states {
        acc += wrap_angle(sensor.observe(x, scan)[0] - first);
    }
    wrap_bearing(first + acc / states.len() as f64)
}

/// Merged detection factor ψ̃: for j ≥ 1, P̃_D g̃(z_j|group)/κ(z_j) with g̃
/// Gaussian in the group-mean bearing; for j = 0, 1 − P̃_D.
#[allow(clippy::too_many_arguments)]
pub fn merged_psi(
    group: GroupInput<'_>,
    j: usize,
    z: &[Measurement],
    sensor: &SensorModel,
    scan: u32,
    clutter: &ClutterModel,
    p_d_group: f64,
    ut: &UtParams,
) -> Result<f64> {
    Ok(log_merged_psi(group, j, z, sensor, scan, clutter, p_d_group, ut)?.exp())
}

/// Log-domain ψ̃.
#[allow(clippy::too_many_arguments)]
pub fn log_merged_psi(
    group: GroupInput<'_>,
    j: usize,
    z: &[Measurement],
    sensor: &SensorModel,
    scan: u32,
    clutter: &ClutterModel,
    p_d_group: f64,
    ut: &UtParams,
) -> Result<f64> {
    if !matches!(sensor, SensorModel::BearingOnlyMoving { .. }) {
        return Err(Error::InvalidInput(
            "merged likelihood requires the bearing-only sensor".into(),
        ));
    }
    match &group {
        GroupInput::States(s) if s.is_empty() => {
            return Err(Error::InvalidInput("empty merged group".into()))
        }
        GroupInput::Density { block, state_dim } if block.dim() == 0 || block.dim() % state_dim != 0 => {
            return Err(Error::InvalidInput("bad merged group block".into()))
        }
        _ => {}
    }
    if j > z.len() {
        return Err(Error::InvalidInput(format!(
            "measurement index {j} out of range 0..={}",
            z.len()
        )));
    }
    if j == 0 {
        return Ok((1.0 - p_d_group).ln());
    }
    let zj = &z[j - 1];
    let kappa = clutter.intensity(zj);
    if !(kappa > 0.0) {
        return Err(Error::InvalidInput(
            "clutter density must be positive where measurements occur".into(),
        ));
    }
    let r = sensor.noise_cov();
    let log_g = match group {
        GroupInput::States(states) => {
            let m = DVector::from_row_slice(&[group_bearing(sensor, scan, states)]);
            log_normal(zj, &m, &r, &[0])?
        }
        GroupInput::Density { block, state_dim } => {
            let n = block.dim() / state_dim;
            let h = move |x: &DVector<f64>| {
                let states: Vec<DVector<f64>> = (0..n)
                    .map(|i| x.rows(i * state_dim, state_dim).into_owned())
                    .collect();
                DVector::from_row_slice(&[group_bearing(sensor, scan, &states)])
            };
            let obs = ut_transform(block, &h, &[0], ut)?;
            let s = obs.out.cov() + &r;
            log_normal(zj, obs.out.mean(), &s, &[0])?
        }
    };
    Ok(p_d_group.ln() + log_g - kappa.ln())
}

// ---------------------------------------------------------------------------
// Enumeration (oracle support)
// ---------------------------------------------------------------------------

/// All positive 1-1 maps from `labels` into {0..m}. Count is
/// Σ_r C(n,r)·m!/(m−r)!. Oracle support only; guarded by `cap` on n·m.
pub fn enumerate_association_maps(
    labels: &BTreeSet<Label>,
    m: usize,
    cap: usize,
) -> Result<Vec<AssociationMap>> {
    if labels.len() * m > cap {
        return Err(Error::SizeCap(format!(
            "{} labels x {m} measurements exceeds cap {cap}",
            labels.len()
        )));
    }
    let labels: Vec<Label> = labels.iter().copied().collect();
    let mut out = Vec::new();
    let mut current: Vec<(Label, u32)> = Vec::new();
    fn recurse(
        labels: &[Label],
        i: usize,
        m: usize,
        taken: &mut BTreeSet<u32>,
        current: &mut Vec<(Label, u32)>,
        out: &mut Vec<AssociationMap>,
    ) {
        if i == labels.len() {
            out.push(AssociationMap {
                assignments: current.iter().copied().collect(),
            });
            return;
        }
        for v in 0..=m as u32 {
            if v > 0 && taken.contains(&v) {
                continue;
            }
            if v > 0 {
                taken.insert(v);
            }
            current.push((labels[i], v));
            recurse(labels, i + 1, m, taken, current, out);
            current.pop();
            if v > 0 {
                taken.remove(&v);
            }
        }
    }
    let mut taken = BTreeSet::new();
    recurse(&labels, 0, m, &mut taken, &mut current, &mut out);
    Ok(out)
}

/// All set partitions of `labels` (Bell-number many), via restricted-growth
/// strings. Guarded by `cap` on the label count.
pub fn enumerate_partitions(
    labels: &BTreeSet<Label>,
    cap: usize,
) -> Result<Vec<Vec<BTreeSet<Label>>>> {
    if labels.len() > cap {
        return Err(Error::SizeCap(format!(
            "{} labels exceeds partition cap {cap}",
            labels.len()
        )));
    }
    let labels: Vec<Label> = labels.iter().copied().collect();
    if labels.is_empty() {
        return Ok(vec![Vec::new()]);
    }
    let n = labels.len();
    let mut out = Vec::new();
    // Restricted growth: code[0]=0, code[i] <= 1 + max(code[..i]).
    let mut code = vec![0usize; n];
    loop {
        let n_blocks = code.iter().max().unwrap() + 1;
        let mut blocks: Vec<BTreeSet<Label>> = vec![BTreeSet::new(); n_blocks];
        for (i, &c) in code.iter().enumerate() {
            blocks[c].insert(labels[i]);
        }
        out.push(blocks);
        // Next restricted-growth string.
        let mut i = n as isize - 1;
        loop {
            if i <= 0 {
                return Ok(out);
            }
            let max_prefix = code[..i as usize].iter().max().copied().unwrap_or(0);
            if code[i as usize] <= max_prefix {
                code[i as usize] += 1;
                for c in code.iter_mut().skip(i as usize + 1) {
                    *c = 0;
                }
                break;
            }
            i -= 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// Standard detection simulation: each object detected with probability
/// `p_d` yielding h(x) + noise; Poisson clutter appended; order shuffled.
pub fn simulate_standard_measurements<R: Rng + ?Sized>(
    truth: &[LabeledState],
    sensor: &SensorModel,
    scan: u32,
    clutter: &ClutterModel,
    p_d: f64,
    rng: &mut R,
) -> Vec<Measurement> {
    let mut out = Vec::new();
    for obj in truth {
        if rng.random::<f64>() < p_d {
            out.push(noisy_observation(sensor, &obj.attribute, scan, rng));
        }
    }
    for _ in 0..clutter.sample_count(rng) {
        out.push(clutter.sample_point(rng));
    }
    out.shuffle(rng);
    out
}

fn noisy_observation<R: Rng + ?Sized>(
    sensor: &SensorModel,
    x: &DVector<f64>,
    scan: u32,
    rng: &mut R,
) -> Measurement {
    let mut z = sensor.observe(x, scan);
    match sensor {
        SensorModel::BearingRangeStatic {
            sigma_bearing,
            sigma_range,
        } => {
            z[0] = wrap_bearing(z[0] + sample_normal(rng, *sigma_bearing));
            z[1] += sample_normal(rng, *sigma_range);
        }
        SensorModel::BearingOnlyMoving { sigma_bearing } => {
            z[0] = wrap_bearing(z[0] + sample_normal(rng, *sigma_bearing));
        }
        SensorModel::PlanarPosition { sigma } => {
            z[0] += sample_normal(rng, *sigma);
            z[1] += sample_normal(rng, *sigma);
        }
    }
    z
}

fn sample_normal<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    Normal::new(0.0, sigma).expect("non-negative sigma").sample(rng)
}

/// Merged detection simulation: objects binned by true bearing into cells;
/// each occupied cell emits the member-average bearing + noise with
/// probability `p_d`; Poisson clutter appended; order shuffled.
#[allow(clippy::too_many_arguments)]
pub fn simulate_merged_measurements<R: Rng + ?Sized>(
    truth: &[LabeledState],
    sensor: &SensorModel,
    cells: &CellPartition,
    scan: u32,
    clutter: &ClutterModel,
    p_d: f64,
    rng: &mut R,
) -> Vec<Measurement> {
    let mut by_cell: BTreeMap<usize, Vec<&LabeledState>> = BTreeMap::new();
    for obj in truth {
        let bearing = sensor.observe(&obj.attribute, scan)[0];
        by_cell.entry(cells.cell_index(bearing)).or_default().push(obj);
    }
    let sigma = match sensor {
        SensorModel::BearingOnlyMoving { sigma_bearing } => *sigma_bearing,
        // Merged generation is defined for the bearing-only sensor.
        _ => return Vec::new(),
    };
    let mut out = Vec::new();
    for members in by_cell.values() {
        if rng.random::<f64>() < p_d {
            let states: Vec<DVector<f64>> =
                members.iter().map(|o| o.attribute.clone()).collect();
            let mean = group_bearing(sensor, scan, &states);
            out.push(DVector::from_row_slice(&[wrap_bearing(
                mean + sample_normal(rng, sigma),
            )]));
        }
    }
    for _ in 0..clutter.sample_count(rng) {
        out.push(clutter.sample_point(rng));
    }
    out.shuffle(rng);
    out
}

// ---------------------------------------------------------------------------
// Measurement files
// ---------------------------------------------------------------------------

/// One scan per line: `scan <idx>` followed by `(tag, value...)` tuples.
pub fn measurements_to_text(scans: &[(u32, Vec<Measurement>)], tag: &str) -> String {
    let mut s = String::new();
    for (scan, zs) in scans {
        s.push_str(&format!("scan {scan}"));
        for z in zs {
            s.push_str(&format!(" {tag}"));
            for v in z.iter() {
                s.push_str(&format!(" {v}"));
            }
        }
        s.push('\n');
    }
    s
}

/// Parses [`measurements_to_text`] output. Tag arity: `br` = 2 values,
/// `bo` = 1.
pub fn measurements_from_text(text: &str) -> Result<Vec<(u32, Vec<Measurement>)>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut toks = line.split_whitespace();
        if toks.next() != Some("scan") {
            return Err(Error::Parse(format!("expected scan line, got `{line}`")));
        }
        let scan: u32 = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad scan index in `{line}`")))?;
        let mut zs = Vec::new();
        while let Some(tag) = toks.next() {
            let arity = match tag {
                "br" | "xy" => 2,
                "bo" => 1,
                other => return Err(Error::Parse(format!("unknown measurement tag `{other}`"))),
            };
            let mut vals = Vec::with_capacity(arity);
            for _ in 0..arity {
                let v: f64 = toks
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("truncated measurement in `{line}`")))?;
                vals.push(v);
            }
            zs.push(DVector::from_vec(vals));
        }
        out.push((scan, zs));
    }
    Ok(out)
}
