//! Labeled random-finite-set domain types and the multi-scan GLMB density.
//!
//! A multi-scan GLMB over a scan window is a weighted collection of
//! hypotheses, each carrying an association history, the label sets it
//! implies, and per-trajectory (or joint) attribute densities. Weights are
//! kept in log domain throughout; products over a hundred scans underflow in
//! linear domain.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::DVector;

use crate::densities::{Gaussian, JointTrajectoryDensity, TrajectoryDensity};
use crate::measurement::ScanAssociation;
use crate::{log_sum_exp, Error, Result};

// ---------------------------------------------------------------------------
// Labels and windows
// ---------------------------------------------------------------------------

/// Trajectory label: birth scan plus an index distinguishing labels born at
/// the same scan. Ordered lexicographically for deterministic iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct Label {
    pub birth_time: u32,
    pub birth_index: u32,
}

impl Label {
    pub fn new(birth_time: u32, birth_index: u32) -> Self {
        Self {
            birth_time,
            birth_index,
        }
    }

    /// Compact file token `t,i`.
    pub fn token(&self) -> String {
        format!("{},{}", self.birth_time, self.birth_index)
    }

    pub fn parse_token(tok: &str) -> Result<Self> {
        let (t, i) = tok
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("bad label token `{tok}`")))?;
        Ok(Self {
            birth_time: t
                .parse()
                .map_err(|_| Error::Parse(format!("bad label token `{tok}`")))?,
            birth_index: i
                .parse()
                .map_err(|_| Error::Parse(format!("bad label token `{tok}`")))?,
        })
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.birth_time, self.birth_index)
    }
}

/// Inclusive scan interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ScanWindow {
    pub start: u32,
    pub end: u32,
}

impl ScanWindow {
    pub fn new(start: u32, end: u32) -> Result<Self> {
        if start > end {
            return Err(Error::InvalidInput(format!(
                "window start {start} exceeds end {end}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        (self.end - self.start + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, scan: u32) -> bool {
        scan >= self.start && scan <= self.end
    }

    pub fn scans(&self) -> impl Iterator<Item = u32> {
        self.start..=self.end
    }
}

impl fmt::Display for ScanWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}:{}}}", self.start, self.end)
    }
}

// ---------------------------------------------------------------------------
// States and trajectories
// ---------------------------------------------------------------------------

/// One object's attribute vector together with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledState {
    pub attribute: DVector<f64>,
    pub label: Label,
}

/// The set of labeled objects present at one scan.
pub type MultiObjectState = Vec<LabeledState>;

/// Attribute content of a trajectory over its life span: either concrete
/// per-scan vectors or a density.
#[derive(Debug, Clone, PartialEq)]
pub enum TrajectoryAttributes {
    Concrete(Vec<DVector<f64>>),
    Density(TrajectoryDensity),
}

/// An unfragmented trajectory: a label alive over the contiguous scans
/// `start..=end`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySegment {
    pub label: Label,
    pub start: u32,
    pub attributes: TrajectoryAttributes,
}

impl TrajectorySegment {
    pub fn new(label: Label, start: u32, attributes: TrajectoryAttributes) -> Result<Self> {
        if start < label.birth_time {
            return Err(Error::InvalidInput(format!(
                "trajectory {label} starts before its birth scan"
            )));
        }
        let n = match &attributes {
            TrajectoryAttributes::Concrete(v) => v.len(),
            TrajectoryAttributes::Density(d) => d.n_scans(),
        };
        if n == 0 {
            return Err(Error::InvalidInput("empty trajectory segment".into()));
        }
        Ok(Self {
            label,
            start,
            attributes,
        })
    }

    pub fn n_scans(&self) -> usize {
        match &self.attributes {
            TrajectoryAttributes::Concrete(v) => v.len(),
            TrajectoryAttributes::Density(d) => d.n_scans(),
        }
    }

    pub fn end(&self) -> u32 {
        self.start + self.n_scans() as u32 - 1
    }

    pub fn covers(&self, scan: u32) -> bool {
        scan >= self.start && scan <= self.end()
    }

    /// Concrete attribute at a scan, when the segment carries concrete values.
    pub fn attribute_at(&self, scan: u32) -> Option<&DVector<f64>> {
        match &self.attributes {
            TrajectoryAttributes::Concrete(v) if self.covers(scan) => {
                Some(&v[(scan - self.start) as usize])
            }
            _ => None,
        }
    }
}

/// Estimated output of a tracker: one concrete trajectory per label.
pub type MultiObjectTrajectory = Vec<TrajectorySegment>;

// ---------------------------------------------------------------------------
// Label-set sequences
// ---------------------------------------------------------------------------

/// Per-scan label sets over a window, with the distinct-label and
/// contiguity invariants enforced at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSetSequence {
    window: ScanWindow,
    sets: Vec<BTreeSet<Label>>,
}

impl LabelSetSequence {
    pub fn new(window: ScanWindow, sets: Vec<BTreeSet<Label>>) -> Result<Self> {
        if sets.len() != window.len() {
            return Err(Error::InvalidInput(format!(
                "{} label sets for window {window}",
                sets.len()
            )));
        }
        let seq = Self { window, sets };
        seq.validate()?;
        Ok(seq)
    }

    fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<Label, u32> = BTreeMap::new();
        for scan in self.window.scans() {
            for l in self.at(scan) {
                if scan < l.birth_time {
                    return Err(Error::InvalidInput(format!(
                        "label {l} present at scan {scan} before its birth"
                    )));
                }
                if let Some(&last) = seen.get(l) {
                    if last + 1 != scan {
                        return Err(Error::InvalidInput(format!(
                            "label {l} fragmented: scans {last} and {scan}"
                        )));
                    }
                }
                seen.insert(*l, scan);
            }
        }
        Ok(())
    }

    pub fn window(&self) -> ScanWindow {
        self.window
    }

    pub fn at(&self, scan: u32) -> &BTreeSet<Label> {
        &self.sets[(scan - self.window.start) as usize]
    }

    /// Union of labels over all scans.
    pub fn union(&self) -> BTreeSet<Label> {
        let mut u = BTreeSet::new();
        for s in &self.sets {
            u.extend(s.iter().copied());
        }
        u
    }

    /// First and last scans at which `label` is present.
    pub fn life_span(&self, label: &Label) -> Option<(u32, u32)> {
        let mut first = None;
        let mut last = None;
        for scan in self.window.scans() {
            if self.at(scan).contains(label) {
                first.get_or_insert(scan);
                last = Some(scan);
            }
        }
        first.zip(last)
    }

    pub fn all_empty(&self) -> bool {
        self.sets.iter().all(|s| s.is_empty())
    }
}

// ---------------------------------------------------------------------------
// Hypotheses and the multi-scan GLMB
// ---------------------------------------------------------------------------

/// One multi-scan GLMB hypothesis: an association history over the window,
/// the label record it implies, a log weight, and attribute densities held
/// either per trajectory or as one joint block over currently-alive labels.
#[derive(Debug, Clone)]
pub struct GlmbHypothesis {
    pub history: Vec<ScanAssociation>,
    pub label_sets: LabelSetSequence,
    pub log_weight: f64,
    pub trajectory_densities: BTreeMap<Label, TrajectoryDensity>,
    pub joint_density: Option<JointTrajectoryDensity>,
}

impl GlmbHypothesis {
    /// Builds a hypothesis from its history; the label record is derived from
    /// the per-scan live labels, so the two can never disagree. Density
    /// bookkeeping (each label in exactly one store) is validated.
    pub fn new(
        window: ScanWindow,
        history: Vec<ScanAssociation>,
        log_weight: f64,
        trajectory_densities: BTreeMap<Label, TrajectoryDensity>,
        joint_density: Option<JointTrajectoryDensity>,
    ) -> Result<Self> {
        if history.len() != window.len() {
            return Err(Error::InvalidInput(format!(
                "{} associations for window {window}",
                history.len()
            )));
        }
        let sets = history.iter().map(|a| a.live_labels()).collect();
        let label_sets = LabelSetSequence::new(window, sets)?;
        let h = Self {
            history,
            label_sets,
            log_weight,
            trajectory_densities,
            joint_density,
        };
        h.validate_densities()?;
        Ok(h)
    }

    fn validate_densities(&self) -> Result<()> {
        for l in self.label_sets.union() {
            let in_map = self.trajectory_densities.contains_key(&l);
            let in_joint = self
                .joint_density
                .as_ref()
                .is_some_and(|j| j.contains(&l));
            match (in_map, in_joint) {
                (true, true) => {
                    return Err(Error::InvalidState(format!(
                        "label {l} carried in both density stores"
                    )))
                }
                (false, false) => {
                    return Err(Error::InvalidState(format!(
                        "label {l} has no attribute density"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn window(&self) -> ScanWindow {
        self.label_sets.window()
    }

    /// Canonical serialization of the history, used as hypothesis identity.
    pub fn history_key(&self) -> String {
        history_key(&self.history)
    }

    /// Per-trajectory attribute density for a label, marginalized out of the
    /// joint block when the label lives there.
    pub fn trajectory_marginal(&self, label: &Label) -> Result<TrajectoryDensity> {
        if let Some(d) = self.trajectory_densities.get(label) {
            return Ok(d.clone());
        }
        let joint = self
            .joint_density
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("label {label} has no density")))?;
        let block = *joint.block(label)?;
        TrajectoryDensity::new(
            block.start_scan,
            joint.state_dim(),
            joint.marginalize_to_label(label)?,
        )
    }

    /// Log attribute density at concrete per-scan points, one sequence per
    /// label covering exactly that label's density support. Density value of
    /// a label-free hypothesis is 0 (log of the unit empty product).
    pub fn attribute_log_density(
        &self,
        points: &BTreeMap<Label, Vec<DVector<f64>>>,
    ) -> Result<f64> {
        let mut total = 0.0;
        for (l, d) in &self.trajectory_densities {
            let xs = points
                .get(l)
                .ok_or_else(|| Error::InvalidInput(format!("no points for label {l}")))?;
            total += d.segment().log_pdf(&stack(xs, d.segment().dim())?)?;
        }
        if let Some(joint) = &self.joint_density {
            let mut stacked = Vec::with_capacity(joint.dim());
            for l in joint.labels() {
                let xs = points
                    .get(l)
                    .ok_or_else(|| Error::InvalidInput(format!("no points for label {l}")))?;
                for x in xs {
                    stacked.extend(x.iter().copied());
                }
            }
            if stacked.len() != joint.dim() {
                return Err(Error::InvalidInput("point stack dimension mismatch".into()));
            }
            total += joint.dist().log_pdf(&DVector::from_vec(stacked))?;
        }
        Ok(total)
    }
}

fn stack(xs: &[DVector<f64>], want: usize) -> Result<DVector<f64>> {
    let mut v = Vec::new();
    for x in xs {
        v.extend(x.iter().copied());
    }
    if v.len() != want {
        return Err(Error::InvalidInput("point stack dimension mismatch".into()));
    }
    Ok(DVector::from_vec(v))
}

/// Canonical text key of an association history.
pub fn history_key(history: &[ScanAssociation]) -> String {
    let mut s = String::new();
    for a in history {
        s.push_str(&a.canonical_token());
        s.push('|');
    }
    s
}

/// A multi-scan GLMB density over a scan window.
#[derive(Debug, Clone)]
pub struct MultiScanGlmb {
    pub window: ScanWindow,
    pub hypotheses: Vec<GlmbHypothesis>,
    pub normalized: bool,
}

impl MultiScanGlmb {
    pub fn new(window: ScanWindow, hypotheses: Vec<GlmbHypothesis>) -> Result<Self> {
        for h in &hypotheses {
            if h.window() != window {
                return Err(Error::InvalidInput(format!(
                    "hypothesis window {} does not match density window {window}",
                    h.window()
                )));
            }
        }
        Ok(Self {
            window,
            hypotheses,
            normalized: false,
        })
    }

    /// The trivial density: one empty-history hypothesis of weight 1 is
    /// represented by zero hypotheses plus the `w(∅)=1` convention in
    /// [`joint_existence_weight`].
    pub fn trivial(window: ScanWindow) -> Self {
        Self {
            window,
            hypotheses: Vec::new(),
            normalized: true,
        }
    }

    pub fn total_mass(&self) -> f64 {
        log_sum_exp(
            &self
                .hypotheses
                .iter()
                .map(|h| h.log_weight)
                .collect::<Vec<_>>(),
        )
        .exp()
    }
}

// ---------------------------------------------------------------------------
// Cardinality
// ---------------------------------------------------------------------------

/// Distribution of the number of distinct trajectories over a window.
#[derive(Debug, Clone, PartialEq)]
pub struct CardinalityDistribution {
    probabilities: Vec<f64>,
}

impl CardinalityDistribution {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidInput("negative cardinality mass".into()));
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "cardinality masses sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probabilities })
    }

    pub fn prob(&self, n: usize) -> f64 {
        self.probabilities.get(n).copied().unwrap_or(0.0)
    }

    pub fn max_n(&self) -> usize {
        self.probabilities.len().saturating_sub(1)
    }

    pub fn mean(&self) -> f64 {
        self.probabilities
            .iter()
            .enumerate()
            .map(|(n, p)| n as f64 * p)
            .sum()
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }
}

// ---------------------------------------------------------------------------
// Multi-scan set operations
// ---------------------------------------------------------------------------

/// Multi-scan multi-object exponential: product of `h` over trajectories,
/// with the empty-product convention `h^∅ = 1`.
pub fn multiscan_exponential(
    h: &dyn Fn(&TrajectorySegment) -> f64,
    trajectories: &[TrajectorySegment],
) -> Result<f64> {
    let mut seen = BTreeSet::new();
    for t in trajectories {
        if !seen.insert(t.label) {
            return Err(Error::InvalidInput(format!(
                "duplicate trajectory label {}",
                t.label
            )));
        }
    }
    Ok(trajectories.iter().map(|t| h(t)).product())
}

/// Joint label-marginal of a multi-scan GLMB at a label-set sequence: the
/// attribute densities integrate to one, so the marginal is the sum of the
/// weights of hypotheses whose label record equals `l`.
pub fn joint_label_marginal(f: &MultiScanGlmb, l: &LabelSetSequence) -> Result<f64> {
    if l.window() != f.window {
        return Err(Error::InvalidInput(format!(
            "label sequence window {} outside density window {}",
            l.window(),
            f.window
        )));
    }
    let logs: Vec<f64> = f
        .hypotheses
        .iter()
        .filter(|h| &h.label_sets == l)
        .map(|h| h.log_weight)
        .collect();
    Ok(log_sum_exp(&logs).exp())
}

/// Joint existence probability of a label-set sequence under a normalized
/// multi-scan GLMB. The all-empty sequence on the trivial density returns 1.
pub fn joint_existence_weight(pi: &MultiScanGlmb, l: &LabelSetSequence) -> Result<f64> {
    if !pi.normalized {
        return Err(Error::InvalidState(
            "joint existence weight requires a normalized density".into(),
        ));
    }
    if pi.hypotheses.is_empty() && l.all_empty() {
        return Ok(1.0);
    }
    joint_label_marginal(pi, l)
}

/// Trajectory-count distribution: mass at `n` is the total weight of
/// hypotheses whose label union has `n` elements.
pub fn trajectory_cardinality_distribution(pi: &MultiScanGlmb) -> Result<CardinalityDistribution> {
    if !pi.normalized {
        return Err(Error::InvalidState(
            "cardinality distribution requires a normalized density".into(),
        ));
    }
    if pi.hypotheses.is_empty() {
        return CardinalityDistribution::new(vec![1.0]);
    }
    let max_n = pi
        .hypotheses
        .iter()
        .map(|h| h.label_sets.union().len())
        .max()
        .unwrap_or(0);
    let mut logs: Vec<Vec<f64>> = vec![Vec::new(); max_n + 1];
    for h in &pi.hypotheses {
        logs[h.label_sets.union().len()].push(h.log_weight);
    }
    CardinalityDistribution::new(logs.iter().map(|v| log_sum_exp(v).exp()).collect())
}

/// Log-sum-exp normalization; hypothesis weight ratios preserved exactly.
pub fn normalize(mut pi: MultiScanGlmb) -> Result<MultiScanGlmb> {
    let total = log_sum_exp(
        &pi.hypotheses
            .iter()
            .map(|h| h.log_weight)
            .collect::<Vec<_>>(),
    );
    if !total.is_finite() {
        return Err(Error::Degenerate(
            "cannot normalize a density with zero total mass".into(),
        ));
    }
    for h in &mut pi.hypotheses {
        h.log_weight -= total;
    }
    pi.normalized = true;
    Ok(pi)
}

/// Keeps the `max_hypotheses` largest-weight hypotheses with weight at or
/// above `weight_floor`, renormalizes, and reports the discarded mass.
/// Discarding the smallest weights minimizes the L1 approximation error. Ties
/// broken by canonical history order.
pub fn truncate(
    pi: &MultiScanGlmb,
    max_hypotheses: usize,
    weight_floor: f64,
) -> Result<(MultiScanGlmb, f64)> {
    if max_hypotheses == 0 {
        return Err(Error::InvalidInput("cannot keep zero hypotheses".into()));
    }
    if !pi.normalized {
        return Err(Error::InvalidState("truncate requires a normalized density".into()));
    }
    let mut order: Vec<usize> = (0..pi.hypotheses.len()).collect();
    let keys: Vec<String> = pi.hypotheses.iter().map(|h| h.history_key()).collect();
    order.sort_by(|&a, &b| {
        pi.hypotheses[b]
            .log_weight
            .partial_cmp(&pi.hypotheses[a].log_weight)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| keys[a].cmp(&keys[b]))
    });
    let log_floor = if weight_floor > 0.0 {
        weight_floor.ln()
    } else {
        f64::NEG_INFINITY
    };
    let kept: Vec<GlmbHypothesis> = order
        .iter()
        .take(max_hypotheses)
        .filter(|&&i| pi.hypotheses[i].log_weight >= log_floor)
        .map(|&i| pi.hypotheses[i].clone())
        .collect();
    if kept.is_empty() {
        return Err(Error::Degenerate("truncation discarded every hypothesis".into()));
    }
    let kept_mass = log_sum_exp(&kept.iter().map(|h| h.log_weight).collect::<Vec<_>>()).exp();
    let discarded = (1.0 - kept_mass).max(0.0);
    let out = normalize(MultiScanGlmb::new(pi.window, kept)?)?;
    Ok((out, discarded))
}

/// Collapses hypotheses with identical histories to one entry. Duplicates
/// arise from independent sampling of the same history and are the same
/// hypothesis, so weights are not summed; differing weights or densities
/// signal an upstream bug.
pub fn merge_unique(hs: Vec<GlmbHypothesis>) -> Result<Vec<GlmbHypothesis>> {
    let mut by_key: BTreeMap<String, GlmbHypothesis> = BTreeMap::new();
    for h in hs {
        let key = h.history_key();
        match by_key.get(&key) {
            None => {
                by_key.insert(key, h);
            }
            Some(prev) => {
                if (prev.log_weight - h.log_weight).abs() > 1e-9 * (1.0 + prev.log_weight.abs()) {
                    return Err(Error::InvalidState(format!(
                        "duplicate history with differing weights: {} vs {}",
                        prev.log_weight, h.log_weight
                    )));
                }
            }
        }
    }
    Ok(by_key.into_values().collect())
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// Writes a multi-scan GLMB in the line-oriented fixture format.
pub fn glmb_to_text(pi: &MultiScanGlmb) -> String {
    let mut s = format!("window {} {}\n", pi.window.start, pi.window.end);
    s.push_str(&format!("normalized {}\n", u8::from(pi.normalized)));
    s.push_str(&format!("hypotheses {}\n", pi.hypotheses.len()));
    for h in &pi.hypotheses {
        s.push_str("hypothesis\n");
        s.push_str(&format!("weight {}\n", h.log_weight));
        for (a, scan) in h.history.iter().zip(pi.window.scans()) {
            s.push_str(&format!("assoc {scan} {}\n", a.canonical_token()));
        }
        for (l, d) in &h.trajectory_densities {
            s.push_str(&format!(
                "density {} {} {}\n",
                l.token(),
                d.start_scan(),
                d.state_dim()
            ));
            s.push_str(&d.segment().to_fixture());
        }
        if let Some(j) = &h.joint_density {
            s.push_str(&format!("joint {} {}\n", j.state_dim(), j.n_labels()));
            for l in j.labels() {
                let b = j.block(l).expect("listed label");
                s.push_str(&format!(
                    "block {} {} {}\n",
                    l.token(),
                    b.start_scan,
                    b.len / j.state_dim()
                ));
            }
            s.push_str(&j.dist().to_fixture());
        }
        s.push_str("end\n");
    }
    s
}

/// Parses the format produced by [`glmb_to_text`].
pub fn glmb_from_text(text: &str) -> Result<MultiScanGlmb> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
    let window = {
        let l = lines
            .next()
            .ok_or_else(|| Error::Parse("empty GLMB text".into()))?;
        let rest = l
            .strip_prefix("window ")
            .ok_or_else(|| Error::Parse(format!("expected window line, got `{l}`")))?;
        let mut it = rest.split_whitespace();
        let start = parse_num::<u32>(it.next())?;
        let end = parse_num::<u32>(it.next())?;
        ScanWindow::new(start, end)?
    };
    let normalized = {
        let l = lines
            .next()
            .ok_or_else(|| Error::Parse("missing normalized line".into()))?;
        parse_num::<u8>(l.strip_prefix("normalized "))? != 0
    };
    let count = {
        let l = lines
            .next()
            .ok_or_else(|| Error::Parse("missing hypotheses line".into()))?;
        parse_num::<usize>(l.strip_prefix("hypotheses "))?
    };
    let mut hypotheses = Vec::with_capacity(count);
    for _ in 0..count {
        expect_line(&mut lines, "hypothesis")?;
        let log_weight: f64 = {
            let l = lines
                .next()
                .ok_or_else(|| Error::Parse("missing weight line".into()))?;
            parse_num(l.strip_prefix("weight "))?
        };
        let mut history = Vec::with_capacity(window.len());
        for scan in window.scans() {
            let l = lines
                .next()
                .ok_or_else(|| Error::Parse("missing assoc line".into()))?;
            let rest = l
                .strip_prefix("assoc ")
                .ok_or_else(|| Error::Parse(format!("expected assoc line, got `{l}`")))?;
            let (scan_tok, body) = rest
                .split_once(' ')
                .ok_or_else(|| Error::Parse(format!("bad assoc line `{l}`")))?;
            if parse_num::<u32>(Some(scan_tok))? != scan {
                return Err(Error::Parse(format!("assoc scans out of order at `{l}`")));
            }
            history.push(ScanAssociation::parse_token(body)?);
        }
        let mut trajectory_densities = BTreeMap::new();
        let mut joint_density = None;
        loop {
            let l = *lines.peek().ok_or_else(|| Error::Parse("unterminated hypothesis".into()))?;
            if l == "end" {
                lines.next();
                break;
            }
            if let Some(rest) = l.strip_prefix("density ") {
                lines.next();
                let mut it = rest.split_whitespace();
                let label = Label::parse_token(
                    it.next()
                        .ok_or_else(|| Error::Parse("density line missing label".into()))?,
                )?;
                let start_scan = parse_num::<u32>(it.next())?;
                let state_dim = parse_num::<usize>(it.next())?;
                let g = take_gaussian(&mut lines)?;
                trajectory_densities
                    .insert(label, TrajectoryDensity::new(start_scan, state_dim, g)?);
            } else if let Some(rest) = l.strip_prefix("joint ") {
                lines.next();
                let mut it = rest.split_whitespace();
                let state_dim = parse_num::<usize>(it.next())?;
                let n_blocks = parse_num::<usize>(it.next())?;
                let mut blocks = Vec::with_capacity(n_blocks);
                for _ in 0..n_blocks {
                    let bl = lines
                        .next()
                        .ok_or_else(|| Error::Parse("missing block line".into()))?;
                    let rest = bl
                        .strip_prefix("block ")
                        .ok_or_else(|| Error::Parse(format!("expected block line, got `{bl}`")))?;
                    let mut it = rest.split_whitespace();
                    let label = Label::parse_token(
                        it.next()
                            .ok_or_else(|| Error::Parse("block line missing label".into()))?,
                    )?;
                    let start_scan = parse_num::<u32>(it.next())?;
                    let n_scans = parse_num::<usize>(it.next())?;
                    blocks.push((label, start_scan, n_scans));
                }
                let g = take_gaussian(&mut lines)?;
                let mut joint = JointTrajectoryDensity::empty(state_dim);
                // Rebuild with independent placeholders, then overwrite the
                // distribution with the parsed joint (canonical block order
                // matches the serialized order).
                let mut offset = 0usize;
                for (label, start_scan, n_scans) in &blocks {
                    let dim = n_scans * state_dim;
                    let marg = g.marginal_range(offset..offset + dim)?;
                    joint.insert_independent(*label, *start_scan, &marg)?;
                    offset += dim;
                }
                joint.overwrite_dist(g)?;
                joint_density = Some(joint);
            } else {
                return Err(Error::Parse(format!("unexpected line `{l}`")));
            }
        }
        hypotheses.push(GlmbHypothesis::new(
            window,
            history,
            log_weight,
            trajectory_densities,
            joint_density,
        )?);
    }
    let mut pi = MultiScanGlmb::new(window, hypotheses)?;
    pi.normalized = normalized;
    Ok(pi)
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>) -> Result<T> {
    tok.and_then(|t| t.trim().parse().ok())
        .ok_or_else(|| Error::Parse(format!("bad numeric token `{}`", tok.unwrap_or("<missing>"))))
}

fn expect_line<'a>(
    lines: &mut impl Iterator<Item = &'a str>,
    want: &str,
) -> Result<()> {
    match lines.next() {
        Some(l) if l == want => Ok(()),
        other => Err(Error::Parse(format!(
            "expected `{want}`, got `{}`",
            other.unwrap_or("<eof>")
        ))),
    }
}

fn take_gaussian<'a, I: Iterator<Item = &'a str>>(
    lines: &mut std::iter::Peekable<I>,
) -> Result<Gaussian> {
    let mut block = String::new();
    let dim_line = lines
        .next()
        .ok_or_else(|| Error::Parse("missing Gaussian dim line".into()))?;
    let d: usize = parse_num(dim_line.strip_prefix("dim "))?;
    block.push_str(dim_line);
    block.push('\n');
    for _ in 0..=d {
        let l = lines
            .next()
            .ok_or_else(|| Error::Parse("truncated Gaussian block".into()))?;
        block.push_str(l);
        block.push('\n');
    }
    Gaussian::from_fixture(&block)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use crate::measurement::ExtendedAssociationMap;
    use proptest::prelude::*;

    fn simple(window: ScanWindow, u: i64, log_w: f64) -> GlmbHypothesis {
        let l = Label::new(window.start, 0);
        let a = ScanAssociation::Standard(ExtendedAssociationMap::new([(l, u)]).unwrap());
        let densities = if u >= 0 {
            let seg = Gaussian::new(DVector::zeros(1), nalgebra::DMatrix::identity(1, 1)).unwrap();
            BTreeMap::from([(l, TrajectoryDensity::new(window.start, 1, seg).unwrap())])
        } else {
            BTreeMap::new()
        };
        GlmbHypothesis::new(window, vec![a], log_w, densities, None).unwrap()
    }

    proptest! {
        // Normalization sums to one and is idempotent for arbitrary finite
        // log weights, including astronomically spread ones.
        #[test]
        fn normalize_sums_to_one(raw in proptest::collection::vec(-700.0f64..40.0, 1..60)) {
            let w = ScanWindow::new(1, 1).unwrap();
            let hs: Vec<GlmbHypothesis> = raw
                .iter()
                .enumerate()
                .map(|(i, &lw)| simple(w, i as i64, lw))
                .collect();
            let pi = normalize(MultiScanGlmb::new(w, hs).unwrap()).unwrap();
            let sum: f64 = pi.hypotheses.iter().map(|h| h.log_weight.exp()).sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            let again = normalize(pi.clone()).unwrap();
            for (a, b) in pi.hypotheses.iter().zip(&again.hypotheses) {
                prop_assert!((a.log_weight - b.log_weight).abs() < 1e-12);
            }
        }

        // Truncation keeps content: every surviving hypothesis existed in the
        // input with the same history, count never grows, and discarded mass
        // equals the weight lost.
        #[test]
        fn truncate_preserves_content(
            raw in proptest::collection::vec(0.01f64..1.0, 2..30),
            keep in 1usize..30,
        ) {
            let w = ScanWindow::new(1, 1).unwrap();
            let total: f64 = raw.iter().sum();
            let hs: Vec<GlmbHypothesis> = raw
                .iter()
                .enumerate()
                .map(|(i, &wt)| simple(w, i as i64, (wt / total).ln()))
                .collect();
            let mut pi = MultiScanGlmb::new(w, hs).unwrap();
            pi.normalized = true;
            let input_keys: BTreeSet<String> =
                pi.hypotheses.iter().map(|h| h.history_key()).collect();
            let (out, discarded) = truncate(&pi, keep, 0.0).unwrap();
            prop_assert!(out.hypotheses.len() <= keep.min(pi.hypotheses.len()));
            for h in &out.hypotheses {
                prop_assert!(input_keys.contains(&h.history_key()));
            }
            prop_assert!((0.0..=1.0 + 1e-12).contains(&discarded));
            let out_sum: f64 = out.hypotheses.iter().map(|h| h.log_weight.exp()).sum();
            prop_assert!((out_sum - 1.0).abs() < 1e-9);
        }
    }
}
