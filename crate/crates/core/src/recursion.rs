//! Multi-scan posterior recursion over labelled hypotheses.
//!
//! The exact filter alternates two closed-form steps. Prediction extends
//! every hypothesis with each admissible next label set: survivors keep
//! their labels and their attribute blocks are propagated jointly through
//! the interacting transition, labels that disappear have their trajectory
//! marginalized out and frozen at the scan where they died, and newborn
//! labels enter as independent blocks. The child weight multiplies the
//! parent weight by the birth/survival factor of the label-set transition.
//! The update extends every predicted hypothesis with each association of
//! live labels to measurements; detected labels condition the joint density
//! on their measurements in one stacked step and the weight picks up the
//! evidence together with one misdetection factor per missed live label.
//!
//! Two cheaper routes share the same step primitives. The product-form
//! projection replaces a hypothesis joint with independent per-trajectory
//! marginals without touching weights, so every label-set statistic of the
//! posterior is preserved exactly. The standard recursion propagates each
//! trajectory independently (no interaction) and never forms a joint; with
//! interactions disabled and a linear sensor it reproduces the exact route
//! hypothesis for hypothesis.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use crate::densities::{JointTrajectoryDensity, TrajectoryDensity};
#[cfg(test)]
use crate::densities::Gaussian;
use crate::dynamics::{joint_transition_predict, log_transition_weight, STATE_DIM};
use crate::measurement::{
    enumerate_partitions, group_bearing, AssociationMap, ExtendedAssociationMap, Measurement,
    MergedAssociation, MergedGroup, ScanAssociation, SensorModel,
};
use crate::model::{MergedConfig, Model};
use crate::rfs::{normalize, GlmbHypothesis, Label, MultiScanGlmb, ScanWindow};
use crate::{wrap_angle, Error, Result};

/// Trivial posterior at `scan`: one hypothesis with no labels and weight 1.
pub fn empty_posterior(scan: u32) -> MultiScanGlmb {
    let window = ScanWindow::new(scan, scan).expect("degenerate window is valid");
    let history = vec![ScanAssociation::Standard(ExtendedAssociationMap::empty())];
    let hyp = GlmbHypothesis::new(window, history, 0.0, BTreeMap::new(), None)
        .expect("empty hypothesis is valid");
    let mut pi = MultiScanGlmb::new(window, vec![hyp]).expect("single hypothesis");
    pi.normalized = true;
    pi
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// One prediction child: extend `parent` to `scan` with live set `live_next`.
///
/// `live_next` must be a subset of the parent's current live labels plus the
/// labels born at `scan`. Survivors are propagated jointly, dying labels are
/// marginalized out of the joint and frozen, births are inserted as
/// independent blocks, and the scan association is the all-miss extended map
/// (deaths at −1), ready for a subsequent update step.
pub fn predict_step(
    parent: &GlmbHypothesis,
    live_next: &BTreeSet<Label>,
    scan: u32,
    model: &Model,
) -> Result<GlmbHypothesis> {
    if scan != parent.window().end + 1 {
        return Err(Error::InvalidInput(format!(
            "prediction to scan {scan} from window {}",
            parent.window()
        )));
    }
    let prev_live = parent.label_sets.at(parent.window().end).clone();
    let births = model.birth.births_at(scan);
    let birth_labels: BTreeSet<Label> = births.iter().map(|(l, _)| *l).collect();
    for l in live_next {
        if !prev_live.contains(l) && !birth_labels.contains(l) {
            return Err(Error::InvalidInput(format!(
                "label {l} is neither surviving nor born at scan {scan}"
            )));
        }
    }
    let log_eta = log_transition_weight(&prev_live, live_next, scan, &model.birth, &model.survival);

    let survivors: BTreeSet<Label> = prev_live.intersection(live_next).copied().collect();
    let dying: BTreeSet<Label> = prev_live.difference(live_next).copied().collect();

    let mut joint = parent
        .joint_density
        .clone()
        .unwrap_or_else(|| JointTrajectoryDensity::empty(STATE_DIM));
    let mut frozen = parent.trajectory_densities.clone();

    // Product-form parents keep live labels in the per-trajectory store;
    // survivors must be assembled into the joint before propagation.
    for l in &survivors {
        if !joint.contains(l) {
            let td = frozen.remove(l).ok_or_else(|| {
                Error::InvalidState(format!("live label {l} has no attribute density"))
            })?;
            joint.insert_independent(*l, td.start_scan(), td.segment())?;
        }
    }
    // Dying labels freeze at the scan where they were last alive.
    for l in &dying {
        if joint.contains(l) {
            let start = joint.block(l)?.start_scan;
            let g = joint.remove_label(l)?;
            frozen.insert(*l, TrajectoryDensity::new(start, STATE_DIM, g)?);
        }
    }

    let mut joint = joint_transition_predict(&joint, &survivors, &model.force, &model.ut)?;
    for (l, comp) in &births {
        if live_next.contains(l) {
            joint.insert_independent(*l, scan, &comp.density)?;
        }
    }

    let mut entries: Vec<(Label, i64)> = Vec::new();
    for l in prev_live.union(&birth_labels) {
        entries.push((*l, if live_next.contains(l) { 0 } else { -1 }));
    }
    let mut history = parent.history.clone();
    history.push(ScanAssociation::Standard(ExtendedAssociationMap::new(
        entries,
    )?));

    GlmbHypothesis::new(
        ScanWindow::new(parent.window().start, scan)?,
        history,
        parent.log_weight + log_eta,
        frozen,
        Some(joint),
    )
}

/// One standard-recursion prediction child: like [`predict_step`] but each
/// surviving trajectory is propagated independently (single-label joint, so
/// the interaction force vanishes) and the hypothesis stays product-form.
pub fn standard_predict_step(
    parent: &GlmbHypothesis,
    live_next: &BTreeSet<Label>,
    scan: u32,
    model: &Model,
) -> Result<GlmbHypothesis> {
    if parent.joint_density.as_ref().is_some_and(|j| j.dim() > 0) {
        return Err(Error::InvalidInput(
            "standard prediction requires product-form hypotheses".into(),
        ));
    }
    if scan != parent.window().end + 1 {
        return Err(Error::InvalidInput(format!(
            "prediction to scan {scan} from window {}",
            parent.window()
        )));
    }
    let prev_live = parent.label_sets.at(parent.window().end).clone();
    let births = model.birth.births_at(scan);
    let birth_labels: BTreeSet<Label> = births.iter().map(|(l, _)| *l).collect();
    for l in live_next {
        if !prev_live.contains(l) && !birth_labels.contains(l) {
            return Err(Error::InvalidInput(format!(
                "label {l} is neither surviving nor born at scan {scan}"
            )));
        }
    }
    let log_eta = log_transition_weight(&prev_live, live_next, scan, &model.birth, &model.survival);

    let mut frozen = parent.trajectory_densities.clone();
    for l in prev_live.intersection(live_next) {
        let td = frozen
            .remove(l)
            .ok_or_else(|| Error::InvalidState(format!("live label {l} has no attribute density")))?;
        let mut single = JointTrajectoryDensity::empty(STATE_DIM);
        single.insert_independent(*l, td.start_scan(), td.segment())?;
        let survivors = BTreeSet::from([*l]);
        let propagated = joint_transition_predict(&single, &survivors, &model.force, &model.ut)?;
        frozen.insert(
            *l,
            TrajectoryDensity::new(td.start_scan(), STATE_DIM, propagated.marginalize_to_label(l)?)?,
        );
    }
    for (l, comp) in &births {
        if live_next.contains(l) {
            frozen.insert(*l, TrajectoryDensity::new(scan, STATE_DIM, comp.density.clone())?);
        }
    }

    let mut entries: Vec<(Label, i64)> = Vec::new();
    for l in prev_live.union(&birth_labels) {
        entries.push((*l, if live_next.contains(l) { 0 } else { -1 }));
    }
    let mut history = parent.history.clone();
    history.push(ScanAssociation::Standard(ExtendedAssociationMap::new(
        entries,
    )?));

    GlmbHypothesis::new(
        ScanWindow::new(parent.window().start, scan)?,
        history,
        parent.log_weight + log_eta,
        frozen,
        None,
    )
}

fn predict_with(
    prior: &MultiScanGlmb,
    model: &Model,
    scan: u32,
    step: &dyn Fn(&GlmbHypothesis, &BTreeSet<Label>) -> Result<GlmbHypothesis>,
) -> Result<MultiScanGlmb> {
    if scan != prior.window.end + 1 {
        return Err(Error::InvalidInput(format!(
            "prediction to scan {scan} from window {}",
            prior.window
        )));
    }
    let window = ScanWindow::new(prior.window.start, scan)?;
    let births = model.birth.births_at(scan);
    let mut children = Vec::new();
    let mut budget = model.enumeration_cap as f64;
    for h in &prior.hypotheses {
        let prev_live = h.label_sets.at(prior.window.end);
        let pool: Vec<Label> = prev_live
            .iter()
            .copied()
            .chain(births.iter().map(|(l, _)| *l))
            .collect();
        if pool.len() > 60 {
            return Err(Error::SizeCap(format!(
                "{} candidate labels in one prediction",
                pool.len()
            )));
        }
        budget -= (1u64 << pool.len()) as f64;
        if budget < 0.0 {
            return Err(Error::SizeCap(format!(
                "prediction children exceed cap {}",
                model.enumeration_cap
            )));
        }
        for mask in 0..(1u64 << pool.len()) {
            let live_next: BTreeSet<Label> = pool
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, l)| *l)
                .collect();
            // Zero-mass children (an impossible birth or survival) are dropped.
            if log_transition_weight(prev_live, &live_next, scan, &model.birth, &model.survival)
                == f64::NEG_INFINITY
            {
                continue;
            }
            children.push(step(h, &live_next)?);
        }
    }
    let mut out = MultiScanGlmb::new(window, children)?;
    // Birth/survival factors sum to one over label-set transitions, so
    // prediction preserves total mass and the normalization flag.
    out.normalized = prior.normalized;
    Ok(out)
}

/// Exact prediction: every hypothesis spawns one child per admissible next
/// label set. Child weights multiply in the birth/survival factor, so a
/// normalized prior stays normalized.
pub fn predict(prior: &MultiScanGlmb, model: &Model, scan: u32) -> Result<MultiScanGlmb> {
    predict_with(prior, model, scan, &|h, live| {
        predict_step(h, live, scan, model)
    })
}

/// Standard-recursion prediction: identical hypothesis enumeration and
/// weights, but trajectories are propagated independently and hypotheses
/// stay product-form.
pub fn standard_predict(prior: &MultiScanGlmb, model: &Model, scan: u32) -> Result<MultiScanGlmb> {
    predict_with(prior, model, scan, &|h, live| {
        standard_predict_step(h, live, scan, model)
    })
}

// ---------------------------------------------------------------------------
// Update
// ---------------------------------------------------------------------------

fn check_measurements(z: &[Measurement], model: &Model) -> Result<()> {
    let dim = model.sensor.meas_dim();
    for (i, m) in z.iter().enumerate() {
        if m.len() != dim {
            return Err(Error::InvalidInput(format!(
                "measurement {} has dimension {}, sensor produces {dim}",
                i + 1,
                m.len()
            )));
        }
    }
    Ok(())
}

fn log_clutter(z: &Measurement, model: &Model) -> Result<f64> {
    let kappa = model.clutter.intensity(z);
    if !(kappa > 0.0) {
        return Err(Error::InvalidInput(
            "clutter density must be positive where measurements occur".into(),
        ));
    }
    Ok(kappa.ln())
}

fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut o = 0;
    for b in blocks {
        out.view_mut((o, o), (b.nrows(), b.ncols())).copy_from(b);
        o += b.nrows();
    }
    out
}

/// Number of positive 1-1 maps from n labels into {0..m}.
fn association_count(n: usize, m: usize) -> f64 {
    let mut total = 0.0;
    let mut term = 1.0;
    for r in 0..=n.min(m) {
        if r > 0 {
            term *= (n - r + 1) as f64 / r as f64 * (m - r + 1) as f64;
        }
        total += term;
    }
    total
}

/// Condition a set of labels inside `joint` on their assigned measurements in
/// one stacked step, returning the log evidence plus the per-detection
/// detection/clutter factors. `detected` pairs each label with a 1-based
/// measurement index.
fn condition_detections(
    joint: &mut JointTrajectoryDensity,
    detected: &[(Label, u32)],
    z: &[Measurement],
    scan: u32,
    model: &Model,
) -> Result<f64> {
    let n = detected.len();
    let meas_dim = model.sensor.meas_dim();
    let mut obs_idx = Vec::with_capacity(n * STATE_DIM);
    let mut zs = DVector::zeros(n * meas_dim);
    let mut log_mu = 0.0;
    for (i, (l, j)) in detected.iter().enumerate() {
        if joint.last_scan(l)? != scan {
            return Err(Error::InvalidState(format!(
                "label {l} does not reach scan {scan}"
            )));
        }
        obs_idx.extend(joint.scan_indices(l, scan)?);
        let zj = &z[*j as usize - 1];
        zs.rows_mut(i * meas_dim, meas_dim).copy_from(zj);
        log_mu += model.p_d.ln() - log_clutter(zj, model)?;
    }
    let sensor = &model.sensor;
    let h = move |x: &DVector<f64>| {
        let mut out = DVector::zeros(n * meas_dim);
        for i in 0..n {
            let xi = x.rows(i * STATE_DIM, STATE_DIM).into_owned();
            out.rows_mut(i * meas_dim, meas_dim)
                .copy_from(&sensor.observe(&xi, scan));
        }
        out
    };
    let mut angular = Vec::new();
    for i in 0..n {
        for &a in sensor.angular_components() {
            angular.push(i * meas_dim + a);
        }
    }
    let r = block_diag(&vec![sensor.noise_cov(); n]);
    log_mu += joint.condition_on(&obs_idx, &h, &angular, &zs, &r, &model.ut)?;
    Ok(log_mu)
}

/// One update child: condition `parent` (a predicted hypothesis, all-miss at
/// its last scan) on the association `assoc` over its live labels.
///
/// Detected labels in the hypothesis joint are conditioned in one stacked
/// step; detected labels held per-trajectory are conditioned within their own
/// block, which updates the whole trajectory segment. Each missed live label
/// contributes one misdetection factor. Disappeared labels are untouched.
pub fn update_step(
    parent: &GlmbHypothesis,
    assoc: &AssociationMap,
    z: &[Measurement],
    model: &Model,
) -> Result<GlmbHypothesis> {
    check_measurements(z, model)?;
    let scan = parent.window().end;
    let last = parent
        .history
        .last()
        .ok_or_else(|| Error::InvalidState("hypothesis with empty history".into()))?;
    let ScanAssociation::Standard(last_map) = last else {
        return Err(Error::InvalidInput(
            "scan already carries a merged association".into(),
        ));
    };
    let live = last_map.live_labels();
    let domain: BTreeSet<Label> = assoc.iter().map(|(l, _)| *l).collect();
    if domain != live {
        return Err(Error::InvalidInput(
            "association domain must equal the live label set".into(),
        ));
    }
    for (_, &j) in assoc.iter() {
        if j as usize > z.len() {
            return Err(Error::InvalidInput(format!(
                "measurement index {j} out of range 0..={}",
                z.len()
            )));
        }
    }

    let mut joint = parent.joint_density.clone();
    let mut frozen = parent.trajectory_densities.clone();
    let mut log_mu = 0.0;
    let mut joint_detected: Vec<(Label, u32)> = Vec::new();
    let mut n_missed = 0usize;

    for (l, &j) in assoc.iter() {
        if j == 0 {
            n_missed += 1;
            continue;
        }
        if joint.as_ref().is_some_and(|jd| jd.contains(l)) {
            joint_detected.push((*l, j));
            continue;
        }
        // Product-form label: condition its own trajectory block.
        let td = frozen
            .get(l)
            .ok_or_else(|| Error::InvalidState(format!("live label {l} has no attribute density")))?;
        if td.end_scan() != scan {
            return Err(Error::InvalidState(format!(
                "label {l} does not reach scan {scan}"
            )));
        }
        let mut single = JointTrajectoryDensity::empty(STATE_DIM);
        single.insert_independent(*l, td.start_scan(), td.segment())?;
        log_mu += condition_detections(&mut single, &[(*l, j)], z, scan, model)?;
        frozen.insert(
            *l,
            TrajectoryDensity::new(td.start_scan(), STATE_DIM, single.marginalize_to_label(l)?)?,
        );
    }
    if !joint_detected.is_empty() {
        let jd = joint.as_mut().expect("labels located in the joint");
        log_mu += condition_detections(jd, &joint_detected, z, scan, model)?;
    }
    if n_missed > 0 {
        // Guarded so that perfect detection yields weight zero, not NaN.
        log_mu += n_missed as f64 * model.q_d().ln();
    }

    let mut entries: Vec<(Label, i64)> = Vec::new();
    for l in last_map.labels() {
        let v = match assoc.get(l) {
            Some(j) => j as i64,
            None => -1,
        };
        entries.push((*l, v));
    }
    let mut history = parent.history.clone();
    *history.last_mut().expect("nonempty history") =
        ScanAssociation::Standard(ExtendedAssociationMap::new(entries)?);

    GlmbHypothesis::new(
        parent.window(),
        history,
        parent.log_weight + log_mu,
        frozen,
        joint,
    )
}

/// Measurement update: every predicted hypothesis spawns one child per
/// positive 1-1 association of its live labels to measurements, then the
/// posterior is normalized. Works on exact (joint) and product-form
/// hypotheses alike.
pub fn update(predicted: &MultiScanGlmb, z: &[Measurement], model: &Model) -> Result<MultiScanGlmb> {
    check_measurements(z, model)?;
    let mut children = Vec::new();
    let mut budget = model.enumeration_cap as f64;
    for h in &predicted.hypotheses {
        let last = h
            .history
            .last()
            .ok_or_else(|| Error::InvalidState("hypothesis with empty history".into()))?;
        let live = last.live_labels();
        budget -= association_count(live.len(), z.len());
        if budget < 0.0 {
            return Err(Error::SizeCap(format!(
                "update children exceed cap {}",
                model.enumeration_cap
            )));
        }
        for assoc in enumerate_associations(&live, z.len()) {
            children.push(update_step(h, &assoc, z, model)?);
        }
    }
    normalize(MultiScanGlmb::new(predicted.window, children)?)
}

/// All positive 1-1 maps from `labels` into {0..m}, in deterministic order.
/// Callers guard the count.
fn enumerate_associations(labels: &BTreeSet<Label>, m: usize) -> Vec<AssociationMap> {
    let labels: Vec<Label> = labels.iter().copied().collect();
    let mut out = Vec::new();
    let mut current: Vec<(Label, u32)> = Vec::new();
    let mut taken = vec![false; m + 1];
    fn recurse(
        labels: &[Label],
        i: usize,
        m: usize,
        taken: &mut Vec<bool>,
        current: &mut Vec<(Label, u32)>,
        out: &mut Vec<AssociationMap>,
    ) {
        if i == labels.len() {
            out.push(
                AssociationMap::new(current.iter().copied()).expect("constructed positive 1-1"),
            );
            return;
        }
        for v in 0..=m as u32 {
            if v > 0 && taken[v as usize] {
                continue;
            }
            if v > 0 {
                taken[v as usize] = true;
            }
            current.push((labels[i], v));
            recurse(labels, i + 1, m, taken, current, out);
            current.pop();
            if v > 0 {
                taken[v as usize] = false;
            }
        }
    }
    recurse(&labels, 0, m, &mut taken, &mut current, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Merged-measurement update
// ---------------------------------------------------------------------------

/// Mean state of a live label at `scan`, from whichever store holds it.
pub fn scan_state_mean(h: &GlmbHypothesis, l: &Label, scan: u32) -> Result<DVector<f64>> {
    if let Some(joint) = &h.joint_density {
        if joint.contains(l) {
            if joint.last_scan(l)? != scan {
                return Err(Error::InvalidState(format!(
                    "label {l} does not reach scan {scan}"
                )));
            }
            let (g, _) = joint.current_scan_marginal(&[*l])?;
            return Ok(g.mean().clone());
        }
    }
    let td = h
        .trajectory_densities
        .get(l)
        .ok_or_else(|| Error::InvalidState(format!("label {l} has no attribute density")))?;
    if td.end_scan() != scan {
        return Err(Error::InvalidState(format!(
            "label {l} does not reach scan {scan}"
        )));
    }
    Ok(td.scan_marginal(scan)?.mean().clone())
}

/// Transitive gating of labels by predicted bearing: labels closer than
/// `gate` radians (wrap-aware) land in one cluster. Clusters are returned in
/// order of their smallest label.
pub fn gate_clusters(bearings: &BTreeMap<Label, f64>, gate: f64) -> Vec<BTreeSet<Label>> {
    let labels: Vec<Label> = bearings.keys().copied().collect();
    let n = labels.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for i in 0..n {
        for j in i + 1..n {
            let d = wrap_angle(bearings[&labels[i]] - bearings[&labels[j]]).abs();
            if d <= gate {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<Label>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().insert(labels[i]);
    }
    let mut out: Vec<BTreeSet<Label>> = groups.into_values().collect();
    out.sort_by_key(|c| c.first().copied());
    out
}

/// All merged associations for one scan: a partition of the live labels into
/// groups (labels in different bearing-gated clusters never share a group)
/// together with a group-level positive 1-1 assignment into {0..m}.
pub fn enumerate_merged_associations(
    dead: &BTreeSet<Label>,
    bearings: &BTreeMap<Label, f64>,
    m: usize,
    config: &MergedConfig,
    cap: usize,
) -> Result<Vec<MergedAssociation>> {
    let clusters = gate_clusters(bearings, config.gate_radians());
    let mut partitions: Vec<Vec<BTreeSet<Label>>> = vec![Vec::new()];
    for cluster in &clusters {
        let parts = enumerate_partitions(cluster, config.partition_cap).map_err(|e| match e {
            Error::SizeCap(msg) => {
                let members: Vec<String> = cluster.iter().map(|l| l.to_string()).collect();
                Error::SizeCap(format!("{msg} (cluster {{{}}})", members.join(", ")))
            }
            other => other,
        })?;
        let mut next = Vec::with_capacity(partitions.len() * parts.len());
        for base in &partitions {
            for p in &parts {
                let mut combined = base.clone();
                combined.extend(p.iter().cloned());
                next.push(combined);
            }
        }
        partitions = next;
    }
    let mut total = 0.0;
    for p in &partitions {
        total += association_count(p.len(), m);
    }
    if total > cap as f64 {
        return Err(Error::SizeCap(format!(
            "merged associations exceed cap {cap}"
        )));
    }
    let mut out = Vec::new();
    for groups in &partitions {
        let mut assignment = vec![0u32; groups.len()];
        let mut taken = vec![false; m + 1];
        fn recurse(
            groups: &[BTreeSet<Label>],
            i: usize,
            m: usize,
            taken: &mut Vec<bool>,
            assignment: &mut Vec<u32>,
            dead: &BTreeSet<Label>,
            out: &mut Vec<MergedAssociation>,
        ) {
            if i == groups.len() {
                let gs: Vec<MergedGroup> = groups
                    .iter()
                    .zip(assignment.iter())
                    .map(|(g, &a)| MergedGroup {
                        members: g.clone(),
                        assignment: a,
                    })
                    .collect();
                out.push(
                    MergedAssociation::new(dead.clone(), gs).expect("constructed group 1-1"),
                );
                return;
            }
            for v in 0..=m as u32 {
                if v > 0 && taken[v as usize] {
                    continue;
                }
                if v > 0 {
                    taken[v as usize] = true;
                }
                assignment[i] = v;
                recurse(groups, i + 1, m, taken, assignment, dead, out);
                if v > 0 {
                    taken[v as usize] = false;
                }
            }
        }
        recurse(groups, 0, m, &mut taken, &mut assignment, dead, &mut out);
    }
    Ok(out)
}

/// Condition a list of detected merged groups inside `joint` in one stacked
/// step. Each group observes its wrap-aware mean member bearing; outputs are
/// all angular. Returns log evidence plus detection/clutter factors.
fn condition_group_detections(
    joint: &mut JointTrajectoryDensity,
    groups: &[&MergedGroup],
    z: &[Measurement],
    scan: u32,
    model: &Model,
) -> Result<f64> {
    let n_groups = groups.len();
    let mut obs_idx = Vec::new();
    let mut counts = Vec::with_capacity(n_groups);
    let mut zs = DVector::zeros(n_groups);
    let mut log_mu = 0.0;
    for (g_idx, g) in groups.iter().enumerate() {
        for l in &g.members {
            if joint.last_scan(l)? != scan {
                return Err(Error::InvalidState(format!(
                    "label {l} does not reach scan {scan}"
                )));
            }
            obs_idx.extend(joint.scan_indices(l, scan)?);
        }
        counts.push(g.members.len());
        let zj = &z[g.assignment as usize - 1];
        zs[g_idx] = zj[0];
        log_mu += model.p_d.ln() - log_clutter(zj, model)?;
    }
    let sensor = &model.sensor;
    let counts_ref = &counts;
    let h = move |x: &DVector<f64>| {
        let mut out = DVector::zeros(n_groups);
        let mut off = 0;
        for (g_idx, &c) in counts_ref.iter().enumerate() {
            let states: Vec<DVector<f64>> = (0..c)
                .map(|i| x.rows(off + i * STATE_DIM, STATE_DIM).into_owned())
                .collect();
            out[g_idx] = group_bearing(sensor, scan, &states);
            off += c * STATE_DIM;
        }
        out
    };
    let angular: Vec<usize> = (0..n_groups).collect();
    let sigma2 = sensor.noise_cov()[(0, 0)];
    let r = DMatrix::identity(n_groups, n_groups) * sigma2;
    log_mu += joint.condition_on(&obs_idx, &h, &angular, &zs, &r, &model.ut)?;
    Ok(log_mu)
}

/// One merged-update child: condition `parent` on a merged association. Each
/// detected group observes one bearing; each missed group costs a single
/// misdetection factor regardless of size.
pub fn update_merged_step(
    parent: &GlmbHypothesis,
    assoc: &MergedAssociation,
    z: &[Measurement],
    model: &Model,
) -> Result<GlmbHypothesis> {
    if !matches!(model.sensor, SensorModel::BearingOnlyMoving { .. }) {
        return Err(Error::InvalidInput(
            "merged update requires the bearing-only sensor".into(),
        ));
    }
    check_measurements(z, model)?;
    let scan = parent.window().end;
    let last = parent
        .history
        .last()
        .ok_or_else(|| Error::InvalidState("hypothesis with empty history".into()))?;
    let live = last.live_labels();
    let dead: BTreeSet<Label> = last.labels().difference(&live).copied().collect();
    if assoc.live_labels() != live || *assoc.dead() != dead {
        return Err(Error::InvalidInput(
            "merged association must cover exactly the live labels".into(),
        ));
    }
    for g in assoc.groups() {
        if g.assignment as usize > z.len() {
            return Err(Error::InvalidInput(format!(
                "measurement index {} out of range 0..={}",
                g.assignment,
                z.len()
            )));
        }
    }

    let mut joint = parent.joint_density.clone();
    let mut frozen = parent.trajectory_densities.clone();
    let mut log_mu = 0.0;
    let mut joint_groups: Vec<&MergedGroup> = Vec::new();
    let mut n_missed_groups = 0usize;

    for g in assoc.groups() {
        if g.assignment == 0 {
            n_missed_groups += 1;
            continue;
        }
        let in_joint = joint.as_ref().map_or(0, |jd| {
            g.members.iter().filter(|l| jd.contains(l)).count()
        });
        if in_joint == g.members.len() {
            joint_groups.push(g);
        } else if in_joint == 0 {
            // Product-form members: condition a stacked copy of the group,
            // then project back to independent trajectories. The correlation
            // the shared bearing induces is discarded, which is the
            // product-form approximation.
            let mut tmp = JointTrajectoryDensity::empty(STATE_DIM);
            for l in &g.members {
                let td = frozen.get(l).ok_or_else(|| {
                    Error::InvalidState(format!("live label {l} has no attribute density"))
                })?;
                tmp.insert_independent(*l, td.start_scan(), td.segment())?;
            }
            log_mu += condition_group_detections(&mut tmp, &[g], z, scan, model)?;
            for l in &g.members {
                let start = tmp.block(l)?.start_scan;
                frozen.insert(
                    *l,
                    TrajectoryDensity::new(start, STATE_DIM, tmp.marginalize_to_label(l)?)?,
                );
            }
        } else {
            return Err(Error::InvalidState(
                "merged group spans both density stores".into(),
            ));
        }
    }
    if !joint_groups.is_empty() {
        let jd = joint.as_mut().expect("groups located in the joint");
        log_mu += condition_group_detections(jd, &joint_groups, z, scan, model)?;
    }
    if n_missed_groups > 0 {
        log_mu += n_missed_groups as f64 * model.q_d().ln();
    }

    let mut history = parent.history.clone();
    *history.last_mut().expect("nonempty history") = ScanAssociation::Merged(assoc.clone());

    GlmbHypothesis::new(
        parent.window(),
        history,
        parent.log_weight + log_mu,
        frozen,
        joint,
    )
}

/// Merged-measurement update: every predicted hypothesis spawns one child
/// per (partition, group assignment) pair of its live labels, where the
/// partitions respect bearing gating, then the posterior is normalized.
pub fn update_merged(
    predicted: &MultiScanGlmb,
    z: &[Measurement],
    model: &Model,
) -> Result<MultiScanGlmb> {
    let config = model.merged.as_ref().ok_or_else(|| {
        Error::InvalidInput("model has no merged-measurement configuration".into())
    })?;
    check_measurements(z, model)?;
    let scan = predicted.window.end;
    let mut children = Vec::new();
    let mut budget = model.enumeration_cap as f64;
    for h in &predicted.hypotheses {
        let last = h
            .history
            .last()
            .ok_or_else(|| Error::InvalidState("hypothesis with empty history".into()))?;
        let live = last.live_labels();
        let dead: BTreeSet<Label> = last.labels().difference(&live).copied().collect();
        let mut bearings = BTreeMap::new();
        for l in &live {
            let x = scan_state_mean(h, l, scan)?;
            bearings.insert(*l, model.sensor.observe(&x, scan)[0]);
        }
        let assocs = enumerate_merged_associations(
            &dead,
            &bearings,
            z.len(),
            config,
            budget.max(0.0) as usize,
        )?;
        budget -= assocs.len() as f64;
        for a in &assocs {
            children.push(update_merged_step(h, a, z, model)?);
        }
    }
    normalize(MultiScanGlmb::new(predicted.window, children)?)
}

// ---------------------------------------------------------------------------
// Replay of sampled association histories
// ---------------------------------------------------------------------------

fn check_replayed_entry(child: &GlmbHypothesis, entry: &ScanAssociation) -> Result<()> {
    if child.history.last().map(|e| e.canonical_token()) != Some(entry.canonical_token()) {
        return Err(Error::InvalidInput(
            "association entry does not match the hypothesis label sets".into(),
        ));
    }
    Ok(())
}

/// Replay one scan of a sampled association history with the exact joint
/// recursion: predict to the entry's live set, then condition on its
/// assignments. The child keeps the hypothesis joint.
pub fn exact_scan_step(
    parent: &GlmbHypothesis,
    entry: &ScanAssociation,
    z: &[Measurement],
    model: &Model,
) -> Result<GlmbHypothesis> {
    let scan = parent.window().end + 1;
    let predicted = predict_step(parent, &entry.live_labels(), scan, model)?;
    let child = match entry {
        ScanAssociation::Standard(m) => update_step(&predicted, &m.to_plain(), z, model)?,
        ScanAssociation::Merged(a) => update_merged_step(&predicted, a, z, model)?,
    };
    check_replayed_entry(&child, entry)?;
    Ok(child)
}

/// Replay one scan with the product-form route: joint (interacting)
/// prediction projected to per-trajectory marginals, then the per-label
/// update. One scan of the cheap recursion that the sampler weights target.
pub fn pa_scan_step(
    parent: &GlmbHypothesis,
    entry: &ScanAssociation,
    z: &[Measurement],
    model: &Model,
) -> Result<GlmbHypothesis> {
    let scan = parent.window().end + 1;
    let predicted = predict_step(parent, &entry.live_labels(), scan, model)?;
    let projected = project_product_form(&predicted)?;
    let child = match entry {
        ScanAssociation::Standard(m) => update_step(&projected, &m.to_plain(), z, model)?,
        ScanAssociation::Merged(a) => update_merged_step(&projected, a, z, model)?,
    };
    check_replayed_entry(&child, entry)?;
    Ok(child)
}

/// Replay one scan with the standard recursion: independent motion, product
/// form throughout.
pub fn standard_scan_step(
    parent: &GlmbHypothesis,
    entry: &ScanAssociation,
    z: &[Measurement],
    model: &Model,
) -> Result<GlmbHypothesis> {
    let scan = parent.window().end + 1;
    let predicted = standard_predict_step(parent, &entry.live_labels(), scan, model)?;
    let child = match entry {
        ScanAssociation::Standard(m) => update_step(&predicted, &m.to_plain(), z, model)?,
        ScanAssociation::Merged(a) => update_merged_step(&predicted, a, z, model)?,
    };
    check_replayed_entry(&child, entry)?;
    Ok(child)
}

// ---------------------------------------------------------------------------
// Product-form projection
// ---------------------------------------------------------------------------

/// Product-form projection of one hypothesis: the joint is replaced by
/// independent per-trajectory marginals; weight and history are untouched.
pub fn project_product_form(h: &GlmbHypothesis) -> Result<GlmbHypothesis> {
    let mut frozen = h.trajectory_densities.clone();
    if let Some(joint) = &h.joint_density {
        for l in joint.labels().copied().collect::<Vec<_>>() {
            let start = joint.block(&l)?.start_scan;
            frozen.insert(
                l,
                TrajectoryDensity::new(start, STATE_DIM, joint.marginalize_to_label(&l)?)?,
            );
        }
    }
    GlmbHypothesis::new(h.window(), h.history.clone(), h.log_weight, frozen, None)
}

/// Cardinality-matched product-form approximation: each hypothesis keeps its
/// weight and label sets bit for bit, while its joint attribute density is
/// replaced by independent per-trajectory marginals. Minimizes KL divergence
/// among densities with independent trajectories and the same weights.
pub fn approximate_cardinality_matched(pi: &MultiScanGlmb) -> Result<MultiScanGlmb> {
    let mut hypotheses = Vec::with_capacity(pi.hypotheses.len());
    for h in &pi.hypotheses {
        hypotheses.push(project_product_form(h)?);
    }
    let mut out = MultiScanGlmb::new(pi.window, hypotheses)?;
    out.normalized = pi.normalized;
    Ok(out)
}

/// Product-form projection applied right after prediction. Survivor blocks
/// become independent trajectories again; weights and label sets are
/// untouched, so the projection commutes with every label-set statistic.
pub fn approximate_prediction(predicted: &MultiScanGlmb) -> Result<MultiScanGlmb> {
    approximate_cardinality_matched(predicted)
}

// ---------------------------------------------------------------------------
// Exhaustive reference
// ---------------------------------------------------------------------------

/// Exact posterior by exhaustive enumeration over all association histories.
/// Scans must be consecutive and start one past the seed scan. Oracle for
/// small problems; errors with [`Error::SizeCap`] beyond `cap` hypotheses.
pub fn brute_force_posterior(
    model: &Model,
    scans: &[(u32, Vec<Measurement>)],
    cap: usize,
) -> Result<MultiScanGlmb> {
    let first = scans
        .first()
        .ok_or_else(|| Error::InvalidInput("no scans supplied".into()))?;
    let seed = first
        .0
        .checked_sub(1)
        .ok_or_else(|| Error::InvalidInput("scan numbering must start at 1 or later".into()))?;
    let mut capped = model.clone();
    capped.enumeration_cap = capped.enumeration_cap.min(cap);
    let mut pi = empty_posterior(seed);
    for (scan, z) in scans {
        let predicted = predict(&pi, &capped, *scan)?;
        pi = if capped.merged.is_some() {
            update_merged(&predicted, z, &capped)?
        } else {
            update(&predicted, z, &capped)?
        };
        if pi.hypotheses.len() > cap {
            return Err(Error::SizeCap(format!(
                "{} hypotheses exceed cap {cap}",
                pi.hypotheses.len()
            )));
        }
    }
    Ok(pi)
}
