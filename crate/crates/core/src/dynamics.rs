//! Multi-object transition models.
//!
//! Births follow a static LMB model, survival is Bernoulli per object, and
//! surviving objects move under a repulsive social force: each object is
//! pushed away from nearby objects along the gradient of a Gaussian-shaped
//! potential, which couples the objects' predicted densities. Outside the
//! interaction region the motion decouples into exact constant-velocity
//! kinematics, which the predictor exploits as a fast path.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, Vector2};

use crate::densities::{ut_transform, Gaussian, JointTrajectoryDensity, UtOutcome, UtParams};
use crate::rfs::{Label, LabeledState};
use crate::{Error, Result};

/// Kinematic state dimension: [p_x, v_x, p_y, v_y].
pub const STATE_DIM: usize = 4;

// ---------------------------------------------------------------------------
// Birth and survival
// ---------------------------------------------------------------------------

/// One LMB birth component: index i yields label (k, i) at any active scan k.
#[derive(Debug, Clone, PartialEq)]
pub struct BirthComponent {
    pub prob: f64,
    pub density: Gaussian,
}

/// Scans at which the birth model is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BirthSchedule {
    EveryScan,
    ScanOneOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BirthModel {
    components: Vec<BirthComponent>,
    schedule: BirthSchedule,
}

impl BirthModel {
    pub fn new(components: Vec<BirthComponent>, schedule: BirthSchedule) -> Result<Self> {
        for c in &components {
            if !(0.0..=1.0).contains(&c.prob) {
                return Err(Error::InvalidInput(format!(
                    "birth probability {} outside [0,1]",
                    c.prob
                )));
            }
        }
        Ok(Self {
            components,
            schedule,
        })
    }

    pub fn active_at(&self, scan: u32) -> bool {
        match self.schedule {
            BirthSchedule::EveryScan => true,
            BirthSchedule::ScanOneOnly => scan == 1,
        }
    }

    /// Birth labels offered at a scan with their probabilities and densities.
    pub fn births_at(&self, scan: u32) -> Vec<(Label, &BirthComponent)> {
        if !self.active_at(scan) {
            return Vec::new();
        }
        self.components
            .iter()
            .enumerate()
            .map(|(i, c)| (Label::new(scan, i as u32 + 1), c))
            .collect()
    }

    pub fn components(&self) -> &[BirthComponent] {
        &self.components
    }
}

/// Bernoulli survival, constant across states.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SurvivalModel {
    p_s: f64,
}

impl SurvivalModel {
    pub fn new(p_s: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_s) {
            return Err(Error::InvalidInput(format!(
                "survival probability {p_s} outside [0,1]"
            )));
        }
        Ok(Self { p_s })
    }

    pub fn prob(&self) -> f64 {
        self.p_s
    }
}

// ---------------------------------------------------------------------------
// Social force
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SocialForceParams {
    /// Repulsive potential strength V (m² s⁻²).
    pub v: f64,
    /// Interaction range α (m).
    pub alpha: f64,
    /// Sample period Δt (s).
    pub dt: f64,
    /// Pairs further apart than this move independently (m).
    pub interaction_radius: f64,
    /// Process noise σ_v (per state component).
    pub process_noise_sigma: f64,
    /// Fixed RK4 substeps per sample period.
    pub substeps: usize,
}

impl SocialForceParams {
    pub fn new(
        v: f64,
        alpha: f64,
        dt: f64,
        interaction_radius: f64,
        process_noise_sigma: f64,
        substeps: usize,
    ) -> Result<Self> {
        if v < 0.0 || !(alpha > 0.0) || !(dt > 0.0) || substeps == 0 {
            return Err(Error::InvalidInput(
                "social force parameters require V >= 0, alpha > 0, dt > 0, substeps >= 1".into(),
            ));
        }
        Ok(Self {
            v,
            alpha,
            dt,
            interaction_radius,
            process_noise_sigma,
            substeps,
        })
    }

    /// Per-object process noise Q = σ_v² I₄.
    pub fn process_noise(&self) -> DMatrix<f64> {
        let s2 = self.process_noise_sigma * self.process_noise_sigma;
        DMatrix::identity(STATE_DIM, STATE_DIM) * s2
    }
}

/// Repulsive force on a subject from one other object: the negative gradient
/// of V·exp(−b/2α²) in the relative position, with
/// b = ‖p_rel − Δt·v_other‖².
pub fn repulsive_force(
    p_rel: &Vector2<f64>,
    v_other: &Vector2<f64>,
    params: &SocialForceParams,
) -> Vector2<f64> {
    let d = p_rel - params.dt * v_other;
    let b = d.norm_squared();
    let a2 = params.alpha * params.alpha;
    (params.v / a2) * d * (-b / (2.0 * a2)).exp()
}

/// Total force on `subject`: sum of pairwise repulsions from all other
/// objects within the interaction radius.
pub fn total_force(
    subject: &Label,
    states: &[LabeledState],
    params: &SocialForceParams,
) -> Result<Vector2<f64>> {
    let me = states
        .iter()
        .find(|s| s.label == *subject)
        .ok_or_else(|| Error::InvalidInput(format!("subject {subject} not among states")))?;
    let p_me = Vector2::new(me.attribute[0], me.attribute[2]);
    let mut f = Vector2::zeros();
    for other in states {
        if other.label == *subject {
            continue;
        }
        let p_o = Vector2::new(other.attribute[0], other.attribute[2]);
        if (p_me - p_o).norm() > params.interaction_radius {
            continue;
        }
        let v_o = Vector2::new(other.attribute[1], other.attribute[3]);
        f += repulsive_force(&(p_me - p_o), &v_o, params);
    }
    Ok(f)
}

/// Integrates one sample period of the interacting kinematics with
/// fixed-step RK4. Inside b(·), the other objects' velocities stay frozen at
/// their scan-start values (explicit scheme matching the discrete force
/// definition); positions evolve continuously and the pair gate is evaluated
/// at the current positions.
pub fn social_force_predict(
    states: &[LabeledState],
    params: &SocialForceParams,
) -> Result<Vec<LabeledState>> {
    let n = states.len();
    {
        let mut seen = BTreeSet::new();
        for s in states {
            if !seen.insert(s.label) {
                return Err(Error::InvalidInput(format!("duplicate label {}", s.label)));
            }
            if s.attribute.len() != STATE_DIM {
                return Err(Error::InvalidInput("state dimension must be 4".into()));
            }
        }
    }
    // Stacked [px, vx, py, vy] per object.
    let mut y = DVector::zeros(n * STATE_DIM);
    for (i, s) in states.iter().enumerate() {
        y.rows_mut(i * STATE_DIM, STATE_DIM).copy_from(&s.attribute);
    }
    let v0: Vec<Vector2<f64>> = states
        .iter()
        .map(|s| Vector2::new(s.attribute[1], s.attribute[3]))
        .collect();

    let gate2 = params.interaction_radius * params.interaction_radius;
    let a2 = params.alpha * params.alpha;
    let scale = params.v / a2;
    let deriv = |y: &DVector<f64>, dy: &mut DVector<f64>| {
        for i in 0..n {
            let o = i * STATE_DIM;
            dy[o] = y[o + 1];
            dy[o + 2] = y[o + 3];
            let p_i = Vector2::new(y[o], y[o + 2]);
            let mut f = Vector2::zeros();
            if params.v > 0.0 {
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let oj = j * STATE_DIM;
                    let p_rel = p_i - Vector2::new(y[oj], y[oj + 2]);
                    if p_rel.norm_squared() > gate2 {
                        continue;
                    }
                    let d = p_rel - params.dt * v0[j];
                    f += scale * d * (-d.norm_squared() / (2.0 * a2)).exp();
                }
            }
            dy[o + 1] = f.x;
            dy[o + 3] = f.y;
        }
    };

    let h = params.dt / params.substeps as f64;
    let dim = n * STATE_DIM;
    let (mut k1, mut k2, mut k3, mut k4) = (
        DVector::zeros(dim),
        DVector::zeros(dim),
        DVector::zeros(dim),
        DVector::zeros(dim),
    );
    for _ in 0..params.substeps {
        deriv(&y, &mut k1);
        deriv(&(&y + (h / 2.0) * &k1), &mut k2);
        deriv(&(&y + (h / 2.0) * &k2), &mut k3);
        deriv(&(&y + h * &k3), &mut k4);
        y += (h / 6.0) * (&k1 + 2.0 * &k2 + 2.0 * &k3 + &k4);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite state during integration".into()));
        }
    }

    Ok(states
        .iter()
        .enumerate()
        .map(|(i, s)| LabeledState {
            attribute: y.rows(i * STATE_DIM, STATE_DIM).into_owned(),
            label: s.label,
        })
        .collect())
}

/// Block-diagonal constant-velocity transition for `n` objects.
pub fn cv_transition(n: usize, dt: f64) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n * STATE_DIM, n * STATE_DIM);
    for i in 0..n {
        let o = i * STATE_DIM;
        a[(o, o)] = 1.0;
        a[(o, o + 1)] = dt;
        a[(o + 1, o + 1)] = 1.0;
        a[(o + 2, o + 2)] = 1.0;
        a[(o + 2, o + 3)] = dt;
        a[(o + 3, o + 3)] = 1.0;
    }
    a
}

/// True when no pair of the listed labels can come within the interaction
/// radius during one sample period, accounting for sigma-point spread, so
/// the force is exactly zero along every propagated trajectory and the
/// prediction is exactly affine.
pub fn interaction_free(
    current: &Gaussian,
    n_objects: usize,
    params: &SocialForceParams,
    ut: &UtParams,
) -> bool {
    if params.v == 0.0 {
        return true;
    }
    let d = current.dim();
    // Sigma-point displacement along any axis is bounded by
    // sqrt((d + lambda) * lambda_max) <= sqrt((d + lambda) * trace).
    let kappa = ut.kappa.unwrap_or(3.0 - d as f64);
    let d_lambda = ut.alpha * ut.alpha * (d as f64 + kappa);
    if d_lambda <= 0.0 {
        return false;
    }
    let spread = (d_lambda * current.cov().trace()).sqrt();
    for i in 0..n_objects {
        for j in (i + 1)..n_objects {
            let (oi, oj) = (i * STATE_DIM, j * STATE_DIM);
            let p_i = Vector2::new(current.mean()[oi], current.mean()[oi + 2]);
            let p_j = Vector2::new(current.mean()[oj], current.mean()[oj + 2]);
            let v_i = Vector2::new(current.mean()[oi + 1], current.mean()[oi + 3]);
            let v_j = Vector2::new(current.mean()[oj + 1], current.mean()[oj + 3]);
            // Conservative closest approach: current gap shrunk by the full
            // relative motion over dt plus sigma spread of positions and
            // velocity-driven spread.
            let gap = (p_i - p_j).norm();
            let motion = (v_i - v_j).norm() * params.dt;
            let margin = 2.0 * spread * (1.0 + params.dt);
            if gap - motion - margin <= params.interaction_radius {
                return false;
            }
        }
    }
    true
}

/// Appends one predicted scan for `surviving` to the joint density: the
/// stacked current-scan marginal is pushed through the social-force map via
/// the unscented transform (exact affine propagation when no interaction is
/// possible), per-object process noise added, and the joint completed with
/// the implied cross-covariances. All surviving labels must share their
/// current scan; other labels are untouched.
pub fn joint_transition_predict(
    joint: &JointTrajectoryDensity,
    surviving: &BTreeSet<Label>,
    params: &SocialForceParams,
    ut: &UtParams,
) -> Result<JointTrajectoryDensity> {
    if surviving.is_empty() {
        return Ok(joint.clone());
    }
    let labels: Vec<Label> = surviving.iter().copied().collect();
    let mut last = None;
    for l in &labels {
        let s = joint.last_scan(l)?;
        if *last.get_or_insert(s) != s {
            return Err(Error::InvalidInput(
                "surviving labels must share their current scan".into(),
            ));
        }
    }
    let new_scan = last.expect("nonempty survivors") + 1;
    let (current, idx) = joint.current_scan_marginal(&labels)?;
    let n = labels.len();

    let q = {
        let mut q = DMatrix::zeros(n * STATE_DIM, n * STATE_DIM);
        let per = params.process_noise();
        for i in 0..n {
            q.view_mut((i * STATE_DIM, i * STATE_DIM), (STATE_DIM, STATE_DIM))
                .copy_from(&per);
        }
        q
    };

    let outcome = if interaction_free(&current, n, params, ut) {
        let a = cv_transition(n, params.dt);
        let mean = &a * current.mean();
        let cov = &a * current.cov() * a.transpose() + &q;
        UtOutcome {
            out: Gaussian::new(mean, cov)?,
            cross: current.cov() * a.transpose(),
        }
    } else {
        let labels_for_map = labels.clone();
        let map = move |x: &DVector<f64>| {
            let states: Vec<LabeledState> = labels_for_map
                .iter()
                .enumerate()
                .map(|(i, l)| LabeledState {
                    attribute: x.rows(i * STATE_DIM, STATE_DIM).into_owned(),
                    label: *l,
                })
                .collect();
            let predicted = social_force_predict(&states, params)
                .expect("finite sigma-point propagation");
            let mut out = DVector::zeros(x.len());
            for (i, s) in predicted.iter().enumerate() {
                out.rows_mut(i * STATE_DIM, STATE_DIM).copy_from(&s.attribute);
            }
            out
        };
        let mut o = ut_transform(&current, &map, &[], ut)?;
        o.out = Gaussian::new(o.out.mean().clone(), o.out.cov() + &q)?;
        o
    };

    let mut extended = joint.clone();
    extended.extend_scan(&labels, new_scan, &outcome, &idx)?;
    Ok(extended)
}

/// Transition weight η for a label-set succession: birth factors over the
/// scan's birth labels times survive/die factors over the previous labels.
/// Zero when `next` contains a label that is neither previous nor born now.
pub fn transition_weight(
    prev: &BTreeSet<Label>,
    next: &BTreeSet<Label>,
    scan: u32,
    birth: &BirthModel,
    survival: &SurvivalModel,
) -> f64 {
    log_transition_weight(prev, next, scan, birth, survival).exp()
}

/// Log-domain transition weight; −∞ for inadmissible successions.
pub fn log_transition_weight(
    prev: &BTreeSet<Label>,
    next: &BTreeSet<Label>,
    scan: u32,
    birth: &BirthModel,
    survival: &SurvivalModel,
) -> f64 {
    let births = birth.births_at(scan);
    let birth_labels: BTreeSet<Label> = births.iter().map(|(l, _)| *l).collect();
    for l in next {
        if !prev.contains(l) && !birth_labels.contains(l) {
            return f64::NEG_INFINITY;
        }
    }
    let mut log_w = 0.0;
    for (l, c) in &births {
        log_w += if next.contains(l) {
            c.prob.ln()
        } else {
            (1.0 - c.prob).ln()
        };
    }
    for l in prev {
        log_w += if next.contains(l) {
            survival.prob().ln()
        } else {
            (1.0 - survival.prob()).ln()
        };
    }
    log_w
}
