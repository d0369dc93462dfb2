//! Reference scenario plumbing: configuration, ground truth, measurement
//! simulation, Monte Carlo orchestration, and artifact emission.
//!
//! Configuration is TOML with units spelled in the key names. Every field
//! has a default carrying the reference experiment parameters, so the empty
//! string parses to the standard interacting scenario: four objects born at
//! the first scan, social-force motion, a static bearing-range sensor, and
//! the overlapping-window sampled smoother. [`ScenarioConfig::merged_reference`]
//! is the companion preset with cell-merged bearings from a moving sensor.
//!
//! Ground truth is noiseless by default (`truth_process_noise` switches the
//! per-scan state noise on). Runs are seeded from one master seed, so a
//! report is reproducible byte for byte with one deliberate exception: wall
//! clock timings live in their own file, `timing.tsv`, and every other
//! artifact is bit-identical across replays of the same config.
//!
//! Artifacts are tab-separated decimal text with one header row:
//!
//! | file               | columns                                           |
//! |--------------------|---------------------------------------------------|
//! | `config.toml`      | the parsed config, re-serialized                  |
//! | `runs.tsv`         | run, seed, status, windows, dropped, mass, message|
//! | `windows.tsv`      | run, start, split, end, hypotheses, dropped, mass |
//! | `metrics.tsv`      | run, scan, counts, OSPA, OSPA²                    |
//! | `trajectories.tsv` | series, run, label, scan, x, y                    |
//! | `errors.tsv`       | scan, mean OSPA, mean OSPA²                       |
//! | `timing.tsv`       | run, scope, seconds                               |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::densities::{Gaussian, UtParams};
use crate::dynamics::{
    social_force_predict, BirthComponent, BirthModel, BirthSchedule, SocialForceParams,
    SurvivalModel, STATE_DIM,
};
use crate::measurement::{
    simulate_merged_measurements, simulate_standard_measurements, CellPartition, ClutterModel,
    ClutterRegion, Measurement, SensorModel,
};
use crate::metrics::{ospa, ospa2, planar, OspaParams};
use crate::model::{MergedConfig, Model};
use crate::rfs::{
    Label, LabeledState, MultiObjectTrajectory, TrajectoryAttributes, TrajectorySegment,
};
use crate::smoothing::{overlapping_sw, SmootherConfig, Strategy, WindowPlan, WindowReport};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Birth model: shared inclusion probability and per-axis spread, one mean
/// state `[px m, vx m/s, py m, vy m/s]` per component.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BirthSection {
    pub probability: f64,
    pub schedule: BirthSchedule,
    pub mean_states_m_mps: Vec<[f64; 4]>,
    pub stddev_m_mps: [f64; 4],
}

impl Default for BirthSection {
    fn default() -> Self {
        BirthSection {
            probability: 0.01,
            schedule: BirthSchedule::EveryScan,
            mean_states_m_mps: vec![
                [-500.0, 10.0, 0.0, 10.0],
                [500.0, -10.0, 0.0, 10.0],
                [-750.0, 15.0, 0.0, 10.0],
                [750.0, -15.0, 0.0, 10.0],
            ],
            stddev_m_mps: [10.0, 10.0, 10.0, 10.0],
        }
    }
}

/// Interacting kinematics and survival.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionSection {
    pub repulsion_strength_m2ps2: f64,
    pub repulsion_range_m: f64,
    pub sample_period_s: f64,
    pub interaction_radius_m: f64,
    pub process_noise_sigma_mps2: f64,
    pub integrator_substeps: usize,
    pub survival_probability: f64,
}

impl Default for MotionSection {
    fn default() -> Self {
        MotionSection {
            repulsion_strength_m2ps2: 550.0,
            repulsion_range_m: 30.0,
            sample_period_s: 1.0,
            interaction_radius_m: 50.0,
            process_noise_sigma_mps2: 1.0,
            integrator_substeps: 10,
            survival_probability: 0.99,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensorKind {
    BearingRangeStatic,
    BearingOnlyMoving,
    PlanarPosition,
}

/// Sensor kind plus noise; only the fields the kind uses matter.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorSection {
    pub kind: SensorKind,
    pub bearing_noise_rad: f64,
    pub range_noise_m: f64,
    pub position_noise_m: f64,
    pub detection_probability: f64,
}

impl Default for SensorSection {
    fn default() -> Self {
        SensorSection {
            kind: SensorKind::BearingRangeStatic,
            bearing_noise_rad: 2.0 * std::f64::consts::PI / 180.0,
            range_noise_m: 10.0,
            position_noise_m: 3.0,
            detection_probability: 0.7,
        }
    }
}

/// Poisson clutter; the region extent matching the sensor kind applies.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClutterSection {
    pub rate_per_scan: f64,
    pub max_range_m: f64,
    pub half_width_m: f64,
}

impl Default for ClutterSection {
    fn default() -> Self {
        ClutterSection {
            rate_per_scan: 10.0,
            max_range_m: 2000.0,
            half_width_m: 1000.0,
        }
    }
}

/// Cell-merged detection handling; presence of this section switches the
/// measurement model (and requires the moving bearing-only sensor).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergedSection {
    pub cell_width_rad: f64,
    pub gate_cell_widths: f64,
    pub partition_cap: usize,
}

impl Default for MergedSection {
    fn default() -> Self {
        MergedSection {
            cell_width_rad: 2.0 * std::f64::consts::PI / 180.0,
            gate_cell_widths: 3.0,
            partition_cap: 8,
        }
    }
}

/// Sampled smoother knobs; `window_overlap_scans = 0` commits windows whole.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmootherSection {
    pub strategy: Strategy,
    pub max_hypotheses: usize,
    pub chain_sweeps: usize,
    pub sample_budget: usize,
    pub weight_floor: f64,
    pub window_length_scans: u32,
    pub window_overlap_scans: u32,
}

impl Default for SmootherSection {
    fn default() -> Self {
        SmootherSection {
            strategy: Strategy::SfaThenUa,
            max_hypotheses: 1000,
            chain_sweeps: 10,
            sample_budget: 1000,
            weight_floor: 1e-5,
            window_length_scans: 10,
            window_overlap_scans: 5,
        }
    }
}

/// Evaluation metric parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub cutoff_m: f64,
    pub order: f64,
    pub window_scans: u32,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            cutoff_m: 100.0,
            order: 1.0,
            window_scans: 10,
        }
    }
}

/// Complete experiment description. `Default` is the standard interacting
/// reference scenario; every field can be overridden from TOML.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub duration_scans: u32,
    pub monte_carlo_runs: usize,
    pub rng_seed: u64,
    /// Adds per-scan state noise to the generated truth.
    pub truth_process_noise: bool,
    /// Worker threads for the Monte Carlo loop; 0 picks the default.
    pub threads: usize,
    pub birth: BirthSection,
    pub motion: MotionSection,
    pub sensor: SensorSection,
    pub clutter: ClutterSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merged: Option<MergedSection>,
    pub smoother: SmootherSection,
    pub metrics: MetricsSection,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            duration_scans: 100,
            monte_carlo_runs: 100,
            rng_seed: 1,
            truth_process_noise: false,
            threads: 0,
            birth: BirthSection::default(),
            motion: MotionSection::default(),
            sensor: SensorSection::default(),
            clutter: ClutterSection::default(),
            merged: None,
            smoother: SmootherSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

impl ScenarioConfig {
    /// Cell-merged bearings from the moving sensor; births at the first scan
    /// only, whole 5-scan windows.
    pub fn merged_reference() -> Self {
        let mut c = ScenarioConfig::default();
        c.birth.schedule = BirthSchedule::ScanOneOnly;
        c.sensor.kind = SensorKind::BearingOnlyMoving;
        c.sensor.bearing_noise_rad = std::f64::consts::PI / 180.0;
        c.clutter.rate_per_scan = 0.3;
        c.merged = Some(MergedSection::default());
        c.smoother.max_hypotheses = 10_000;
        c.smoother.sample_budget = 10_000;
        c.smoother.window_length_scans = 5;
        c.smoother.window_overlap_scans = 0;
        c
    }

    /// Standard scenario sized for a desk run: full 100 scans, 10 Monte
    /// Carlo runs, 200 hypotheses.
    pub fn reference_desk() -> Self {
        let mut c = ScenarioConfig::default();
        c.monte_carlo_runs = 10;
        c.rng_seed = 11;
        c.smoother.max_hypotheses = 200;
        c.smoother.sample_budget = 200;
        c
    }

    /// Merged scenario sized for a desk run.
    pub fn merged_desk() -> Self {
        let mut c = ScenarioConfig::merged_reference();
        c.duration_scans = 40;
        c.monte_carlo_runs = 3;
        c.rng_seed = 7;
        c.smoother.max_hypotheses = 100;
        c.smoother.sample_budget = 100;
        c
    }

    /// First invariant violation as (offending key, message), if any.
    fn first_violation(&self) -> Option<(&'static str, String)> {
        if self.duration_scans == 0 {
            return Some(("duration_scans", "a run needs at least one scan".into()));
        }
        if self.monte_carlo_runs == 0 {
            return Some(("monte_carlo_runs", "at least one run".into()));
        }
        let b = &self.birth;
        if b.mean_states_m_mps.is_empty() {
            return Some(("mean_states_m_mps", "at least one birth component".into()));
        }
        if !(0.0..=1.0).contains(&b.probability) {
            return Some(("probability", format!("{} outside [0,1]", b.probability)));
        }
        if b.stddev_m_mps.iter().any(|s| !(*s > 0.0)) {
            return Some(("stddev_m_mps", "spreads must be positive".into()));
        }
        let m = &self.motion;
        if m.repulsion_strength_m2ps2 < 0.0 {
            return Some(("repulsion_strength_m2ps2", "must be non-negative".into()));
        }
        if !(m.repulsion_range_m > 0.0) {
            return Some(("repulsion_range_m", "must be positive".into()));
        }
        if !(m.sample_period_s > 0.0) {
            return Some(("sample_period_s", "must be positive".into()));
        }
        if m.interaction_radius_m < 0.0 {
            return Some(("interaction_radius_m", "must be non-negative".into()));
        }
        if m.process_noise_sigma_mps2 < 0.0 {
            return Some(("process_noise_sigma_mps2", "must be non-negative".into()));
        }
        if m.integrator_substeps == 0 {
            return Some(("integrator_substeps", "at least one substep".into()));
        }
        if !(0.0..=1.0).contains(&m.survival_probability) {
            return Some((
                "survival_probability",
                format!("{} outside [0,1]", m.survival_probability),
            ));
        }
        let s = &self.sensor;
        if !(0.0..=1.0).contains(&s.detection_probability) {
            return Some((
                "detection_probability",
                format!("{} outside [0,1]", s.detection_probability),
            ));
        }
        match s.kind {
            SensorKind::BearingRangeStatic => {
                if !(s.bearing_noise_rad > 0.0) {
                    return Some(("bearing_noise_rad", "must be positive".into()));
                }
                if !(s.range_noise_m > 0.0) {
                    return Some(("range_noise_m", "must be positive".into()));
                }
            }
            SensorKind::BearingOnlyMoving => {
                if !(s.bearing_noise_rad > 0.0) {
                    return Some(("bearing_noise_rad", "must be positive".into()));
                }
            }
            SensorKind::PlanarPosition => {
                if !(s.position_noise_m > 0.0) {
                    return Some(("position_noise_m", "must be positive".into()));
                }
            }
        }
        let c = &self.clutter;
        if c.rate_per_scan < 0.0 {
            return Some(("rate_per_scan", "must be non-negative".into()));
        }
        match s.kind {
            SensorKind::BearingRangeStatic if !(c.max_range_m > 0.0) => {
                return Some(("max_range_m", "must be positive".into()));
            }
            SensorKind::PlanarPosition if !(c.half_width_m > 0.0) => {
                return Some(("half_width_m", "must be positive".into()));
            }
            _ => {}
        }
        if let Some(g) = &self.merged {
            if s.kind != SensorKind::BearingOnlyMoving {
                return Some((
                    "kind",
                    "merged cells require the moving bearing-only sensor".into(),
                ));
            }
            if let Err(e) = CellPartition::new(g.cell_width_rad) {
                return Some(("cell_width_rad", e.to_string()));
            }
            if g.gate_cell_widths < 0.0 {
                return Some(("gate_cell_widths", "must be non-negative".into()));
            }
            if g.partition_cap == 0 {
                return Some(("partition_cap", "at least one object per group".into()));
            }
        }
        let w = &self.smoother;
        if w.max_hypotheses == 0 {
            return Some(("max_hypotheses", "keep at least one hypothesis".into()));
        }
        if w.chain_sweeps == 0 {
            return Some(("chain_sweeps", "at least one sweep".into()));
        }
        if w.sample_budget == 0 {
            return Some(("sample_budget", "at least one draw per scan".into()));
        }
        if !(0.0..1.0).contains(&w.weight_floor) {
            return Some(("weight_floor", format!("{} outside [0,1)", w.weight_floor)));
        }
        if w.window_length_scans == 0 {
            return Some(("window_length_scans", "windows need at least one scan".into()));
        }
        if let Err(e) = self.plan() {
            return Some(("window_overlap_scans", e.to_string()));
        }
        let p = &self.metrics;
        if !(p.cutoff_m > 0.0) || !p.cutoff_m.is_finite() {
            return Some(("cutoff_m", "must be positive and finite".into()));
        }
        if !(p.order >= 1.0) || !p.order.is_finite() {
            return Some(("order", "must be at least 1".into()));
        }
        if p.window_scans == 0 {
            return Some(("window_scans", "at least one scan".into()));
        }
        None
    }

    /// Ok when every section satisfies the invariants of the module it
    /// configures.
    pub fn validate(&self) -> Result<()> {
        match self.first_violation() {
            Some((key, msg)) => Err(Error::InvalidInput(format!("{key}: {msg}"))),
            None => Ok(()),
        }
    }

    /// Assembles the full multi-object model.
    pub fn model(&self) -> Result<Model> {
        self.validate()?;
        let cov_diag: Vec<f64> = self.birth.stddev_m_mps.iter().map(|s| s * s).collect();
        let cov = nalgebra::DMatrix::from_diagonal(&DVector::from_vec(cov_diag));
        let components = self
            .birth
            .mean_states_m_mps
            .iter()
            .map(|m| {
                Ok(BirthComponent {
                    prob: self.birth.probability,
                    density: Gaussian::new(DVector::from_row_slice(m), cov.clone())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let birth = BirthModel::new(components, self.birth.schedule)?;
        let survival = SurvivalModel::new(self.motion.survival_probability)?;
        let force = self.force_params()?;
        let sensor = match self.sensor.kind {
            SensorKind::BearingRangeStatic => SensorModel::BearingRangeStatic {
                sigma_bearing: self.sensor.bearing_noise_rad,
                sigma_range: self.sensor.range_noise_m,
            },
            SensorKind::BearingOnlyMoving => SensorModel::BearingOnlyMoving {
                sigma_bearing: self.sensor.bearing_noise_rad,
            },
            SensorKind::PlanarPosition => SensorModel::PlanarPosition {
                sigma: self.sensor.position_noise_m,
            },
        };
        let region = match self.sensor.kind {
            SensorKind::BearingRangeStatic => ClutterRegion::BearingRange {
                max_range: self.clutter.max_range_m,
            },
            SensorKind::BearingOnlyMoving => ClutterRegion::Bearing,
            SensorKind::PlanarPosition => ClutterRegion::Rect {
                half_width: self.clutter.half_width_m,
            },
        };
        let clutter = ClutterModel {
            rate: self.clutter.rate_per_scan,
            region,
        };
        let merged = match &self.merged {
            Some(g) => Some(MergedConfig {
                cells: CellPartition::new(g.cell_width_rad)?,
                gate_cell_widths: g.gate_cell_widths,
                partition_cap: g.partition_cap,
            }),
            None => None,
        };
        Model::new(
            birth,
            survival,
            force,
            sensor,
            clutter,
            self.sensor.detection_probability,
            UtParams::default(),
            merged,
        )
    }

    fn force_params(&self) -> Result<SocialForceParams> {
        let m = &self.motion;
        SocialForceParams::new(
            m.repulsion_strength_m2ps2,
            m.repulsion_range_m,
            m.sample_period_s,
            m.interaction_radius_m,
            m.process_noise_sigma_mps2,
            m.integrator_substeps,
        )
    }

    fn plan(&self) -> Result<WindowPlan> {
        let w = &self.smoother;
        if w.window_length_scans >= self.duration_scans {
            WindowPlan::single(self.duration_scans)
        } else if w.window_overlap_scans == 0 {
            WindowPlan::non_overlapping(self.duration_scans, w.window_length_scans)
        } else {
            WindowPlan::overlapping(
                self.duration_scans,
                w.window_length_scans,
                w.window_overlap_scans,
            )
        }
    }

    /// Assembles the smoother configuration, window plan included.
    pub fn smoother(&self) -> Result<SmootherConfig> {
        self.validate()?;
        let w = &self.smoother;
        SmootherConfig::new(
            w.max_hypotheses,
            w.chain_sweeps,
            w.sample_budget,
            w.weight_floor,
            w.strategy,
            self.plan()?,
        )
    }

    pub fn metric_params(&self) -> Result<OspaParams> {
        OspaParams::new(
            self.metrics.cutoff_m,
            self.metrics.order,
            self.metrics.window_scans,
        )
    }
}

/// Line number (1-based) of the first line assigning `key`.
fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let t = l.trim_start();
            t.starts_with(key) && t[key.len()..].trim_start().starts_with('=')
        })
        .map(|i| i + 1)
}

/// Parses and validates a config, pointing diagnostics at the offending
/// line where one can be identified.
pub fn from_toml(text: &str) -> Result<ScenarioConfig> {
    let config: ScenarioConfig =
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if let Some((key, msg)) = config.first_violation() {
        let at = key_line(text, key)
            .map(|n| format!("line {n}: "))
            .unwrap_or_default();
        return Err(Error::Parse(format!("{at}{key}: {msg}")));
    }
    Ok(config)
}

pub fn to_toml(config: &ScenarioConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| Error::Parse(e.to_string()))
}

// ---------------------------------------------------------------------------
// Ground truth and measurements
// ---------------------------------------------------------------------------

/// Generates the true trajectories: one object per birth component, born at
/// scan 1 exactly at its mean, propagated through the interacting kinematics
/// for the whole duration. Noiseless unless `truth_process_noise` is set, in
/// which case each propagated state receives independent per-component
/// noise. Deterministic given the rng state either way.
pub fn generate_truth<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    rng: &mut R,
) -> Result<MultiObjectTrajectory> {
    config.validate()?;
    let force = config.force_params()?;
    let mut states: Vec<LabeledState> = config
        .birth
        .mean_states_m_mps
        .iter()
        .enumerate()
        .map(|(i, m)| LabeledState {
            attribute: DVector::from_row_slice(m),
            label: Label::new(1, i as u32),
        })
        .collect();
    let mut tracks: Vec<Vec<DVector<f64>>> =
        states.iter().map(|s| vec![s.attribute.clone()]).collect();
    let noise = Normal::new(0.0, config.motion.process_noise_sigma_mps2)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    for _ in 2..=config.duration_scans {
        states = social_force_predict(&states, &force)?;
        if config.truth_process_noise {
            for s in &mut states {
                for c in 0..STATE_DIM {
                    s.attribute[c] += noise.sample(rng);
                }
            }
        }
        for (i, s) in states.iter().enumerate() {
            tracks[i].push(s.attribute.clone());
        }
    }
    states
        .iter()
        .zip(tracks)
        .map(|(s, t)| TrajectorySegment::new(s.label, 1, TrajectoryAttributes::Concrete(t)))
        .collect()
}

/// One measurement realization per scan: standard detections or cell-merged
/// bearings depending on the model, plus clutter.
pub fn simulate_measurements<R: Rng + ?Sized>(
    truth: &[TrajectorySegment],
    model: &Model,
    duration: u32,
    rng: &mut R,
) -> Vec<(u32, Vec<Measurement>)> {
    (1..=duration)
        .map(|scan| {
            let states: Vec<LabeledState> = truth
                .iter()
                .filter_map(|t| {
                    t.attribute_at(scan).map(|a| LabeledState {
                        attribute: a.clone(),
                        label: t.label,
                    })
                })
                .collect();
            let zs = match &model.merged {
                Some(g) => simulate_merged_measurements(
                    &states,
                    &model.sensor,
                    &g.cells,
                    scan,
                    &model.clutter,
                    model.p_d,
                    rng,
                ),
                None => simulate_standard_measurements(
                    &states,
                    &model.sensor,
                    scan,
                    &model.clutter,
                    model.p_d,
                    rng,
                ),
            };
            (scan, zs)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Monte Carlo experiment
// ---------------------------------------------------------------------------

/// Per-scan evaluation of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub scan: u32,
    pub truth_count: usize,
    pub estimate_count: usize,
    pub ospa_m: f64,
    pub ospa2_m: f64,
}

/// One completed Monte Carlo run.
#[derive(Debug)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub estimates: MultiObjectTrajectory,
    /// Exactly one record per scan.
    pub per_scan: Vec<ScanRecord>,
    pub windows: Vec<WindowReport>,
    pub seconds: f64,
}

/// A run that errored; the experiment continues without it.
#[derive(Debug, Clone, PartialEq)]
pub struct FailedRun {
    pub run: usize,
    pub seed: u64,
    pub message: String,
}

/// Everything an experiment produced: the evaluated runs in index order,
/// recorded failures, and per-scan error curves averaged over the completed
/// runs (empty when none completed).
#[derive(Debug)]
pub struct RunReport {
    pub config: ScenarioConfig,
    /// Truth of the first run's seed (shared by all runs when noiseless).
    pub truth: MultiObjectTrajectory,
    pub runs: Vec<RunRecord>,
    pub failures: Vec<FailedRun>,
    pub mean_ospa_per_scan: Vec<f64>,
    pub mean_ospa2_per_scan: Vec<f64>,
}

impl RunReport {
    pub fn all_runs_completed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Per-scan OSPA and OSPA² of one estimate set against truth.
pub fn scan_metrics(
    estimates: &MultiObjectTrajectory,
    truth: &MultiObjectTrajectory,
    params: &OspaParams,
    duration: u32,
) -> Vec<ScanRecord> {
    let live = |set: &MultiObjectTrajectory, scan: u32| -> Vec<DVector<f64>> {
        set.iter()
            .filter_map(|t| t.attribute_at(scan).cloned())
            .collect()
    };
    (1..=duration)
        .map(|scan| {
            let xs = live(estimates, scan);
            let ys = live(truth, scan);
            ScanRecord {
                scan,
                truth_count: ys.len(),
                estimate_count: xs.len(),
                ospa_m: ospa(&xs, &ys, params),
                ospa2_m: ospa2(estimates, truth, params, scan),
            }
        })
        .collect()
}

fn run_single(
    run: usize,
    seed: u64,
    config: &ScenarioConfig,
    model: &Model,
    smoother: &SmootherConfig,
    params: &OspaParams,
) -> Result<RunRecord> {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let truth = generate_truth(config, &mut rng)?;
    let scans = simulate_measurements(&truth, model, config.duration_scans, &mut rng);
    let out = overlapping_sw(&scans, model, smoother, &mut rng)?;
    let per_scan = scan_metrics(&out.trajectories, &truth, params, config.duration_scans);
    Ok(RunRecord {
        run,
        seed,
        estimates: out.trajectories,
        per_scan,
        windows: out.windows,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Splits run outcomes into completed runs and failures, both in run order,
/// and averages the error curves over the completed runs.
fn aggregate(
    config: &ScenarioConfig,
    truth: MultiObjectTrajectory,
    outcomes: Vec<(usize, u64, Result<RunRecord>)>,
) -> RunReport {
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (run, seed, outcome) in outcomes {
        match outcome {
            Ok(rec) => runs.push(rec),
            Err(e) => failures.push(FailedRun {
                run,
                seed,
                message: e.to_string(),
            }),
        }
    }
    let n = config.duration_scans as usize;
    let (mut mean1, mut mean2) = if runs.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        (vec![0.0; n], vec![0.0; n])
    };
    for rec in &runs {
        for (i, s) in rec.per_scan.iter().enumerate() {
            mean1[i] += s.ospa_m / runs.len() as f64;
            mean2[i] += s.ospa2_m / runs.len() as f64;
        }
    }
    RunReport {
        config: config.clone(),
        truth,
        runs,
        failures,
        mean_ospa_per_scan: mean1,
        mean_ospa2_per_scan: mean2,
    }
}

/// Runs the Monte Carlo experiment: per-run seeds drawn from the master
/// seed, runs in parallel across the configured thread budget, each run
/// simulating truth and measurements, tracking, and scoring. Failed runs are
/// recorded and skipped. Deterministic given the config.
pub fn run_experiment(config: &ScenarioConfig) -> Result<RunReport> {
    config.validate()?;
    let model = config.model()?;
    let smoother = config.smoother()?;
    let params = config.metric_params()?;
    let mut master = ChaCha12Rng::seed_from_u64(config.rng_seed);
    let seeds: Vec<u64> = (0..config.monte_carlo_runs).map(|_| master.random()).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let outcomes: Vec<(usize, u64, Result<RunRecord>)> = pool.install(|| {
        seeds
            .par_iter()
            .enumerate()
            .map(|(run, &seed)| {
                (
                    run,
                    seed,
                    run_single(run, seed, config, &model, &smoother, &params),
                )
            })
            .collect()
    });
    let truth = generate_truth(config, &mut ChaCha12Rng::seed_from_u64(seeds[0]))?;
    Ok(aggregate(config, truth, outcomes))
}

// ---------------------------------------------------------------------------
// Track identity
// ---------------------------------------------------------------------------

/// Label of the true object nearest to `pos` at `scan`, within `gate_m`.
fn nearest_truth(
    truth: &[TrajectorySegment],
    scan: u32,
    pos: (f64, f64),
    gate_m: f64,
) -> Option<Label> {
    truth
        .iter()
        .filter_map(|t| {
            t.attribute_at(scan).map(|a| {
                let p = planar(a);
                let d = ((p.0 - pos.0).powi(2) + (p.1 - pos.1).powi(2)).sqrt();
                (t.label, d)
            })
        })
        .filter(|(_, d)| *d <= gate_m)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(l, _)| l)
}

/// Identity crossings: estimated tracks whose nearest true object at the
/// first scan of their life differs from the nearest at the last, both
/// within `gate_m`. Transient ambiguity while objects are bunched does not
/// register; coming out of an encounter attached to the wrong object does.
pub fn crossing_count(
    estimates: &[TrajectorySegment],
    truth: &[TrajectorySegment],
    gate_m: f64,
) -> usize {
    estimates
        .iter()
        .filter(|e| {
            let at = |scan: u32| {
                e.attribute_at(scan)
                    .and_then(|a| nearest_truth(truth, scan, planar(a), gate_m))
            };
            match (at(e.start), at(e.end())) {
                (Some(first), Some(last)) => first != last,
                _ => false,
            }
        })
        .count()
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

pub const TRAJECTORY_HEADER: &str = "series\trun\tlabel\tscan\tx_m\ty_m";
pub const ERROR_CURVE_HEADER: &str = "scan\tmean_ospa_m\tmean_ospa2_m";
pub const METRICS_HEADER: &str = "run\tscan\ttruth_count\testimate_count\tospa_m\tospa2_m";
pub const RUNS_HEADER: &str =
    "run\tseed\tstatus\twindows\tdropped_samples\tdiscarded_mass\tmessage";
pub const WINDOWS_HEADER: &str =
    "run\twindow_start\twindow_split\twindow_end\thypotheses\tdropped_samples\tdiscarded_mass";
pub const TIMING_HEADER: &str = "run\tscope\tseconds";

fn trajectory_rows(out: &mut String, series: &str, run: usize, tracks: &[TrajectorySegment]) {
    for t in tracks {
        for scan in t.start..=t.end() {
            if let Some(a) = t.attribute_at(scan) {
                let (x, y) = planar(a);
                let _ = writeln!(out, "{series}\t{run}\t{}\t{scan}\t{x}\t{y}", t.label.token());
            }
        }
    }
}

/// Truth plus per-run estimates in the `trajectories.tsv` format.
pub fn trajectories_to_text(
    truth: &[TrajectorySegment],
    runs: &[(usize, &MultiObjectTrajectory)],
) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    trajectory_rows(&mut out, "truth", 0, truth);
    for (run, estimates) in runs {
        trajectory_rows(&mut out, "estimate", *run, estimates);
    }
    out
}

/// Parses [`trajectories_to_text`] output back into truth and per-run
/// estimates. Only planar positions survive the round trip; states come back
/// as `[x, 0, y, 0]`, which every consumer of this format reads as position.
pub fn trajectories_from_text(
    text: &str,
) -> Result<(MultiObjectTrajectory, BTreeMap<usize, MultiObjectTrajectory>)> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TRAJECTORY_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "expected trajectory header, got `{}`",
                other.unwrap_or("")
            )))
        }
    }
    type Key = (String, usize, Label);
    let mut series: BTreeMap<Key, Vec<(u32, f64, f64)>> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(Error::Parse(format!("line {}: expected 6 columns", i + 2)));
        }
        let run: usize = cols[1]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad run index", i + 2)))?;
        let label = Label::parse_token(cols[2])?;
        let scan: u32 = cols[3]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad scan", i + 2)))?;
        let x: f64 = cols[4]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad x", i + 2)))?;
        let y: f64 = cols[5]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad y", i + 2)))?;
        series
            .entry((cols[0].to_string(), run, label))
            .or_default()
            .push((scan, x, y));
    }
    let mut truth = Vec::new();
    let mut runs: BTreeMap<usize, MultiObjectTrajectory> = BTreeMap::new();
    for ((kind, run, label), mut points) in series {
        points.sort_by_key(|p| p.0);
        let start = points[0].0;
        for (i, p) in points.iter().enumerate() {
            if p.0 != start + i as u32 {
                return Err(Error::Parse(format!(
                    "track {label} of {kind} run {run} skips scan {}",
                    start + i as u32
                )));
            }
        }
        let attrs = points
            .iter()
            .map(|(_, x, y)| DVector::from_row_slice(&[*x, 0.0, *y, 0.0]))
            .collect();
        let seg = TrajectorySegment::new(label, start, TrajectoryAttributes::Concrete(attrs))?;
        match kind.as_str() {
            "truth" => truth.push(seg),
            "estimate" => runs.entry(run).or_default().push(seg),
            other => return Err(Error::Parse(format!("unknown series `{other}`"))),
        }
    }
    Ok((truth, runs))
}

/// Error curves in the `errors.tsv` format; rows only for scans with data.
pub fn error_curves_to_text(mean_ospa: &[f64], mean_ospa2: &[f64]) -> String {
    let mut out = String::from(ERROR_CURVE_HEADER);
    out.push('\n');
    for (i, (a, b)) in mean_ospa.iter().zip(mean_ospa2).enumerate() {
        let _ = writeln!(out, "{}\t{a}\t{b}", i + 1);
    }
    out
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

/// Writes the plot-ready artifacts: `trajectories.tsv` (truth and per-run
/// estimate positions) and `errors.tsv` (mean error curves). A report with
/// no completed runs still gets both files, headers only.
pub fn emit_plot_data(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let runs: Vec<(usize, &MultiObjectTrajectory)> = report
        .runs
        .iter()
        .map(|r| (r.run, &r.estimates))
        .collect();
    let truth: &[TrajectorySegment] = if report.runs.is_empty() && report.failures.is_empty() {
        // An empty report plots nothing, not even truth.
        &[]
    } else {
        &report.truth
    };
    Ok(vec![
        write_file(dir, "trajectories.tsv", &trajectories_to_text(truth, &runs))?,
        write_file(
            dir,
            "errors.tsv",
            &error_curves_to_text(&report.mean_ospa_per_scan, &report.mean_ospa2_per_scan),
        )?,
    ])
}

/// Writes the complete artifact set for a report. Every file except
/// `timing.tsv` is byte-identical across replays of the same config.
pub fn write_outputs(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    written.push(write_file(dir, "config.toml", &to_toml(&report.config)?)?);

    let mut runs = String::from(RUNS_HEADER);
    runs.push('\n');
    let mut windows = String::from(WINDOWS_HEADER);
    windows.push('\n');
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut timing = String::from(TIMING_HEADER);
    timing.push('\n');
    let mut ok_iter = report.runs.iter().peekable();
    let mut failed_iter = report.failures.iter().peekable();
    for run in 0..report.config.monte_carlo_runs {
        if ok_iter.peek().is_some_and(|r| r.run == run) {
            let r = ok_iter.next().expect("peeked");
            let dropped: usize = r.windows.iter().map(|w| w.dropped_samples).sum();
            let mass: f64 = r.windows.iter().map(|w| w.discarded_mass).sum();
            let _ = writeln!(
                runs,
                "{run}\t{}\tok\t{}\t{dropped}\t{mass}\t",
                r.seed,
                r.windows.len()
            );
            for w in &r.windows {
                let _ = writeln!(
                    windows,
                    "{run}\t{}\t{}\t{}\t{}\t{}\t{}",
                    w.window.0, w.window.1, w.window.2, w.hypotheses, w.dropped_samples,
                    w.discarded_mass
                );
                let _ = writeln!(
                    timing,
                    "{run}\twindow {}-{}\t{}",
                    w.window.0, w.window.2, w.seconds
                );
            }
            let _ = writeln!(timing, "{run}\ttotal\t{}", r.seconds);
            for s in &r.per_scan {
                let _ = writeln!(
                    metrics,
                    "{run}\t{}\t{}\t{}\t{}\t{}",
                    s.scan, s.truth_count, s.estimate_count, s.ospa_m, s.ospa2_m
                );
            }
        } else if failed_iter.peek().is_some_and(|f| f.run == run) {
            let f = failed_iter.next().expect("peeked");
            let _ = writeln!(runs, "{run}\t{}\tfailed\t0\t0\t0\t{}", f.seed, f.message);
        }
    }
    written.push(write_file(dir, "runs.tsv", &runs)?);
    written.push(write_file(dir, "windows.tsv", &windows)?);
    written.push(write_file(dir, "metrics.tsv", &metrics)?);
    written.push(write_file(dir, "timing.tsv", &timing)?);
    written.extend(emit_plot_data(report, dir)?);
    Ok(written)
}


#[cfg(test)]
mod tmp_runtime {
    use super::*;

    #[test]
    fn probe_tracker_runtime() {
        for strat in [Strategy::SfaThenUa] {
            let mut c = ScenarioConfig::reference_desk();
            c.duration_scans = 45;
            c.monte_carlo_runs = 1;
            c.smoother.sample_budget = 50;
            c.smoother.strategy = strat;
            let report = run_experiment(&c).unwrap();
            let r = &report.runs[0];
            println!("=== {strat:?} ===");
            for w in &r.windows {
                println!("window {:?}: hyps {} dropped {} mass {:.3e} {:.1}s",
                    w.window, w.hypotheses, w.dropped_samples, w.discarded_mass, w.seconds);
            }
            for s in &r.per_scan {
                if s.scan >= 30 {
                    println!("scan {:>2}: truth {} est {} ospa {:>6.1} ospa2 {:>6.1}",
                        s.scan, s.truth_count, s.estimate_count, s.ospa_m, s.ospa2_m);
                }
            }
            println!("crossings {}", crossing_count(&r.estimates, &report.truth, 100.0));
            for e in &r.estimates {
                let a0 = e.attribute_at(e.start).unwrap();
                let a1 = e.attribute_at(e.end()).unwrap();
                println!("track {} scans {}..{} from ({:.0},{:.0}) to ({:.0},{:.0})",
                    e.label, e.start, e.end(), a0[0], a0[2], a1[0], a1[2]);
            }
        }
    }
}
