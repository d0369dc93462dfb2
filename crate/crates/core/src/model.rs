//! Bundled multi-object model: birth, survival, motion, sensing, clutter.
//!
//! The two named constructors carry the reference experiment parameters; the
//! struct itself is open for toy configurations in tests and oracles.

use crate::densities::{Gaussian, UtParams};
use crate::dynamics::{BirthComponent, BirthModel, BirthSchedule, SocialForceParams, SurvivalModel};
use crate::measurement::{CellPartition, ClutterModel, ClutterRegion, SensorModel};
use crate::{Error, Result};

use nalgebra::{DMatrix, DVector};

/// Merged-measurement handling: bearing cells, the gate (in cell widths)
/// within which objects may form merged groups, and the cap on the size of a
/// cluster whose partitions are enumerated.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedConfig {
    pub cells: CellPartition,
    pub gate_cell_widths: f64,
    pub partition_cap: usize,
}

impl MergedConfig {
    /// Bearing gate in radians: groups can only form within this distance.
    pub fn gate_radians(&self) -> f64 {
        self.gate_cell_widths * self.cells.width()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub birth: BirthModel,
    pub survival: SurvivalModel,
    pub force: SocialForceParams,
    pub sensor: SensorModel,
    pub clutter: ClutterModel,
    pub p_d: f64,
    pub ut: UtParams,
    pub merged: Option<MergedConfig>,
    /// Guard on exhaustive child enumeration (associations, partitions).
    pub enumeration_cap: usize,
}

impl Model {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        birth: BirthModel,
        survival: SurvivalModel,
        force: SocialForceParams,
        sensor: SensorModel,
        clutter: ClutterModel,
        p_d: f64,
        ut: UtParams,
        merged: Option<MergedConfig>,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_d) {
            return Err(Error::InvalidInput(format!(
                "detection probability {p_d} outside [0,1]"
            )));
        }
        Ok(Self {
            birth,
            survival,
            force,
            sensor,
            clutter,
            p_d,
            ut,
            merged,
            enumeration_cap: 2_000_000,
        })
    }

    pub fn q_d(&self) -> f64 {
        1.0 - self.p_d
    }

    /// Four-component static LMB birth used by both reference scenarios.
    pub fn reference_births(schedule: BirthSchedule) -> BirthModel {
        let means = [
            [-500.0, 10.0, 0.0, 10.0],
            [500.0, -10.0, 0.0, 10.0],
            [-750.0, 15.0, 0.0, 10.0],
            [750.0, -15.0, 0.0, 10.0],
        ];
        let cov = DMatrix::from_diagonal(&DVector::from_row_slice(&[100.0, 100.0, 100.0, 100.0]));
        let comps = means
            .iter()
            .map(|m| BirthComponent {
                prob: 0.01,
                density: Gaussian::new(DVector::from_row_slice(m), cov.clone())
                    .expect("valid birth density"),
            })
            .collect();
        BirthModel::new(comps, schedule).expect("valid birth model")
    }

    /// Interacting objects observed in bearing and range by a static sensor
    /// at the origin.
    pub fn interacting_bearing_range() -> Self {
        Self::new(
            Self::reference_births(BirthSchedule::EveryScan),
            SurvivalModel::new(0.99).expect("valid survival"),
            SocialForceParams::new(550.0, 30.0, 1.0, 50.0, 1.0, 10).expect("valid force"),
            SensorModel::BearingRangeStatic {
                sigma_bearing: 2.0 * std::f64::consts::PI / 180.0,
                sigma_range: 10.0,
            },
            ClutterModel {
                rate: 10.0,
                region: ClutterRegion::BearingRange { max_range: 2000.0 },
            },
            0.7,
            UtParams::default(),
            None,
        )
        .expect("valid reference model")
    }

    /// Interacting objects observed in bearing only by a moving sensor, with
    /// cell-merged detections; births active at the first scan only.
    pub fn interacting_bearing_only_merged() -> Self {
        let cells = CellPartition::new(2.0 * std::f64::consts::PI / 180.0)
            .expect("2-degree cells divide the circle");
        Self::new(
            Self::reference_births(BirthSchedule::ScanOneOnly),
            SurvivalModel::new(0.99).expect("valid survival"),
            SocialForceParams::new(550.0, 30.0, 1.0, 50.0, 1.0, 10).expect("valid force"),
            SensorModel::BearingOnlyMoving {
                sigma_bearing: std::f64::consts::PI / 180.0,
            },
            ClutterModel {
                rate: 0.3,
                region: ClutterRegion::Bearing,
            },
            0.7,
            UtParams::default(),
            Some(MergedConfig {
                cells,
                gate_cell_widths: 3.0,
                partition_cap: 8,
            }),
        )
        .expect("valid reference model")
    }

    /// Same model with the social force switched off (independent motion).
    pub fn without_interaction(mut self) -> Self {
        self.force.v = 0.0;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_models_carry_stated_parameters() {
        let m = Model::interacting_bearing_range();
        assert_eq!(m.p_d, 0.7);
        assert_eq!(m.survival.prob(), 0.99);
        assert_eq!(m.force.v, 550.0);
        assert_eq!(m.force.alpha, 30.0);
        assert_eq!(m.force.interaction_radius, 50.0);
        assert_eq!(m.clutter.rate, 10.0);
        assert_eq!(m.birth.components().len(), 4);
        assert!(m.birth.components().iter().all(|c| c.prob == 0.01));

        let g = Model::interacting_bearing_only_merged();
        assert_eq!(g.clutter.rate, 0.3);
        let merged = g.merged.as_ref().unwrap();
        assert_eq!(merged.cells.n_cells(), 180);
        assert!((merged.gate_radians() - 6.0f64.to_radians()).abs() < 1e-12);
        assert!(g.birth.births_at(2).is_empty());

        let off = Model::interacting_bearing_range().without_interaction();
        assert_eq!(off.force.v, 0.0);
    }
}
