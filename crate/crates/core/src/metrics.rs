//! OSPA and OSPA² distances between estimated and true trajectory sets.
//!
//! OSPA compares two point sets: the smaller set is optimally assigned into
//! the larger, per-pair distances are truncated at the cutoff, unassigned
//! points are charged the full cutoff, and the order-p mean over the larger
//! cardinality is taken. OSPA² lifts the same construction to trajectory
//! sets evaluated at one scan: the base distance between two trajectories
//! is the time-averaged truncated distance over a trailing window, with a
//! scan where exactly one of the pair exists charged at the cutoff and a
//! scan where neither exists charged nothing.
//!
//! Distances are Euclidean on planar positions. Full kinematic states store
//! position in components 0 and 2; bare planar points pass through as they
//! are. The assignment optimum is found by dynamic programming over subsets
//! of the smaller set, exact for the small cardinalities of tracking
//! scenarios (cost grows as 2^n in the smaller cardinality n).

use nalgebra::DVector;

use crate::dynamics::STATE_DIM;
use crate::rfs::TrajectorySegment;
use crate::{Error, Result};

/// Cutoff, order, and (for OSPA²) trailing window length.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OspaParams {
    /// Truncation distance in meters; also the per-object cardinality and
    /// existence-mismatch charge.
    pub cutoff: f64,
    /// Order of the mean, at least one.
    pub order: f64,
    /// Trailing window length in scans, at least one.
    pub window: u32,
}

impl OspaParams {
    pub fn new(cutoff: f64, order: f64, window: u32) -> Result<Self> {
        if !cutoff.is_finite() || cutoff <= 0.0 {
            return Err(Error::InvalidInput("cutoff must be positive".into()));
        }
        if !order.is_finite() || order < 1.0 {
            return Err(Error::InvalidInput("order must be at least one".into()));
        }
        if window == 0 {
            return Err(Error::InvalidInput(
                "window length must be at least one scan".into(),
            ));
        }
        Ok(Self {
            cutoff,
            order,
            window,
        })
    }
}

impl Default for OspaParams {
    /// Reference figure settings: 100 m cutoff, order 1, 10-scan window.
    fn default() -> Self {
        Self {
            cutoff: 100.0,
            order: 1.0,
            window: 10,
        }
    }
}

/// Planar position of a state or point vector.
pub(crate) fn planar(v: &DVector<f64>) -> (f64, f64) {
    if v.len() >= STATE_DIM {
        (v[0], v[2])
    } else {
        (v[0], v[1])
    }
}

fn euclid(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    (dx * dx + dy * dy).sqrt()
}

/// Minimal total cost of assigning every row to a distinct column,
/// `rows <= cols`. Costs are looked up lazily; dynamic programming over row
/// subsets, one column at a time.
fn min_assignment_cost(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> f64 {
    debug_assert!(rows <= cols);
    if rows == 0 {
        return 0.0;
    }
    let full = (1usize << rows) - 1;
    let mut prev = vec![f64::INFINITY; full + 1];
    prev[0] = 0.0;
    let mut next = vec![f64::INFINITY; full + 1];
    for j in 0..cols {
        next.copy_from_slice(&prev);
        for mask in 0..=full {
            let base = prev[mask];
            if !base.is_finite() {
                continue;
            }
            for i in 0..rows {
                if mask & (1 << i) == 0 {
                    let m2 = mask | (1 << i);
                    let cand = base + cost(i, j);
                    if cand < next[m2] {
                        next[m2] = cand;
                    }
                }
            }
        }
        std::mem::swap(&mut prev, &mut next);
    }
    prev[full]
}

/// Order-p OSPA construction from a truncated base distance: assign the
/// smaller set into the larger, charge the cutoff for the cardinality gap,
/// take the order-p mean over the larger cardinality.
fn ospa_from(
    n: usize,
    m: usize,
    dist: impl Fn(usize, usize) -> f64,
    params: &OspaParams,
) -> f64 {
    let (c, p) = (params.cutoff, params.order);
    if n == 0 && m == 0 {
        return 0.0;
    }
    let cost_p = |i: usize, j: usize| {
        let d = if n <= m { dist(i, j) } else { dist(j, i) };
        d.min(c).powf(p)
    };
    let (small, large) = if n <= m { (n, m) } else { (m, n) };
    let matched = min_assignment_cost(small, large, cost_p);
    let gap = c.powf(p) * (large - small) as f64;
    ((matched + gap) / large as f64).powf(1.0 / p)
}

/// OSPA distance between two finite point sets. Zero for two empty sets;
/// the cutoff when exactly one is empty. Vectors within one call must share
/// a dimension convention (states or bare points).
pub fn ospa(xs: &[DVector<f64>], ys: &[DVector<f64>], params: &OspaParams) -> f64 {
    ospa_from(
        xs.len(),
        ys.len(),
        |i, j| euclid(planar(&xs[i]), planar(&ys[j])),
        params,
    )
}

/// Per-scan planar positions of one trajectory over an inclusive scan
/// range; `None` where the trajectory does not exist.
fn window_track(seg: &TrajectorySegment, lo: u32, hi: u32) -> Vec<Option<(f64, f64)>> {
    (lo..=hi)
        .map(|s| seg.attribute_at(s).map(planar))
        .collect()
}

/// Time-averaged truncated distance between two windowed tracks. A scan
/// where both are absent contributes nothing, one absent charges the
/// cutoff, both present charge the truncated Euclidean distance.
fn track_distance(a: &[Option<(f64, f64)>], b: &[Option<(f64, f64)>], cutoff: f64) -> f64 {
    let mut sum = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        sum += match (pa, pb) {
            (None, None) => 0.0,
            (Some(x), Some(y)) => euclid(*x, *y).min(cutoff),
            _ => cutoff,
        };
    }
    sum / a.len() as f64
}

/// OSPA² error of an estimated trajectory set against the truth at one
/// scan: OSPA over trajectories under the time-averaged base distance of
/// the trailing window ending at `scan` (clipped at scan 1). Trajectories
/// with no presence in the window are left out of the comparison.
pub fn ospa2(
    est: &[TrajectorySegment],
    truth: &[TrajectorySegment],
    params: &OspaParams,
    scan: u32,
) -> f64 {
    if scan == 0 {
        return 0.0;
    }
    let lo = scan.saturating_sub(params.window - 1).max(1);
    let windowed = |segs: &[TrajectorySegment]| -> Vec<Vec<Option<(f64, f64)>>> {
        segs.iter()
            .map(|s| window_track(s, lo, scan))
            .filter(|t| t.iter().any(Option::is_some))
            .collect()
    };
    let a = windowed(est);
    let b = windowed(truth);
    ospa_from(
        a.len(),
        b.len(),
        |i, j| track_distance(&a[i], &b[j], params.cutoff),
        params,
    )
}
