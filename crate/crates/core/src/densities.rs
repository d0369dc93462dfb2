//! Gaussian machinery for trajectory densities.
//!
//! Per-trajectory and joint attribute densities are Gaussians over stacked
//! per-scan state blocks. The unscented transform carries them through the
//! nonlinear interacting dynamics and sensor maps, and the conditional update
//! returns the marginal measurement likelihood needed by the hypothesis
//! weights.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::rfs::Label;
use crate::{wrap_angle, Error, Result};

/// Jitter added to a covariance diagonal when a Cholesky factorization fails.
const PSD_JITTER: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Gaussian
// ---------------------------------------------------------------------------

/// A multivariate Gaussian. Covariances are symmetrized on construction;
/// positive-semidefiniteness is repaired lazily (eigenvalue clamp + jitter)
/// where a factorization is required.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::InvalidInput(format!(
                "covariance {}x{} does not match mean dimension {}",
                cov.nrows(),
                cov.ncols(),
                d
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite Gaussian parameter".into()));
        }
        let mut sym = cov;
        for i in 0..d {
            for j in 0..i {
                let v = 0.5 * (sym[(i, j)] + sym[(j, i)]);
                sym[(i, j)] = v;
                sym[(j, i)] = v;
            }
        }
        Ok(Self { mean, cov: sym })
    }

    /// Zero-dimensional Gaussian (empty joint; density value 1).
    pub fn empty() -> Self {
        Self {
            mean: DVector::zeros(0),
            cov: DMatrix::zeros(0, 0),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Marginal over a contiguous index range.
    pub fn marginal_range(&self, r: Range<usize>) -> Result<Self> {
        if r.end > self.dim() {
            return Err(Error::InvalidInput("marginal range out of bounds".into()));
        }
        let idx: Vec<usize> = r.collect();
        self.marginal_idx(&idx)
    }

    /// Marginal over an arbitrary index selection (order preserved).
    pub fn marginal_idx(&self, idx: &[usize]) -> Result<Self> {
        if idx.iter().any(|&i| i >= self.dim()) {
            return Err(Error::InvalidInput("marginal index out of bounds".into()));
        }
        let n = idx.len();
        let mean = DVector::from_fn(n, |i, _| self.mean[idx[i]]);
        let cov = DMatrix::from_fn(n, n, |i, j| self.cov[(idx[i], idx[j])]);
        Gaussian::new(mean, cov)
    }

    /// Log density at a point.
    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::InvalidInput("log_pdf dimension mismatch".into()));
        }
        if self.dim() == 0 {
            return Ok(0.0);
        }
        let chol = psd_cholesky(&self.cov)?;
        let diff = x - &self.mean;
        let solved = chol.solve(&diff);
        let maha = diff.dot(&solved);
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(-0.5 * (maha + log_det + self.dim() as f64 * (2.0 * std::f64::consts::PI).ln()))
    }

    /// Draws one sample.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        if self.dim() == 0 {
            return Ok(DVector::zeros(0));
        }
        let chol = psd_cholesky(&self.cov)?;
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(&self.mean + chol.l() * z)
    }

    /// Serializes to the decimal-text fixture format (`dim`/`mean`/`cov` lines).
    pub fn to_fixture(&self) -> String {
        let mut s = format!("dim {}\n", self.dim());
        s.push_str("mean");
        for v in self.mean.iter() {
            s.push_str(&format!(" {v}"));
        }
        s.push('\n');
        for i in 0..self.dim() {
            s.push_str("cov");
            for j in 0..self.dim() {
                s.push_str(&format!(" {}", self.cov[(i, j)]));
            }
            s.push('\n');
        }
        s
    }

    /// Parses the fixture format produced by [`Gaussian::to_fixture`].
    pub fn from_fixture(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let dim_line = lines
            .next()
            .ok_or_else(|| Error::Parse("empty Gaussian fixture".into()))?;
        let d: usize = dim_line
            .strip_prefix("dim ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad dim line: {dim_line}")))?;
        let parse_row = |line: &str, tag: &str| -> Result<Vec<f64>> {
            let body = line
                .strip_prefix(tag)
                .ok_or_else(|| Error::Parse(format!("expected `{tag}` line, got: {line}")))?;
            body.split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad number `{t}`")))
                })
                .collect()
        };
        let mean_row = parse_row(
            lines
                .next()
                .ok_or_else(|| Error::Parse("missing mean line".into()))?,
            "mean",
        )?;
        if mean_row.len() != d {
            return Err(Error::Parse("mean length != dim".into()));
        }
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..d {
            let row = parse_row(
                lines
                    .next()
                    .ok_or_else(|| Error::Parse("missing cov row".into()))?,
                "cov",
            )?;
            if row.len() != d {
                return Err(Error::Parse("cov row length != dim".into()));
            }
            for j in 0..d {
                cov[(i, j)] = row[j];
            }
        }
        Gaussian::new(DVector::from_vec(mean_row), cov)
    }
}

/// Cholesky with PSD repair: on failure, clamp negative eigenvalues at zero,
/// add diagonal jitter, and retry once.
pub(crate) fn psd_cholesky(cov: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(cov.clone()) {
        return Ok(c);
    }
    let eig = cov.clone().symmetric_eigen();
    let mut rebuilt = DMatrix::zeros(cov.nrows(), cov.ncols());
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        let lam = lam.max(0.0);
        let v = eig.eigenvectors.column(i);
        rebuilt += lam * &v * v.transpose();
    }
    for i in 0..rebuilt.nrows() {
        rebuilt[(i, i)] += PSD_JITTER;
    }
    Cholesky::new(rebuilt).ok_or_else(|| {
        Error::Numerical("covariance not positive semidefinite after clamp + jitter".into())
    })
}

/// Weighted single-Gaussian moment match of a mixture. Weights are
/// normalized internally; components must share a dimension.
pub fn moment_match(components: &[(f64, Gaussian)]) -> Result<Gaussian> {
    if components.is_empty() {
        return Err(Error::InvalidInput("moment_match of empty mixture".into()));
    }
    let d = components[0].1.dim();
    let total: f64 = components.iter().map(|(w, _)| *w).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("moment_match with zero total weight".into()));
    }
    let mut mean = DVector::zeros(d);
    for (w, g) in components {
        if g.dim() != d {
            return Err(Error::InvalidInput("moment_match dimension mismatch".into()));
        }
        mean += (w / total) * g.mean();
    }
    let mut cov = DMatrix::zeros(d, d);
    for (w, g) in components {
        let dm = g.mean() - &mean;
        cov += (w / total) * (g.cov() + dm.clone() * dm.transpose());
    }
    Gaussian::new(mean, cov)
}

// ---------------------------------------------------------------------------
// Unscented transform
// ---------------------------------------------------------------------------

/// Scaled unscented transform parameters. `kappa = None` resolves to `3 - d`
/// at the point of use.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: Option<f64>,
}

impl Default for UtParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 2.0,
            kappa: None,
        }
    }
}

impl UtParams {
    fn lambda(&self, dim: usize) -> Result<f64> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "UT alpha must lie in (0,1], got {}",
                self.alpha
            )));
        }
        let kappa = self.kappa.unwrap_or(3.0 - dim as f64);
        let lambda = self.alpha * self.alpha * (dim as f64 + kappa) - dim as f64;
        if dim as f64 + lambda <= 0.0 {
            return Err(Error::InvalidInput(
                "UT scaling d + lambda must be positive".into(),
            ));
        }
        Ok(lambda)
    }
}

struct SigmaPoints {
    points: Vec<DVector<f64>>,
    w_mean: Vec<f64>,
    w_cov: Vec<f64>,
}

fn sigma_points(g: &Gaussian, params: &UtParams) -> Result<SigmaPoints> {
    let d = g.dim();
    let lambda = params.lambda(d)?;
    let scale = (d as f64 + lambda).sqrt();
    let chol = psd_cholesky(g.cov())?;
    let l = chol.l();
    let mut points = Vec::with_capacity(2 * d + 1);
    points.push(g.mean().clone());
    for i in 0..d {
        let col = scale * l.column(i);
        points.push(g.mean() + &col);
        points.push(g.mean() - &col);
    }
    let w0 = lambda / (d as f64 + lambda);
    let wi = 0.5 / (d as f64 + lambda);
    let mut w_mean = vec![wi; 2 * d + 1];
    let mut w_cov = vec![wi; 2 * d + 1];
    w_mean[0] = w0;
    w_cov[0] = w0 + 1.0 - params.alpha * params.alpha + params.beta;
    Ok(SigmaPoints {
        points,
        w_mean,
        w_cov,
    })
}

/// Output of an unscented transform: transformed Gaussian plus the
/// input-output cross covariance Cov(x, y).
#[derive(Debug, Clone)]
pub struct UtOutcome {
    pub out: Gaussian,
    pub cross: DMatrix<f64>,
}

/// Core unscented transform. `angular` marks output components that live on
/// the circle: their sigma means are formed via wrapped residuals around the
/// center point's image and covariance residuals are wrapped likewise.
pub fn ut_transform(
    g: &Gaussian,
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    angular: &[usize],
    params: &UtParams,
) -> Result<UtOutcome> {
    let sp = sigma_points(g, params)?;
    let images: Vec<DVector<f64>> = sp.points.iter().map(|p| f(p)).collect();
    let m = images[0].len();
    if images.iter().any(|y| y.len() != m || y.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("non-finite or ragged UT image".into()));
    }
    let reference = images[0].clone();
    let mut mean = DVector::zeros(m);
    for (y, &w) in images.iter().zip(&sp.w_mean) {
        let mut dy = y - &reference;
        for &a in angular {
            dy[a] = wrap_angle(dy[a]);
        }
        mean += w * dy;
    }
    mean += &reference;
    let mut cov = DMatrix::zeros(m, m);
    let mut cross = DMatrix::zeros(g.dim(), m);
    for ((y, x), &w) in images.iter().zip(&sp.points).zip(&sp.w_cov) {
        let mut dy = y - &mean;
        for &a in angular {
            dy[a] = wrap_angle(dy[a]);
        }
        cov += w * &dy * dy.transpose();
        let dx = x - g.mean();
        cross += w * dx * dy.transpose();
    }
    let sym = 0.5 * (&cov + cov.transpose());
    Ok(UtOutcome {
        out: Gaussian::new(mean, sym)?,
        cross,
    })
}

/// Unscented propagation of a Gaussian through a state map with optional
/// additive process noise.
pub fn unscented_propagate(
    joint: &Gaussian,
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    params: &UtParams,
    additive_noise: Option<&DMatrix<f64>>,
) -> Result<Gaussian> {
    let outcome = ut_transform(joint, f, &[], params)?;
    match additive_noise {
        None => Ok(outcome.out),
        Some(q) => {
            if q.nrows() != outcome.out.dim() || q.ncols() != outcome.out.dim() {
                return Err(Error::InvalidInput("noise dimension mismatch".into()));
            }
            Gaussian::new(outcome.out.mean().clone(), outcome.out.cov() + q)
        }
    }
}

/// UT-linearized Bayes update of `joint` with measurement `z` under the
/// observation map `h` (angular output components in `angular`) and noise
/// covariance `r`. Returns the posterior and the marginal measurement
/// log-likelihood.
pub fn conditional_update(
    joint: &Gaussian,
    h: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    angular: &[usize],
    z: &DVector<f64>,
    r: &DMatrix<f64>,
    params: &UtParams,
) -> Result<(Gaussian, f64)> {
    let obs = ut_transform(joint, h, angular, params)?;
    let m = obs.out.dim();
    if z.len() != m || r.nrows() != m || r.ncols() != m {
        return Err(Error::InvalidInput("measurement dimension mismatch".into()));
    }
    let s = obs.out.cov() + r;
    let chol = psd_cholesky(&s).map_err(|_| {
        Error::Numerical("singular innovation covariance in conditional update".into())
    })?;
    let mut innov = z - obs.out.mean();
    for &a in angular {
        innov[a] = wrap_angle(innov[a]);
    }
    let log_lik = gaussian_log_lik(&innov, &chol, m);
    // K = Pxz S^-1 computed via S K^T = Pxz^T.
    let k = chol.solve(&obs.cross.transpose()).transpose();
    let mean = joint.mean() + &k * &innov;
    let cov = joint.cov() - &k * s * k.transpose();
    let sym = 0.5 * (&cov + cov.transpose());
    Ok((Gaussian::new(mean, sym)?, log_lik))
}

fn gaussian_log_lik(innov: &DVector<f64>, chol: &Cholesky<f64, Dyn>, dim: usize) -> f64 {
    let solved = chol.solve(innov);
    let maha = innov.dot(&solved);
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (maha + log_det + dim as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Closed-form KL divergence between Gaussians of equal dimension.
pub fn kl_divergence(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::InvalidInput("KL dimension mismatch".into()));
    }
    let d = p.dim();
    if d == 0 {
        return Ok(0.0);
    }
    let chol_q = psd_cholesky(q.cov())
        .map_err(|_| Error::Numerical("singular divergence reference".into()))?;
    let chol_p = psd_cholesky(p.cov())?;
    let log_det_q = 2.0 * chol_q.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_det_p = 2.0 * chol_p.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = chol_q.solve(p.cov()).trace();
    let dm = q.mean() - p.mean();
    let maha = dm.dot(&chol_q.solve(&dm));
    Ok(0.5 * (trace + maha - d as f64 + log_det_q - log_det_p).max(0.0))
}

// ---------------------------------------------------------------------------
// Joint trajectory density
// ---------------------------------------------------------------------------

/// Location of one label's stacked per-scan states inside a joint Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelBlock {
    pub offset: usize,
    pub len: usize,
    pub start_scan: u32,
}

/// Joint Gaussian over the stacked attributes of several trajectories.
///
/// Layout is canonical: labels in sorted order, scans ascending within each
/// label, `state_dim` entries per scan. Every operation that changes the
/// block structure restores this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTrajectoryDensity {
    state_dim: usize,
    blocks: BTreeMap<Label, LabelBlock>,
    dist: Gaussian,
}

impl JointTrajectoryDensity {
    pub fn empty(state_dim: usize) -> Self {
        Self {
            state_dim,
            blocks: BTreeMap::new(),
            dist: Gaussian::empty(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn dim(&self) -> usize {
        self.dist.dim()
    }

    pub fn dist(&self) -> &Gaussian {
        &self.dist
    }

    pub fn labels(&self) -> impl Iterator<Item = &Label> {
        self.blocks.keys()
    }

    pub fn n_labels(&self) -> usize {
        self.blocks.len()
    }

    pub fn contains(&self, label: &Label) -> bool {
        self.blocks.contains_key(label)
    }

    pub fn block(&self, label: &Label) -> Result<&LabelBlock> {
        self.blocks
            .get(label)
            .ok_or_else(|| Error::InvalidInput(format!("unknown label {label}")))
    }

    /// Index range of one scan of one label.
    pub fn scan_indices(&self, label: &Label, scan: u32) -> Result<Range<usize>> {
        let b = self.block(label)?;
        let n_scans = b.len / self.state_dim;
        if scan < b.start_scan || scan >= b.start_scan + n_scans as u32 {
            return Err(Error::InvalidInput(format!(
                "label {label} does not cover scan {scan}"
            )));
        }
        let local = (scan - b.start_scan) as usize * self.state_dim;
        Ok(b.offset + local..b.offset + local + self.state_dim)
    }

    pub fn last_scan(&self, label: &Label) -> Result<u32> {
        let b = self.block(label)?;
        Ok(b.start_scan + (b.len / self.state_dim) as u32 - 1)
    }

    /// Appends an independent label block (e.g. a birth density).
    pub fn insert_independent(&mut self, label: Label, start_scan: u32, g: &Gaussian) -> Result<()> {
        if self.blocks.contains_key(&label) {
            return Err(Error::InvalidInput(format!("duplicate label {label}")));
        }
        if g.dim() == 0 || g.dim() % self.state_dim != 0 {
            return Err(Error::InvalidInput(
                "block dimension must be a positive multiple of state_dim".into(),
            ));
        }
        let old = self.dim();
        let add = g.dim();
        let mut mean = DVector::zeros(old + add);
        mean.rows_mut(0, old).copy_from(self.dist.mean());
        mean.rows_mut(old, add).copy_from(g.mean());
        let mut cov = DMatrix::zeros(old + add, old + add);
        cov.view_mut((0, 0), (old, old)).copy_from(self.dist.cov());
        cov.view_mut((old, old), (add, add)).copy_from(g.cov());
        self.dist = Gaussian::new(mean, cov)?;
        self.blocks.insert(
            label,
            LabelBlock {
                offset: old,
                len: add,
                start_scan,
            },
        );
        self.canonicalize()
    }

    /// Spec operation: Gaussian marginal over one label's whole block.
    pub fn marginalize_to_label(&self, label: &Label) -> Result<Gaussian> {
        let b = *self.block(label)?;
        self.dist.marginal_range(b.offset..b.offset + b.len)
    }

    /// Per-scan marginals of one label, in scan order.
    pub fn per_scan_marginals(&self, label: &Label) -> Result<Vec<Gaussian>> {
        let b = *self.block(label)?;
        let n = b.len / self.state_dim;
        (0..n)
            .map(|i| {
                self.dist.marginal_range(
                    b.offset + i * self.state_dim..b.offset + (i + 1) * self.state_dim,
                )
            })
            .collect()
    }

    /// Removes a label, returning its marginal (frozen at removal).
    pub fn remove_label(&mut self, label: &Label) -> Result<Gaussian> {
        let removed = self.marginalize_to_label(label)?;
        let b = *self.block(label)?;
        let keep: Vec<usize> = (0..self.dim())
            .filter(|&i| i < b.offset || i >= b.offset + b.len)
            .collect();
        self.dist = self.dist.marginal_idx(&keep)?;
        self.blocks.remove(label);
        let mut offset = 0usize;
        for blk in self.blocks.values_mut() {
            blk.offset = offset;
            offset += blk.len;
        }
        Ok(removed)
    }

    /// Marginal over the current (last) scans of the given labels, stacked in
    /// the given order. Returns the index selection used.
    pub fn current_scan_marginal(&self, labels: &[Label]) -> Result<(Gaussian, Vec<usize>)> {
        let mut idx = Vec::with_capacity(labels.len() * self.state_dim);
        for l in labels {
            let scan = self.last_scan(l)?;
            idx.extend(self.scan_indices(l, scan)?);
        }
        Ok((self.dist.marginal_idx(&idx)?, idx))
    }

    /// Extends each listed label with one new scan block whose joint law with
    /// the existing state is given through the UT outcome over `cur_idx`:
    /// `out.cross` is Cov(state[cur_idx], new), and the remaining
    /// cross-covariances follow from the implied linear-Gaussian completion
    /// Cov(state, new) = Cov(state, state[cur_idx]) · P_cur⁻¹ · cross.
    pub fn extend_scan(
        &mut self,
        labels: &[Label],
        new_scan: u32,
        out: &UtOutcome,
        cur_idx: &[usize],
    ) -> Result<()> {
        let add = out.out.dim();
        if add != labels.len() * self.state_dim {
            return Err(Error::InvalidInput("extension dimension mismatch".into()));
        }
        for l in labels {
            if self.last_scan(l)? + 1 != new_scan {
                return Err(Error::InvalidInput(format!(
                    "label {l} cannot skip to scan {new_scan}"
                )));
            }
        }
        let old = self.dim();
        let p_cur = self.dist.marginal_idx(cur_idx)?.cov().clone();
        // X = P_cur^-1 · cross, so Cov(all, new) = Cov(all, cur) · X.
        let x = psd_cholesky(&p_cur)?.solve(&out.cross);
        let mut cov_all_cur = DMatrix::zeros(old, cur_idx.len());
        for (c, &j) in cur_idx.iter().enumerate() {
            for i in 0..old {
                cov_all_cur[(i, c)] = self.dist.cov()[(i, j)];
            }
        }
        let cov_all_new = cov_all_cur * &x;

        let mut mean = DVector::zeros(old + add);
        mean.rows_mut(0, old).copy_from(self.dist.mean());
        mean.rows_mut(old, add).copy_from(out.out.mean());
        let mut cov = DMatrix::zeros(old + add, old + add);
        cov.view_mut((0, 0), (old, old)).copy_from(self.dist.cov());
        cov.view_mut((old, old), (add, add)).copy_from(out.out.cov());
        cov.view_mut((0, old), (old, add)).copy_from(&cov_all_new);
        cov.view_mut((old, 0), (add, old))
            .copy_from(&cov_all_new.transpose());
        self.dist = Gaussian::new(mean, cov)?;

        for (i, l) in labels.iter().enumerate() {
            // Temporarily record the appended scan as a detached block; the
            // canonical permutation below folds it into the label's range.
            let blk = self.blocks.get_mut(l).expect("label checked above");
            blk.len += self.state_dim;
            let _ = i;
        }
        // The appended dims currently sit at the tail in `labels` order; build
        // the permutation that restores per-label contiguity.
        self.canonicalize_with_tail(labels, old)
    }

    /// Conditions the whole joint on a stacked observation of the coordinates
    /// in `obs_idx`. Returns the marginal measurement log-likelihood.
    pub fn condition_on(
        &mut self,
        obs_idx: &[usize],
        h: &dyn Fn(&DVector<f64>) -> DVector<f64>,
        angular: &[usize],
        z: &DVector<f64>,
        r: &DMatrix<f64>,
        params: &UtParams,
    ) -> Result<f64> {
        let sub = self.dist.marginal_idx(obs_idx)?;
        let obs = ut_transform(&sub, h, angular, params)?;
        let m = obs.out.dim();
        if z.len() != m || r.nrows() != m {
            return Err(Error::InvalidInput("measurement dimension mismatch".into()));
        }
        let s = obs.out.cov() + r;
        let chol = psd_cholesky(&s)
            .map_err(|_| Error::Numerical("singular innovation covariance".into()))?;
        let mut innov = z - obs.out.mean();
        for &a in angular {
            innov[a] = wrap_angle(innov[a]);
        }
        let log_lik = gaussian_log_lik(&innov, &chol, m);

        // Cov(all, z) = Cov(all, sub) · P_sub^-1 · Pxz_sub.
        let p_sub = sub.cov().clone();
        let x = psd_cholesky(&p_sub)?.solve(&obs.cross);
        let n = self.dim();
        let mut cov_all_sub = DMatrix::zeros(n, obs_idx.len());
        for (c, &j) in obs_idx.iter().enumerate() {
            for i in 0..n {
                cov_all_sub[(i, c)] = self.dist.cov()[(i, j)];
            }
        }
        let cov_all_z = cov_all_sub * &x;
        let k = chol.solve(&cov_all_z.transpose()).transpose();
        let mean = self.dist.mean() + &k * &innov;
        let cov = self.dist.cov() - &k * s * k.transpose();
        let sym = 0.5 * (&cov + cov.transpose());
        self.dist = Gaussian::new(mean, sym)?;
        Ok(log_lik)
    }

    /// Replaces the distribution wholesale, keeping the block table. Used by
    /// deserialization, where blocks are rebuilt first and the parsed joint
    /// (which carries the cross terms) is installed afterwards.
    pub(crate) fn overwrite_dist(&mut self, dist: Gaussian) -> Result<()> {
        if dist.dim() != self.dim() {
            return Err(Error::InvalidInput(
                "replacement joint dimension mismatch".into(),
            ));
        }
        self.dist = dist;
        Ok(())
    }

    /// Product-form projection: per-label marginals over their whole blocks.
    pub fn product_form(&self) -> Result<BTreeMap<Label, Gaussian>> {
        self.blocks
            .keys()
            .map(|l| Ok((*l, self.marginalize_to_label(l)?)))
            .collect()
    }

    fn canonicalize(&mut self) -> Result<()> {
        let mut perm = Vec::with_capacity(self.dim());
        let mut new_blocks = BTreeMap::new();
        let mut offset = 0usize;
        for (l, b) in &self.blocks {
            perm.extend(b.offset..b.offset + b.len);
            new_blocks.insert(
                *l,
                LabelBlock {
                    offset,
                    len: b.len,
                    start_scan: b.start_scan,
                },
            );
            offset += b.len;
        }
        self.dist = self.dist.marginal_idx(&perm)?;
        self.blocks = new_blocks;
        Ok(())
    }

    /// Restores canonical layout after `extend_scan` appended one scan per
    /// label (in `labels` order) at the tail starting at `tail_offset`.
    fn canonicalize_with_tail(&mut self, labels: &[Label], tail_offset: usize) -> Result<()> {
        let d = self.state_dim;
        let tail_pos: BTreeMap<Label, usize> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (*l, tail_offset + i * d))
            .collect();
        let mut perm = Vec::with_capacity(self.dim());
        let mut new_blocks = BTreeMap::new();
        let mut offset = 0usize;
        for (l, b) in &self.blocks {
            let extended = tail_pos.contains_key(l);
            let body = if extended { b.len - d } else { b.len };
            perm.extend(b.offset..b.offset + body);
            if extended {
                let t = tail_pos[l];
                perm.extend(t..t + d);
            }
            new_blocks.insert(
                *l,
                LabelBlock {
                    offset,
                    len: b.len,
                    start_scan: b.start_scan,
                },
            );
            offset += b.len;
        }
        self.dist = self.dist.marginal_idx(&perm)?;
        self.blocks = new_blocks;
        Ok(())
    }
}

/// Spec-shaped free function over [`JointTrajectoryDensity::marginalize_to_label`].
pub fn marginalize_to_label(joint: &JointTrajectoryDensity, label: &Label) -> Result<Gaussian> {
    joint.marginalize_to_label(label)
}

// ---------------------------------------------------------------------------
// Per-trajectory density
// ---------------------------------------------------------------------------

/// Product-form attribute density of one trajectory: a joint Gaussian over a
/// contiguous run of scans (`state_dim` entries per scan).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDensity {
    start_scan: u32,
    state_dim: usize,
    segment: Gaussian,
}

impl TrajectoryDensity {
    pub fn new(start_scan: u32, state_dim: usize, segment: Gaussian) -> Result<Self> {
        if segment.dim() == 0 || segment.dim() % state_dim != 0 {
            return Err(Error::InvalidInput(
                "segment dimension must be a positive multiple of state_dim".into(),
            ));
        }
        Ok(Self {
            start_scan,
            state_dim,
            segment,
        })
    }

    pub fn start_scan(&self) -> u32 {
        self.start_scan
    }

    pub fn end_scan(&self) -> u32 {
        self.start_scan + self.n_scans() as u32 - 1
    }

    pub fn n_scans(&self) -> usize {
        self.segment.dim() / self.state_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn segment(&self) -> &Gaussian {
        &self.segment
    }

    pub fn covers(&self, scan: u32) -> bool {
        scan >= self.start_scan && scan <= self.end_scan()
    }

    /// Marginal Gaussian of one scan.
    pub fn scan_marginal(&self, scan: u32) -> Result<Gaussian> {
        if !self.covers(scan) {
            return Err(Error::InvalidInput(format!(
                "scan {scan} outside [{}, {}]",
                self.start_scan,
                self.end_scan()
            )));
        }
        let i = (scan - self.start_scan) as usize * self.state_dim;
        self.segment.marginal_range(i..i + self.state_dim)
    }

    /// Marginal of the final scan.
    pub fn current(&self) -> Gaussian {
        self.scan_marginal(self.end_scan())
            .expect("end scan always covered")
    }

    /// Splits at scan `m`: marginal over scans ≤ m and marginal over scans
    /// > m. Either side may be `None` when the trajectory lies entirely on
    /// the other side.
    pub fn split_at(&self, m: u32) -> Result<(Option<TrajectoryDensity>, Option<TrajectoryDensity>)> {
        let head_scans = if self.start_scan > m {
            0
        } else {
            ((m.min(self.end_scan()) - self.start_scan) + 1) as usize
        };
        let head = if head_scans == 0 {
            None
        } else {
            Some(TrajectoryDensity::new(
                self.start_scan,
                self.state_dim,
                self.segment
                    .marginal_range(0..head_scans * self.state_dim)?,
            )?)
        };
        let tail = if head_scans == self.n_scans() {
            None
        } else {
            Some(TrajectoryDensity::new(
                self.start_scan + head_scans as u32,
                self.state_dim,
                self.segment
                    .marginal_range(head_scans * self.state_dim..self.segment.dim())?,
            )?)
        };
        Ok((head, tail))
    }

    /// Per-scan marginal means, in scan order.
    pub fn scan_means(&self) -> Vec<DVector<f64>> {
        (0..self.n_scans())
            .map(|i| {
                DVector::from_fn(self.state_dim, |r, _| {
                    self.segment.mean()[i * self.state_dim + r]
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn label(t: u32, i: u32) -> Label {
        Label::new(t, i)
    }

    fn gauss(mean: &[f64], cov: &[&[f64]]) -> Gaussian {
        let d = mean.len();
        Gaussian::new(
            DVector::from_row_slice(mean),
            DMatrix::from_fn(d, d, |i, j| cov[i][j]),
        )
        .unwrap()
    }

    // Composite Simpson rule used as the quadrature oracle.
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = if n % 2 == 0 { n } else { n + 1 };
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn gaussian_rejects_dimension_mismatch() {
        let bad = Gaussian::new(DVector::zeros(2), DMatrix::zeros(3, 3));
        assert!(bad.is_err());
    }

    #[test]
    fn log_pdf_matches_univariate_closed_form() {
        let g = gauss(&[1.0], &[&[4.0]]);
        let x = DVector::from_row_slice(&[2.0]);
        let expect = -0.5 * ((1.0f64 / 4.0) + (4.0f64).ln() + (2.0 * std::f64::consts::PI).ln());
        assert_relative_eq!(g.log_pdf(&x).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn psd_repair_fixes_indefinite_covariance() {
        // Slightly indefinite: eigenvalues {2.1, -0.1}.
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.1, 1.1, 1.0]);
        let chol = psd_cholesky(&cov).unwrap();
        let rebuilt = chol.l() * chol.l().transpose();
        // Clamped matrix is PSD and close to the original.
        assert!((rebuilt[(0, 1)] - 1.05).abs() < 0.06);
    }

    #[test]
    fn fixture_round_trip_is_exact() {
        let g = gauss(
            &[1.5, -2.25e-7],
            &[&[0.3333333333333333, 0.1], &[0.1, 7.0e9]],
        );
        let back = Gaussian::from_fixture(&g.to_fixture()).unwrap();
        assert_eq!(g.mean(), back.mean());
        assert_eq!(g.cov(), back.cov());
    }

    // --- unscented transform -------------------------------------------------

    #[test]
    fn ut_identity_returns_input() {
        let g = gauss(&[1.0, -2.0], &[&[2.0, 0.5], &[0.5, 1.0]]);
        let out = unscented_propagate(&g, &|x| x.clone(), &UtParams::default(), None).unwrap();
        assert_relative_eq!(out.mean(), g.mean(), epsilon = 1e-10);
        assert_relative_eq!(out.cov(), g.cov(), epsilon = 1e-10);
    }

    #[test]
    fn ut_affine_is_exact() {
        let g = gauss(&[1.0, -2.0, 0.5], &[&[2.0, 0.5, 0.1], &[0.5, 1.0, 0.0], &[0.1, 0.0, 3.0]]);
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, -1.0, 0.0, 0.5, 4.0]);
        let b = DVector::from_row_slice(&[3.0, -1.0]);
        let q = DMatrix::from_diagonal(&DVector::from_row_slice(&[0.1, 0.2]));
        let a2 = a.clone();
        let b2 = b.clone();
        let out =
            unscented_propagate(&g, &move |x| &a2 * x + &b2, &UtParams::default(), Some(&q))
                .unwrap();
        let expect_mean = &a * g.mean() + &b;
        let expect_cov = &a * g.cov() * a.transpose() + &q;
        assert_relative_eq!(out.mean(), &expect_mean, epsilon = 1e-8);
        assert_relative_eq!(out.cov(), &expect_cov, epsilon = 1e-8);
    }

    #[test]
    fn ut_sigma_weights_sum_to_one() {
        for dim in [1usize, 3, 16] {
            let g = Gaussian::new(DVector::zeros(dim), DMatrix::identity(dim, dim)).unwrap();
            let sp = sigma_points(&g, &UtParams::default()).unwrap();
            let sm: f64 = sp.w_mean.iter().sum();
            assert_relative_eq!(sm, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn conditional_update_matches_kalman_closed_form() {
        let g = gauss(&[1.0, 2.0], &[&[4.0, 1.0], &[1.0, 3.0]]);
        let h_mat = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let r = DMatrix::from_row_slice(1, 1, &[0.5]);
        let z = DVector::from_row_slice(&[2.5]);
        let hm = h_mat.clone();
        let (post, log_lik) =
            conditional_update(&g, &move |x| &hm * x, &[], &z, &r, &UtParams::default()).unwrap();

        let s = (&h_mat * g.cov() * h_mat.transpose() + &r)[(0, 0)];
        let k = g.cov() * h_mat.transpose() / s;
        let innov = z[0] - g.mean()[0];
        let expect_mean = g.mean() + &k * innov;
        let expect_cov = g.cov() - &k * s * k.transpose();
        assert_relative_eq!(post.mean(), &expect_mean, epsilon = 1e-8);
        assert_relative_eq!(post.cov(), &expect_cov, epsilon = 1e-8);
        let expect_ll = -0.5 * (innov * innov / s + s.ln() + (2.0 * std::f64::consts::PI).ln());
        assert_relative_eq!(log_lik, expect_ll, epsilon = 1e-8);
    }

    #[test]
    fn conditional_update_with_huge_noise_returns_prior() {
        let g = gauss(&[1.0, 2.0], &[&[4.0, 1.0], &[1.0, 3.0]]);
        let r = DMatrix::from_row_slice(1, 1, &[1e12]);
        let z = DVector::from_row_slice(&[100.0]);
        let (post, _) =
            conditional_update(&g, &|x| x.rows(0, 1).into_owned(), &[], &z, &r, &UtParams::default())
                .unwrap();
        assert_relative_eq!(post.mean(), g.mean(), epsilon = 1e-6);
        assert_relative_eq!(post.cov(), g.cov(), epsilon = 1e-6);
    }

    #[test]
    fn conditional_update_innovation_vanishes_at_predicted_mean() {
        let g = gauss(&[3.0, 4.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let r = DMatrix::from_row_slice(1, 1, &[1e-8]);
        let h = |x: &DVector<f64>| DVector::from_row_slice(&[x[0] + x[1]]);
        let z = DVector::from_row_slice(&[7.0]);
        let (post, _) = conditional_update(&g, &h, &[], &z, &r, &UtParams::default()).unwrap();
        let post_h = post.mean()[0] + post.mean()[1];
        assert_relative_eq!(post_h, 7.0, epsilon = 1e-5);
    }

    #[test]
    fn bearing_range_log_lik_matches_quadrature() {
        // One object at roughly 500 m range; tight prior so the UT
        // linearization error sits well under the oracle tolerance.
        let g = gauss(
            &[300.0, 5.0, 400.0, 5.0],
            &[
                &[4.0, 0.0, 0.5, 0.0],
                &[0.0, 1.0, 0.0, 0.0],
                &[0.5, 0.0, 4.0, 0.0],
                &[0.0, 0.0, 0.0, 1.0],
            ],
        );
        let sig_th: f64 = 2.0 * std::f64::consts::PI / 180.0;
        let sig_r: f64 = 10.0;
        let r = DMatrix::from_diagonal(&DVector::from_row_slice(&[
            sig_th * sig_th,
            sig_r * sig_r,
        ]));
        let h = |x: &DVector<f64>| {
            DVector::from_row_slice(&[x[0].atan2(x[2]), (x[0] * x[0] + x[2] * x[2]).sqrt()])
        };
        let z = {
            let hz = h(g.mean());
            DVector::from_row_slice(&[hz[0] + 0.01, hz[1] + 3.0])
        };
        let (_, log_lik) = conditional_update(&g, &h, &[0], &z, &r, &UtParams::default()).unwrap();

        // Quadrature over the 2-D position marginal (h ignores velocities).
        let pos = g.marginal_idx(&[0, 2]).unwrap();
        let (m0, m1) = (pos.mean()[0], pos.mean()[1]);
        let (s0, s1) = (pos.cov()[(0, 0)].sqrt(), pos.cov()[(1, 1)].sqrt());
        let lik = |px: f64, py: f64| {
            let hz = h(&DVector::from_row_slice(&[px, 0.0, py, 0.0]));
            let dz0 = crate::wrap_angle(z[0] - hz[0]);
            let dz1 = z[1] - hz[1];
            let quad = dz0 * dz0 / (sig_th * sig_th) + dz1 * dz1 / (sig_r * sig_r);
            (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * sig_th * sig_r)
        };
        let inner = |px: f64| {
            let f = |py: f64| {
                let x = DVector::from_row_slice(&[px, py]);
                lik(px, py) * pos.log_pdf(&x).unwrap().exp()
            };
            simpson(&f, m1 - 8.0 * s1, m1 + 8.0 * s1, 240)
        };
        let quad = simpson(&inner, m0 - 8.0 * s0, m0 + 8.0 * s0, 240);
        let quad_log = quad.ln();
        assert!(
            (log_lik - quad_log).abs() <= 1e-4 * quad_log.abs(),
            "UT log-lik {log_lik} vs quadrature {quad_log}"
        );
    }

    // --- KL divergence --------------------------------------------------------

    #[test]
    fn kl_zero_for_identical() {
        let g = gauss(&[1.0, 2.0], &[&[2.0, 0.3], &[0.3, 1.0]]);
        assert!(kl_divergence(&g, &g).unwrap() < 1e-12);
    }

    #[test]
    fn kl_univariate_mean_shift() {
        let p = gauss(&[0.0], &[&[1.0]]);
        let q = gauss(&[1.0], &[&[1.0]]);
        assert_relative_eq!(kl_divergence(&p, &q).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let p = gauss(
            &[0.5, -1.0, 2.0, 0.0],
            &[
                &[2.0, 0.4, 0.0, 0.1],
                &[0.4, 1.5, 0.2, 0.0],
                &[0.0, 0.2, 1.0, 0.3],
                &[0.1, 0.0, 0.3, 2.5],
            ],
        );
        let q = gauss(
            &[0.0, 0.0, 1.5, 0.5],
            &[
                &[3.0, 0.1, 0.0, 0.0],
                &[0.1, 1.0, 0.0, 0.2],
                &[0.0, 0.0, 2.0, 0.1],
                &[0.0, 0.2, 0.1, 1.5],
            ],
        );
        let closed = kl_divergence(&p, &q).unwrap();
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let x = p.sample(&mut rng).unwrap();
            let v = p.log_pdf(&x).unwrap() - q.log_pdf(&x).unwrap();
            sum += v;
            sum_sq += v * v;
        }
        let mc = sum / n as f64;
        let sd = ((sum_sq / n as f64 - mc * mc) / n as f64).sqrt();
        assert!(
            (closed - mc).abs() < 3.0 * sd + 1e-3,
            "closed {closed} vs MC {mc} (3σ = {})",
            3.0 * sd
        );
    }

    // --- joint trajectory density ---------------------------------------------

    fn two_label_joint() -> JointTrajectoryDensity {
        // 1-D state, two labels, one scan each, correlation 0.9.
        let mut j = JointTrajectoryDensity::empty(1);
        j.insert_independent(label(0, 0), 0, &gauss(&[1.0], &[&[1.0]])).unwrap();
        j.insert_independent(label(0, 1), 0, &gauss(&[-1.0], &[&[4.0]])).unwrap();
        let mean = j.dist().mean().clone();
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.8, 1.8, 4.0]);
        j.dist = Gaussian::new(mean, cov).unwrap();
        j
    }

    #[test]
    fn marginalize_block_diagonal_is_exact_subgaussian() {
        let mut j = JointTrajectoryDensity::empty(2);
        let g0 = gauss(&[1.0, 2.0], &[&[1.0, 0.1], &[0.1, 2.0]]);
        let g1 = gauss(&[-1.0, 0.0], &[&[3.0, 0.0], &[0.0, 4.0]]);
        j.insert_independent(label(0, 0), 0, &g0).unwrap();
        j.insert_independent(label(0, 1), 0, &g1).unwrap();
        let m0 = j.marginalize_to_label(&label(0, 0)).unwrap();
        assert_relative_eq!(m0.mean(), g0.mean(), epsilon = 1e-12);
        assert_relative_eq!(m0.cov(), g0.cov(), epsilon = 1e-12);
        // Cross terms of the assembled joint are zero.
        assert_eq!(j.dist().cov()[(0, 2)], 0.0);
    }

    #[test]
    fn marginal_is_correlated_slice() {
        let j = two_label_joint();
        let m1 = j.marginalize_to_label(&label(0, 1)).unwrap();
        assert_eq!(m1.mean()[0], -1.0);
        assert_eq!(m1.cov()[(0, 0)], 4.0);
    }

    #[test]
    fn marginal_density_matches_quadrature() {
        let j = two_label_joint();
        let marg = j.marginalize_to_label(&label(0, 0)).unwrap();
        for x0 in [-1.0, 0.5, 1.0, 2.5] {
            let joint = j.dist().clone();
            let f = |x1: f64| {
                joint
                    .log_pdf(&DVector::from_row_slice(&[x0, x1]))
                    .unwrap()
                    .exp()
            };
            let quad = simpson(&f, -1.0 - 25.0, -1.0 + 25.0, 4000);
            let direct = marg.log_pdf(&DVector::from_row_slice(&[x0])).unwrap().exp();
            assert!(
                (quad - direct).abs() < 1e-5,
                "x0={x0}: quadrature {quad} vs marginal {direct}"
            );
        }
    }

    #[test]
    fn unknown_label_is_invalid_input() {
        let j = two_label_joint();
        assert!(j.marginalize_to_label(&label(3, 3)).is_err());
    }

    #[test]
    fn remove_label_keeps_remaining_marginal() {
        let mut j = two_label_joint();
        let removed = j.remove_label(&label(0, 0)).unwrap();
        assert_eq!(removed.mean()[0], 1.0);
        assert_eq!(j.n_labels(), 1);
        assert_eq!(j.dim(), 1);
        assert_eq!(j.dist().mean()[0], -1.0);
        assert_eq!(j.dist().cov()[(0, 0)], 4.0);
    }

    #[test]
    fn extend_scan_affine_matches_direct_joint() {
        // x_new = 2 x_old + 1 with noise-free completion; verify cross
        // covariance against the closed form.
        let mut j = JointTrajectoryDensity::empty(1);
        j.insert_independent(label(0, 0), 0, &gauss(&[1.0], &[&[2.0]])).unwrap();
        let (cur, idx) = j.current_scan_marginal(&[label(0, 0)]).unwrap();
        let out = ut_transform(&cur, &|x| 2.0 * x, &[], &UtParams::default()).unwrap();
        j.extend_scan(&[label(0, 0)], 1, &out, &idx).unwrap();
        assert_eq!(j.dim(), 2);
        assert_relative_eq!(j.dist().mean()[1], 2.0, epsilon = 1e-9);
        assert_relative_eq!(j.dist().cov()[(0, 1)], 4.0, epsilon = 1e-8);
        assert_relative_eq!(j.dist().cov()[(1, 1)], 8.0, epsilon = 1e-8);
        let b = j.block(&label(0, 0)).unwrap();
        assert_eq!((b.offset, b.len, b.start_scan), (0, 2, 0));
    }

    #[test]
    fn condition_on_updates_correlated_partner() {
        let mut j = two_label_joint();
        let r = DMatrix::from_row_slice(1, 1, &[1e-6]);
        let z = DVector::from_row_slice(&[2.0]);
        let ll = j
            .condition_on(&[0], &|x| x.clone(), &[], &z, &r, &UtParams::default())
            .unwrap();
        assert!(ll.is_finite());
        // Conditioning x0 to 2.0 moves x1 by rho * (2 - 1): 1.8/1.0 * 1 = 1.8.
        assert_relative_eq!(j.dist().mean()[0], 2.0, epsilon = 1e-4);
        assert_relative_eq!(j.dist().mean()[1], 0.8, epsilon = 1e-3);
    }

    #[test]
    fn moment_match_recovers_single_component() {
        let g = gauss(&[1.0, 2.0], &[&[1.0, 0.2], &[0.2, 2.0]]);
        let m = moment_match(&[(0.7, g.clone())]).unwrap();
        assert_relative_eq!(m.mean(), g.mean(), epsilon = 1e-12);
        assert_relative_eq!(m.cov(), g.cov(), epsilon = 1e-12);
    }

    #[test]
    fn trajectory_density_split_slices_scans() {
        let seg = gauss(
            &[1.0, 2.0, 3.0],
            &[&[1.0, 0.5, 0.2], &[0.5, 2.0, 0.7], &[0.2, 0.7, 3.0]],
        );
        let td = TrajectoryDensity::new(4, 1, seg).unwrap();
        assert_eq!(td.end_scan(), 6);
        let (head, tail) = td.split_at(5).unwrap();
        let head = head.unwrap();
        let tail = tail.unwrap();
        assert_eq!(head.n_scans(), 2);
        assert_eq!(tail.start_scan(), 6);
        assert_eq!(tail.segment().mean()[0], 3.0);
        assert_eq!(head.segment().cov()[(0, 1)], 0.5);
    }
}
