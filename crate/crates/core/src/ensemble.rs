//! Monte Carlo orchestration: deterministic trajectory scheduling,
//! ensemble statistics with uncertainty, weighted aggregation, and
//! discretization-order reporting.
//!
//! Trajectories are independent given `(seed, trajectory_index)`, so work is
//! split into fixed-size chunks processed in parallel. Each chunk
//! accumulates sequentially by trajectory index and chunk accumulators merge
//! in a fixed pairwise tree, which makes every result bit-identical across
//! worker counts and scheduling orders.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{
    EngineKind, ExperimentSpec, MeasurementOutcome, PreparedExperiment, Snapshot, TrajectoryStatus,
};
use crate::lindblad;
use crate::operators::{
    hermitize_in_place, min_eigenvalue, trace_product, DensityMatrix, Operator,
};
use crate::stats;
use crate::{tolerances, C64};

/// Trajectories per work unit; fixed so that reduction shape does not
/// depend on the worker count.
const TRAJ_CHUNK: usize = 64;

/// A named scalar functional of the normalized state, tracked over time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedObservable {
    pub name: String,
    #[serde(flatten)]
    pub selector: ObservableSelector,
}

/// What to extract from the state at each snapshot.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservableSelector {
    /// Population `ρ_ii`.
    Diag { index: usize },
    /// One matrix element; `part` picks the real part, imaginary part, or
    /// modulus (the per-trajectory modulus, not the modulus of the mean).
    Element {
        row: usize,
        col: usize,
        part: ElementPart,
    },
    /// `Re Tr(op · ρ)`.
    Expectation { op: Operator },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementPart {
    Re,
    Im,
    Abs,
}

impl NamedObservable {
    pub fn diag(index: usize) -> Self {
        Self {
            name: format!("p{index}"),
            selector: ObservableSelector::Diag { index },
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let ok = match &self.selector {
            ObservableSelector::Diag { index } => *index < dim,
            ObservableSelector::Element { row, col, .. } => *row < dim && *col < dim,
            ObservableSelector::Expectation { op } => {
                if op.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: op.dim(),
                    });
                }
                true
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!(
                "observable '{}' indexes outside dim {dim}",
                self.name
            )))
        }
    }

    pub fn value(&self, rho: &DMatrix<C64>) -> f64 {
        match &self.selector {
            ObservableSelector::Diag { index } => rho[(*index, *index)].re,
            ObservableSelector::Element { row, col, part } => {
                let z = rho[(*row, *col)];
                match part {
                    ElementPart::Re => z.re,
                    ElementPart::Im => z.im,
                    ElementPart::Abs => z.norm(),
                }
            }
            ObservableSelector::Expectation { op } => trace_product(op.matrix(), rho).re,
        }
    }
}

#[derive(Clone)]
struct ScalarMoments {
    sum: f64,
    sumsq: f64,
}

impl ScalarMoments {
    fn new() -> Self {
        Self {
            sum: 0.0,
            sumsq: 0.0,
        }
    }
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.sumsq += x * x;
    }
    fn merge(&mut self, o: &Self) {
        self.sum += o.sum;
        self.sumsq += o.sumsq;
    }
    fn mean_se(&self, n: usize) -> (f64, f64) {
        if n == 0 {
            return (f64::NAN, f64::NAN);
        }
        let nf = n as f64;
        let mean = self.sum / nf;
        if n == 1 {
            return (mean, 0.0);
        }
        let var = ((self.sumsq - nf * mean * mean) / (nf - 1.0)).max(0.0);
        (mean, (var / nf).sqrt())
    }
}

#[derive(Clone)]
struct MatrixMoments {
    sum: DMatrix<C64>,
    sumsq_re: DMatrix<f64>,
    sumsq_im: DMatrix<f64>,
}

impl MatrixMoments {
    fn new(dim: usize) -> Self {
        Self {
            sum: DMatrix::zeros(dim, dim),
            sumsq_re: DMatrix::zeros(dim, dim),
            sumsq_im: DMatrix::zeros(dim, dim),
        }
    }

    fn push_scaled(&mut self, m: &DMatrix<C64>, scale: f64) {
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                let z = m[(i, j)] * C64::new(scale, 0.0);
                self.sum[(i, j)] += z;
                self.sumsq_re[(i, j)] += z.re * z.re;
                self.sumsq_im[(i, j)] += z.im * z.im;
            }
        }
    }

    fn merge(&mut self, o: &Self) {
        self.sum += &o.sum;
        self.sumsq_re += &o.sumsq_re;
        self.sumsq_im += &o.sumsq_im;
    }

    fn finalize(&self, n: usize) -> (DMatrix<C64>, DMatrix<f64>, DMatrix<f64>) {
        let nf = n as f64;
        let dim = self.sum.nrows();
        let mean = &self.sum / C64::new(nf, 0.0);
        let mut se_re = DMatrix::zeros(dim, dim);
        let mut se_im = DMatrix::zeros(dim, dim);
        if n > 1 {
            for j in 0..dim {
                for i in 0..dim {
                    let m = mean[(i, j)];
                    let vr = ((self.sumsq_re[(i, j)] - nf * m.re * m.re) / (nf - 1.0)).max(0.0);
                    let vi = ((self.sumsq_im[(i, j)] - nf * m.im * m.im) / (nf - 1.0)).max(0.0);
                    se_re[(i, j)] = (vr / nf).sqrt();
                    se_im[(i, j)] = (vi / nf).sqrt();
                }
            }
        }
        (mean, se_re, se_im)
    }
}

#[derive(Clone)]
struct WeightedDiagMoments {
    // Σ w p_m, Σ w² p_m, Σ w² p_m² per diagonal index.
    swp: Vec<f64>,
    sw2p: Vec<f64>,
    sw2p2: Vec<f64>,
}

impl WeightedDiagMoments {
    fn new(dim: usize) -> Self {
        Self {
            swp: vec![0.0; dim],
            sw2p: vec![0.0; dim],
            sw2p2: vec![0.0; dim],
        }
    }
    fn push(&mut self, rho: &DMatrix<C64>, w: f64) {
        for m in 0..self.swp.len() {
            let p = rho[(m, m)].re;
            self.swp[m] += w * p;
            self.sw2p[m] += w * w * p;
            self.sw2p2[m] += w * w * p * p;
        }
    }
    fn merge(&mut self, o: &Self) {
        for m in 0..self.swp.len() {
            self.swp[m] += o.swp[m];
            self.sw2p[m] += o.sw2p[m];
            self.sw2p2[m] += o.sw2p2[m];
        }
    }
}

struct PointAcc {
    rho: MatrixMoments,
    r: MatrixMoments,
    w: ScalarMoments,
    wdiag: WeightedDiagMoments,
    obs: Vec<ScalarMoments>,
}

impl PointAcc {
    fn new(dim: usize, n_obs: usize) -> Self {
        Self {
            rho: MatrixMoments::new(dim),
            r: MatrixMoments::new(dim),
            w: ScalarMoments::new(),
            wdiag: WeightedDiagMoments::new(dim),
            obs: vec![ScalarMoments::new(); n_obs],
        }
    }

    fn push(&mut self, snap: &Snapshot, observables: &[NamedObservable]) {
        self.rho.push_scaled(&snap.rho, 1.0);
        self.r.push_scaled(&snap.rho, snap.weight);
        self.w.push(snap.weight);
        self.wdiag.push(&snap.rho, snap.weight);
        for (acc, o) in self.obs.iter_mut().zip(observables) {
            acc.push(o.value(&snap.rho));
        }
    }

    fn merge(&mut self, o: &Self) {
        self.rho.merge(&o.rho);
        self.r.merge(&o.r);
        self.w.merge(&o.w);
        self.wdiag.merge(&o.wdiag);
        for (a, b) in self.obs.iter_mut().zip(&o.obs) {
            a.merge(b);
        }
    }
}

struct ChunkAcc {
    n: usize,
    points: Vec<PointAcc>,
    outcomes: Vec<MeasurementOutcome>,
    repair_steps: u64,
    norm_dev_signed: f64,
    norm_dev_abs: f64,
    herm_dev_max: f64,
    worst_min_eig: f64,
}

impl ChunkAcc {
    fn new(dim: usize, n_points: usize, n_obs: usize) -> Self {
        Self {
            n: 0,
            points: (0..n_points).map(|_| PointAcc::new(dim, n_obs)).collect(),
            outcomes: Vec::new(),
            repair_steps: 0,
            norm_dev_signed: 0.0,
            norm_dev_abs: 0.0,
            herm_dev_max: 0.0,
            worst_min_eig: 0.0,
        }
    }

    fn merge(mut self, other: ChunkAcc) -> ChunkAcc {
        self.n += other.n;
        for (a, b) in self.points.iter_mut().zip(&other.points) {
            a.merge(b);
        }
        self.outcomes.extend(other.outcomes);
        self.repair_steps += other.repair_steps;
        self.norm_dev_signed += other.norm_dev_signed;
        self.norm_dev_abs += other.norm_dev_abs;
        self.herm_dev_max = self.herm_dev_max.max(other.herm_dev_max);
        self.worst_min_eig = self.worst_min_eig.min(other.worst_min_eig);
        self
    }
}

fn merge_pairwise(mut items: Vec<ChunkAcc>) -> Option<ChunkAcc> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len() / 2 + 1);
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(a.merge(b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

/// Statistics of the ensemble at one snapshot time.
#[derive(Clone, Debug)]
pub struct PointStats {
    /// Unweighted mean of the normalized states.
    pub mean: DMatrix<C64>,
    pub se_re: DMatrix<f64>,
    pub se_im: DMatrix<f64>,
    /// Unweighted mean of the unnormalized `R = w·ρ` (equals `mean` for the
    /// nonlinear engines).
    pub mean_r: DMatrix<C64>,
    pub se_r_re: DMatrix<f64>,
    pub se_r_im: DMatrix<f64>,
    pub weight_mean: f64,
    pub weight_se: f64,
    /// Effective sample size `(Σw)²/Σw²`.
    pub neff: f64,
    /// Importance-weighted mean populations with ratio-estimator errors.
    pub weighted_diag: Vec<f64>,
    pub weighted_diag_se: Vec<f64>,
    /// `(mean, se)` per tracked observable.
    pub observables: Vec<(f64, f64)>,
}

/// Aggregate per-step repair diagnostics over all successful trajectories.
#[derive(Clone, Debug, Serialize)]
pub struct RepairStats {
    pub steps: u64,
    /// Mean signed pre-renormalization deviation per step; stays `O(dt²)`.
    pub mean_norm_dev_signed: f64,
    /// Mean absolute deviation per step.
    pub mean_norm_dev_abs: f64,
    pub max_herm_dev: f64,
    /// Most negative eigenvalue seen at any snapshot of any trajectory;
    /// excursions of size O(√(dt·t)) are intrinsic to the discretization.
    pub worst_min_eigenvalue: f64,
}

/// Full result of a Monte Carlo run.
pub struct EnsembleResult {
    pub spec: ExperimentSpec,
    pub observables: Vec<NamedObservable>,
    pub times: Vec<f64>,
    /// One outcome per trajectory, in index order (failures included).
    pub outcomes: Vec<MeasurementOutcome>,
    /// Number of trajectories contributing to the statistics.
    pub n_success: usize,
    pub points: Vec<PointStats>,
    pub repair: RepairStats,
    pub warnings: Vec<String>,
    pub failures: Vec<(u64, String)>,
}

impl EnsembleResult {
    /// Mean populations per time point.
    pub fn diag_means(&self) -> Vec<Vec<f64>> {
        self.points
            .iter()
            .map(|p| (0..p.mean.nrows()).map(|i| p.mean[(i, i)].re).collect())
            .collect()
    }

    pub fn diag_ses(&self) -> Vec<Vec<f64>> {
        self.points
            .iter()
            .map(|p| (0..p.se_re.nrows()).map(|i| p.se_re[(i, i)]).collect())
            .collect()
    }

    pub fn weighted_diag_means(&self) -> Vec<Vec<f64>> {
        self.points
            .iter()
            .map(|p| p.weighted_diag.clone())
            .collect()
    }

    pub fn weighted_diag_ses(&self) -> Vec<Vec<f64>> {
        self.points
            .iter()
            .map(|p| p.weighted_diag_se.clone())
            .collect()
    }

    /// Complex mean and combined SE of one off-diagonal element over time.
    pub fn offdiag_series(&self, m: usize, n: usize) -> (Vec<C64>, Vec<f64>) {
        let means = self.points.iter().map(|p| p.mean[(m, n)]).collect();
        let ses = self
            .points
            .iter()
            .map(|p| p.se_re[(m, n)].hypot(p.se_im[(m, n)]))
            .collect();
        (means, ses)
    }

    /// Endpoint-frequency report for this run.
    pub fn born_report(&self) -> Result<crate::experiment::FrequencyReport> {
        crate::experiment::estimate_born_frequencies(&self.outcomes, &self.spec.initial)
    }

    /// Martingale report on the mean populations: importance-weighted for
    /// the linear engine, plain for the nonlinear ones.
    pub fn martingale_report(&self) -> crate::experiment::MartingaleReport {
        let initial = self.spec.initial.diagonals();
        if matches!(self.spec.engine, EngineKind::LinearWeighted) {
            crate::experiment::check_martingale(
                &self.times,
                &self.weighted_diag_means(),
                &self.weighted_diag_ses(),
                &initial,
            )
        } else {
            crate::experiment::check_martingale(
                &self.times,
                &self.diag_means(),
                &self.diag_ses(),
                &initial,
            )
        }
    }
}

/// Run the full ensemble with the default (empty) observable list.
pub fn run_ensemble(spec: &ExperimentSpec) -> Result<EnsembleResult> {
    run_ensemble_with(spec, &[])
}

/// Run the full ensemble, tracking the given observables at each snapshot.
///
/// Deterministic for fixed `(spec, seed)` regardless of the rayon pool in
/// use: chunk boundaries and the reduction tree depend only on trajectory
/// indices.
pub fn run_ensemble_with(
    spec: &ExperimentSpec,
    observables: &[NamedObservable],
) -> Result<EnsembleResult> {
    let prepared = PreparedExperiment::new(spec)?;
    for o in observables {
        o.validate(prepared.lindblad.dim())?;
    }
    let dim = prepared.lindblad.dim();
    let n = spec.trajectories;
    let n_points = prepared.record_steps.len();
    let n_chunks = n.div_ceil(TRAJ_CHUNK);
    let chunks: Vec<ChunkAcc> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * TRAJ_CHUNK;
            let hi = ((c + 1) * TRAJ_CHUNK).min(n);
            let mut acc = ChunkAcc::new(dim, n_points, observables.len());
            for k in lo..hi {
                let data = prepared.run_trajectory(k as u64);
                if data.outcome.status != TrajectoryStatus::Failed {
                    acc.n += 1;
                    for (point, snap) in acc.points.iter_mut().zip(&data.snapshots) {
                        point.push(snap, observables);
                    }
                    acc.repair_steps += data.repair.steps;
                    acc.norm_dev_signed += data.repair.norm_dev_signed;
                    acc.norm_dev_abs += data.repair.norm_dev_abs;
                    acc.herm_dev_max = acc.herm_dev_max.max(data.repair.herm_dev_max);
                    acc.worst_min_eig = acc.worst_min_eig.min(data.repair.worst_min_eigenvalue);
                }
                acc.outcomes.push(data.outcome);
            }
            acc
        })
        .collect();
    let merged = merge_pairwise(chunks).expect("at least one chunk");
    finalize(prepared, observables, merged)
}

fn finalize(
    prepared: PreparedExperiment,
    observables: &[NamedObservable],
    acc: ChunkAcc,
) -> Result<EnsembleResult> {
    let spec = prepared.spec.clone();
    let times = prepared.record_times();
    let n = acc.n;
    if n == 0 {
        return Err(Error::EmptyOutcomes);
    }
    let failures: Vec<(u64, String)> = acc
        .outcomes
        .iter()
        .filter(|o| o.status == TrajectoryStatus::Failed)
        .map(|o| {
            (
                o.trajectory_index,
                o.failure.clone().unwrap_or_else(|| "unknown".into()),
            )
        })
        .collect();

    let mut points = Vec::with_capacity(acc.points.len());
    for p in &acc.points {
        let (mean, se_re, se_im) = p.rho.finalize(n);
        let (mean_r, se_r_re, se_r_im) = p.r.finalize(n);
        let (weight_mean, weight_se) = p.w.mean_se(n);
        let sw = p.w.sum;
        let sw2 = p.w.sumsq;
        let neff = if sw2 > 0.0 { sw * sw / sw2 } else { 0.0 };
        let dim = mean.nrows();
        let mut weighted_diag = vec![0.0; dim];
        let mut weighted_diag_se = vec![0.0; dim];
        for m in 0..dim {
            let est = p.wdiag.swp[m] / sw;
            weighted_diag[m] = est;
            let var = (p.wdiag.sw2p2[m] - 2.0 * est * p.wdiag.sw2p[m] + est * est * sw2).max(0.0);
            weighted_diag_se[m] = var.sqrt() / sw;
        }
        let obs = p.obs.iter().map(|s| s.mean_se(n)).collect();
        points.push(PointStats {
            mean,
            se_re,
            se_im,
            mean_r,
            se_r_re,
            se_r_im,
            weight_mean,
            weight_se,
            neff,
            weighted_diag,
            weighted_diag_se,
            observables: obs,
        });
    }

    let mut warnings = Vec::new();
    if let Some(w) = &prepared.warning {
        warnings.push(w.clone());
    }
    // Weight-degeneracy diagnostics: reported, never corrected. Neff is
    // non-increasing in expectation only, so small pathwise rises are
    // normal; flag only clear reversals.
    let mut prev_neff = f64::INFINITY;
    let mut min_neff = f64::INFINITY;
    for (t, p) in times.iter().zip(&points) {
        if p.neff > prev_neff * 1.01 && prev_neff.is_finite() {
            warnings.push(format!(
                "effective sample size rose from {prev_neff:.1} to {:.1} at t={t}",
                p.neff
            ));
        }
        prev_neff = p.neff;
        min_neff = min_neff.min(p.neff);
    }
    if min_neff < 0.01 * n as f64 {
        warnings.push(format!(
            "weight degeneracy: effective sample size collapsed to {min_neff:.1} of {n}"
        ));
    }
    // Mean states must themselves be valid density matrices within the
    // statistical resolution of the run.
    for (t, p) in times.iter().zip(&points) {
        let mut m = p.mean.clone();
        let herm = hermitize_in_place(&mut m);
        let max_se = p
            .se_re
            .iter()
            .chain(p.se_im.iter())
            .fold(0.0f64, |a, &b| a.max(b));
        let tr: f64 = (0..m.nrows()).map(|i| m[(i, i)].re).sum();
        if herm > tolerances::HERMITICITY || (tr - 1.0).abs() > 1e-9 {
            warnings.push(format!(
                "mean state at t={t} violates structure: herm dev {herm:.2e}, trace {tr}"
            ));
        }
        let min_eig = min_eigenvalue(&m);
        if min_eig < -(tolerances::PSD + 4.0 * max_se) {
            warnings.push(format!(
                "mean state at t={t} has eigenvalue {min_eig:.3e} below the statistical floor"
            ));
        }
    }

    // Spectral excursions far beyond the intrinsic discretization scale
    // mean dt is too large for the operator norms.
    let excursion_scale = 10.0 * (spec.dt * spec.t_max * prepared.lindblad.max_norm_sq()).sqrt();
    if acc.worst_min_eig < -excursion_scale {
        warnings.push(format!(
            "negative-eigenvalue excursion {:.3e} exceeds the expected scale {:.3e}; consider a smaller dt",
            acc.worst_min_eig, excursion_scale
        ));
    }

    let repair = RepairStats {
        steps: acc.repair_steps,
        mean_norm_dev_signed: if acc.repair_steps > 0 {
            acc.norm_dev_signed / acc.repair_steps as f64
        } else {
            0.0
        },
        mean_norm_dev_abs: if acc.repair_steps > 0 {
            acc.norm_dev_abs / acc.repair_steps as f64
        } else {
            0.0
        },
        max_herm_dev: acc.herm_dev_max,
        worst_min_eigenvalue: acc.worst_min_eig,
    };

    Ok(EnsembleResult {
        spec,
        observables: observables.to_vec(),
        times,
        outcomes: acc.outcomes,
        n_success: n,
        points,
        repair,
        warnings,
        failures,
    })
}

/// Run a closure inside a rayon pool with the given number of workers;
/// `None` uses the global pool. Results are identical either way.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::InvalidSpec("workers must be >= 1".into())),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::InvalidSpec(format!("worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Importance-weighted mean of a set of states: `Σ w ρ / Σ w`,
/// re-symmetrized and trace-normalized.
pub fn weighted_mean_state(states: &[DensityMatrix], weights: &[f64]) -> Result<DensityMatrix> {
    if states.is_empty() || states.len() != weights.len() {
        return Err(Error::EmptyOutcomes);
    }
    let sw = stats::pairwise_sum(weights);
    if sw <= 0.0 {
        return Err(Error::ZeroWeightSum);
    }
    let dim = states[0].dim();
    let mut sum = DMatrix::<C64>::zeros(dim, dim);
    for (s, &w) in states.iter().zip(weights) {
        if s.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.dim(),
            });
        }
        for j in 0..dim {
            for i in 0..dim {
                sum[(i, j)] += s.matrix()[(i, j)] * C64::new(w, 0.0);
            }
        }
    }
    let inv = C64::new(1.0 / sw, 0.0);
    let mut out = sum * inv;
    hermitize_in_place(&mut out);
    let tr: f64 = (0..dim).map(|i| out[(i, i)].re).sum();
    let renorm = C64::new(1.0 / tr, 0.0);
    Ok(DensityMatrix::from_matrix_unchecked(out * renorm))
}

/// Verdict of the discretization-order check for one observable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceVerdict {
    /// Fitted order within [0.7, 1.3].
    Pass,
    /// Bias resolved but the fitted order is outside the window.
    Fail,
    /// Bias below the Monte Carlo noise floor at some step size.
    Inconclusive,
}

#[derive(Clone, Debug, Serialize)]
pub struct ObservableConvergence {
    pub name: String,
    pub biases: Vec<f64>,
    pub ses: Vec<f64>,
    pub fitted_order: Option<f64>,
    pub verdict: ConvergenceVerdict,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub dts: Vec<f64>,
    pub observables: Vec<ObservableConvergence>,
}

/// Estimate the weak discretization order: run the experiment at each step
/// size, measure the bias of each tracked observable against the
/// deterministic mean-dynamics reference at the final time, and fit
/// `bias ~ dt^p`. Bias below twice its standard error at any step size
/// yields `Inconclusive` rather than failure.
pub fn convergence_report(
    spec: &ExperimentSpec,
    dt_list: &[f64],
    observables: &[NamedObservable],
) -> Result<ConvergenceReport> {
    if dt_list.len() < 2 || dt_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidSpec(
            "dt list must contain at least two decreasing values".into(),
        ));
    }
    if observables.is_empty() {
        return Err(Error::InvalidSpec("no observables to track".into()));
    }
    let l = spec.mode.build()?;
    let oracle = lindblad::evolve_mean(&spec.initial, &l, spec.t_max, 4000)?;
    let oracle_final = oracle.states.last().expect("nonempty").matrix().clone();

    let mut biases = vec![Vec::new(); observables.len()];
    let mut ses = vec![Vec::new(); observables.len()];
    for &dt in dt_list {
        let mut s = spec.clone();
        s.dt = dt;
        let result = run_ensemble_with(&s, observables)?;
        let last = result.points.last().expect("nonempty");
        for (i, o) in observables.iter().enumerate() {
            let (mean, se) = last.observables[i];
            biases[i].push((mean - o.value(&oracle_final)).abs());
            ses[i].push(se);
        }
    }

    let mut out = Vec::with_capacity(observables.len());
    for (i, o) in observables.iter().enumerate() {
        // The 1e-12 absolute floor covers exactly conserved observables,
        // where the bias is rounding-level and no order is measurable.
        let resolved = biases[i]
            .iter()
            .zip(&ses[i])
            .all(|(&b, &se)| b > 2.0 * se && b > 1e-12);
        let (verdict, fitted) = if !resolved {
            (ConvergenceVerdict::Inconclusive, None)
        } else {
            match stats::fit_order(dt_list, &biases[i]) {
                Some(fit) if (0.7..=1.3).contains(&fit.slope) => {
                    (ConvergenceVerdict::Pass, Some(fit.slope))
                }
                Some(fit) => (ConvergenceVerdict::Fail, Some(fit.slope)),
                None => (ConvergenceVerdict::Inconclusive, None),
            }
        };
        out.push(ObservableConvergence {
            name: o.name.clone(),
            biases: biases[i].clone(),
            ses: ses[i].clone(),
            fitted_order: fitted,
            verdict,
        });
    }
    Ok(ConvergenceReport {
        dts: dt_list.to_vec(),
        observables: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::LindbladMode;

    fn small_spec(engine: EngineKind) -> ExperimentSpec {
        ExperimentSpec {
            engine,
            mode: LindbladMode::SingleObservable {
                eigenvalues: vec![0.0, 1.0],
            },
            initial: DensityMatrix::from_diagonal(&[0.3, 0.7]).unwrap(),
            dt: 1e-2,
            t_max: 1.0,
            trajectories: 200,
            seed: 5,
            eps_endpoint: 1e-4,
            record_points: 11,
        }
    }

    #[test]
    fn single_trajectory_ensemble_matches_direct_run() {
        let mut spec = small_spec(EngineKind::DensityNonlinear);
        spec.trajectories = 1;
        let ens = run_ensemble(&spec).unwrap();
        let direct = crate::experiment::run_measurement_trajectory(&spec, 0).unwrap();
        assert_eq!(ens.outcomes.len(), 1);
        assert_eq!(ens.outcomes[0].status, direct.status);
        assert_eq!(ens.outcomes[0].final_diagonals, direct.final_diagonals);
    }

    #[test]
    fn reruns_are_bit_identical_across_worker_counts() {
        let spec = small_spec(EngineKind::LinearWeighted);
        let a = with_workers(Some(1), || run_ensemble(&spec))
            .unwrap()
            .unwrap();
        let b = with_workers(Some(4), || run_ensemble(&spec))
            .unwrap()
            .unwrap();
        for (pa, pb) in a.points.iter().zip(&b.points) {
            assert_eq!(pa.mean, pb.mean);
            assert_eq!(pa.weight_mean, pb.weight_mean);
            assert_eq!(pa.neff, pb.neff);
        }
        for (oa, ob) in a.outcomes.iter().zip(&b.outcomes) {
            assert_eq!(oa.weight_final, ob.weight_final);
            assert_eq!(oa.endpoint_index, ob.endpoint_index);
        }
    }

    #[test]
    fn outcome_count_matches_trajectories() {
        let spec = small_spec(EngineKind::StateVector);
        let mut spec = spec;
        spec.initial = crate::operators::StateVector::basis(2, 1).to_density();
        let ens = run_ensemble(&spec).unwrap();
        assert_eq!(ens.outcomes.len(), spec.trajectories);
        assert_eq!(ens.n_success, spec.trajectories);
    }

    #[test]
    fn mean_states_track_reference_dynamics() {
        let mut spec = small_spec(EngineKind::DensityNonlinear);
        spec.trajectories = 400;
        let a = 1.0 / 2.0f64.sqrt();
        let psi = crate::operators::StateVector::new(nalgebra::DVector::from_vec(vec![
            C64::new(a, 0.0),
            C64::new(a, 0.0),
        ]))
        .unwrap();
        spec.initial = psi.to_density();
        let ens = run_ensemble(&spec).unwrap();
        let l = spec.mode.build().unwrap();
        let oracle = lindblad::evolve_mean_grid(&spec.initial, &l, &ens.times, 20).unwrap();
        for (i, p) in ens.points.iter().enumerate() {
            let want = oracle.states[i].matrix();
            for r in 0..2 {
                for c in 0..2 {
                    let dev = (p.mean[(r, c)] - want[(r, c)]).norm();
                    let se = p.se_re[(r, c)].hypot(p.se_im[(r, c)]);
                    // 4 SE plus first-order discretization allowance.
                    assert!(
                        dev < 4.0 * se + 0.1 * spec.dt + 1e-12,
                        "t={} ({r},{c}): dev {dev:.3e} se {se:.3e}",
                        ens.times[i]
                    );
                }
            }
        }
    }

    #[test]
    fn weighted_mean_state_basics() {
        let s0 = DensityMatrix::from_diagonal(&[1.0, 0.0]).unwrap();
        let s1 = DensityMatrix::from_diagonal(&[0.0, 1.0]).unwrap();
        let m = weighted_mean_state(&[s0.clone(), s1.clone()], &[1.0, 1.0]).unwrap();
        assert!((m.element(0, 0).re - 0.5).abs() < 1e-15);
        let only = weighted_mean_state(&[s0.clone(), s1], &[2.0, 0.0]).unwrap();
        assert!((only.element(0, 0).re - 1.0).abs() < 1e-15);
        assert!(matches!(
            weighted_mean_state(&[s0], &[0.0]),
            Err(Error::ZeroWeightSum)
        ));
    }

    #[test]
    fn effective_sample_size_is_full_for_nonlinear_engines() {
        let spec = small_spec(EngineKind::DensityNonlinear);
        let ens = run_ensemble(&spec).unwrap();
        for p in &ens.points {
            assert!((p.neff - spec.trajectories as f64).abs() < 1e-9);
            assert_eq!(p.weight_mean, 1.0);
        }
    }

    #[test]
    fn linear_weight_mean_stays_near_one() {
        let mut spec = small_spec(EngineKind::LinearWeighted);
        spec.trajectories = 500;
        let ens = run_ensemble(&spec).unwrap();
        for p in &ens.points {
            assert!(
                (p.weight_mean - 1.0).abs() < 4.0 * p.weight_se + 1e-12,
                "weight mean {} se {}",
                p.weight_mean,
                p.weight_se
            );
        }
        // Weights diversify, so the effective sample size must shrink.
        let last = ens.points.last().unwrap();
        assert!(last.neff < spec.trajectories as f64);
    }

    #[test]
    fn observables_track_matrix_moments() {
        let mut spec = small_spec(EngineKind::DensityNonlinear);
        spec.trajectories = 50;
        let obs = vec![
            NamedObservable::diag(0),
            NamedObservable {
                name: "re01".into(),
                selector: ObservableSelector::Element {
                    row: 0,
                    col: 1,
                    part: ElementPart::Re,
                },
            },
            NamedObservable {
                name: "n".into(),
                selector: ObservableSelector::Expectation {
                    op: Operator::from_real_diagonal(&[0.0, 1.0]),
                },
            },
        ];
        let ens = run_ensemble_with(&spec, &obs).unwrap();
        for p in &ens.points {
            let (p0, _) = p.observables[0];
            assert!((p0 - p.mean[(0, 0)].re).abs() < 1e-12);
            let (re01, _) = p.observables[1];
            assert!((re01 - p.mean[(0, 1)].re).abs() < 1e-12);
            let (n_mean, _) = p.observables[2];
            assert!((n_mean - p.mean[(1, 1)].re).abs() < 1e-12);
        }
    }

    #[test]
    fn observable_validation_catches_out_of_range() {
        let spec = small_spec(EngineKind::DensityNonlinear);
        let obs = vec![NamedObservable::diag(5)];
        assert!(run_ensemble_with(&spec, &obs).is_err());
    }

    #[test]
    fn convergence_zero_coupling_is_inconclusive() {
        let mut spec = small_spec(EngineKind::DensityNonlinear);
        spec.mode = LindbladMode::SingleObservable {
            eigenvalues: vec![0.0, 0.0],
        };
        spec.trajectories = 50;
        spec.t_max = 0.4;
        let obs = vec![
            NamedObservable::diag(0),
            // Trace of the state: conserved per step, zero bias identically.
            NamedObservable {
                name: "trace".into(),
                selector: ObservableSelector::Expectation {
                    op: Operator::identity(2),
                },
            },
        ];
        let report = convergence_report(&spec, &[4e-2, 2e-2], &obs).unwrap();
        for o in &report.observables {
            assert_eq!(o.verdict, ConvergenceVerdict::Inconclusive, "{}", o.name);
            assert!(
                o.biases.iter().all(|&b| b < 1e-12),
                "{}: {:?}",
                o.name,
                o.biases
            );
        }
    }

    #[test]
    fn convergence_detects_first_order_bias() {
        // Coarse steps make the weak bias of the mean dynamics visible above
        // the Monte Carlo noise. The state-vector engine is used because its
        // renormalized steps cannot trip positivity guards at coarse dt, and
        // absorption is disabled so no trajectory freezes.
        let mut spec = small_spec(EngineKind::StateVector);
        let a = 1.0 / 2.0f64.sqrt();
        let psi = crate::operators::StateVector::new(nalgebra::DVector::from_vec(vec![
            C64::new(a, 0.0),
            C64::new(a, 0.0),
        ]))
        .unwrap();
        spec.initial = psi.to_density();
        spec.t_max = 1.0;
        spec.trajectories = 30_000;
        spec.eps_endpoint = 1e-12;
        let obs = vec![NamedObservable {
            name: "re01".into(),
            selector: ObservableSelector::Element {
                row: 0,
                col: 1,
                part: ElementPart::Re,
            },
        }];
        let report = convergence_report(&spec, &[2e-1, 1e-1], &obs).unwrap();
        let o = &report.observables[0];
        assert_eq!(o.verdict, ConvergenceVerdict::Pass, "{o:?}");
    }
}
