//! Measurement experiments: collapse to eigenstates, Born-rule endpoint
//! frequencies, off-diagonal decay rates, and the diagonal martingale.
//!
//! A coupling to a diagonal observable (or to the projector family on the
//! computational basis) drives every trajectory toward an eigenstate: the
//! diagonals diffuse as a martingale with absorbing endpoints at 0 and 1
//! while the off-diagonals decay. The endpoint `m` is reached with relative
//! frequency given by the initial diagonal `ρ_mm(0)`, which these
//! experiments estimate with binomial (or weighted effective-sample)
//! standard errors.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::{
    check_step_size, step_density_in_place, step_linear_in_place, step_state_vector_in_place,
    write_step_record, StateSnapshot, StepRecord, StepSizeCheck, Workspace,
};
use crate::error::{Error, Result};
use crate::noise::NoiseStream;
use crate::operators::{
    build_observable, build_projector_set, min_eigenvalue, DensityMatrix, LindbladSet, StateVector,
    UnnormalizedState,
};
use crate::stats::weighted_mean_se;
use crate::{tolerances, C64};

/// Which integrator drives the trajectories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    StateVector,
    DensityNonlinear,
    LinearWeighted,
}

impl EngineKind {
    pub fn name(&self) -> &'static str {
        match self {
            EngineKind::StateVector => "state_vector",
            EngineKind::DensityNonlinear => "density_nonlinear",
            EngineKind::LinearWeighted => "linear_weighted",
        }
    }
}

/// The coupling driving the measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LindbladMode {
    /// One Hermitian observable, diagonal in the computational basis.
    SingleObservable { eigenvalues: Vec<f64> },
    /// The complete projector family on the computational basis.
    Projectors { dim: usize },
}

impl LindbladMode {
    pub fn build(&self) -> Result<LindbladSet> {
        match self {
            LindbladMode::SingleObservable { eigenvalues } => build_observable(eigenvalues),
            LindbladMode::Projectors { dim } => build_projector_set(*dim),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            LindbladMode::SingleObservable { eigenvalues } => eigenvalues.len(),
            LindbladMode::Projectors { dim } => *dim,
        }
    }

    /// Decay rate of the mean off-diagonal `ρ_mn`: `(l_m − l_n)²` for a
    /// single observable, `2` for distinct projector indices.
    pub fn expected_decay_rate(&self, m: usize, n: usize) -> f64 {
        match self {
            LindbladMode::SingleObservable { eigenvalues } => {
                let d = eigenvalues[m] - eigenvalues[n];
                d * d
            }
            LindbladMode::Projectors { .. } => {
                if m == n {
                    0.0
                } else {
                    2.0
                }
            }
        }
    }
}

/// Full description of one measurement experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub engine: EngineKind,
    pub mode: LindbladMode,
    pub initial: DensityMatrix,
    pub dt: f64,
    pub t_max: f64,
    pub trajectories: usize,
    pub seed: u64,
    pub eps_endpoint: f64,
    /// Number of evenly spaced snapshot times (including 0 and `t_max`).
    pub record_points: usize,
}

impl ExperimentSpec {
    /// Sensible defaults for a quick run; callers override fields as needed.
    pub fn new(engine: EngineKind, mode: LindbladMode, initial: DensityMatrix) -> Self {
        Self {
            engine,
            mode,
            initial,
            dt: 1e-3,
            t_max: 10.0,
            trajectories: 1000,
            seed: 0,
            eps_endpoint: tolerances::ENDPOINT,
            record_points: 50,
        }
    }
}

/// A validated spec with everything precomputed for the step loop.
pub struct PreparedExperiment {
    pub spec: ExperimentSpec,
    pub lindblad: LindbladSet,
    pub steps: usize,
    /// Step indices at which snapshots are taken (starts at 0, ends at
    /// `steps`, strictly increasing).
    pub record_steps: Vec<usize>,
    /// Initial amplitudes for the state-vector engine.
    psi0: Option<DVector<C64>>,
    /// Step-size warning, if the sanity bound was exceeded.
    pub warning: Option<String>,
}

impl PreparedExperiment {
    pub fn new(spec: &ExperimentSpec) -> Result<Self> {
        if !(spec.dt > 0.0 && spec.dt.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "dt must be positive, got {}",
                spec.dt
            )));
        }
        if !(spec.t_max > 0.0 && spec.t_max.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "t_max must be positive, got {}",
                spec.t_max
            )));
        }
        let steps_f = spec.t_max / spec.dt;
        let steps = steps_f.round() as usize;
        if steps < 1 || (steps_f - steps as f64).abs() > 1e-9 * steps_f.max(1.0) {
            return Err(Error::InvalidSpec(format!(
                "t_max/dt must be an integer >= 1, got {steps_f}"
            )));
        }
        if spec.trajectories < 1 {
            return Err(Error::InvalidSpec("trajectory count must be >= 1".into()));
        }
        if !(spec.eps_endpoint > 0.0 && spec.eps_endpoint < 0.5) {
            return Err(Error::InvalidSpec(format!(
                "eps_endpoint must lie in (0, 0.5), got {}",
                spec.eps_endpoint
            )));
        }
        if spec.record_points < 2 {
            return Err(Error::InvalidSpec("record_points must be >= 2".into()));
        }
        let lindblad = spec.mode.build()?;
        if lindblad.dim() != spec.initial.dim() {
            return Err(Error::DimensionMismatch {
                expected: lindblad.dim(),
                got: spec.initial.dim(),
            });
        }
        let psi0 = match spec.engine {
            EngineKind::StateVector => Some(spec.initial.to_pure_state()?.amplitudes().clone()),
            _ => None,
        };
        let warning = match check_step_size(&lindblad, spec.dt) {
            StepSizeCheck::Reject { value } => {
                return Err(Error::StepTooLarge {
                    value,
                    bound: tolerances::STEP_REJECT,
                })
            }
            StepSizeCheck::Warn { value } => Some(format!(
                "dt * max ‖L‖² = {value:.3} exceeds {}; expect visible discretization bias",
                tolerances::STEP_WARN
            )),
            StepSizeCheck::Ok => None,
        };
        let p = spec.record_points.min(steps + 1).max(2);
        let mut record_steps: Vec<usize> = (0..p)
            .map(|j| ((j as f64) * (steps as f64) / ((p - 1) as f64)).round() as usize)
            .collect();
        record_steps.dedup();
        Ok(Self {
            spec: spec.clone(),
            lindblad,
            steps,
            record_steps,
            psi0,
            warning,
        })
    }

    /// Snapshot times corresponding to `record_steps`.
    pub fn record_times(&self) -> Vec<f64> {
        self.record_steps
            .iter()
            .map(|&s| s as f64 * self.spec.dt)
            .collect()
    }

    pub fn run_trajectory(&self, trajectory_index: u64) -> TrajectoryData {
        self.run_trajectory_inner(trajectory_index, false, None)
    }

    /// Keep integrating past the first endpoint hit; used to probe how
    /// absorbing the endpoints are.
    pub fn run_trajectory_past_endpoint(&self, trajectory_index: u64) -> TrajectoryData {
        self.run_trajectory_inner(trajectory_index, true, None)
    }

    /// Run one trajectory streaming every step as a JSON line.
    pub fn run_trajectory_traced(
        &self,
        trajectory_index: u64,
        sink: &mut dyn Write,
    ) -> TrajectoryData {
        self.run_trajectory_inner(trajectory_index, false, Some(sink))
    }

    fn run_trajectory_inner(
        &self,
        trajectory_index: u64,
        continue_past_endpoint: bool,
        mut trace: Option<&mut dyn Write>,
    ) -> TrajectoryData {
        let spec = &self.spec;
        let dim = self.lindblad.dim();
        let m_count = self.lindblad.len();
        let dt = spec.dt;
        let mut stream = NoiseStream::new(spec.seed, trajectory_index);
        let mut ws = Workspace::new(dim);
        let mut state = match spec.engine {
            EngineKind::StateVector => EngineState::Vector {
                psi: self.psi0.as_ref().expect("validated").clone(),
            },
            EngineKind::DensityNonlinear => EngineState::Density {
                rho: spec.initial.matrix().clone(),
            },
            EngineKind::LinearWeighted => EngineState::Linear {
                r: spec.initial.matrix().clone(),
                w: 1.0,
                dead: false,
            },
        };

        let mut snapshots: Vec<Snapshot> = Vec::with_capacity(self.record_steps.len());
        let mut repair = TrajectoryRepair::default();
        let mut rec = self.record_steps.iter().copied().peekable();
        let mut diag = vec![0.0f64; dim];
        let mut endpoint_index = None;
        let mut hitting_time = None;
        let mut failure: Option<String> = None;
        let mut post_hit_min_maxdiag: Option<f64> = None;

        for step in 0..=self.steps {
            let absorbed = endpoint_index.is_some();
            let evolving =
                failure.is_none() && !state.is_dead() && (!absorbed || continue_past_endpoint);
            if step > 0 && evolving {
                match stream.sample_increments(m_count, dt) {
                    Ok(dxi) => {
                        if let Err(e) = state.advance(&self.lindblad, &dxi, &mut ws, &mut repair) {
                            failure = Some(e.to_string());
                        } else if let Some(mut sink) = trace.as_deref_mut() {
                            let record = StepRecord {
                                time: step as f64 * dt,
                                state: state.snapshot_state(),
                                weight: state.weight(),
                                increments: dxi,
                            };
                            if let Err(e) = write_step_record(&mut sink, &record) {
                                failure = Some(format!("trace sink: {e}"));
                            }
                        }
                    }
                    Err(e) => failure = Some(e.to_string()),
                }
            }
            state.normalized_diagonals(&mut diag);
            let (max_p, argmax) =
                diag.iter()
                    .enumerate()
                    .fold((f64::NEG_INFINITY, 0), |(mp, mi), (i, &p)| {
                        if p > mp {
                            (p, i)
                        } else {
                            (mp, mi)
                        }
                    });
            if failure.is_none() {
                if endpoint_index.is_none() {
                    if max_p >= 1.0 - spec.eps_endpoint {
                        endpoint_index = Some(argmax);
                        hitting_time = Some(step as f64 * dt);
                    }
                } else if continue_past_endpoint {
                    post_hit_min_maxdiag =
                        Some(post_hit_min_maxdiag.map_or(max_p, |v: f64| v.min(max_p)));
                }
            }
            if rec.peek() == Some(&step) {
                rec.next();
                let rho = state.normalized_matrix();
                // Transient negative eigenvalues of size O(√(dt·t)) are
                // intrinsic to the discretized density flows; snapshots stay
                // unclipped (clipping is one-sided and would bias the
                // diagonal martingale), the excursion is tracked, and only
                // an O(1) violation rejects the trajectory.
                if failure.is_none() && !matches!(spec.engine, EngineKind::StateVector) {
                    let min_eig = min_eigenvalue(&rho);
                    repair.worst_min_eigenvalue = repair.worst_min_eigenvalue.min(min_eig);
                    if min_eig < -PSD_REJECT_FLOOR {
                        failure = Some(
                            Error::PsdViolation {
                                min_eigenvalue: min_eig,
                            }
                            .to_string(),
                        );
                    }
                }
                snapshots.push(Snapshot {
                    rho,
                    weight: state.weight(),
                });
            }
        }

        state.normalized_diagonals(&mut diag);
        let status = if failure.is_some() {
            TrajectoryStatus::Failed
        } else if state.is_dead() {
            TrajectoryStatus::Dead
        } else if endpoint_index.is_some() {
            TrajectoryStatus::Resolved
        } else {
            TrajectoryStatus::Unresolved
        };
        TrajectoryData {
            outcome: MeasurementOutcome {
                trajectory_index,
                status,
                endpoint_index,
                hitting_time,
                final_diagonals: diag,
                weight_final: state.weight(),
                failure,
            },
            snapshots,
            repair,
            post_hit_min_maxdiag,
        }
    }
}

enum EngineState {
    Vector { psi: DVector<C64> },
    Density { rho: DMatrix<C64> },
    Linear { r: DMatrix<C64>, w: f64, dead: bool },
}

impl EngineState {
    fn advance(
        &mut self,
        l: &LindbladSet,
        dxi: &crate::noise::NoiseIncrements,
        ws: &mut Workspace,
        repair: &mut TrajectoryRepair,
    ) -> Result<()> {
        repair.steps += 1;
        match self {
            EngineState::Vector { psi } => {
                let pre = step_state_vector_in_place(psi, l, dxi, ws)?;
                repair.norm_dev_signed += pre - 1.0;
                repair.norm_dev_abs += (pre - 1.0).abs();
            }
            EngineState::Density { rho } => {
                let (tr, herm) = step_density_in_place(rho, l, dxi, ws)?;
                repair.norm_dev_signed += tr;
                repair.norm_dev_abs += tr;
                repair.herm_dev_max = repair.herm_dev_max.max(herm);
            }
            EngineState::Linear { r, w, dead } => {
                if step_linear_in_place(r, w, l, dxi, ws)? {
                    *dead = true;
                }
            }
        }
        Ok(())
    }

    fn is_dead(&self) -> bool {
        matches!(self, EngineState::Linear { dead: true, .. })
    }

    fn weight(&self) -> f64 {
        match self {
            EngineState::Linear { w, .. } => *w,
            _ => 1.0,
        }
    }

    fn normalized_diagonals(&self, out: &mut [f64]) {
        match self {
            EngineState::Vector { psi } => {
                for (o, z) in out.iter_mut().zip(psi.iter()) {
                    *o = z.norm_sqr();
                }
            }
            EngineState::Density { rho } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = rho[(i, i)].re;
                }
            }
            EngineState::Linear { r, w, .. } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = r[(i, i)].re / w;
                }
            }
        }
    }

    /// Normalized density matrix view of the current state.
    fn normalized_matrix(&self) -> DMatrix<C64> {
        match self {
            EngineState::Vector { psi } => {
                DMatrix::from_fn(psi.len(), psi.len(), |i, j| psi[i] * psi[j].conj())
            }
            EngineState::Density { rho } => rho.clone(),
            EngineState::Linear { r, w, .. } => r * C64::new(1.0 / w, 0.0),
        }
    }

    fn snapshot_state(&self) -> StateSnapshot {
        match self {
            EngineState::Vector { psi } => StateSnapshot::Vector(
                StateVector::normalized(psi.clone()).expect("normalized each step"),
            ),
            EngineState::Density { rho } => {
                StateSnapshot::Density(DensityMatrix::from_matrix_unchecked(rho.clone()))
            }
            EngineState::Linear { r, w, .. } => {
                StateSnapshot::Unnormalized(UnnormalizedState::from_parts_unchecked(r.clone(), *w))
            }
        }
    }
}

/// How a trajectory ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryStatus {
    /// Hit a diffusion endpoint before `t_max`.
    Resolved,
    /// Reached `t_max` without hitting an endpoint.
    Unresolved,
    /// Linear-engine weight underflowed; last weight kept for bookkeeping.
    Dead,
    /// Integration failed (non-finite state or positivity violation).
    Failed,
}

/// Per-trajectory record of the measurement result.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeasurementOutcome {
    pub trajectory_index: u64,
    pub status: TrajectoryStatus,
    /// Index of the eigenstate reached, when resolved.
    pub endpoint_index: Option<usize>,
    pub hitting_time: Option<f64>,
    /// Diagonals of the final normalized state; sum to one.
    pub final_diagonals: Vec<f64>,
    /// Final importance weight (1 for the nonlinear engines).
    pub weight_final: f64,
    pub failure: Option<String>,
}

/// Normalized state and weight at one snapshot time.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub rho: DMatrix<C64>,
    pub weight: f64,
}

/// An O(1) negative eigenvalue means the discretization is genuinely
/// broken, far beyond the intrinsic O(√(dt·t)) excursions.
pub const PSD_REJECT_FLOOR: f64 = 0.25;

/// Accumulated per-step repair magnitudes along one trajectory.
#[derive(Clone, Debug)]
pub struct TrajectoryRepair {
    pub steps: u64,
    /// Signed sum of pre-renormalization norm/trace deviations.
    pub norm_dev_signed: f64,
    /// Absolute sum of the same deviations.
    pub norm_dev_abs: f64,
    pub herm_dev_max: f64,
    /// Most negative eigenvalue seen at any snapshot.
    pub worst_min_eigenvalue: f64,
}

impl Default for TrajectoryRepair {
    fn default() -> Self {
        Self {
            steps: 0,
            norm_dev_signed: 0.0,
            norm_dev_abs: 0.0,
            herm_dev_max: 0.0,
            worst_min_eigenvalue: 0.0,
        }
    }
}

/// Everything one trajectory produces.
#[derive(Clone, Debug)]
pub struct TrajectoryData {
    pub outcome: MeasurementOutcome,
    pub snapshots: Vec<Snapshot>,
    pub repair: TrajectoryRepair,
    /// Smallest max-diagonal seen after the first endpoint hit, when run
    /// with `run_trajectory_past_endpoint`.
    pub post_hit_min_maxdiag: Option<f64>,
}

/// Validate and run a single trajectory of the given spec.
pub fn run_measurement_trajectory(
    spec: &ExperimentSpec,
    trajectory_index: u64,
) -> Result<MeasurementOutcome> {
    let prepared = PreparedExperiment::new(spec)?;
    let data = prepared.run_trajectory(trajectory_index);
    if let Some(msg) = &data.outcome.failure {
        return Err(Error::InvalidSpec(msg.clone()).at_trajectory(trajectory_index as usize));
    }
    Ok(data.outcome)
}

/// Endpoint-frequency estimates against the initial diagonals.
#[derive(Clone, Debug, Serialize)]
pub struct FrequencyReport {
    pub initial_diagonals: Vec<f64>,
    pub n_total: usize,
    pub n_resolved: usize,
    pub n_unresolved: usize,
    pub n_dead: usize,
    pub n_failed: usize,
    /// Frequencies over resolved trajectories only.
    pub resolved_freq: Vec<f64>,
    pub resolved_se: Vec<f64>,
    /// Frequencies assigning unresolved trajectories their current
    /// diagonals; unbiased at any horizon and used for comparisons.
    pub withdiag_freq: Vec<f64>,
    pub withdiag_se: Vec<f64>,
    /// z-scores of `withdiag_freq` against the initial diagonals.
    pub z_vs_initial: Vec<f64>,
    /// z-scores between the two estimators; they must agree within error.
    pub estimator_agreement_z: Vec<f64>,
    /// Total weight over all non-failed trajectories.
    pub weight_total: f64,
}

/// Estimate Born frequencies from a set of outcomes. For the weighted
/// linear engine the final weights enter both the frequencies and their
/// standard errors; unresolved trajectories are reported separately and
/// also folded in through their current diagonals, never silently dropped.
pub fn estimate_born_frequencies(
    outcomes: &[MeasurementOutcome],
    initial: &DensityMatrix,
) -> Result<FrequencyReport> {
    if outcomes.is_empty() {
        return Err(Error::EmptyOutcomes);
    }
    let dim = initial.dim();
    for o in outcomes {
        if o.final_diagonals.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: o.final_diagonals.len(),
            });
        }
    }
    let mut n_resolved = 0;
    let mut n_unresolved = 0;
    let mut n_dead = 0;
    let mut n_failed = 0;
    let mut resolved: Vec<&MeasurementOutcome> = Vec::new();
    let mut usable: Vec<&MeasurementOutcome> = Vec::new();
    for o in outcomes {
        match o.status {
            TrajectoryStatus::Resolved => {
                n_resolved += 1;
                resolved.push(o);
                usable.push(o);
            }
            TrajectoryStatus::Unresolved => {
                n_unresolved += 1;
                usable.push(o);
            }
            TrajectoryStatus::Dead => {
                n_dead += 1;
                usable.push(o);
            }
            TrajectoryStatus::Failed => n_failed += 1,
        }
    }
    if usable.is_empty() {
        return Err(Error::EmptyOutcomes);
    }
    let weights_resolved: Vec<f64> = resolved.iter().map(|o| o.weight_final).collect();
    let weights_all: Vec<f64> = usable.iter().map(|o| o.weight_final).collect();
    let weight_total: f64 = crate::stats::pairwise_sum(&weights_all);
    if weight_total <= 0.0 {
        return Err(Error::ZeroWeightSum);
    }

    let mut resolved_freq = vec![f64::NAN; dim];
    let mut resolved_se = vec![f64::NAN; dim];
    let mut withdiag_freq = vec![0.0; dim];
    let mut withdiag_se = vec![0.0; dim];
    let mut z_vs_initial = vec![0.0; dim];
    let mut agreement = vec![0.0; dim];
    let initial_diagonals = initial.diagonals();
    for m in 0..dim {
        if !resolved.is_empty() {
            let indicator: Vec<f64> = resolved
                .iter()
                .map(|o| {
                    if o.endpoint_index == Some(m) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let (f, se) = weighted_mean_se(&indicator, &weights_resolved);
            resolved_freq[m] = f;
            resolved_se[m] = se;
        }
        let values: Vec<f64> = usable
            .iter()
            .map(|o| match o.endpoint_index {
                Some(e) => {
                    if e == m {
                        1.0
                    } else {
                        0.0
                    }
                }
                None => o.final_diagonals[m],
            })
            .collect();
        let (f, se) = weighted_mean_se(&values, &weights_all);
        withdiag_freq[m] = f;
        withdiag_se[m] = se;
        let dev = f - initial_diagonals[m];
        z_vs_initial[m] = if dev.abs() <= 1e-12 {
            0.0
        } else if se > 0.0 {
            dev / se
        } else {
            f64::INFINITY
        };
        if !resolved.is_empty() {
            let denom = (resolved_se[m] * resolved_se[m] + se * se).sqrt();
            agreement[m] = if denom > 0.0 {
                (resolved_freq[m] - f) / denom
            } else {
                0.0
            };
        }
    }
    Ok(FrequencyReport {
        initial_diagonals,
        n_total: outcomes.len(),
        n_resolved,
        n_unresolved,
        n_dead,
        n_failed,
        resolved_freq,
        resolved_se,
        withdiag_freq,
        withdiag_se,
        z_vs_initial,
        estimator_agreement_z: agreement,
        weight_total,
    })
}

/// Least-squares fit of an exponential decay rate.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RateFit {
    /// Magnitude of the fitted decay rate of `|mean ρ_mn(t)|`.
    pub rate: f64,
    pub stderr: f64,
    /// Number of grid points inside the fit window.
    pub points: usize,
    /// Last time included in the window.
    pub window_end: f64,
}

/// Fit `log |mean ρ_mn(t)|` against `t` over the window where the mean is
/// at least ten times its standard error, returning the decay rate.
pub fn fit_decoherence_rate(times: &[f64], means: &[C64], ses: &[f64]) -> Result<RateFit> {
    if times.len() != means.len() || times.len() != ses.len() {
        return Err(Error::DimensionMismatch {
            expected: times.len(),
            got: means.len().min(ses.len()),
        });
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut window_end = 0.0;
    for i in 0..times.len() {
        let a = means[i].norm();
        if a > 0.0 && a > 10.0 * ses[i] {
            xs.push(times[i]);
            ys.push(a.ln());
            window_end = times[i];
        } else if !xs.is_empty() {
            // Keep the window contiguous from the start of the series.
            break;
        }
    }
    if xs.len() < 3 {
        return Err(Error::EmptyFitWindow);
    }
    let fit = crate::stats::ols_fit(&xs, &ys).ok_or(Error::EmptyFitWindow)?;
    Ok(RateFit {
        rate: -fit.slope,
        stderr: fit.slope_se,
        points: xs.len(),
        window_end,
    })
}

/// Martingale check of the mean diagonals against their initial values.
#[derive(Clone, Debug, Serialize)]
pub struct MartingaleReport {
    pub worst_z: f64,
    pub worst_time: f64,
    pub worst_state_index: usize,
    /// True when every |z| stayed below 4.
    pub pass: bool,
}

/// Assert `|mean p_m(t) − p_m(0)| < 4·SE` pointwise; reports the worst
/// z-score over the grid. Series with zero SE (exact starts or frozen
/// states) count as z = 0 when the deviation is zero.
pub fn check_martingale(
    times: &[f64],
    diag_means: &[Vec<f64>],
    diag_ses: &[Vec<f64>],
    initial_diagonals: &[f64],
) -> MartingaleReport {
    let mut worst_z: f64 = 0.0;
    let mut worst_time = 0.0;
    let mut worst_state_index = 0;
    for (i, t) in times.iter().enumerate() {
        for (m, &p0) in initial_diagonals.iter().enumerate() {
            let dev = (diag_means[i][m] - p0).abs();
            let se = diag_ses[i][m];
            // Rounding-level deviations with zero spread (exact starts,
            // frozen states) are not drift.
            let z = if dev <= 1e-12 {
                0.0
            } else if se > 0.0 {
                dev / se
            } else {
                f64::INFINITY
            };
            if z > worst_z {
                worst_z = z;
                worst_time = *t;
                worst_state_index = m;
            }
        }
    }
    MartingaleReport {
        worst_z,
        worst_time,
        worst_state_index,
        pass: worst_z < 4.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qubit_spec(engine: EngineKind) -> ExperimentSpec {
        ExperimentSpec {
            engine,
            mode: LindbladMode::SingleObservable {
                eigenvalues: vec![0.0, 1.0],
            },
            initial: DensityMatrix::from_diagonal(&[0.3, 0.7]).unwrap(),
            dt: 1e-3,
            t_max: 20.0,
            trajectories: 16,
            seed: 17,
            eps_endpoint: 1e-4,
            record_points: 20,
        }
    }

    #[test]
    fn initial_endpoint_state_resolves_immediately() {
        let mut spec = qubit_spec(EngineKind::DensityNonlinear);
        spec.initial = DensityMatrix::from_diagonal(&[1.0, 0.0]).unwrap();
        spec.t_max = 0.1;
        let out = run_measurement_trajectory(&spec, 0).unwrap();
        assert_eq!(out.status, TrajectoryStatus::Resolved);
        assert_eq!(out.endpoint_index, Some(0));
        assert_eq!(out.hitting_time, Some(0.0));
        assert_eq!(out.weight_final, 1.0);
    }

    #[test]
    fn qubit_trajectories_reach_endpoints() {
        let spec = qubit_spec(EngineKind::DensityNonlinear);
        let prepared = PreparedExperiment::new(&spec).unwrap();
        let mut resolved = 0;
        for k in 0..16 {
            let data = prepared.run_trajectory(k);
            assert!(data.outcome.failure.is_none());
            let sum: f64 = data.outcome.final_diagonals.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            if data.outcome.status == TrajectoryStatus::Resolved {
                resolved += 1;
                let e = data.outcome.endpoint_index.unwrap();
                assert!(data.outcome.final_diagonals[e] >= 1.0 - 2.0 * spec.eps_endpoint);
            }
        }
        assert!(resolved >= 14, "only {resolved}/16 resolved by t=20");
    }

    #[test]
    fn state_vector_engine_requires_pure_initial_state() {
        let spec = qubit_spec(EngineKind::StateVector);
        assert!(matches!(
            PreparedExperiment::new(&spec),
            Err(Error::NotPure { .. })
        ));
    }

    #[test]
    fn degenerate_pair_keeps_population_ratio_fixed() {
        // l0 = l1: both populations see the same multiplicative update, so
        // their ratio is conserved along every trajectory.
        let mut spec = qubit_spec(EngineKind::DensityNonlinear);
        spec.mode = LindbladMode::SingleObservable {
            eigenvalues: vec![0.0, 0.0, 1.0],
        };
        spec.initial = DensityMatrix::from_diagonal(&[0.2, 0.4, 0.4]).unwrap();
        spec.t_max = 2.0;
        spec.dt = 1e-3;
        let prepared = PreparedExperiment::new(&spec).unwrap();
        for k in 0..4 {
            let data = prepared.run_trajectory(k);
            let r0 = 0.2 / 0.4;
            for snap in &data.snapshots {
                let p0 = snap.rho[(0, 0)].re;
                let p1 = snap.rho[(1, 1)].re;
                if p0 > 1e-9 && p1 > 1e-9 {
                    assert!(
                        ((p0 / p1) / r0 - 1.0).abs() < 1e-6,
                        "ratio drifted: {}",
                        p0 / p1
                    );
                }
            }
        }
    }

    #[test]
    fn born_report_on_deterministic_endpoint() {
        let initial = DensityMatrix::from_diagonal(&[1.0, 0.0]).unwrap();
        let outcomes: Vec<MeasurementOutcome> = (0..8)
            .map(|k| MeasurementOutcome {
                trajectory_index: k,
                status: TrajectoryStatus::Resolved,
                endpoint_index: Some(0),
                hitting_time: Some(0.0),
                final_diagonals: vec![1.0, 0.0],
                weight_final: 1.0,
                failure: None,
            })
            .collect();
        let report = estimate_born_frequencies(&outcomes, &initial).unwrap();
        assert_eq!(report.resolved_freq[0], 1.0);
        assert_eq!(report.withdiag_freq[0], 1.0);
        assert_eq!(report.n_resolved, 8);
        assert_eq!(report.z_vs_initial[0], 0.0);
    }

    #[test]
    fn born_report_rejects_empty_input() {
        let initial = DensityMatrix::from_diagonal(&[1.0, 0.0]).unwrap();
        assert!(matches!(
            estimate_born_frequencies(&[], &initial),
            Err(Error::EmptyOutcomes)
        ));
    }

    #[test]
    fn rate_fit_recovers_exact_exponential() {
        let times: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let means: Vec<C64> = times
            .iter()
            .map(|&t| C64::new(0.5 * (-1.3 * t).exp(), 0.0))
            .collect();
        let ses = vec![1e-6; times.len()];
        let fit = fit_decoherence_rate(&times, &means, &ses).unwrap();
        assert!((fit.rate - 1.3).abs() < 1e-9);
        assert!(fit.points > 10);
    }

    #[test]
    fn rate_fit_reports_empty_window() {
        let times = vec![0.0, 0.1, 0.2];
        let means = vec![C64::new(1e-9, 0.0); 3];
        let ses = vec![1.0; 3];
        assert!(matches!(
            fit_decoherence_rate(&times, &means, &ses),
            Err(Error::EmptyFitWindow)
        ));
    }

    #[test]
    fn martingale_check_flags_drift() {
        let times = vec![0.0, 1.0];
        let means = vec![vec![0.3, 0.7], vec![0.5, 0.5]];
        let ses = vec![vec![0.0, 0.0], vec![0.01, 0.01]];
        let report = check_martingale(&times, &means, &ses, &[0.3, 0.7]);
        assert!(!report.pass);
        assert_eq!(report.worst_time, 1.0);
        assert!((report.worst_z - 20.0).abs() < 1e-9);
    }

    #[test]
    fn trace_sink_receives_one_line_per_step() {
        let mut spec = qubit_spec(EngineKind::LinearWeighted);
        spec.t_max = 0.01;
        spec.dt = 1e-3;
        let prepared = PreparedExperiment::new(&spec).unwrap();
        let mut buf = Vec::new();
        let data = prepared.run_trajectory_traced(0, &mut buf);
        assert!(data.outcome.failure.is_none());
        let lines: Vec<&[u8]> = buf
            .split(|&b| b == b'\n')
            .filter(|l| !l.is_empty())
            .collect();
        assert_eq!(lines.len(), 10);
        // Times strictly increase with spacing dt along the trace.
        let mut prev = 0.0;
        for l in &lines {
            let rec: StepRecord = serde_json::from_slice(l).unwrap();
            assert!((rec.time - prev - 1e-3).abs() < 1e-9);
            prev = rec.time;
        }
    }

    #[test]
    fn endpoints_stay_absorbing_when_integration_continues() {
        let spec = qubit_spec(EngineKind::DensityNonlinear);
        let prepared = PreparedExperiment::new(&spec).unwrap();
        let mut checked = 0;
        let mut dipped_below_2eps = 0;
        for k in 0..24 {
            let data = prepared.run_trajectory_past_endpoint(k);
            if let Some(min_max) = data.post_hit_min_maxdiag {
                checked += 1;
                if min_max < 1.0 - 2.0 * spec.eps_endpoint {
                    dipped_below_2eps += 1;
                }
                // The populations are martingales, so excursions out of the
                // endpoint neighborhood to depth 200x the threshold have
                // probability ~ 1/200 each.
                assert!(min_max > 1.0 - 200.0 * spec.eps_endpoint, "min {min_max}");
            }
        }
        assert!(checked >= 20, "only {checked} trajectories hit endpoints");
        // The same martingale bound caps dips below 1 − 2ε at 1/2 each.
        assert!(
            dipped_below_2eps as f64 <= 0.8 * checked as f64,
            "{dipped_below_2eps}/{checked} dipped"
        );
    }
}
