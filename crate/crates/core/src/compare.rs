//! Cross-engine equivalence probes under shared noise.
//!
//! The three engines discretize equivalent dynamics, so two engines driven
//! by the same increment sequence stay pathwise close (strong order ½: the
//! gap scales like √dt over a fixed horizon), and the weighted one-step
//! differential of the linear engine reproduces the nonlinear density
//! increment from the same state exactly.

use nalgebra::{DMatrix, DVector};

use crate::engine::{
    density_increment_into, step_density_in_place, step_linear_in_place,
    step_state_vector_in_place, weighted_step_differential, Workspace,
};
use crate::error::{Error, Result};
use crate::experiment::{EngineKind, ExperimentSpec, FrequencyReport, PreparedExperiment};
use crate::noise::NoiseStream;
use crate::operators::{frobenius_distance, DensityMatrix, LindbladSet, UnnormalizedState};
use crate::stats::fit_order;
use crate::C64;

enum PairState {
    Vector(DVector<C64>),
    Density(DMatrix<C64>),
    Linear { r: DMatrix<C64>, w: f64 },
}

impl PairState {
    fn init(engine: EngineKind, initial: &DensityMatrix) -> Result<Self> {
        Ok(match engine {
            EngineKind::StateVector => {
                PairState::Vector(initial.to_pure_state()?.amplitudes().clone())
            }
            EngineKind::DensityNonlinear => PairState::Density(initial.matrix().clone()),
            EngineKind::LinearWeighted => PairState::Linear {
                r: initial.matrix().clone(),
                w: 1.0,
            },
        })
    }

    fn advance(
        &mut self,
        l: &LindbladSet,
        dxi: &crate::noise::NoiseIncrements,
        ws: &mut Workspace,
    ) -> Result<()> {
        match self {
            PairState::Vector(psi) => {
                step_state_vector_in_place(psi, l, dxi, ws)?;
            }
            PairState::Density(rho) => {
                step_density_in_place(rho, l, dxi, ws)?;
            }
            PairState::Linear { r, w } => {
                if step_linear_in_place(r, w, l, dxi, ws)? {
                    return Err(Error::NonPositiveWeight { weight: *w });
                }
            }
        }
        Ok(())
    }

    fn normalized(&self) -> DMatrix<C64> {
        match self {
            PairState::Vector(psi) => {
                DMatrix::from_fn(psi.len(), psi.len(), |i, j| psi[i] * psi[j].conj())
            }
            PairState::Density(rho) => rho.clone(),
            PairState::Linear { r, w } => r * C64::new(1.0 / *w, 0.0),
        }
    }
}

/// Max Frobenius distance between the normalized states of two engines
/// driven by one shared noise stream over the full horizon. Endpoint
/// detection is disabled so both engines consume every increment.
pub fn shared_noise_max_distance(
    spec: &ExperimentSpec,
    engine_a: EngineKind,
    engine_b: EngineKind,
    trajectory_index: u64,
) -> Result<f64> {
    let prepared =
        PreparedExperiment::new(&with_engine(spec, pick_validatable(engine_a, engine_b)))?;
    let l = &prepared.lindblad;
    let mut a = PairState::init(engine_a, &spec.initial)?;
    let mut b = PairState::init(engine_b, &spec.initial)?;
    let mut ws = Workspace::new(l.dim());
    let mut stream = NoiseStream::new(spec.seed, trajectory_index);
    let mut max_d = frobenius_distance(&a.normalized(), &b.normalized());
    for _ in 0..prepared.steps {
        let dxi = stream.sample_increments(l.len(), spec.dt)?;
        a.advance(l, &dxi, &mut ws)?;
        b.advance(l, &dxi, &mut ws)?;
        let d = frobenius_distance(&a.normalized(), &b.normalized());
        max_d = max_d.max(d);
    }
    Ok(max_d)
}

// Spec validation for the pair: a pure initial state is only needed when a
// state-vector engine participates.
fn pick_validatable(a: EngineKind, b: EngineKind) -> EngineKind {
    if a == EngineKind::StateVector || b == EngineKind::StateVector {
        EngineKind::StateVector
    } else {
        a
    }
}

fn with_engine(spec: &ExperimentSpec, engine: EngineKind) -> ExperimentSpec {
    let mut s = spec.clone();
    s.engine = engine;
    s
}

/// Pathwise gap between two engines versus step size.
#[derive(Clone, Debug)]
pub struct PathwiseScaling {
    pub dts: Vec<f64>,
    /// RMS over trajectories of the max pathwise distance at each dt.
    pub rms_max_distance: Vec<f64>,
    /// Fitted exponent of `distance ~ dt^p`.
    pub fitted_order: Option<f64>,
}

/// Measure how the shared-noise pathwise gap between two engines scales
/// with dt, using `samples` trajectories per step size.
pub fn pathwise_scaling(
    spec: &ExperimentSpec,
    engine_a: EngineKind,
    engine_b: EngineKind,
    dt_list: &[f64],
    samples: usize,
) -> Result<PathwiseScaling> {
    if dt_list.len() < 2 || samples == 0 {
        return Err(Error::InvalidSpec(
            "need at least two dt values and one sample".into(),
        ));
    }
    let mut rms = Vec::with_capacity(dt_list.len());
    for &dt in dt_list {
        let mut s = spec.clone();
        s.dt = dt;
        let mut sum_sq = 0.0;
        for k in 0..samples {
            let d = shared_noise_max_distance(&s, engine_a, engine_b, k as u64)?;
            sum_sq += d * d;
        }
        rms.push((sum_sq / samples as f64).sqrt());
    }
    let fitted_order = fit_order(dt_list, &rms).map(|f| f.slope);
    Ok(PathwiseScaling {
        dts: dt_list.to_vec(),
        rms_max_distance: rms,
        fitted_order,
    })
}

/// One-step error of the weighted linear differential against the direct
/// nonlinear density increment, per step size.
#[derive(Clone, Debug)]
pub struct StepErrorScaling {
    pub dts: Vec<f64>,
    /// Worst Frobenius error over the sampled (state, noise) pairs.
    pub max_errors: Vec<f64>,
    /// True when every error sits at the floating-point floor, in which
    /// case no decay order is measurable (the two routes are algebraically
    /// identical).
    pub below_fp_floor: bool,
    pub fitted_order: Option<f64>,
}

/// Compare `(1/w)dR − (dw/w)ρ` from one linear step against the nonlinear
/// density increment from the same state and noise. States are diversified
/// by evolving the initial state before each comparison, and the linear
/// side runs at a non-unit weight to exercise the scaling.
pub fn weighted_differential_scaling(
    spec: &ExperimentSpec,
    dt_list: &[f64],
    samples: usize,
) -> Result<StepErrorScaling> {
    if dt_list.is_empty() || samples == 0 {
        return Err(Error::InvalidSpec(
            "need at least one dt value and one sample".into(),
        ));
    }
    let l = spec.mode.build()?;
    let dim = l.dim();
    let mut ws = Workspace::new(dim);
    let mut max_errors = Vec::with_capacity(dt_list.len());
    for (i, &dt) in dt_list.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut stream = NoiseStream::new(spec.seed.wrapping_add(i as u64), 0);
        for k in 0..samples {
            // Diversify the comparison state along the density flow.
            let mut rho = spec.initial.matrix().clone();
            for _ in 0..k {
                let warm = stream.sample_increments(l.len(), dt)?;
                step_density_in_place(&mut rho, &l, &warm, &mut ws)?;
            }
            let dxi = stream.sample_increments(l.len(), dt)?;
            let w0 = 1.0 + 0.7 * (k as f64 % 3.0);
            let r0 = &rho * C64::new(w0, 0.0);
            let w_exact = crate::operators::trace_of(&r0).re;
            let state = UnnormalizedState::from_parts_unchecked(r0, w_exact);
            let next = crate::engine::step_linear(&state, &l, &dxi)?;
            let weighted = weighted_step_differential(&state, &next.state)?;
            let mut direct = DMatrix::zeros(dim, dim);
            density_increment_into(&rho, &l, &dxi, &mut direct, &mut ws);
            worst = worst.max(frobenius_distance(&weighted, &direct));
        }
        max_errors.push(worst);
    }
    let below_fp_floor = max_errors.iter().all(|&e| e < 1e-12);
    let fitted_order = if below_fp_floor {
        None
    } else {
        fit_order(dt_list, &max_errors).map(|f| f.slope)
    };
    Ok(StepErrorScaling {
        dts: dt_list.to_vec(),
        max_errors,
        below_fp_floor,
        fitted_order,
    })
}

/// Pairwise z-scores between the endpoint frequencies of two runs, using
/// the horizon-unbiased (diagonal-folding) estimator of each.
pub fn born_z_scores(a: &FrequencyReport, b: &FrequencyReport) -> Vec<f64> {
    a.withdiag_freq
        .iter()
        .zip(&b.withdiag_freq)
        .zip(a.withdiag_se.iter().zip(&b.withdiag_se))
        .map(|((&fa, &fb), (&sa, &sb))| {
            let denom = sa.hypot(sb);
            if denom > 0.0 {
                (fa - fb) / denom
            } else if fa == fb {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect()
}
