//! The three trajectory integrators.
//!
//! All three consume the same [`NoiseIncrements`] per step, so their
//! statistical equivalence can be tested pathwise under shared noise:
//!
//! - [`step_state_vector`]: nonlinear diffusion of a normalized vector,
//!   `dψ = Σ_m (2⟨L_m†⟩L_m − L_m†L_m − ⟨L_m†⟩⟨L_m⟩)ψ dt + (L_m − ⟨L_m⟩)ψ dξ_m`.
//! - [`step_density_nonlinear`]: the same diffusion at the density-matrix
//!   level, `dρ = Σ_m (2L_mρL_m† − L_m†L_mρ − ρL_m†L_m) dt
//!   + ((L_m − Tr(L_mρ))ρ dξ_m + h.c.)`.
//! - [`step_linear`]: the linear propagation of an unnormalized matrix,
//!   `dR = Σ_m (L_m R dξ_m + R L_m† dξ_m* + (2L_mRL_m† − L_m†L_mR − RL_m†L_m) dt)`,
//!   with weight `w = Tr R` kept exact by recomputing the trace after each
//!   step. The drift is traceless, so `dw` carries only the noise terms and
//!   the weight is a martingale.
//!
//! Time stepping is explicit Euler–Maruyama (weak order 1, strong order ½),
//! which is exactly one application of the differentials above. The
//! nonlinear steps preserve normalization only to `O(dt²)` per step in the
//! mean, so each step re-symmetrizes and renormalizes; the repair magnitude
//! is reported so callers can verify it stays that small.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::NoiseIncrements;
use crate::operators::{
    hermitize_in_place, trace_of, DensityMatrix, LindbladSet, Operator, StateVector,
    UnnormalizedState,
};
use crate::{tolerances, C64};

const ONE: C64 = C64::new(1.0, 0.0);
const ZERO: C64 = C64::new(0.0, 0.0);

/// Scratch matrices reused across steps of one trajectory.
pub struct Workspace {
    t1: DMatrix<C64>,
    t2: DMatrix<C64>,
    inc: DMatrix<C64>,
    v1: DVector<C64>,
    v2: DVector<C64>,
    vinc: DVector<C64>,
}

impl Workspace {
    pub fn new(dim: usize) -> Self {
        Self {
            t1: DMatrix::zeros(dim, dim),
            t2: DMatrix::zeros(dim, dim),
            inc: DMatrix::zeros(dim, dim),
            v1: DVector::zeros(dim),
            v2: DVector::zeros(dim),
            vinc: DVector::zeros(dim),
        }
    }
}

fn add_scaled(dst: &mut DMatrix<C64>, src: &DMatrix<C64>, c: C64) {
    for (d, s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *d += s * c;
    }
}

/// `dst += c · src†` without materializing the adjoint.
fn add_adjoint_scaled(dst: &mut DMatrix<C64>, src: &DMatrix<C64>, c: C64) {
    let n = dst.nrows();
    for i in 0..n {
        for j in 0..n {
            dst[(i, j)] += src[(j, i)].conj() * c;
        }
    }
}

fn check_dims(l: &LindbladSet, dim: usize, channels: usize) -> Result<()> {
    if l.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: l.dim(),
            got: dim,
        });
    }
    if channels != l.len() {
        return Err(Error::DimensionMismatch {
            expected: l.len(),
            got: channels,
        });
    }
    Ok(())
}

fn finite_matrix(m: &DMatrix<C64>, context: &'static str) -> Result<()> {
    if m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context })
    }
}

/// Write the state-vector increment `dψ` into `out` (overwriting it).
pub fn state_vector_increment_into(
    psi: &DVector<C64>,
    l: &LindbladSet,
    dxi: &NoiseIncrements,
    out: &mut DVector<C64>,
    ws: &mut Workspace,
) {
    state_vector_increment_core(psi, l, dxi, out, &mut ws.v1, &mut ws.v2);
}

fn state_vector_increment_core(
    psi: &DVector<C64>,
    l: &LindbladSet,
    dxi: &NoiseIncrements,
    out: &mut DVector<C64>,
    v1: &mut DVector<C64>,
    v2: &mut DVector<C64>,
) {
    let dt = dxi.dt();
    out.fill(ZERO);
    for m in 0..l.len() {
        let dx = dxi.values()[m];
        // v1 = L_m ψ, v2 = (L_m†L_m) ψ
        v1.gemv(ONE, l.operator(m), psi, ZERO);
        v2.gemv(ONE, l.quadratic(m), psi, ZERO);
        let e = psi.dotc(v1); // ⟨ψ|L_m|ψ⟩
        let e_adj = e.conj();
        // drift (2⟨L†⟩L − L†L − ⟨L†⟩⟨L⟩)ψ dt plus noise (L − ⟨L⟩)ψ dξ
        let c_l = e_adj * C64::new(2.0 * dt, 0.0) + dx;
        let c_q = C64::new(-dt, 0.0);
        let c_psi = e_adj * e * C64::new(-dt, 0.0) - e * dx;
        for i in 0..psi.len() {
            out[i] += v1[i] * c_l + v2[i] * c_q + psi[i] * c_psi;
        }
    }
}

/// Result of one normalized state-vector step.
#[derive(Clone, Debug)]
pub struct VectorStep {
    pub state: StateVector,
    /// Squared norm before renormalization; `pre_norm_sq − 1` is the repair
    /// magnitude, `O(dt²)` per step in the mean.
    pub pre_norm_sq: f64,
}

/// One Euler–Maruyama step of the nonlinear state-vector diffusion,
/// renormalized to unit norm. The step size is taken from `dxi`.
pub fn step_state_vector(
    psi: &StateVector,
    l: &LindbladSet,
    dxi: &NoiseIncrements,
) -> Result<VectorStep> {
    check_dims(l, psi.dim(), dxi.len())?;
    let mut ws = Workspace::new(psi.dim());
    let mut cur = psi.amplitudes().clone();
    let pre_norm_sq = step_state_vector_in_place(&mut cur, l, dxi, &mut ws)?;
    Ok(VectorStep {
        state: StateVector::normalized(cur)?,
        pre_norm_sq,
    })
}

/// In-place step used by trajectory runners; returns the pre-renormalization
/// squared norm.
pub fn step_state_vector_in_place(
    psi: &mut DVector<C64>,
    l: &LindbladSet,
    dxi: &NoiseIncrements,
    ws: &mut Workspace,
) -> Result<f64> {
    let Workspace {
        ref mut v1,
        ref mut v2,
        ref mut vinc,
        ..
    } = *ws;
    state_vector_increment_core(psi, l, dxi, vinc, v1, v2);
    for i in 0..psi.len() {
        psi[i] += vinc[i];
    }
    let n2 = psi.norm_squared();
    if !n2.is_finite() || n2 == 0.0 {
        return Err(Error::NonFinite {
            context: "state-vector step (dt too large for the operator norms)",
        });
    }
    let inv = C64::new(1.0 / n2.sqrt(), 0.0);
    for z in psi.iter_mut() {
        *z *= inv;
    }
    Ok(n2)
}

/// Write the nonlinear density increment `dρ` into `out` (overwriting it).
pub fn density_increment_into(
    rho: &DMatrix<C64>,
    l: &LindbladSet,
    dxi: &NoiseIncrements,
    out: &mut DMatrix<C64>,
    ws: &mut Workspace,
) {
    diffusion_increment(rho, l, dxi, true, out, &mut ws.t1, &mut ws.t2);
}

/// Write the linear increment `dR` into `out` (overwriting it).
pub fn linear_increment_into(
    r: &DMatrix<C64>,
    l: &LindbladSet,
    dxi: &NoiseIncrements,
    out: &mut DMatrix<C64>,
    ws: &mut Workspace,
) {
    diffusion_increment(r, l, dxi, false, out, &mut ws.t1, &mut ws.t2);
}

// Shared kernel: the linear flow, optionally with the expectation
// subtraction that makes it the nonlinear (normalized) flow. Relies on the
// input being Hermitian so that (L x)† = x L† and (L†L x)† = x L†L.
fn diffusion_increment(
    x: &DMatrix<C64>,
    l: &LindbladSet,
    dxi: &NoiseIncrements,
    subtract_expectations: bool,
    out: &mut DMatrix<C64>,
    t1: &mut DMatrix<C64>,
    t2: &mut DMatrix<C64>,
) {
    let dt = dxi.dt();
    out.fill(ZERO);
    let two_dt = C64::new(2.0 * dt, 0.0);
    let neg_dt = C64::new(-dt, 0.0);
    for m in 0..l.len() {
        let dx = dxi.values()[m];
        // t1 = L_m x
        t1.gemm(ONE, l.operator(m), x, ZERO);
        // noise: L x dξ + x L† dξ*
        add_scaled(out, t1, dx);
        add_adjoint_scaled(out, t1, dx.conj());
        if subtract_expectations {
            let e = trace_of(t1);
            let coeff = -(e * dx) - (e.conj() * dx.conj());
            add_scaled(out, x, coeff);
        }
        // drift: 2 L x L† − L†L x − x L†L
        t2.gemm(ONE, t1, l.adjoint(m), ZERO);
        add_scaled(out, t2, two_dt);
        t1.gemm(ONE, l.quadratic(m), x, ZERO);
        add_scaled(out, t1, neg_dt);
        add_adjoint_scaled(out, t1, neg_dt);
    }
}

/// Result of one normalized density-matrix step.
#[derive(Clone, Debug)]
pub struct DensityStep {
    pub state: DensityMatrix,
    /// Trace deviation removed by renormalization (the increment is
    /// traceless analytically, so this is rounding-level).
    pub trace_repair: f64,
    /// Max elementwise change from re-symmetrization.
    pub herm_repair: f64,
}

/// One Euler–Maruyama step of the nonlinear density diffusion, followed by
/// re-symmetrization and trace renormalization.
pub fn step_density_nonlinear(
    rho: &DensityMatrix,
    l: &LindbladSet,
    dxi: &NoiseIncrements,
) -> Result<DensityStep> {
    check_dims(l, rho.dim(), dxi.len())?;
    let mut ws = Workspace::new(rho.dim());
    let mut cur = rho.matrix().clone();
    let (trace_repair, herm_repair) = step_density_in_place(&mut cur, l, dxi, &mut ws)?;
    Ok(DensityStep {
        state: DensityMatrix::from_matrix_unchecked(cur),
        trace_repair,
        herm_repair,
    })
}

/// In-place density step; returns `(trace_repair, herm_repair)`.
pub fn step_density_in_place(
    rho: &mut DMatrix<C64>,
    l: &LindbladSet,
    dxi: &NoiseIncrements,
    ws: &mut Workspace,
) -> Result<(f64, f64)> {
    diffusion_increment(rho, l, dxi, true, &mut ws.inc, &mut ws.t1, &mut ws.t2);
    for (d, s) in rho.as_mut_slice().iter_mut().zip(ws.inc.as_slice()) {
        *d += s;
    }
    let herm_repair = hermitize_in_place(rho);
    let tr = trace_of(rho).re;
    if !tr.is_finite() || tr <= 0.0 {
        return Err(Error::NonFinite {
            context: "density step (dt too large for the operator norms)",
        });
    }
    let inv = C64::new(1.0 / tr, 0.0);
    for z in rho.as_mut_slice().iter_mut() {
        *z *= inv;
    }
    // Cheap positivity guard; full spectral repair runs at record points.
    for i in 0..rho.nrows() {
        let p = rho[(i, i)].re;
        if p < -tolerances::PSD {
            return Err(Error::PsdViolation { min_eigenvalue: p });
        }
    }
    Ok(((tr - 1.0).abs(), herm_repair))
}

/// Result of one linear step.
#[derive(Clone, Debug)]
pub struct LinearStep {
    pub state: UnnormalizedState,
    /// Set when the weight fell below the dead threshold; the state is the
    /// last valid one and should be frozen for ensemble bookkeeping rather
    /// than discarded.
    pub dead: bool,
}

/// One Euler–Maruyama step of the linear flow. The weight is recomputed as
/// `Tr R` after the step, keeping the trace identity exact.
pub fn step_linear(
    state: &UnnormalizedState,
    l: &LindbladSet,
    dxi: &NoiseIncrements,
) -> Result<LinearStep> {
    check_dims(l, state.dim(), dxi.len())?;
    let mut ws = Workspace::new(state.dim());
    let mut r = state.matrix().clone();
    let mut w = state.weight();
    let dead = step_linear_in_place(&mut r, &mut w, l, dxi, &mut ws)?;
    let out = if dead {
        state.clone()
    } else {
        UnnormalizedState::from_parts_unchecked(r, w)
    };
    Ok(LinearStep { state: out, dead })
}

/// In-place linear step; returns `true` (without modifying `r`, `w`) when
/// the weight would underflow.
pub fn step_linear_in_place(
    r: &mut DMatrix<C64>,
    w: &mut f64,
    l: &LindbladSet,
    dxi: &NoiseIncrements,
    ws: &mut Workspace,
) -> Result<bool> {
    diffusion_increment(r, l, dxi, false, &mut ws.inc, &mut ws.t1, &mut ws.t2);
    ws.t1.copy_from(r);
    for (d, s) in ws.t1.as_mut_slice().iter_mut().zip(ws.inc.as_slice()) {
        *d += s;
    }
    hermitize_in_place(&mut ws.t1);
    let tr = trace_of(&ws.t1).re;
    if !tr.is_finite() {
        return Err(Error::NonFinite {
            context: "linear step (dt too large for the operator norms)",
        });
    }
    if tr < tolerances::WEIGHT_DEAD {
        return Ok(true);
    }
    finite_matrix(&ws.t1, "linear step")?;
    r.copy_from(&ws.t1);
    *w = tr;
    Ok(false)
}

/// One step of the propagator form: `M ← M + (Σ_m L_m dξ_m − K dt) M` with
/// `K = Σ_m L_m†L_m`. Evolving `M` and forming `R = M ρ(0) M†` reproduces
/// the linear flow up to the second-order noise products that the direct
/// `R` update replaces by their means; used to validate that correspondence.
pub fn step_propagator(m: &Operator, l: &LindbladSet, dxi: &NoiseIncrements) -> Result<Operator> {
    check_dims(l, m.dim(), dxi.len())?;
    let dt = dxi.dt();
    let dim = m.dim();
    let mut coeff = DMatrix::<C64>::zeros(dim, dim);
    for k in 0..l.len() {
        add_scaled(&mut coeff, l.operator(k), dxi.values()[k]);
    }
    add_scaled(&mut coeff, l.sum_ldag_l(), C64::new(-dt, 0.0));
    let mut next = m.matrix().clone();
    next.gemm(ONE, &coeff, m.matrix(), ONE);
    finite_matrix(&next, "propagator step")?;
    Operator::new(next)
}

/// Normalize an unnormalized state: `ρ = R / w`, unit trace by construction.
pub fn normalize(state: &UnnormalizedState) -> Result<DensityMatrix> {
    let w = state.weight();
    if w <= 0.0 {
        return Err(Error::NonPositiveWeight { weight: w });
    }
    let inv = C64::new(1.0 / w, 0.0);
    Ok(DensityMatrix::from_matrix_unchecked(state.matrix() * inv))
}

/// The properly weighted one-step differential of the normalized state from
/// a linear-engine transition: `(1/w) dR − (dw/w) ρ` with
/// `dR = next.R − state.R`, `dw = next.w − state.w`, `ρ = state.R / state.w`.
///
/// This reproduces the nonlinear density increment from the same state and
/// noise exactly, which is the observable content of the linear↔nonlinear
/// equivalence at the single-step level.
pub fn weighted_step_differential(
    state: &UnnormalizedState,
    next: &UnnormalizedState,
) -> Result<DMatrix<C64>> {
    let w = state.weight();
    if w <= 0.0 {
        return Err(Error::NonPositiveWeight { weight: w });
    }
    if state.dim() != next.dim() {
        return Err(Error::DimensionMismatch {
            expected: state.dim(),
            got: next.dim(),
        });
    }
    let dw = next.weight() - state.weight();
    let mut out = next.matrix() - state.matrix();
    let inv_w = C64::new(1.0 / w, 0.0);
    for z in out.as_mut_slice().iter_mut() {
        *z *= inv_w;
    }
    // − (dw/w) ρ = − (dw/w²) R
    add_scaled(&mut out, state.matrix(), C64::new(-dw / (w * w), 0.0));
    Ok(out)
}

/// Spectral positivity repair for a normalized state: eigenvalues in
/// `[−PSD, 0)` are clipped to zero with trace renormalization; anything
/// below `−PSD` rejects the step (the step size is too large). Returns the
/// repaired state and the total clipped mass.
pub fn repair_psd(rho: &DMatrix<C64>) -> Result<(DMatrix<C64>, f64)> {
    let eig = rho.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min < -tolerances::PSD {
        return Err(Error::PsdViolation {
            min_eigenvalue: min,
        });
    }
    if min >= 0.0 {
        return Ok((rho.clone(), 0.0));
    }
    let mut clipped = 0.0;
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < 0.0 {
            clipped += -*v;
            *v = 0.0;
        }
    }
    let total: f64 = vals.iter().sum();
    let dim = rho.nrows();
    let mut out = DMatrix::<C64>::zeros(dim, dim);
    for k in 0..dim {
        let col = eig.eigenvectors.column(k);
        let scale = vals[k] / total;
        for i in 0..dim {
            for j in 0..dim {
                out[(i, j)] += col[i] * col[j].conj() * C64::new(scale, 0.0);
            }
        }
    }
    hermitize_in_place(&mut out);
    Ok((out, clipped))
}

/// Verdict of the crude stability guard on `dt · max_m ‖L_m‖²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSizeCheck {
    Ok,
    /// Above the warning threshold; results may carry visible bias.
    Warn {
        value: f64,
    },
    /// Above the rejection threshold; the run should not proceed.
    Reject {
        value: f64,
    },
}

/// Check `dt` against the operator norms. Step-size selection stays the
/// caller's responsibility; this is only a sanity bound.
pub fn check_step_size(l: &LindbladSet, dt: f64) -> StepSizeCheck {
    let value = dt * l.max_norm_sq();
    if value > tolerances::STEP_REJECT {
        StepSizeCheck::Reject { value }
    } else if value > tolerances::STEP_WARN {
        StepSizeCheck::Warn { value }
    } else {
        StepSizeCheck::Ok
    }
}

/// Snapshot of an engine state for trajectory tracing.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateSnapshot {
    Vector(StateVector),
    Density(DensityMatrix),
    Unnormalized(UnnormalizedState),
}

/// One traced integrator step: the time after the step, the state, its
/// weight (1 for the nonlinear engines), and the increments consumed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub time: f64,
    pub state: StateSnapshot,
    pub weight: f64,
    pub increments: NoiseIncrements,
}

/// Stream a step record as one JSON line.
pub fn write_step_record(w: &mut impl Write, record: &StepRecord) -> io::Result<()> {
    serde_json::to_writer(&mut *w, record)?;
    w.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{build_observable, frobenius_distance};
    use approx::assert_abs_diff_eq;

    fn plus() -> StateVector {
        let a = 1.0 / 2.0f64.sqrt();
        StateVector::new(DVector::from_vec(vec![C64::new(a, 0.0), C64::new(a, 0.0)])).unwrap()
    }

    fn qubit_observable() -> LindbladSet {
        build_observable(&[0.0, 1.0]).unwrap()
    }

    // Independent brute-force evaluation of the state-vector differential
    // using plain nested loops, kept free of the production code path.
    fn naive_state_increment(psi: &[C64], ls: &[Vec<Vec<C64>>], dxi: &[C64], dt: f64) -> Vec<C64> {
        let n = psi.len();
        let matvec = |m: &[Vec<C64>], v: &[C64]| -> Vec<C64> {
            (0..n)
                .map(|i| (0..n).map(|j| m[i][j] * v[j]).sum())
                .collect()
        };
        let inner = |a: &[C64], b: &[C64]| -> C64 { (0..n).map(|i| a[i].conj() * b[i]).sum() };
        let adjoint = |m: &[Vec<C64>]| -> Vec<Vec<C64>> {
            (0..n)
                .map(|i| (0..n).map(|j| m[j][i].conj()).collect())
                .collect()
        };
        let mut out = vec![C64::new(0.0, 0.0); n];
        for (k, l) in ls.iter().enumerate() {
            let lpsi = matvec(l, psi);
            let e = inner(psi, &lpsi);
            let ldag = adjoint(l);
            let ldag_l_psi = matvec(&ldag, &lpsi);
            for i in 0..n {
                let drift =
                    e.conj() * C64::new(2.0, 0.0) * lpsi[i] - ldag_l_psi[i] - e.conj() * e * psi[i];
                out[i] += drift * C64::new(dt, 0.0) + (lpsi[i] - e * psi[i]) * dxi[k];
            }
        }
        out
    }

    #[test]
    fn state_step_matches_hand_value() {
        // ψ = (|0⟩+|1⟩)/√2, L = diag(0,1), dt = 0.01, dξ = 0.1:
        // pre-normalization amplitudes (0.9475, 1.0475)/√2.
        let psi = plus();
        let l = qubit_observable();
        let dxi = NoiseIncrements::from_values(vec![C64::new(0.1, 0.0)], 0.01).unwrap();
        let mut ws = Workspace::new(2);
        let mut cur = psi.amplitudes().clone();
        let mut inc = DVector::zeros(2);
        state_vector_increment_into(&cur, &l, &dxi, &mut inc, &mut ws);
        cur += &inc;
        let a = 1.0 / 2.0f64.sqrt();
        assert_abs_diff_eq!(cur[0].re, 0.9475 * a, epsilon = 1e-12);
        assert_abs_diff_eq!(cur[1].re, 1.0475 * a, epsilon = 1e-12);
        assert_abs_diff_eq!(cur[0].im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn state_increment_matches_naive_oracle() {
        let amps = DVector::from_vec(vec![C64::new(0.6, 0.1), C64::new(0.2, -0.77)]);
        let psi = StateVector::normalized(amps).unwrap();
        let l_mat = vec![
            vec![C64::new(0.3, 0.0), C64::new(0.2, 0.5)],
            vec![C64::new(-0.1, 0.2), C64::new(1.0, 0.0)],
        ];
        let op = Operator::new(DMatrix::from_fn(2, 2, |i, j| l_mat[i][j])).unwrap();
        let set = LindbladSet::new(vec![op]).unwrap();
        let dxi = NoiseIncrements::from_values(vec![C64::new(0.05, -0.03)], 0.01).unwrap();
        let mut ws = Workspace::new(2);
        let mut got = DVector::zeros(2);
        state_vector_increment_into(psi.amplitudes(), &set, &dxi, &mut got, &mut ws);
        let psi_v: Vec<C64> = psi.amplitudes().iter().copied().collect();
        let want = naive_state_increment(&psi_v, &[l_mat], dxi.values(), 0.01);
        for i in 0..2 {
            assert!((got[i] - want[i]).norm() < 1e-14);
        }
    }

    #[test]
    fn identity_coupling_leaves_state_fixed_up_to_phase() {
        let c = C64::new(0.4, -0.9);
        let op = Operator::new(DMatrix::identity(2, 2) * c).unwrap();
        let set = LindbladSet::new(vec![op]).unwrap();
        let psi = plus();
        let dxi = NoiseIncrements::from_values(vec![C64::new(0.07, 0.02)], 0.01).unwrap();
        let out = step_state_vector(&psi, &set, &dxi).unwrap();
        let overlap = psi.amplitudes().dotc(out.state.amplitudes()).norm();
        assert_abs_diff_eq!(overlap, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_noise_state_step_renormalizes_to_input() {
        let psi = plus();
        let l = qubit_observable();
        let dxi = NoiseIncrements::zeros(1, 0.01).unwrap();
        let out = step_state_vector(&psi, &l, &dxi).unwrap();
        // Drift scales both amplitudes by (1 − dt/4) on this state.
        assert_abs_diff_eq!(
            out.pre_norm_sq,
            (1.0f64 - 0.01 / 4.0).powi(2),
            epsilon = 1e-14
        );
        for i in 0..2 {
            assert!((out.state.amplitudes()[i] - psi.amplitudes()[i]).norm() < 1e-14);
        }
    }

    #[test]
    fn identity_coupling_is_invisible_to_density_step() {
        let set = LindbladSet::new(vec![Operator::identity(2)]).unwrap();
        let rho = plus().to_density();
        let dxi = NoiseIncrements::from_values(vec![C64::new(0.2, -0.1)], 0.05).unwrap();
        let out = step_density_nonlinear(&rho, &set, &dxi).unwrap();
        assert!(frobenius_distance(out.state.matrix(), rho.matrix()) < 1e-14);
    }

    #[test]
    fn density_drift_only_step_matches_hand_value() {
        let rho = plus().to_density();
        let l = qubit_observable();
        let dxi = NoiseIncrements::zeros(1, 0.01).unwrap();
        let out = step_density_nonlinear(&rho, &l, &dxi).unwrap();
        assert_abs_diff_eq!(out.state.element(0, 1).re, 0.495, epsilon = 1e-14);
        assert_abs_diff_eq!(out.state.element(0, 0).re, 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(out.state.element(1, 1).re, 0.5, epsilon = 1e-14);
        assert!(out.trace_repair < 1e-14);
    }

    #[test]
    fn density_step_agrees_with_state_step_as_dt_shrinks() {
        // Pathwise per-step error between the two nonlinear engines under
        // shared noise vanishes at least linearly in dt.
        let l = qubit_observable();
        let mut errs = Vec::new();
        let dts = [1e-2, 1e-3, 1e-4];
        for &dt in &dts {
            let mut stream = crate::noise::NoiseStream::new(99, 0);
            let mut worst = 0.0f64;
            for _ in 0..64 {
                let dxi = stream.sample_increments(1, dt).unwrap();
                let psi = plus();
                let rho = psi.to_density();
                let sv = step_state_vector(&psi, &l, &dxi).unwrap();
                let dn = step_density_nonlinear(&rho, &l, &dxi).unwrap();
                let d = frobenius_distance(sv.state.to_density().matrix(), dn.state.matrix());
                worst = worst.max(d);
            }
            errs.push(worst);
        }
        let fit = crate::stats::fit_order(&dts, &errs).unwrap();
        assert!(
            fit.slope > 0.9,
            "per-step error should shrink at least linearly, got slope {}",
            fit.slope
        );
    }

    #[test]
    fn zero_coupling_freezes_linear_state() {
        let set = LindbladSet::new(vec![Operator::zero(2)]).unwrap();
        let rho = plus().to_density();
        let state = UnnormalizedState::from_density(&rho);
        let dxi = NoiseIncrements::from_values(vec![C64::new(0.3, 0.4)], 0.01).unwrap();
        let out = step_linear(&state, &set, &dxi).unwrap();
        assert!(!out.dead);
        // The weight is recomputed as Tr R, so it matches the realized trace
        // of the initial matrix rather than the nominal 1.0 exactly.
        assert!((out.state.weight() - 1.0).abs() < 1e-14);
        assert!(frobenius_distance(out.state.matrix(), rho.matrix()) < 1e-15);
    }

    #[test]
    fn linear_trace_identity_is_exact_along_a_path() {
        let l = qubit_observable();
        let mut stream = crate::noise::NoiseStream::new(7, 3);
        let rho = plus().to_density();
        let mut r = rho.matrix().clone();
        let mut w = 1.0;
        let mut ws = Workspace::new(2);
        for _ in 0..1000 {
            let dxi = stream.sample_increments(1, 1e-3).unwrap();
            let dead = step_linear_in_place(&mut r, &mut w, &l, &dxi, &mut ws).unwrap();
            assert!(!dead);
            assert_eq!(trace_of(&r).re, w);
            assert!(crate::operators::hermiticity_deviation(&r) < 1e-14);
        }
    }

    #[test]
    fn weight_underflow_flags_dead_and_freezes_state() {
        let l = qubit_observable();
        let rho = plus().to_density();
        let tiny = rho.matrix() * C64::new(5e-13, 0.0);
        let state = UnnormalizedState::new(tiny, 5e-13).unwrap();
        let dxi = NoiseIncrements::zeros(1, 0.01).unwrap();
        let out = step_linear(&state, &l, &dxi).unwrap();
        assert!(out.dead);
        assert_eq!(out.state.weight(), 5e-13);
    }

    #[test]
    fn normalize_divides_by_weight() {
        let r = DMatrix::from_fn(2, 2, |i, j| {
            if i == j {
                C64::new(0.2, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        let state = UnnormalizedState::new(r, 0.4).unwrap();
        let rho = normalize(&state).unwrap();
        assert_abs_diff_eq!(rho.element(0, 0).re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rho.element(1, 1).re, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn normalize_of_unit_weight_is_identity() {
        let rho = plus().to_density();
        let state = UnnormalizedState::from_density(&rho);
        let out = normalize(&state).unwrap();
        assert!(frobenius_distance(out.matrix(), rho.matrix()) < 1e-15);
    }

    #[test]
    fn weighted_differential_of_constant_transition_is_zero() {
        let rho = plus().to_density();
        let state = UnnormalizedState::from_density(&rho);
        let d = weighted_step_differential(&state, &state).unwrap();
        assert!(d.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn weighted_differential_drift_matches_density_drift() {
        let l = qubit_observable();
        let rho = plus().to_density();
        let state = UnnormalizedState::from_density(&rho);
        let dxi = NoiseIncrements::zeros(1, 0.01).unwrap();
        let next = step_linear(&state, &l, &dxi).unwrap();
        let d = weighted_step_differential(&state, &next.state).unwrap();
        // Off-diagonal decrement −dt·ρ01·(l0−l1)², diagonals untouched.
        assert_abs_diff_eq!(d[(0, 1)].re, -0.005, epsilon = 1e-14);
        assert_abs_diff_eq!(d[(0, 0)].re, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d[(1, 1)].re, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn weighted_differential_reproduces_density_increment_under_shared_noise() {
        let l = qubit_observable();
        let rho = plus().to_density();
        let mut stream = crate::noise::NoiseStream::new(21, 0);
        for &dt in &[1e-2, 1e-3, 1e-4] {
            let dxi = stream.sample_increments(1, dt).unwrap();
            let state = UnnormalizedState::from_density(&rho);
            let next = step_linear(&state, &l, &dxi).unwrap();
            let weighted = weighted_step_differential(&state, &next.state).unwrap();
            let mut ws = Workspace::new(2);
            let mut direct = DMatrix::zeros(2, 2);
            density_increment_into(rho.matrix(), &l, &dxi, &mut direct, &mut ws);
            assert!(frobenius_distance(&weighted, &direct) < 1e-13, "dt={dt}");
        }
    }

    #[test]
    fn propagator_form_tracks_direct_linear_flow() {
        let l = qubit_observable();
        let rho = plus().to_density();
        let dts = [1e-2, 1e-3];
        let mut errs = Vec::new();
        for &dt in &dts {
            let steps = (0.1 / dt) as usize;
            let mut stream = crate::noise::NoiseStream::new(5, 0);
            let mut m = Operator::identity(2);
            let mut state = UnnormalizedState::from_density(&rho);
            for _ in 0..steps {
                let dxi = stream.sample_increments(1, dt).unwrap();
                m = step_propagator(&m, &l, &dxi).unwrap();
                state = step_linear(&state, &l, &dxi).unwrap().state;
            }
            let r_from_m = m.matrix() * rho.matrix() * m.matrix().adjoint();
            errs.push(frobenius_distance(&r_from_m, state.matrix()));
        }
        assert!(errs[1] < errs[0], "{errs:?}");
        assert!(errs[1] < 0.05, "{errs:?}");
    }

    #[test]
    fn mean_norm_repair_is_second_order_in_dt() {
        // Single-step mean of ‖ψ+dψ‖² − 1 equals ‖(drift)ψ‖² dt² exactly;
        // at ψ = |+⟩ with L = diag(0,1) that is dt²/16. Checked at two dt
        // values where the signal clears the Monte Carlo noise.
        let l = qubit_observable();
        let psi = plus();
        let measure = |dt: f64, n: usize| -> (f64, f64) {
            let mut stream = crate::noise::NoiseStream::new(123, 0);
            let devs: Vec<f64> = (0..n)
                .map(|_| {
                    let dxi = stream.sample_increments(1, dt).unwrap();
                    step_state_vector(&psi, &l, &dxi).unwrap().pre_norm_sq - 1.0
                })
                .collect();
            crate::stats::mean_se(&devs)
        };
        let n = 200_000;
        let (m1, se1) = measure(0.3, n);
        let (m2, se2) = measure(0.15, n);
        let pred1 = 0.3f64.powi(2) / 16.0;
        let pred2 = 0.15f64.powi(2) / 16.0;
        assert!(
            (m1 - pred1).abs() < 4.0 * se1,
            "m1={m1} pred={pred1} se={se1}"
        );
        assert!(
            (m2 - pred2).abs() < 4.0 * se2,
            "m2={m2} pred={pred2} se={se2}"
        );
        let ratio = m1 / m2;
        assert!(
            (2.5..6.0).contains(&ratio),
            "halving dt should quarter the repair, ratio {ratio}"
        );
    }

    #[test]
    fn purity_drift_is_first_order_over_a_horizon() {
        let l = qubit_observable();
        let loss_at = |dt: f64| -> f64 {
            let horizon = 0.5;
            let steps = (horizon / dt) as usize;
            let n = 64;
            let mut total = 0.0;
            for t in 0..n {
                let mut stream = crate::noise::NoiseStream::new(31, t);
                let mut rho = plus().to_density();
                for _ in 0..steps {
                    let dxi = stream.sample_increments(1, dt).unwrap();
                    rho = step_density_nonlinear(&rho, &l, &dxi).unwrap().state;
                }
                total += 1.0 - rho.purity();
            }
            total / n as f64
        };
        let a = loss_at(1e-2);
        let b = loss_at(5e-3);
        assert!(a < 0.05, "purity loss too large: {a}");
        let ratio = a / b;
        assert!(
            (1.2..3.5).contains(&ratio),
            "purity loss should scale ~dt, ratio {ratio}"
        );
    }

    #[test]
    fn step_size_guard_thresholds() {
        let l = qubit_observable(); // max ‖L‖² = 1
        assert_eq!(check_step_size(&l, 0.01), StepSizeCheck::Ok);
        assert!(matches!(
            check_step_size(&l, 0.2),
            StepSizeCheck::Warn { .. }
        ));
        assert!(matches!(
            check_step_size(&l, 0.6),
            StepSizeCheck::Reject { .. }
        ));
    }

    #[test]
    fn psd_repair_clips_small_negatives_and_rejects_large() {
        let small = DMatrix::from_fn(2, 2, |i, j| {
            if i == j {
                C64::new(if i == 0 { 1.0 + 5e-9 } else { -5e-9 }, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        let (fixed, clipped) = repair_psd(&small).unwrap();
        assert!(clipped > 0.0);
        assert!(fixed[(1, 1)].re >= 0.0);
        let big = DMatrix::from_fn(2, 2, |i, j| {
            if i == j {
                C64::new(if i == 0 { 1.1 } else { -0.1 }, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        assert!(matches!(repair_psd(&big), Err(Error::PsdViolation { .. })));
    }

    #[test]
    fn step_record_round_trips_as_json_line() {
        let rec = StepRecord {
            time: 0.25,
            state: StateSnapshot::Vector(plus()),
            weight: 1.0,
            increments: NoiseIncrements::from_values(vec![C64::new(0.1, -0.2)], 0.01).unwrap(),
        };
        let mut buf = Vec::new();
        write_step_record(&mut buf, &rec).unwrap();
        assert!(buf.ends_with(b"\n"));
        let back: StepRecord = serde_json::from_slice(&buf).unwrap();
        assert_eq!(back.time, rec.time);
        assert_eq!(back.increments, rec.increments);
    }
}
