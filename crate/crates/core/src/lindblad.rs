//! Deterministic reference solver for the ensemble-mean dynamics.
//!
//! Averaging the diffusion over noise leaves only the drift
//! `dρ/dt = Σ_m (2 L_m ρ L_m† − L_m†L_m ρ − ρ L_m†L_m)`, a Lindblad-type
//! generator in this library's factor-2 convention (twice the common
//! `LρL† − ½{L†L, ρ}` form). The convention is preserved verbatim
//! everywhere; converting is the caller's job, never a silent rescaling.
//!
//! Integration is classical fixed-step fourth-order Runge–Kutta. The
//! generator is trace-free for any input, so the trace is conserved to
//! machine precision without renormalization.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::operators::{hermitize_in_place, DensityMatrix, LindbladSet};
use crate::C64;

/// Times and states produced by [`evolve_mean`].
#[derive(Clone, Debug)]
pub struct MeanEvolutionResult {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
}

/// Apply the mean-dynamics generator to an arbitrary matrix.
pub fn generator(l: &LindbladSet, x: &DMatrix<C64>) -> DMatrix<C64> {
    let dim = l.dim();
    let mut out = DMatrix::zeros(dim, dim);
    let mut t1 = DMatrix::zeros(dim, dim);
    let mut t2 = DMatrix::zeros(dim, dim);
    generator_into(l, x, &mut out, &mut t1, &mut t2);
    out
}

fn generator_into(
    l: &LindbladSet,
    x: &DMatrix<C64>,
    out: &mut DMatrix<C64>,
    t1: &mut DMatrix<C64>,
    t2: &mut DMatrix<C64>,
) {
    let one = C64::new(1.0, 0.0);
    let zero = C64::new(0.0, 0.0);
    out.fill(zero);
    for m in 0..l.len() {
        // 2 L x L†
        t1.gemm(one, l.operator(m), x, zero);
        t2.gemm(one, t1, l.adjoint(m), zero);
        add_scaled(out, t2, C64::new(2.0, 0.0));
        // − (L†L) x − x (L†L)
        t1.gemm(one, l.quadratic(m), x, zero);
        add_scaled(out, t1, C64::new(-1.0, 0.0));
        t2.gemm(one, x, l.quadratic(m), zero);
        add_scaled(out, t2, C64::new(-1.0, 0.0));
    }
}

fn add_scaled(dst: &mut DMatrix<C64>, src: &DMatrix<C64>, c: C64) {
    for (d, s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *d += s * c;
    }
}

/// Integrate the mean dynamics from `rho0` to `t_final` with `steps` RK4
/// steps, recording every step (steps + 1 states including the initial one).
pub fn evolve_mean(
    rho0: &DensityMatrix,
    l: &LindbladSet,
    t_final: f64,
    steps: usize,
) -> Result<MeanEvolutionResult> {
    if rho0.dim() != l.dim() {
        return Err(Error::DimensionMismatch {
            expected: l.dim(),
            got: rho0.dim(),
        });
    }
    if steps == 0 || t_final <= 0.0 || t_final.is_nan() {
        return Err(Error::InvalidSpec(
            "evolve_mean requires steps >= 1 and t_final > 0".into(),
        ));
    }
    let dt = t_final / steps as f64;
    let mut rho = rho0.matrix().clone();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(rho0.clone());
    let mut stepper = Rk4::new(l.dim());
    for k in 1..=steps {
        stepper.step(l, &mut rho, dt)?;
        times.push(k as f64 * dt);
        states.push(DensityMatrix::from_matrix_unchecked(rho.clone()));
    }
    Ok(MeanEvolutionResult { times, states })
}

/// Integrate the mean dynamics recording only at the given grid times,
/// taking `substeps` RK4 steps between consecutive grid points. The grid
/// must start at 0 and be strictly increasing.
pub fn evolve_mean_grid(
    rho0: &DensityMatrix,
    l: &LindbladSet,
    times: &[f64],
    substeps: usize,
) -> Result<MeanEvolutionResult> {
    if rho0.dim() != l.dim() {
        return Err(Error::DimensionMismatch {
            expected: l.dim(),
            got: rho0.dim(),
        });
    }
    if times.is_empty() || times[0] != 0.0 || substeps == 0 {
        return Err(Error::InvalidSpec(
            "grid must start at 0 and substeps must be >= 1".into(),
        ));
    }
    let mut rho = rho0.matrix().clone();
    let mut states = vec![rho0.clone()];
    let mut stepper = Rk4::new(l.dim());
    for w in times.windows(2) {
        let span = w[1] - w[0];
        if span <= 0.0 {
            return Err(Error::InvalidSpec("grid times must increase".into()));
        }
        let dt = span / substeps as f64;
        for _ in 0..substeps {
            stepper.step(l, &mut rho, dt)?;
        }
        states.push(DensityMatrix::from_matrix_unchecked(rho.clone()));
    }
    Ok(MeanEvolutionResult {
        times: times.to_vec(),
        states,
    })
}

struct Rk4 {
    k1: DMatrix<C64>,
    k2: DMatrix<C64>,
    k3: DMatrix<C64>,
    k4: DMatrix<C64>,
    tmp: DMatrix<C64>,
    t1: DMatrix<C64>,
    t2: DMatrix<C64>,
}

impl Rk4 {
    fn new(dim: usize) -> Self {
        let z = DMatrix::zeros(dim, dim);
        Self {
            k1: z.clone(),
            k2: z.clone(),
            k3: z.clone(),
            k4: z.clone(),
            tmp: z.clone(),
            t1: z.clone(),
            t2: z,
        }
    }

    fn step(&mut self, l: &LindbladSet, rho: &mut DMatrix<C64>, dt: f64) -> Result<()> {
        let half = C64::new(dt / 2.0, 0.0);
        let full = C64::new(dt, 0.0);
        generator_into(l, rho, &mut self.k1, &mut self.t1, &mut self.t2);
        self.tmp.copy_from(rho);
        add_scaled(&mut self.tmp, &self.k1, half);
        generator_into(l, &self.tmp, &mut self.k2, &mut self.t1, &mut self.t2);
        self.tmp.copy_from(rho);
        add_scaled(&mut self.tmp, &self.k2, half);
        generator_into(l, &self.tmp, &mut self.k3, &mut self.t1, &mut self.t2);
        self.tmp.copy_from(rho);
        add_scaled(&mut self.tmp, &self.k3, full);
        generator_into(l, &self.tmp, &mut self.k4, &mut self.t1, &mut self.t2);
        let w = dt / 6.0;
        add_scaled(rho, &self.k1, C64::new(w, 0.0));
        add_scaled(rho, &self.k2, C64::new(2.0 * w, 0.0));
        add_scaled(rho, &self.k3, C64::new(2.0 * w, 0.0));
        add_scaled(rho, &self.k4, C64::new(w, 0.0));
        hermitize_in_place(rho);
        if !rho.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::NonFinite {
                context: "mean-dynamics integration",
            });
        }
        Ok(())
    }
}

/// Closed form for a single off-diagonal element under a diagonal
/// observable: `ρ_mn(t) = ρ_mn(0) · exp(−(l_m − l_n)² t)`.
pub fn closed_form_offdiagonal(rho0_mn: C64, l_m: f64, l_n: f64, t: f64) -> C64 {
    let rate = (l_m - l_n) * (l_m - l_n);
    rho0_mn * C64::new((-rate * t).exp(), 0.0)
}
