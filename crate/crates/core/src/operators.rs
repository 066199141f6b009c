//! Core value types: operators, state vectors, density matrices, and the
//! coupling-operator sets that drive the diffusion.
//!
//! Everything is dense and double precision; target dimensions are small
//! (2–16). All types are immutable values after construction and safe to
//! share across workers. The computational basis is fixed to the eigenbasis
//! of the measured observable; callers diagonalize beforehand.

use nalgebra::{DMatrix, DVector};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::{tolerances, C64};

fn all_finite(entries: &DMatrix<C64>) -> bool {
    entries.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Max elementwise deviation from Hermiticity, `max |A_ij - conj(A_ji)|`.
pub fn hermiticity_deviation(entries: &DMatrix<C64>) -> f64 {
    let n = entries.nrows();
    let mut dev = 0.0f64;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((entries[(i, j)] - entries[(j, i)].conj()).norm());
        }
    }
    dev
}

/// Replace `m` with its Hermitian part `(m + m†)/2` and return the max
/// elementwise change.
pub fn hermitize_in_place(m: &mut DMatrix<C64>) -> f64 {
    let n = m.nrows();
    let mut dev = 0.0f64;
    for i in 0..n {
        let d = m[(i, i)];
        dev = dev.max(d.im.abs());
        m[(i, i)] = C64::new(d.re, 0.0);
        for j in (i + 1)..n {
            let avg = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            dev = dev.max((m[(i, j)] - avg).norm());
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
    }
    dev
}

pub(crate) fn trace_of(m: &DMatrix<C64>) -> C64 {
    let mut t = C64::new(0.0, 0.0);
    for i in 0..m.nrows() {
        t += m[(i, i)];
    }
    t
}

/// Frobenius distance `‖a - b‖_F`.
pub fn frobenius_distance(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue(m: &DMatrix<C64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// A dense complex square matrix acting on the system Hilbert space.
#[derive(Clone, Debug, PartialEq)]
pub struct Operator {
    dim: usize,
    entries: DMatrix<C64>,
}

impl Operator {
    /// Wrap a square matrix; rejects empty or non-finite input.
    pub fn new(entries: DMatrix<C64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::NotSquare {
                rows: entries.nrows(),
                cols: entries.ncols(),
            });
        }
        if entries.nrows() == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        if !all_finite(&entries) {
            return Err(Error::NonFinite {
                context: "operator entries",
            });
        }
        Ok(Self {
            dim: entries.nrows(),
            entries,
        })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            entries: DMatrix::zeros(dim, dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            entries: DMatrix::identity(dim, dim),
        }
    }

    /// Diagonal operator with the given real spectrum.
    pub fn from_real_diagonal(values: &[f64]) -> Self {
        let dim = values.len();
        Self {
            dim,
            entries: DMatrix::from_fn(dim, dim, |i, j| {
                if i == j {
                    C64::new(values[i], 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            }),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.entries
    }

    pub fn adjoint(&self) -> Operator {
        Self {
            dim: self.dim,
            entries: self.entries.adjoint(),
        }
    }

    pub fn is_hermitian_within(&self, tol: f64) -> bool {
        hermiticity_deviation(&self.entries) <= tol
    }

    /// Error unless `A = A†` within the validation tolerance.
    pub fn require_hermitian(&self) -> Result<&Self> {
        let dev = hermiticity_deviation(&self.entries);
        if dev > tolerances::HERMITICITY {
            return Err(Error::NotHermitian { deviation: dev });
        }
        Ok(self)
    }

    /// Squared spectral norm, the largest eigenvalue of `A†A`.
    pub fn spectral_norm_sq(&self) -> f64 {
        let prod = self.entries.adjoint() * &self.entries;
        prod.symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0f64, |a, &b| a.max(b))
    }
}

/// A normalized complex amplitude vector.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    dim: usize,
    amplitudes: DVector<C64>,
}

impl StateVector {
    /// Wrap an amplitude vector, requiring unit norm within tolerance.
    pub fn new(amplitudes: DVector<C64>) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        if !amplitudes
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
        {
            return Err(Error::NonFinite {
                context: "state amplitudes",
            });
        }
        let norm = amplitudes.norm();
        if (norm - 1.0).abs() > tolerances::NORM {
            return Err(Error::BadNorm(norm));
        }
        Ok(Self {
            dim: amplitudes.len(),
            amplitudes,
        })
    }

    /// Normalize an arbitrary nonzero vector to a unit state.
    pub fn normalized(raw: DVector<C64>) -> Result<Self> {
        let norm = raw.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::NonFinite {
                context: "state amplitudes",
            });
        }
        Ok(Self {
            dim: raw.len(),
            amplitudes: raw / C64::new(norm, 0.0),
        })
    }

    /// Computational basis state `|k⟩`.
    pub fn basis(dim: usize, k: usize) -> Self {
        let mut v = DVector::zeros(dim);
        v[k] = C64::new(1.0, 0.0);
        Self { dim, amplitudes: v }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn amplitudes(&self) -> &DVector<C64> {
        &self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.norm()
    }

    /// Populations `|ψ_k|²`.
    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|z| z.norm_sqr()).collect()
    }

    /// The pure density matrix `|ψ⟩⟨ψ|`.
    pub fn to_density(&self) -> DensityMatrix {
        let m = DMatrix::from_fn(self.dim, self.dim, |i, j| {
            self.amplitudes[i] * self.amplitudes[j].conj()
        });
        DensityMatrix {
            dim: self.dim,
            entries: m,
        }
    }
}

/// Hermitian, positive-semidefinite, unit-trace complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    dim: usize,
    entries: DMatrix<C64>,
}

impl DensityMatrix {
    /// Validate Hermiticity, unit trace, and positivity (eigenvalue floor).
    pub fn new(entries: DMatrix<C64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::NotSquare {
                rows: entries.nrows(),
                cols: entries.ncols(),
            });
        }
        if entries.nrows() == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        if !all_finite(&entries) {
            return Err(Error::NonFinite {
                context: "density matrix entries",
            });
        }
        let dev = hermiticity_deviation(&entries);
        if dev > tolerances::HERMITICITY {
            return Err(Error::NotHermitian { deviation: dev });
        }
        let tr = trace_of(&entries);
        if (tr.re - 1.0).abs() > tolerances::TRACE || tr.im.abs() > tolerances::TRACE {
            return Err(Error::BadTrace {
                expected: 1.0,
                got: tr.re,
            });
        }
        let min = min_eigenvalue(&entries);
        if min < -tolerances::PSD {
            return Err(Error::PsdViolation {
                min_eigenvalue: min,
            });
        }
        Ok(Self {
            dim: entries.nrows(),
            entries,
        })
    }

    /// Bypass validation for matrices produced by the engines themselves.
    pub(crate) fn from_matrix_unchecked(entries: DMatrix<C64>) -> Self {
        Self {
            dim: entries.nrows(),
            entries,
        }
    }

    /// Mixed state with the given populations (normalized to unit trace).
    pub fn from_diagonal(populations: &[f64]) -> Result<Self> {
        if populations.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        let sum: f64 = populations.iter().sum();
        if !sum.is_finite() || sum <= 0.0 || populations.iter().any(|&p| p < 0.0) {
            return Err(Error::NonFinite {
                context: "diagonal populations",
            });
        }
        let dim = populations.len();
        Ok(Self {
            dim,
            entries: DMatrix::from_fn(dim, dim, |i, j| {
                if i == j {
                    C64::new(populations[i] / sum, 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            }),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.entries
    }

    pub fn element(&self, i: usize, j: usize) -> C64 {
        self.entries[(i, j)]
    }

    /// Real diagonal populations.
    pub fn diagonals(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.entries[(i, i)].re).collect()
    }

    /// `Tr ρ²`; equals one exactly on pure states.
    pub fn purity(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                s += (self.entries[(i, j)] * self.entries[(j, i)]).re;
            }
        }
        s
    }

    /// Extract the dominant eigenvector; errors unless the state is pure
    /// within the positivity tolerance.
    pub fn to_pure_state(&self) -> Result<StateVector> {
        let purity = self.purity();
        if (purity - 1.0).abs() > 100.0 * tolerances::PSD {
            return Err(Error::NotPure { purity });
        }
        let eig = self.entries.clone().symmetric_eigen();
        let mut best = 0;
        for (k, &v) in eig.eigenvalues.iter().enumerate() {
            if v > eig.eigenvalues[best] {
                best = k;
            }
        }
        StateVector::normalized(eig.eigenvectors.column(best).into_owned())
    }
}

/// Unnormalized evolved state: matrix `R` with scalar weight `w = Tr R`.
///
/// Maintained jointly by the linear engine; the trace identity is kept
/// exact by recomputing `w` from `R` after every step.
#[derive(Clone, Debug, PartialEq)]
pub struct UnnormalizedState {
    r: DMatrix<C64>,
    weight: f64,
}

impl UnnormalizedState {
    /// Wrap `(R, w)`, validating Hermiticity, positivity of `w`, and the
    /// trace identity.
    pub fn new(r: DMatrix<C64>, weight: f64) -> Result<Self> {
        if r.nrows() != r.ncols() {
            return Err(Error::NotSquare {
                rows: r.nrows(),
                cols: r.ncols(),
            });
        }
        if !all_finite(&r) || !weight.is_finite() {
            return Err(Error::NonFinite {
                context: "unnormalized state",
            });
        }
        let dev = hermiticity_deviation(&r);
        if dev > tolerances::HERMITICITY {
            return Err(Error::NotHermitian { deviation: dev });
        }
        if weight <= 0.0 {
            return Err(Error::NonPositiveWeight { weight });
        }
        let tr = trace_of(&r).re;
        if (tr - weight).abs() > tolerances::TRACE * weight.max(1.0) {
            return Err(Error::BadTrace {
                expected: weight,
                got: tr,
            });
        }
        Ok(Self { r, weight })
    }

    /// Start a linear trajectory from a normalized state (`w = 1`).
    pub fn from_density(rho: &DensityMatrix) -> Self {
        Self {
            r: rho.matrix().clone(),
            weight: 1.0,
        }
    }

    pub(crate) fn from_parts_unchecked(r: DMatrix<C64>, weight: f64) -> Self {
        Self { r, weight }
    }

    pub fn dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.r
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }
}

/// Ordered, non-empty set of coupling operators with a shared dimension.
///
/// Adjoints, the quadratic products `L†L`, and their sum are precomputed at
/// construction since every integrator step needs them.
#[derive(Clone, Debug)]
pub struct LindbladSet {
    dim: usize,
    operators: Vec<Operator>,
    adjoints: Vec<DMatrix<C64>>,
    quadratic: Vec<DMatrix<C64>>,
    quadratic_sum: DMatrix<C64>,
    max_norm_sq: f64,
}

impl LindbladSet {
    pub fn new(operators: Vec<Operator>) -> Result<Self> {
        let dim = match operators.first() {
            Some(op) => op.dim(),
            None => return Err(Error::EmptyLindbladSet),
        };
        for op in &operators {
            if op.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: op.dim(),
                });
            }
        }
        let adjoints: Vec<_> = operators.iter().map(|op| op.matrix().adjoint()).collect();
        let quadratic: Vec<_> = operators
            .iter()
            .zip(&adjoints)
            .map(|(op, adj)| adj * op.matrix())
            .collect();
        let mut quadratic_sum = DMatrix::zeros(dim, dim);
        for q in &quadratic {
            quadratic_sum += q;
        }
        let max_norm_sq = quadratic
            .iter()
            .map(|q| {
                q.clone()
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .fold(0.0f64, |a, &b| a.max(b))
            })
            .fold(0.0f64, |a, b| a.max(b));
        Ok(Self {
            dim,
            operators,
            adjoints,
            quadratic,
            quadratic_sum,
            max_norm_sq,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn operators(&self) -> &[Operator] {
        &self.operators
    }

    pub fn operator(&self, m: usize) -> &DMatrix<C64> {
        self.operators[m].matrix()
    }

    pub fn adjoint(&self, m: usize) -> &DMatrix<C64> {
        &self.adjoints[m]
    }

    /// `L_m† L_m`.
    pub fn quadratic(&self, m: usize) -> &DMatrix<C64> {
        &self.quadratic[m]
    }

    /// The norm-preserving counterterm `K = Σ_m L_m† L_m`.
    pub fn sum_ldag_l(&self) -> &DMatrix<C64> {
        &self.quadratic_sum
    }

    /// Largest `‖L_m‖²` over the set; used by the step-size guard.
    pub fn max_norm_sq(&self) -> f64 {
        self.max_norm_sq
    }
}

/// Single diagonal Hermitian observable `L = Σ_m l_m |m⟩⟨m|` as a
/// one-element coupling set. Degenerate spectra are allowed.
pub fn build_observable(eigenvalues: &[f64]) -> Result<LindbladSet> {
    if eigenvalues.is_empty() {
        return Err(Error::EmptyEigenvalues);
    }
    if !eigenvalues.iter().all(|l| l.is_finite()) {
        return Err(Error::NonFinite {
            context: "observable eigenvalues",
        });
    }
    LindbladSet::new(vec![Operator::from_real_diagonal(eigenvalues)])
}

/// Complete family of rank-one projectors `{|m⟩⟨m|}` on the computational
/// basis. They satisfy `P_m P_n = δ_mn P_m` and `Σ_m P_m = 1` exactly.
pub fn build_projector_set(dim: usize) -> Result<LindbladSet> {
    if dim < 2 {
        return Err(Error::ProjectorDimTooSmall(dim));
    }
    let ops = (0..dim)
        .map(|m| {
            let mut e = DMatrix::zeros(dim, dim);
            e[(m, m)] = C64::new(1.0, 0.0);
            Operator { dim, entries: e }
        })
        .collect();
    LindbladSet::new(ops)
}

/// `Tr(op · rho)`; real within tolerance when `op` is Hermitian.
pub fn expectation(op: &Operator, rho: &DensityMatrix) -> Result<C64> {
    if op.dim() != rho.dim() {
        return Err(Error::DimensionMismatch {
            expected: rho.dim(),
            got: op.dim(),
        });
    }
    Ok(trace_product(op.matrix(), rho.matrix()))
}

/// `Tr(a · b)` without forming the product matrix.
pub fn trace_product(a: &DMatrix<C64>, b: &DMatrix<C64>) -> C64 {
    let n = a.nrows();
    let mut t = C64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            t += a[(i, j)] * b[(j, i)];
        }
    }
    t
}

// JSON form shared by operators and density matrices: row-major nested
// arrays of real and imaginary parts.
#[derive(Serialize, Deserialize)]
struct MatrixJson {
    dim: usize,
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

impl MatrixJson {
    fn from_matrix(m: &DMatrix<C64>) -> Self {
        let n = m.nrows();
        Self {
            dim: n,
            re: (0..n)
                .map(|i| (0..n).map(|j| m[(i, j)].re).collect())
                .collect(),
            im: (0..n)
                .map(|i| (0..n).map(|j| m[(i, j)].im).collect())
                .collect(),
        }
    }

    fn to_matrix<E: serde::de::Error>(&self) -> std::result::Result<DMatrix<C64>, E> {
        let n = self.dim;
        if n == 0 {
            return Err(E::custom("dim must be at least 1"));
        }
        let check = |rows: &Vec<Vec<f64>>, name: &str| -> std::result::Result<(), E> {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(E::custom(format!("{name} must be a {n}x{n} array")));
            }
            Ok(())
        };
        check(&self.re, "re")?;
        check(&self.im, "im")?;
        Ok(DMatrix::from_fn(n, n, |i, j| {
            C64::new(self.re[i][j], self.im[i][j])
        }))
    }
}

impl Serialize for Operator {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixJson::from_matrix(&self.entries).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Operator {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = MatrixJson::deserialize(d)?;
        Operator::new(j.to_matrix()?).map_err(D::Error::custom)
    }
}

impl Serialize for DensityMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixJson::from_matrix(&self.entries).serialize(s)
    }
}

impl<'de> Deserialize<'de> for DensityMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = MatrixJson::deserialize(d)?;
        DensityMatrix::new(j.to_matrix()?).map_err(D::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct VectorJson {
    dim: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl Serialize for StateVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        VectorJson {
            dim: self.dim,
            re: self.amplitudes.iter().map(|z| z.re).collect(),
            im: self.amplitudes.iter().map(|z| z.im).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for StateVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = VectorJson::deserialize(d)?;
        if j.re.len() != j.dim || j.im.len() != j.dim {
            return Err(D::Error::custom("re/im length must equal dim"));
        }
        let v = DVector::from_fn(j.dim, |i, _| C64::new(j.re[i], j.im[i]));
        StateVector::new(v).map_err(D::Error::custom)
    }
}

impl Serialize for UnnormalizedState {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr {
            r: MatrixJson,
            w: f64,
        }
        Repr {
            r: MatrixJson::from_matrix(&self.r),
            w: self.weight,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for UnnormalizedState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            r: MatrixJson,
            w: f64,
        }
        let repr = Repr::deserialize(d)?;
        UnnormalizedState::new(repr.r.to_matrix()?, repr.w).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn plus_state() -> StateVector {
        let a = 1.0 / 2.0f64.sqrt();
        StateVector::new(DVector::from_vec(vec![C64::new(a, 0.0), C64::new(a, 0.0)])).unwrap()
    }

    #[test]
    fn observable_is_diagonal_with_given_spectrum() {
        let set = build_observable(&[0.0, 1.0]).unwrap();
        let l = set.operator(0);
        assert_eq!(l[(0, 0)], C64::new(0.0, 0.0));
        assert_eq!(l[(1, 1)], C64::new(1.0, 0.0));
        assert_eq!(l[(0, 1)], C64::new(0.0, 0.0));
    }

    #[test]
    fn degenerate_observable_is_identity() {
        let set = build_observable(&[1.0, 1.0]).unwrap();
        assert_eq!(set.operator(0), &DMatrix::identity(2, 2));
    }

    #[test]
    fn observable_hermitian_with_matching_spectrum() {
        let set = build_observable(&[-1.0, 0.0, 1.0]).unwrap();
        let op = &set.operators()[0];
        assert!(op.is_hermitian_within(0.0));
        let eigs = op.matrix().clone().symmetric_eigen().eigenvalues;
        let mut sorted: Vec<f64> = eigs.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn observable_rejects_empty_spectrum() {
        assert!(matches!(
            build_observable(&[]),
            Err(Error::EmptyEigenvalues)
        ));
    }

    #[test]
    fn projector_set_is_complete_and_orthogonal() {
        let set = build_projector_set(3).unwrap();
        assert_eq!(set.len(), 3);
        let mut sum = DMatrix::<C64>::zeros(3, 3);
        for m in 0..3 {
            sum += set.operator(m);
            for n in 0..3 {
                let prod = set.operator(m) * set.operator(n);
                let expect = if m == n {
                    set.operator(m).clone()
                } else {
                    DMatrix::zeros(3, 3)
                };
                assert_eq!(prod, expect);
            }
        }
        assert_eq!(sum, DMatrix::identity(3, 3));
    }

    #[test]
    fn projector_quadratic_sum_is_identity() {
        let set = build_projector_set(2).unwrap();
        assert_eq!(set.sum_ldag_l(), &DMatrix::identity(2, 2));
    }

    #[test]
    fn projector_set_rejects_dim_one() {
        assert!(matches!(
            build_projector_set(1),
            Err(Error::ProjectorDimTooSmall(1))
        ));
    }

    #[test]
    fn expectation_of_identity_is_one() {
        let rho = DensityMatrix::from_diagonal(&[0.25, 0.75]).unwrap();
        let e = expectation(&Operator::identity(2), &rho).unwrap();
        assert_abs_diff_eq!(e.re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn expectation_contracts_diagonals() {
        let rho = DensityMatrix::from_diagonal(&[0.3, 0.7]).unwrap();
        let op = Operator::from_real_diagonal(&[0.0, 1.0]);
        let e = expectation(&op, &rho).unwrap();
        assert_abs_diff_eq!(e.re, 0.7, epsilon = 1e-15);
    }

    #[test]
    fn expectation_on_plus_state_is_half() {
        let rho = plus_state().to_density();
        let op = Operator::from_real_diagonal(&[0.0, 1.0]);
        let e = expectation(&op, &rho).unwrap();
        assert_abs_diff_eq!(e.re, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn expectation_rejects_dimension_mismatch() {
        let rho = DensityMatrix::from_diagonal(&[0.5, 0.5]).unwrap();
        let op = Operator::identity(3);
        assert!(matches!(
            expectation(&op, &rho),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn quadratic_sum_is_hermitian_psd() {
        // A non-Hermitian coupling operator still yields Hermitian PSD K.
        let l = Operator::new(DMatrix::from_row_slice(
            2,
            2,
            &[
                C64::new(0.0, 0.0),
                C64::new(1.0, 0.5),
                C64::new(0.0, 0.0),
                C64::new(0.0, 0.0),
            ],
        ))
        .unwrap();
        let set = LindbladSet::new(vec![l]).unwrap();
        let k = set.sum_ldag_l();
        assert!(hermiticity_deviation(k) < 1e-14);
        assert!(min_eigenvalue(k) > -1e-14);
    }

    #[test]
    fn density_validation_rejects_bad_trace() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![
            C64::new(0.6, 0.0),
            C64::new(0.6, 0.0),
        ]));
        assert!(matches!(DensityMatrix::new(m), Err(Error::BadTrace { .. })));
    }

    #[test]
    fn density_validation_rejects_negative_eigenvalue() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![
            C64::new(1.1, 0.0),
            C64::new(-0.1, 0.0),
        ]));
        assert!(matches!(
            DensityMatrix::new(m),
            Err(Error::PsdViolation { .. })
        ));
    }

    #[test]
    fn pure_state_extraction_round_trips() {
        let psi = plus_state();
        let rho = psi.to_density();
        let back = rho.to_pure_state().unwrap();
        // Defined up to a global phase; compare projectors.
        assert!(frobenius_distance(back.to_density().matrix(), rho.matrix()) < 1e-10);
    }

    #[test]
    fn mixed_state_is_not_pure() {
        let rho = DensityMatrix::from_diagonal(&[0.3, 0.7]).unwrap();
        assert!(matches!(rho.to_pure_state(), Err(Error::NotPure { .. })));
    }

    #[test]
    fn unnormalized_state_enforces_trace_identity() {
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![
            C64::new(0.2, 0.0),
            C64::new(0.2, 0.0),
        ]));
        assert!(UnnormalizedState::new(r.clone(), 0.4).is_ok());
        assert!(matches!(
            UnnormalizedState::new(r, 0.5),
            Err(Error::BadTrace { .. })
        ));
    }

    #[test]
    fn operator_json_round_trip_is_exact() {
        let op = Operator::new(DMatrix::from_row_slice(
            2,
            2,
            &[
                C64::new(0.1, -0.7),
                C64::new(1.0 / 3.0, 2.0),
                C64::new(-5.5, 1e-17),
                C64::new(0.0, 0.0),
            ],
        ))
        .unwrap();
        let text = serde_json::to_string(&op).unwrap();
        let back: Operator = serde_json::from_str(&text).unwrap();
        assert_eq!(op, back);
    }
}
