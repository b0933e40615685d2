//! Symmetric matrices and calculus over the lower-triangular parametrisation.
//!
//! A symmetric `d x d` matrix has `d(d+1)/2` free coordinates, one per
//! unordered pair `{i, j}`. [`HalfVec`] stores them in row-major
//! lower-triangular order `{0,0}, {1,0}, {1,1}, {2,0}, ...`. Derivatives
//! "with respect to `Σ_ij`" always move `Σ_ij` and `Σ_ji` together.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Relative asymmetry tolerated by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Condition number above which inverting logs a warning.
pub const ILL_CONDITIONED: f64 = 1e12;

/// Dense real symmetric matrix. Entries are stored exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    m: DMatrix<f64>,
}

impl SymMatrix {
    /// Validates squareness, finiteness and approximate symmetry
    /// (`‖A−Aᵀ‖_F ≤ 1e-8·‖A‖_F`), then stores `(A+Aᵀ)/2`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = m.shape();
        if rows != cols {
            return Err(Error::NotSquare { rows, cols });
        }
        if rows == 0 {
            return Err(Error::EmptyDimension);
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        let asym = (&m - m.transpose()).norm();
        let scale = m.norm();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric(asym / scale));
        }
        Ok(Self::symmetrized(m))
    }

    /// Symmetrises without validation. For results of operations that are
    /// symmetric in exact arithmetic.
    pub(crate) fn symmetrized(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        Self { m: (m + t) * 0.5 }
    }

    /// `d x d` matrix from `d²` row-major entries.
    pub fn from_row_slice(d: usize, data: &[f64]) -> Result<Self> {
        if data.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                got: data.len(),
            });
        }
        Self::new(DMatrix::from_row_slice(d, d, data))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        let mut flat = Vec::with_capacity(d * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::NotSquare { rows: d, cols: r.len() });
            }
            flat.extend_from_slice(r);
        }
        Self::from_row_slice(d, &flat)
    }

    pub fn identity(d: usize) -> Self {
        Self {
            m: DMatrix::identity(d, d),
        }
    }

    pub fn scaled_identity(d: usize, c: f64) -> Self {
        Self {
            m: DMatrix::identity(d, d) * c,
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            m: DMatrix::zeros(d, d),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self {
            m: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    /// Frobenius inner product `⟨A, B⟩_F = Tr(AᵀB)`.
    pub fn frobenius_dot(&self, other: &SymMatrix) -> f64 {
        self.m.dot(&other.m)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.m.norm()
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        Self { m: &self.m * c }
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        Self { m: &self.m + &other.m }
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        Self { m: &self.m - &other.m }
    }

    /// Eigendecomposition with eigenvalues sorted ascending.
    pub fn eigen(&self) -> Result<SymEigen> {
        if self.m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        let e = SymmetricEigen::new(self.m.clone());
        let d = self.dim();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
        let values = order.iter().map(|&k| e.eigenvalues[k]).collect();
        let vectors = DMatrix::from_fn(d, d, |r, c| e.eigenvectors[(r, order[c])]);
        Ok(SymEigen { values, vectors })
    }

    /// Eigenvalues only, ascending.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        if self.m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        let mut v: Vec<f64> = self.m.symmetric_eigenvalues().iter().copied().collect();
        v.sort_by(f64::total_cmp);
        Ok(v)
    }

    pub fn lambda_min(&self) -> Result<f64> {
        Ok(self.eigenvalues()?[0])
    }

    pub fn lambda_max(&self) -> Result<f64> {
        Ok(*self.eigenvalues()?.last().expect("dim >= 1"))
    }

    pub fn is_positive_definite(&self) -> bool {
        self.m.clone().cholesky().is_some()
    }

    /// Lower Cholesky factor `L` with `A = LLᵀ`.
    pub fn cholesky_lower(&self) -> Result<DMatrix<f64>> {
        self.m
            .clone()
            .cholesky()
            .map(|c| c.l())
            .ok_or(Error::NotPositiveDefinite)
    }

    /// Inverse of a positive definite matrix via a Cholesky solve.
    pub fn inverse_pd(&self) -> Result<SymMatrix> {
        let chol = self.m.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
        let inv = chol.inverse();
        if log::log_enabled!(log::Level::Warn) {
            if let Ok(ev) = self.eigenvalues() {
                let cond = ev[ev.len() - 1] / ev[0];
                if cond > ILL_CONDITIONED {
                    log::warn!("inverting a matrix with condition number {cond:.3e}");
                }
            }
        }
        Ok(Self::symmetrized(inv))
    }

    /// Natural log of the determinant of a positive definite matrix.
    pub fn ln_det_pd(&self) -> Result<f64> {
        let l = self.cholesky_lower()?;
        Ok(2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>())
    }

    /// `A^{-1/2}` of a positive definite matrix via the eigendecomposition.
    pub fn inv_sqrt(&self) -> Result<SymMatrix> {
        let e = self.eigen()?;
        if e.values[0] <= 0.0 {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(e.rebuild(|l| 1.0 / l.sqrt()))
    }

    /// `A` with `A_ij` and `A_ji` (or `A_ii`) shifted by `t`.
    pub fn perturbed(&self, i: usize, j: usize, t: f64) -> SymMatrix {
        let mut m = self.m.clone();
        m[(i, j)] += t;
        if i != j {
            m[(j, i)] += t;
        }
        Self { m }
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns, in the order of `values`.
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    /// `Q f(Λ) Qᵀ`.
    pub fn rebuild(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let mapped: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let lam = DMatrix::from_diagonal(&DVector::from_vec(mapped));
        SymMatrix::symmetrized(&self.vectors * lam * self.vectors.transpose())
    }
}

/// Number of free coordinates of a `d x d` symmetric matrix.
pub fn half_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Position of the unordered pair `{i, j}` in row-major lower-triangular order.
pub fn pair_index(i: usize, j: usize) -> usize {
    let (r, c) = if i >= j { (i, j) } else { (j, i) };
    r * (r + 1) / 2 + c
}

/// Iterator over `(i, j)` with `i >= j` in [`HalfVec`] order.
pub fn lower_pairs(d: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..d).flat_map(|i| (0..=i).map(move |j| (i, j)))
}

/// Vector indexed by the unordered pairs `{i, j}`, `i >= j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfVec {
    dim: usize,
    values: Vec<f64>,
}

impl HalfVec {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyDimension);
        }
        if values.len() != half_len(dim) {
            return Err(Error::DimensionMismatch {
                expected: half_len(dim),
                got: values.len(),
            });
        }
        Ok(Self { dim, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[pair_index(i, j)]
    }

    pub fn dot(&self, other: &HalfVec) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// Half-vectorisation: the lower-triangular entries of `a`.
pub fn vech(a: &SymMatrix) -> HalfVec {
    let d = a.dim();
    HalfVec {
        dim: d,
        values: lower_pairs(d).map(|(i, j)| a.get(i, j)).collect(),
    }
}

/// Inverse of [`vech`].
pub fn unvech(v: &HalfVec) -> SymMatrix {
    let d = v.dim;
    let m = DMatrix::from_fn(d, d, |i, j| v.get(i, j));
    SymMatrix { m }
}

/// The 0/1 matrix `D` with `D · vech(A) = vec(A)` for symmetric `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct DuplicationMatrix {
    dim: usize,
    matrix: DMatrix<f64>,
}

impl DuplicationMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `d² x d(d+1)/2`. Rows follow column-major `vec` order: row
    /// `r + d·s` holds the ordered pair `(r, s)`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `D · v` as a column-major `d²` vector.
    pub fn apply(&self, v: &HalfVec) -> DVector<f64> {
        &self.matrix * DVector::from_column_slice(v.values())
    }
}

pub fn duplication_matrix(d: usize) -> Result<DuplicationMatrix> {
    if d == 0 {
        return Err(Error::EmptyDimension);
    }
    let mut m = DMatrix::zeros(d * d, half_len(d));
    for s in 0..d {
        for r in 0..d {
            m[(r + d * s, pair_index(r, s))] = 1.0;
        }
    }
    Ok(DuplicationMatrix { dim: d, matrix: m })
}

/// Column-major `vec(A)`.
pub fn vec(a: &SymMatrix) -> DVector<f64> {
    DVector::from_column_slice(a.m.as_slice())
}

/// Symmetric gradient `(∇F + ∇Fᵀ)/2` from the unconstrained gradient.
pub fn sym_gradient(full_grad: &DMatrix<f64>) -> Result<SymMatrix> {
    let (rows, cols) = full_grad.shape();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if rows == 0 {
        return Err(Error::EmptyDimension);
    }
    if full_grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(SymMatrix::symmetrized(full_grad.clone()))
}

/// Gradient of `f(vech(A)) = F(A)` from the symmetric gradient `S` of `F`.
///
/// Moving the coordinate `{i, j}` moves both `A_ij` and `A_ji`, so the entry
/// is `S_ii` on the diagonal and `2·S_ij` off it. This is the scaling under
/// which `⟨B, S⟩_F = ⟨vech(B), result⟩` for every symmetric `B`.
pub fn halfvec_grad_from_sym_grad(s: &SymMatrix) -> HalfVec {
    let d = s.dim();
    HalfVec {
        dim: d,
        values: lower_pairs(d)
            .map(|(i, j)| if i == j { s.get(i, j) } else { 2.0 * s.get(i, j) })
            .collect(),
    }
}

/// `{A : lower·I ⪯ A ⪯ upper·I}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WellConditionedSet {
    pub lower: f64,
    pub upper: f64,
}

/// Relative eigenvalue slack used by [`WellConditionedSet::contains`].
pub const MEMBERSHIP_TOL: f64 = 1e-12;

impl Default for WellConditionedSet {
    fn default() -> Self {
        Self {
            lower: 0.09,
            upper: 10.0,
        }
    }
}

impl WellConditionedSet {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower > 0.0 && lower < upper && upper.is_finite()) {
            return Err(Error::param(
                "well_conditioned",
                format!("need 0 < lower < upper, got [{lower}, {upper}]"),
            ));
        }
        Ok(Self { lower, upper })
    }

    /// Membership up to eigen-solver round-off ([`MEMBERSHIP_TOL`]), so that
    /// projected matrices always test as members.
    pub fn contains(&self, a: &SymMatrix) -> Result<bool> {
        Ok(self.contains_spectrum(a.eigenvalues()?.as_slice()))
    }

    /// Whether a sorted spectrum lies inside the set.
    pub fn contains_spectrum(&self, ascending: &[f64]) -> bool {
        let tol = MEMBERSHIP_TOL * self.upper;
        ascending[0] >= self.lower - tol && ascending[ascending.len() - 1] <= self.upper + tol
    }
}

/// Frobenius projection onto `W`: clamp every eigenvalue into `[lower, upper]`.
pub fn project_well_conditioned(a: &SymMatrix, w: &WellConditionedSet) -> Result<SymMatrix> {
    let e = a.eigen()?;
    Ok(e.rebuild(|l| l.clamp(w.lower, w.upper)))
}

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `Σ_{i≥j} ∂g(Σ)_ij/∂Σ_ij` by central differences, moving `Σ_ij` and `Σ_ji`
/// together.
pub fn fd_divergence<G>(g: G, sigma: &SymMatrix, h: f64) -> Result<f64>
where
    G: Fn(&SymMatrix) -> Result<SymMatrix>,
{
    check_step(sigma, h)?;
    let mut div = 0.0;
    for (i, j) in lower_pairs(sigma.dim()) {
        let plus = g(&sigma.perturbed(i, j, h))?;
        let minus = g(&sigma.perturbed(i, j, -h))?;
        div += (plus.get(i, j) - minus.get(i, j)) / (2.0 * h);
    }
    Ok(div)
}

/// Central-difference gradient of `f` over the `vech` coordinates of `Σ`.
pub fn fd_halfvec_gradient<F>(f: F, sigma: &SymMatrix, h: f64) -> Result<HalfVec>
where
    F: Fn(&SymMatrix) -> Result<f64>,
{
    check_step(sigma, h)?;
    let mut values = Vec::with_capacity(half_len(sigma.dim()));
    for (i, j) in lower_pairs(sigma.dim()) {
        let plus = f(&sigma.perturbed(i, j, h))?;
        let minus = f(&sigma.perturbed(i, j, -h))?;
        values.push((plus - minus) / (2.0 * h));
    }
    HalfVec::new(sigma.dim(), values)
}

/// An off-diagonal shift by `h` has spectral norm `h`, so `λ_min > 2h`
/// keeps every node positive definite.
fn check_step(sigma: &SymMatrix, h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::param("h", format!("step must be positive, got {h}")));
    }
    if sigma.lambda_min()? <= 2.0 * h {
        return Err(Error::StepTooLarge { h });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sym_from(d: usize, raw: &[f64]) -> SymMatrix {
        let m = DMatrix::from_fn(d, d, |i, j| raw[i.max(j) * d + i.min(j)]);
        SymMatrix::new(m).unwrap()
    }

    #[test]
    fn vech_examples() {
        let a = SymMatrix::from_row_slice(2, &[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert_eq!(vech(&a).values(), &[1.0, 2.0, 3.0]);
        let a = SymMatrix::from_row_slice(1, &[5.0]).unwrap();
        assert_eq!(vech(&a).values(), &[5.0]);
        assert_eq!(vech(&SymMatrix::identity(3)).values(), &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn constructor_rejects_bad_shapes() {
        assert!(matches!(
            SymMatrix::from_row_slice(2, &[1.0, 2.0, 3.0]),
            Err(Error::DimensionMismatch { expected: 4, got: 3 })
        ));
        assert!(matches!(
            SymMatrix::new(DMatrix::zeros(2, 3)),
            Err(Error::NotSquare { .. })
        ));
        assert!(matches!(
            SymMatrix::from_row_slice(2, &[1.0, 2.0, 0.0, 1.0]),
            Err(Error::NotSymmetric(_))
        ));
        assert!(matches!(
            SymMatrix::from_row_slice(1, &[f64::NAN]),
            Err(Error::NonFinite)
        ));
        assert!(HalfVec::new(3, vec![0.0; 5]).is_err());
    }

    #[test]
    fn tiny_asymmetry_is_averaged_away() {
        let a = SymMatrix::from_row_slice(2, &[1.0, 2.0, 2.0 + 1e-12, 3.0]).unwrap();
        assert_eq!(a.get(0, 1), a.get(1, 0));
    }

    #[test]
    fn duplication_matrix_d1_and_d2() {
        let d1 = duplication_matrix(1).unwrap();
        assert_eq!(d1.matrix(), &DMatrix::from_element(1, 1, 1.0));

        // rows (1,1), (2,1), (1,2), (2,2); columns {1,1}, {2,1}, {2,2}
        let d2 = duplication_matrix(2).unwrap();
        let expected = DMatrix::from_row_slice(
            4,
            3,
            &[
                1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, //
                0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0,
            ],
        );
        assert_eq!(d2.matrix(), &expected);
        let dtd = d2.matrix().transpose() * d2.matrix();
        assert_eq!(dtd, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 1.0])));
        assert!(duplication_matrix(0).is_err());
    }

    #[test]
    fn duplication_gram_is_one_or_two() {
        for d in 1..=6 {
            let dm = duplication_matrix(d).unwrap();
            let dtd = dm.matrix().transpose() * dm.matrix();
            for (i, j) in lower_pairs(d) {
                let k = pair_index(i, j);
                let expected = if i == j { 1.0 } else { 2.0 };
                assert_eq!(dtd[(k, k)], expected);
            }
            assert_eq!(dtd.sum(), (d * d) as f64);
            for row in dm.matrix().row_iter() {
                assert_eq!(row.sum(), 1.0);
            }
        }
    }

    #[test]
    fn sym_gradient_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(sym_gradient(&i2).unwrap().as_matrix(), &i2);
        let g = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(
            sym_gradient(&g).unwrap().as_matrix(),
            &DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0])
        );
        assert!(sym_gradient(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn halfvec_grad_examples() {
        assert_eq!(
            halfvec_grad_from_sym_grad(&SymMatrix::identity(2)).values(),
            &[1.0, 0.0, 1.0]
        );
        assert_eq!(halfvec_grad_from_sym_grad(&SymMatrix::zeros(3)).values(), &[0.0; 6]);
        let s = SymMatrix::from_row_slice(2, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let v = halfvec_grad_from_sym_grad(&s);
        assert_eq!(v.values(), &[0.0, 2.0, 0.0]);
        assert_eq!(s.frobenius_dot(&s), vech(&s).dot(&v));
    }

    #[test]
    fn halfvec_grad_matches_fd_of_linear_functional() {
        // F(A) = ⟨C, A⟩ has symmetric gradient C.
        let c = SymMatrix::from_row_slice(3, &[1.0, 0.5, -2.0, 0.5, 3.0, 0.25, -2.0, 0.25, -1.0]).unwrap();
        let at = SymMatrix::identity(3);
        let fd = fd_halfvec_gradient(|a| Ok(c.frobenius_dot(a)), &at, 1e-5).unwrap();
        let closed = halfvec_grad_from_sym_grad(&c);
        for (a, b) in fd.values().iter().zip(closed.values()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn projection_examples() {
        let w = WellConditionedSet::default();
        let p = project_well_conditioned(&SymMatrix::from_diagonal(&[0.01, 5.0]), &w).unwrap();
        assert!((p.as_matrix() - DMatrix::from_diagonal(&DVector::from_vec(vec![0.09, 5.0]))).norm() < 1e-14);
        let p = project_well_conditioned(&SymMatrix::from_diagonal(&[20.0, 1.0]), &w).unwrap();
        assert!((p.as_matrix() - DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 1.0]))).norm() < 1e-14);
        let inside = SymMatrix::from_row_slice(2, &[2.0, 0.5, 0.5, 1.0]).unwrap();
        let p = project_well_conditioned(&inside, &w).unwrap();
        assert!((p.as_matrix() - inside.as_matrix()).norm() < 1e-12);
        assert!(project_well_conditioned(&SymMatrix::zeros(1).scale(f64::NAN), &w).is_err());
    }

    #[test]
    fn well_conditioned_set_validation() {
        assert!(WellConditionedSet::new(0.0, 1.0).is_err());
        assert!(WellConditionedSet::new(2.0, 1.0).is_err());
        let w = WellConditionedSet::new(0.5, 2.0).unwrap();
        assert!(w.contains(&SymMatrix::identity(3)).unwrap());
        assert!(!w.contains(&SymMatrix::from_diagonal(&[0.4, 1.0])).unwrap());
    }

    #[test]
    fn fd_divergence_examples() {
        for d in 1..=8 {
            let s = SymMatrix::identity(d).scale(1.5);
            let div = fd_divergence(|x| Ok(x.clone()), &s, FD_STEP).unwrap();
            assert!((div - half_len(d) as f64).abs() < 1e-8, "d={d}: {div}");
        }
        let c = SymMatrix::identity(3);
        let div = fd_divergence(|_| Ok(c.clone()), &SymMatrix::identity(3), FD_STEP).unwrap();
        assert_eq!(div, 0.0);
        // d/dt t² at t = 2
        let s = SymMatrix::from_row_slice(1, &[2.0]).unwrap();
        let div = fd_divergence(
            |x| Ok(SymMatrix::symmetrized(x.as_matrix() * x.as_matrix())),
            &s,
            FD_STEP,
        )
        .unwrap();
        assert!((div - 4.0).abs() < 1e-8);
    }

    #[test]
    fn fd_divergence_of_square_is_d_plus_one_trace() {
        let s = sym_from(3, &[2.0, 0.0, 0.0, 0.3, 1.5, 0.0, -0.2, 0.1, 1.0]);
        let div = fd_divergence(
            |x| Ok(SymMatrix::symmetrized(x.as_matrix() * x.as_matrix())),
            &s,
            FD_STEP,
        )
        .unwrap();
        assert!((div - 4.0 * s.trace()).abs() < 1e-7, "{div}");
    }

    #[test]
    fn fd_step_too_large() {
        let s = SymMatrix::identity(2).scale(1e-5);
        assert!(matches!(
            fd_divergence(|x| Ok(x.clone()), &s, 1e-5),
            Err(Error::StepTooLarge { .. })
        ));
        assert!(fd_divergence(|x| Ok(x.clone()), &SymMatrix::identity(2), -1.0).is_err());
    }

    fn arb_sym(max_d: usize) -> impl Strategy<Value = SymMatrix> {
        (1..=max_d)
            .prop_flat_map(|d| prop::collection::vec(-10.0f64..10.0, d * d).prop_map(move |raw| sym_from(d, &raw)))
    }

    fn arb_sym_pair() -> impl Strategy<Value = (SymMatrix, SymMatrix)> {
        (1usize..=6).prop_flat_map(|d| {
            (
                prop::collection::vec(-10.0f64..10.0, d * d),
                prop::collection::vec(-10.0f64..10.0, d * d),
            )
                .prop_map(move |(a, b)| (sym_from(d, &a), sym_from(d, &b)))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn vech_unvech_roundtrip(a in arb_sym(6)) {
            prop_assert_eq!(unvech(&vech(&a)), a.clone());
            let v = vech(&a);
            prop_assert_eq!(vech(&unvech(&v)), v);
        }

        #[test]
        fn duplication_reproduces_vec(a in arb_sym(6)) {
            let dm = duplication_matrix(a.dim()).unwrap();
            prop_assert_eq!(dm.apply(&vech(&a)), vec(&a));
        }

        #[test]
        fn pairing_identity(
            d in 1usize..=6,
            raw_b in prop::collection::vec(-10.0f64..10.0, 36),
            raw_g in prop::collection::vec(-10.0f64..10.0, 36),
        ) {
            let b = sym_from(d, &raw_b);
            let g = DMatrix::from_fn(d, d, |i, j| raw_g[i * d + j]);
            let s = sym_gradient(&g).unwrap();
            let lhs = b.frobenius_dot(&s);
            let rhs = vech(&b).dot(&halfvec_grad_from_sym_grad(&s));
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
        }

        #[test]
        fn projection_idempotent_and_nonexpansive((a, b) in arb_sym_pair()) {
            let w = WellConditionedSet::default();
            let pa = project_well_conditioned(&a, &w).unwrap();
            let pb = project_well_conditioned(&b, &w).unwrap();
            let ppa = project_well_conditioned(&pa, &w).unwrap();
            prop_assert!(pa.sub(&ppa).frobenius_norm() < 1e-10);
            prop_assert!(pa.sub(&pb).frobenius_norm() <= a.sub(&b).frobenius_norm() + 1e-10);
            let ev = pa.eigenvalues().unwrap();
            prop_assert!(ev[0] >= 0.09 - 1e-10 && ev[ev.len() - 1] <= 10.0 + 1e-10);
        }
    }
}
