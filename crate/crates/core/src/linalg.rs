//! Metric-space primitives.
//!
//! A [`Metric`] is a symmetric positive (semi)definite operator `C` together with
//! its eigendecomposition. Every spectral operation in the crate (square roots,
//! inverse square roots, pseudoinverses) goes through that single cached
//! factorization, so symmetry is preserved exactly and rank decisions are made
//! in one place.

use nalgebra::SymmetricEigen;

use crate::error::{shape, Error, Result};
use crate::{Mat, Vector};

/// Relative eigenvalue cutoff below which an eigenvalue is treated as an exact zero.
pub const RANK_TOL: f64 = 1e-10;
/// Maximum admissible asymmetry, relative to the largest entry.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Maximum admissible kernel component of a vector fed to a singular metric,
/// relative to the vector's Euclidean norm.
pub const RANGE_TOL: f64 = 1e-8;
/// Maximum relative Frobenius error of `V diag(λ) Vᵀ` against the input matrix.
pub const RECONSTRUCTION_TOL: f64 = 1e-10;

/// Symmetric positive semidefinite operator defining `⟨x, y⟩_C = xᵀCy`.
///
/// Eigenvalues are stored in descending order; eigenvalues below
/// `rank_tol · λ_max` are set to zero and their eigenvectors span the declared
/// kernel.
#[derive(Debug, Clone)]
pub struct Metric {
    matrix: Mat,
    eigenvalues: Vector,
    eigenvectors: Mat,
    rank: usize,
    rank_tol: f64,
    sqrt: Mat,
}

impl Metric {
    pub fn new(matrix: Mat) -> Result<Self> {
        Self::with_rank_tol(matrix, RANK_TOL)
    }

    pub fn with_rank_tol(matrix: Mat, rank_tol: f64) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::DimensionMismatch {
                expected: "non-empty square matrix".into(),
                found: shape(matrix.nrows(), matrix.ncols()),
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("metric matrix has non-finite entries".into()));
        }
        let scale = matrix.amax();
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric(asym));
        }
        let sym = symmetrize(&matrix);
        let eig = SymmetricEigen::new(sym.clone());
        let (values, vectors) = sorted_descending(eig.eigenvalues, eig.eigenvectors);

        let lambda_max = values[0].max(0.0);
        let cutoff = rank_tol * lambda_max;
        let mut kept = values.clone();
        for v in kept.iter_mut() {
            if *v < -cutoff {
                return Err(Error::NotPositiveSemidefinite(*v));
            }
            if *v <= cutoff {
                *v = 0.0;
            }
        }
        let rank = kept.iter().filter(|v| **v > 0.0).count();

        let rebuilt = spectral(&vectors, &kept, |l| l);
        let norm = sym.norm();
        if norm > 0.0 {
            let err = (&rebuilt - &sym).norm() / norm;
            if err > RECONSTRUCTION_TOL {
                return Err(Error::ReconstructionFailed(err));
            }
        }
        let sqrt = spectral(&vectors, &kept, f64::sqrt);
        Ok(Self {
            matrix: sym,
            eigenvalues: kept,
            eigenvectors: vectors,
            rank,
            rank_tol,
            sqrt,
        })
    }

    /// Builds a metric from a known orthonormal eigenbasis and nonnegative spectrum.
    fn from_spectrum(values: Vector, vectors: Mat, rank_tol: f64) -> Self {
        let (values, vectors) = sorted_descending(values, vectors);
        let rank = values.iter().filter(|v| **v > 0.0).count();
        let matrix = symmetrize(&spectral(&vectors, &values, |l| l));
        let sqrt = spectral(&vectors, &values, f64::sqrt);
        Self {
            matrix,
            eigenvalues: values,
            eigenvectors: vectors,
            rank,
            rank_tol,
            sqrt,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_spectrum(
            Vector::from_element(dim, 1.0),
            Mat::identity(dim, dim),
            RANK_TOL,
        )
    }

    /// Orthogonal projection `H = I − 𝟙𝟙ᵀ/n` onto the complement of the constant vector.
    pub fn centering(dim: usize) -> Self {
        Self::new(centering_matrix(dim)).expect("centering projection is PSD")
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    pub fn eigenvalues(&self) -> &Vector {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &Mat {
        &self.eigenvectors
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn rank_tol(&self) -> f64 {
        self.rank_tol
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.dim()
    }

    /// `C^{1/2}`, computed once at construction.
    pub fn sqrt_matrix(&self) -> &Mat {
        &self.sqrt
    }

    /// Orthonormal basis of the declared kernel (possibly with zero columns).
    pub fn kernel_basis(&self) -> Mat {
        self.eigenvectors
            .columns(self.rank, self.dim() - self.rank)
            .into_owned()
    }

    /// Euclidean norm of the kernel component of `x` divided by `‖x‖`.
    pub fn kernel_fraction(&self, x: &Vector) -> f64 {
        if self.is_full_rank() {
            return 0.0;
        }
        let norm = x.norm();
        if norm == 0.0 {
            return 0.0;
        }
        (self.kernel_basis().transpose() * x).norm() / norm
    }

    pub fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("vector of length {}", self.dim()),
                found: format!("length {len}"),
            });
        }
        Ok(())
    }

    /// Fails with [`Error::OutsideMetricRange`] when `x` has a kernel component
    /// larger than [`RANGE_TOL`].
    pub fn check_range(&self, x: &Vector) -> Result<()> {
        self.check_dim(x.len())?;
        let frac = self.kernel_fraction(x);
        if frac > RANGE_TOL {
            return Err(Error::OutsideMetricRange(frac));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        &self.matrix * x
    }

    pub fn inner(&self, x: &Vector, y: &Vector) -> Result<f64> {
        self.check_range(x)?;
        self.check_range(y)?;
        Ok(x.dot(&(&self.matrix * y)))
    }

    pub fn norm_sq(&self, x: &Vector) -> Result<f64> {
        self.check_range(x)?;
        Ok((&self.sqrt * x).norm_squared())
    }

    /// Gram matrix `AᵀCA`.
    pub fn gram(&self, a: &Mat) -> Mat {
        symmetrize(&(a.transpose() * &self.matrix * a))
    }

    /// Spectral power `C^p` on the retained eigenvalues. With `pseudo`, negative
    /// powers act on the range only and the kernel is preserved.
    pub fn power(&self, exponent: f64, pseudo: bool) -> Result<Metric> {
        if !exponent.is_finite() {
            return Err(Error::Domain(format!("exponent {exponent}")));
        }
        if exponent < 0.0 && !pseudo && !self.is_full_rank() {
            return Err(Error::SingularMetric);
        }
        let values = self
            .eigenvalues
            .map(|l| if l > 0.0 { l.powf(exponent) } else { 0.0 });
        Ok(Self::from_spectrum(
            values,
            self.eigenvectors.clone(),
            self.rank_tol,
        ))
    }

    pub fn inverse(&self) -> Result<Metric> {
        self.power(-1.0, false)
    }

    pub fn pseudo_inverse(&self) -> Metric {
        self.power(-1.0, true).expect("pseudoinverse is always defined")
    }

    pub fn scaled(&self, factor: f64) -> Result<Metric> {
        if !(factor > 0.0) {
            return Err(Error::Domain(format!("metric scale {factor} must be positive")));
        }
        Ok(Self::from_spectrum(
            self.eigenvalues.map(|l| l * factor),
            self.eigenvectors.clone(),
            self.rank_tol,
        ))
    }
}

/// `xᵀCy`.
pub fn metric_inner(c: &Metric, x: &Vector, y: &Vector) -> Result<f64> {
    c.inner(x, y)
}

/// `‖x‖²_C = xᵀCx`.
pub fn metric_norm_sq(c: &Metric, x: &Vector) -> Result<f64> {
    c.norm_sq(x)
}

/// `C^p` on the retained spectrum; see [`Metric::power`].
pub fn psd_power(c: &Metric, exponent: f64, pseudo: bool) -> Result<Metric> {
    c.power(exponent, pseudo)
}

/// Rank-one modification `(B + scale·uuᵀ)⁻¹` expressed through `B⁻¹`.
#[derive(Debug, Clone)]
pub struct RankOneUpdate {
    pub base_inverse: Mat,
    pub vector: Vector,
    pub scale: f64,
}

impl RankOneUpdate {
    pub fn new(base_inverse: Mat, vector: Vector, scale: f64) -> Result<Self> {
        if !base_inverse.is_square() || base_inverse.nrows() != vector.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("square matrix of size {}", vector.len()),
                found: shape(base_inverse.nrows(), base_inverse.ncols()),
            });
        }
        Ok(Self {
            base_inverse,
            vector,
            scale,
        })
    }

    pub fn denominator(&self) -> f64 {
        1.0 + self.scale * self.vector.dot(&(&self.base_inverse * &self.vector))
    }

    /// Sherman-Morrison: `B⁻¹ − s·(B⁻¹u)(B⁻¹u)ᵀ / (1 + s·uᵀB⁻¹u)`.
    ///
    /// Uses `B⁻¹u` on both sides, so the base inverse is assumed symmetric.
    pub fn apply(&self) -> Result<Mat> {
        let denom = self.denominator();
        if denom.abs() <= 1e-12 {
            return Err(Error::UpdateSingular(denom));
        }
        let bu = &self.base_inverse * &self.vector;
        Ok(&self.base_inverse - (&bu * bu.transpose()) * (self.scale / denom))
    }
}

pub fn sherman_morrison_inverse(update: &RankOneUpdate) -> Result<Mat> {
    update.apply()
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn centering_matrix(dim: usize) -> Mat {
    Mat::identity(dim, dim) - Mat::from_element(dim, dim, 1.0 / dim as f64)
}

/// `‖a − b‖_F / ‖b‖_F`, or the absolute error when `b` is zero.
pub fn rel_frobenius(a: &Mat, b: &Mat) -> f64 {
    let diff = (a - b).norm();
    let base = b.norm();
    if base > 0.0 {
        diff / base
    } else {
        diff
    }
}

/// Singular values sorted in descending order.
pub fn singular_values(a: &Mat) -> Vec<f64> {
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Full column rank with a relative singular-value cutoff of [`RANK_TOL`].
pub fn has_full_column_rank(a: &Mat) -> bool {
    if a.ncols() == 0 || a.ncols() > a.nrows() {
        return false;
    }
    let s = singular_values(a);
    s[0] > 0.0 && s[s.len() - 1] > RANK_TOL * s[0]
}

/// Thin SVD `A = U S Vᵀ` with singular values sorted in descending order.
pub fn thin_svd(a: &Mat) -> (Mat, Vector, Mat) {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = Vector::from_iterator(order.len(), order.iter().map(|&i| svd.singular_values[i]));
    let u = Mat::from_columns(&order.iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    let v = Mat::from_columns(
        &order
            .iter()
            .map(|&i| vt.row(i).transpose())
            .collect::<Vec<_>>(),
    );
    (u, s, v)
}

/// Orthonormal basis of `Ker(Aᵀ)`, the orthogonal complement of `range(A)`.
pub fn left_null_space(a: &Mat) -> Mat {
    let n = a.nrows();
    let full = a.clone().svd(true, false);
    // Complete U to an orthonormal basis of ℝⁿ via the eigenvectors of I − UUᵀ.
    let u = full.u.expect("requested U");
    let rank = full
        .singular_values
        .iter()
        .filter(|s| **s > RANK_TOL * full.singular_values.amax())
        .count();
    let proj = Mat::identity(n, n) - &u * u.transpose();
    let eig = SymmetricEigen::new(symmetrize(&proj));
    let (_, vectors) = sorted_descending(eig.eigenvalues, eig.eigenvectors);
    vectors.columns(0, n - rank).into_owned()
}

fn sorted_descending(values: Vector, vectors: Mat) -> (Vector, Mat) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    let sorted_values = Vector::from_iterator(order.len(), order.iter().map(|&i| values[i]));
    let sorted_vectors =
        Mat::from_columns(&order.iter().map(|&i| vectors.column(i)).collect::<Vec<_>>());
    (sorted_values, sorted_vectors)
}

fn spectral(vectors: &Mat, values: &Vector, f: impl Fn(f64) -> f64) -> Mat {
    let mut scaled = vectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        let l = values[j];
        col *= if l > 0.0 { f(l) } else { 0.0 };
    }
    scaled * vectors.transpose()
}
