//! Activation-subspace trackers and the drift metric.
//!
//! A tracker owns an orthonormal basis `U` (d×r) for one layer's input
//! activations and advances it once per training step from the batch
//! covariance. Every advance also yields the transition matrix
//! `T = U_newᵀ U_prev`, which the optimizer uses to move its moments into the
//! new coordinates and which the drift metric summarizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{fro_norm, qr_orthonormalize, sym_eig, sym_eig_topr, Matrix};

/// Orthonormality tolerance checked after every basis update in debug builds.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-8;

/// Orthonormal d×r basis plus the step at which it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    basis: Matrix,
    step: usize,
}

impl SubspaceBasis {
    /// Wraps a matrix after checking `UᵀU = I` to [`ORTHONORMAL_TOLERANCE`].
    pub fn new(basis: Matrix, step: usize) -> Result<Self> {
        if basis.rows() < basis.cols() {
            return Err(Error::InvalidDimensions(format!(
                "basis must have rank <= ambient dim, got {}x{}",
                basis.rows(),
                basis.cols()
            )));
        }
        let err = orthonormality_error(&basis);
        if err.is_nan() || err >= ORTHONORMAL_TOLERANCE {
            return Err(Error::InvalidConfig(format!("basis is not orthonormal (|UᵀU - I| = {err:e})")));
        }
        Ok(Self { basis, step })
    }

    /// The first `r` standard basis vectors of R^d.
    pub fn identity(d: usize, r: usize) -> Self {
        assert!(r >= 1 && r <= d);
        Self { basis: Matrix::identity(d).leading_columns(r), step: 0 }
    }

    fn from_trusted(basis: Matrix, step: usize) -> Self {
        debug_assert!(
            orthonormality_error(&basis) < ORTHONORMAL_TOLERANCE,
            "basis lost orthonormality: {:e}",
            orthonormality_error(&basis)
        );
        Self { basis, step }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.basis
    }

    pub fn rank(&self) -> usize {
        self.basis.cols()
    }

    pub fn dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    fn advanced(&self, step: usize) -> Self {
        Self { basis: self.basis.clone(), step }
    }
}

/// `‖UᵀU − I‖_F`.
pub fn orthonormality_error(u: &Matrix) -> f64 {
    let gram = u.t_matmul(u).expect("UᵀU shapes always agree");
    gram.sub(&Matrix::identity(u.cols())).expect("square").fro_norm()
}

/// `T = U_newᵀ U_prev`, the change of coordinates from the previous basis to the new one.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub matrix: Matrix,
    pub from_step: usize,
    pub to_step: usize,
}

impl TransitionMatrix {
    pub fn identity(r: usize, from_step: usize, to_step: usize) -> Self {
        Self { matrix: Matrix::identity(r), from_step, to_step }
    }

    pub fn between(new: &SubspaceBasis, prev: &SubspaceBasis) -> Result<Self> {
        Ok(Self {
            matrix: new.matrix().t_matmul(prev.matrix())?,
            from_step: prev.step(),
            to_step: new.step(),
        })
    }

    pub fn rank(&self) -> usize {
        self.matrix.rows()
    }

    pub fn drift(&self) -> f64 {
        drift(self, self.rank())
    }
}

/// Which norm of the covariance scales the Oja step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceNorm {
    #[default]
    Frobenius,
    /// Largest eigenvalue, estimated by a fixed number of power iterations.
    SpectralEstimate,
}

impl CovarianceNorm {
    pub fn of(self, c: &Matrix) -> f64 {
        match self {
            CovarianceNorm::Frobenius => fro_norm(c),
            CovarianceNorm::SpectralEstimate => spectral_estimate(c),
        }
    }
}

const POWER_ITERATIONS: usize = 64;

fn spectral_estimate(c: &Matrix) -> f64 {
    let d = c.rows();
    // fixed start with distinct entries so it is never orthogonal to a coordinate axis
    let mut x = Matrix::from_fn(d, 1, |i, _| 1.0 + (i as f64 + 1.0).sqrt() * 1e-3);
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let y = c.matmul(&x).expect("square covariance");
        let n = y.fro_norm();
        if n == 0.0 {
            return 0.0;
        }
        lambda = n / x.fro_norm();
        x = y.scale(1.0 / n);
    }
    lambda
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OjaConfig {
    /// Subspace learning rate γ.
    pub gamma: f64,
    /// Updates are skipped when `‖C‖ <= norm_floor`.
    pub norm_floor: f64,
    pub norm: CovarianceNorm,
}

impl Default for OjaConfig {
    fn default() -> Self {
        Self { gamma: 0.1, norm_floor: 1e-30, norm: CovarianceNorm::Frobenius }
    }
}

impl OjaConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        Self { gamma, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("oja gamma must be > 0, got {}", self.gamma)));
        }
        if self.norm_floor.is_nan() || self.norm_floor < 0.0 {
            return Err(Error::InvalidConfig(format!("norm_floor must be >= 0, got {}", self.norm_floor)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TrackerKind {
    Oja(OjaConfig),
    /// Exact PCA of the current batch every `interval` steps.
    PeriodicPca { interval: usize },
    /// Keeps the initial basis forever.
    Fixed,
}

impl TrackerKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            TrackerKind::Oja(cfg) => cfg.validate(),
            TrackerKind::PeriodicPca { interval } if *interval == 0 => {
                Err(Error::InvalidConfig("periodic PCA interval must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Advances `prev` to step `prev.step() + 1` using batch covariance `c`.
    pub fn advance(&self, prev: &SubspaceBasis, c: &Matrix) -> Result<(SubspaceBasis, TransitionMatrix)> {
        match self {
            TrackerKind::Oja(cfg) => oja_step(prev, c, cfg),
            TrackerKind::PeriodicPca { interval } => periodic_pca_step(prev, c, *interval, prev.step() + 1),
            TrackerKind::Fixed => Ok(fixed_step(prev)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrackerKind::Oja(_) => "oja",
            TrackerKind::PeriodicPca { .. } => "periodic-pca",
            TrackerKind::Fixed => "fixed",
        }
    }
}

/// `XᵀX / N`, symmetrized exactly.
pub fn covariance(x: &Matrix) -> Matrix {
    let n = x.rows() as f64;
    x.t_matmul(x).expect("XᵀX shapes always agree").scale(1.0 / n).symmetrized()
}

/// Top-`r` principal directions of the first batch, at step 0.
pub fn init_basis(x0: &Matrix, r: usize) -> Result<SubspaceBasis> {
    let d = x0.cols();
    if r == 0 || r > d {
        return Err(Error::InvalidDimensions(format!("rank {r} for ambient dimension {d}")));
    }
    if !x0.is_finite() {
        return Err(Error::NonFinite("initial activations".into()));
    }
    if x0.max_abs() == 0.0 {
        return Err(Error::ZeroActivations);
    }
    let eig = sym_eig_topr(&covariance(x0), r)?;
    Ok(SubspaceBasis::from_trusted(eig.vectors, 0))
}

fn check_covariance(prev: &SubspaceBasis, c: &Matrix) -> Result<()> {
    if c.rows() != prev.dim() || c.cols() != prev.dim() {
        return Err(Error::ShapeMismatch {
            op: "subspace step",
            left_rows: prev.dim(),
            left_cols: prev.rank(),
            right_rows: c.rows(),
            right_cols: c.cols(),
        });
    }
    if !c.is_finite() {
        return Err(Error::NonFinite("covariance".into()));
    }
    Ok(())
}

/// One normalized Oja step followed by re-orthonormalization:
/// `U ← orth(U + γ/‖C‖ · (I − UUᵀ) C U)`.
pub fn oja_step(
    prev: &SubspaceBasis,
    c: &Matrix,
    cfg: &OjaConfig,
) -> Result<(SubspaceBasis, TransitionMatrix)> {
    check_covariance(prev, c)?;
    let step = prev.step() + 1;
    let norm = cfg.norm.of(c);
    if norm <= cfg.norm_floor {
        let next = prev.advanced(step);
        return Ok((next, TransitionMatrix::identity(prev.rank(), prev.step(), step)));
    }
    let u = prev.matrix();
    let cu = c.matmul(u)?;
    // (I − UUᵀ)CU = CU − U(UᵀCU)
    let residual = cu.sub(&u.matmul(&u.t_matmul(&cu)?)?)?;
    let stepped = u.add(&residual.scale(cfg.gamma / norm))?;
    let next = SubspaceBasis::from_trusted(qr_orthonormalize(&stepped)?, step);
    let t = TransitionMatrix::between(&next, prev)?;
    Ok((next, t))
}

/// Baseline: replace the basis with the exact top-r PCA of the batch every `interval` steps.
pub fn periodic_pca_step(
    prev: &SubspaceBasis,
    c: &Matrix,
    interval: usize,
    t: usize,
) -> Result<(SubspaceBasis, TransitionMatrix)> {
    if interval == 0 {
        return Err(Error::InvalidConfig("periodic PCA interval must be >= 1".into()));
    }
    check_covariance(prev, c)?;
    if !t.is_multiple_of(interval) || fro_norm(c) <= 0.0 {
        let next = prev.advanced(t);
        return Ok((next, TransitionMatrix::identity(prev.rank(), prev.step(), t)));
    }
    let eig = sym_eig_topr(c, prev.rank())?;
    let next = SubspaceBasis::from_trusted(eig.vectors, t);
    let tm = TransitionMatrix::between(&next, prev)?;
    Ok((next, tm))
}

/// Baseline: never move.
pub fn fixed_step(prev: &SubspaceBasis) -> (SubspaceBasis, TransitionMatrix) {
    let step = prev.step() + 1;
    (prev.advanced(step), TransitionMatrix::identity(prev.rank(), prev.step(), step))
}

/// `sqrt(max(0, 1 − ‖T‖²_F / r))`, clamped to `[0, 1]`.
///
/// A deficit `1 − ‖T‖²_F / r` within a few ulps of zero is rounding noise from
/// forming `T` and is reported as zero drift; without this a pure in-span
/// rotation would read as ~1e-8.
pub fn drift(t: &TransitionMatrix, r: usize) -> f64 {
    let sq: f64 = t.matrix.as_slice().iter().map(|v| v * v).sum();
    let deficit = 1.0 - sq / r as f64;
    if deficit <= DRIFT_ROUNDOFF_ULPS * f64::EPSILON {
        return 0.0;
    }
    deficit.sqrt().min(1.0)
}

const DRIFT_ROUNDOFF_ULPS: f64 = 8.0;

/// Sines of the principal angles between `span(a)` and `span(b)`, descending.
///
/// Computed from the Gram matrix of `(I − AAᵀ)B`, which stays accurate for
/// small angles where cosines would round to one.
pub fn principal_angle_sines(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "principal angles",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    let resid = b.sub(&a.matmul(&a.t_matmul(b)?)?)?;
    let gram = resid.t_matmul(&resid)?;
    let eig = sym_eig(&gram)?;
    Ok(eig.values.iter().map(|v| v.max(0.0).sqrt().min(1.0)).collect())
}

/// Largest principal angle (radians) between `span(a)` and `span(b)`.
pub fn max_principal_angle(a: &Matrix, b: &Matrix) -> Result<f64> {
    let sines = principal_angle_sines(a, b)?;
    Ok(sines.first().copied().unwrap_or(0.0).asin())
}
