//! Projection-aware low-rank Adam and a plain Adam baseline.
//!
//! The low-rank state keeps both moments in r×m coordinates of the current
//! basis. When the basis moves, the first moment is carried over linearly by
//! the transition matrix `T`; the second moment is rebuilt from the
//! transported mean and variance terms:
//!
//! ```text
//! M_t = β₁ (T M_{t-1}) + (1 − β₁) G
//! V_t = β₂ (1 − β₂^{t-1}) |T⊙T · (V̂_{t-1} − M̂_{t-1}⊙²) + (T M̂_{t-1})⊙²| + (1 − β₂) G⊙²
//! ```
//!
//! where `M̂_{t-1}`, `V̂_{t-1}` are the bias-corrected previous moments. With
//! `T = I` this is exactly the standard Adam recursion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::subspace::{SubspaceBasis, TransitionMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.eps.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "adam hyperparameters out of range: lr={} beta1={} beta2={} eps={}",
                self.lr, self.beta1, self.beta2, self.eps
            )))
        }
    }
}

/// How the previous moments enter the second-moment transport.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentReading {
    /// Bias-corrected `M̂_{t-1}`, `V̂_{t-1}`; reduces to Adam when `T = I`.
    #[default]
    BiasCorrected,
    /// Raw `M_{t-1}`, `V_{t-1}`. Kept only so the equivalence oracle can be shown to fail.
    Raw,
}

fn bias_power(beta: f64, t: usize) -> Result<f64> {
    let exp = i32::try_from(t).map_err(|_| Error::StepOverflow)?;
    Ok(beta.powi(exp))
}

fn check_gradient(g: &Matrix, layer: &str) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradient of layer {layer}")))
    }
}

fn normalized_direction(m: &Matrix, v: &Matrix, t: usize, hyper: &AdamHyper) -> Result<Matrix> {
    let bc1 = 1.0 - bias_power(hyper.beta1, t)?;
    let bc2 = 1.0 - bias_power(hyper.beta2, t)?;
    let m_hat = m.scale(1.0 / bc1);
    let v_hat = v.scale(1.0 / bc2);
    m_hat.zip_with(&v_hat, "adam direction", |mh, vh| mh / (vh.sqrt() + hyper.eps))
}

/// First and second moments in r×m subspace coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub step: usize,
    pub reading: MomentReading,
}

impl LowRankAdamState {
    pub fn new(rank: usize, cols: usize) -> Self {
        Self { m: Matrix::zeros(rank, cols), v: Matrix::zeros(rank, cols), step: 0, reading: MomentReading::default() }
    }

    pub fn with_reading(mut self, reading: MomentReading) -> Self {
        self.reading = reading;
        self
    }

    pub fn shape(&self) -> (usize, usize) {
        self.m.shape()
    }

    /// Transports the moments by `transition`, folds in `grad` and returns the
    /// normalized direction `Ñ = M̂ ⊘ (√V̂ + ε)`. `layer` names the error on a bad gradient.
    pub fn step(
        &mut self,
        grad: &Matrix,
        transition: &TransitionMatrix,
        hyper: &AdamHyper,
        layer: &str,
    ) -> Result<Matrix> {
        let (r, m) = self.shape();
        if grad.shape() != (r, m) {
            return Err(Error::ShapeMismatch {
                op: "lowrank_adam_step gradient",
                left_rows: r,
                left_cols: m,
                right_rows: grad.rows(),
                right_cols: grad.cols(),
            });
        }
        let tm = &transition.matrix;
        if tm.shape() != (r, r) {
            return Err(Error::ShapeMismatch {
                op: "lowrank_adam_step transition",
                left_rows: r,
                left_cols: r,
                right_rows: tm.rows(),
                right_cols: tm.cols(),
            });
        }
        check_gradient(grad, layer)?;
        let t = self.step.checked_add(1).ok_or(Error::StepOverflow)?;
        let (b1, b2) = (hyper.beta1, hyper.beta2);

        let transported_mean = tm.matmul(&self.m)?;
        let m_new = transported_mean.scale(b1).add(&grad.scale(1.0 - b1))?;

        let grad_sq = grad.map(|g| g * g);
        let v_new = if t == 1 {
            // M₀ = V₀ = 0, so the transport term vanishes
            grad_sq.scale(1.0 - b2)
        } else {
            let prev_bc2 = 1.0 - bias_power(b2, t - 1)?;
            let (m_prev, v_prev) = match self.reading {
                MomentReading::BiasCorrected => {
                    let prev_bc1 = 1.0 - bias_power(b1, t - 1)?;
                    (self.m.scale(1.0 / prev_bc1), self.v.scale(1.0 / prev_bc2))
                }
                MomentReading::Raw => (self.m.clone(), self.v.clone()),
            };
            let t_sq = tm.map(|x| x * x);
            let variance = v_prev.sub(&m_prev.map(|x| x * x))?;
            let mean_sq = tm.matmul(&m_prev)?.map(|x| x * x);
            let transported = t_sq.matmul(&variance)?.add(&mean_sq)?.map(f64::abs);
            transported.scale(b2 * prev_bc2).add(&grad_sq.scale(1.0 - b2))?
        };
        debug_assert!(v_new.as_slice().iter().all(|&x| x >= 0.0));

        let direction = normalized_direction(&m_new, &v_new, t, hyper)?;
        self.m = m_new;
        self.v = v_new;
        self.step = t;
        Ok(direction)
    }
}

/// `W − η · U · Ñ`: lifts the low-rank direction back to d×m and applies it.
pub fn apply_update(w: &Matrix, basis: &SubspaceBasis, direction: &Matrix, lr: f64) -> Result<Matrix> {
    if basis.dim() != w.rows() {
        return Err(Error::ShapeMismatch {
            op: "apply_update basis",
            left_rows: w.rows(),
            left_cols: w.cols(),
            right_rows: basis.dim(),
            right_cols: basis.rank(),
        });
    }
    let lifted = basis.matrix().matmul(direction)?;
    w.zip_with(&lifted, "apply_update", |wi, gi| wi - lr * gi)
}

/// Textbook Adam over a full parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FullAdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub step: usize,
}

impl FullAdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { m: Matrix::zeros(rows, cols), v: Matrix::zeros(rows, cols), step: 0 }
    }

    /// Returns the additive update `−η · M̂ ⊘ (√V̂ + ε)`.
    pub fn step(&mut self, grad: &Matrix, hyper: &AdamHyper, layer: &str) -> Result<Matrix> {
        if grad.shape() != self.m.shape() {
            return Err(Error::ShapeMismatch {
                op: "full_adam_step",
                left_rows: self.m.rows(),
                left_cols: self.m.cols(),
                right_rows: grad.rows(),
                right_cols: grad.cols(),
            });
        }
        check_gradient(grad, layer)?;
        let t = self.step.checked_add(1).ok_or(Error::StepOverflow)?;
        let (b1, b2) = (hyper.beta1, hyper.beta2);
        self.m = self.m.zip_with(grad, "adam m", |m, g| b1 * m + (1.0 - b1) * g)?;
        self.v = self.v.zip_with(grad, "adam v", |v, g| b2 * v + (1.0 - b2) * g * g)?;
        self.step = t;
        let direction = normalized_direction(&self.m, &self.v, t, hyper)?;
        Ok(direction.map(|n| -(hyper.lr * n)))
    }
}
