//! Self-check against independent oracles: a scalar Adam loop, eigen-residuals,
//! brute-force gradient projection and central finite differences.

use std::str::FromStr;

use oasis_core::numerics::{sym_eig, Matrix, Rng};
use oasis_core::optim::{apply_update, AdamHyper, LowRankAdamState, MomentReading};
use oasis_core::subspace::{orthonormality_error, OjaConfig, SubspaceBasis, TrackerKind, TransitionMatrix};
use oasis_core::traingraph::{Batch, LayerConfig, LinearLayer, LossKind, Model};
use serde::Serialize;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Adam,
    Eigen,
    Projection,
    Fd,
    All,
}

impl FromStr for Suite {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "eigen" => Ok(Self::Eigen),
            "projection" => Ok(Self::Projection),
            "fd" => Ok(Self::Fd),
            "all" => Ok(Self::All),
            other => Err(HarnessError::Config(format!("unknown oracle suite `{other}` (adam | eigen | projection | fd | all)"))),
        }
    }
}

/// How a check's measured value is judged against its tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expect {
    /// The value must not exceed the tolerance.
    Within,
    /// A deliberate mutation: the value must exceed the tolerance, proving the oracle can fail.
    Exceeds,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub suite: &'static str,
    pub check: String,
    pub value: f64,
    pub tolerance: f64,
    pub expect: Expect,
}

impl OracleRow {
    pub fn passed(&self) -> bool {
        match self.expect {
            Expect::Within => self.value <= self.tolerance,
            Expect::Exceeds => self.value > self.tolerance,
        }
    }
}

fn row(suite: &'static str, check: impl Into<String>, value: f64, tolerance: f64) -> OracleRow {
    OracleRow { suite, check: check.into(), value, tolerance, expect: Expect::Within }
}

pub fn run_suite(suite: Suite) -> Result<Vec<OracleRow>> {
    Ok(match suite {
        Suite::Adam => adam_suite()?,
        Suite::Eigen => eigen_suite()?,
        Suite::Projection => projection_suite()?,
        Suite::Fd => fd_suite()?,
        Suite::All => {
            let mut rows = adam_suite()?;
            rows.extend(eigen_suite()?);
            rows.extend(projection_suite()?);
            rows.extend(fd_suite()?);
            rows
        }
    })
}

/// Tab-separated `suite check status value tolerance expect` rows.
pub fn render(rows: &[OracleRow]) -> String {
    let mut out = String::from("suite\tcheck\tstatus\tvalue\ttolerance\texpect\n");
    for r in rows {
        let expect = match r.expect {
            Expect::Within => "within",
            Expect::Exceeds => "exceeds",
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.3e}\t{:.1e}\t{}\n",
            r.suite,
            r.check,
            if r.passed() { "PASS" } else { "FAIL" },
            r.value,
            r.tolerance,
            expect
        ));
    }
    out
}

/// Textbook elementwise Adam, written independently of the library optimizer.
struct ScalarAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ScalarAdam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, w: &mut [f64], g: &[f64], h: &AdamHyper) {
        self.t += 1;
        for i in 0..w.len() {
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g[i];
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / (1.0 - h.beta1.powi(self.t));
            let v_hat = self.v[i] / (1.0 - h.beta2.powi(self.t));
            w[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
}

/// Worst relative divergence between the low-rank optimizer at `r = d, U = I, T = I`
/// and the scalar Adam loop over `steps` random gradients.
pub fn full_rank_divergence(reading: MomentReading, steps: usize, seed: u64) -> Result<f64> {
    let (d, m) = (6, 4);
    let hyper = AdamHyper::with_lr(1e-2);
    let mut rng = Rng::new(seed);
    let w0 = rng.normal_matrix(d, m);
    let basis = SubspaceBasis::identity(d, d);
    let mut state = LowRankAdamState::new(d, m).with_reading(reading);
    let mut scalar = ScalarAdam::new(d * m);
    let mut w = w0.clone();
    let mut w_ref = w0.as_slice().to_vec();
    let mut worst = 0.0_f64;
    for _ in 0..steps {
        let g = rng.normal_matrix(d, m).scale(rng.uniform(0.1, 3.0));
        let dir = state.step(&g, &TransitionMatrix::identity(d, 0, 0), &hyper, "oracle")?;
        w = apply_update(&w, &basis, &dir, hyper.lr)?;
        scalar.step(&mut w_ref, g.as_slice(), &hyper);
        let reference = Matrix::from_vec(d, m, w_ref.clone())?;
        worst = worst.max(w.sub(&reference)?.fro_norm() / reference.fro_norm());
    }
    Ok(worst)
}

fn adam_suite() -> Result<Vec<OracleRow>> {
    let mut rows = Vec::new();
    for seed in 0..3 {
        let value = full_rank_divergence(MomentReading::BiasCorrected, 120, seed)?;
        rows.push(row("adam", format!("full_rank_equivalence/seed{seed}"), value, 1e-10));
    }
    let mutated = full_rank_divergence(MomentReading::Raw, 120, 0)?;
    rows.push(OracleRow { expect: Expect::Exceeds, ..row("adam", "raw_moment_mutation_detected", mutated, 1e-10) });
    Ok(rows)
}

fn eigen_suite() -> Result<Vec<OracleRow>> {
    let mut rows = Vec::new();
    let mut rng = Rng::new(11);
    for d in [3, 8, 20, 48] {
        let a = rng.normal_matrix(d, d);
        let c = a.t_matmul(&a)?.symmetrized();
        let e = sym_eig(&c)?;
        let lambda = Matrix::diag(&e.values);
        let residual = c.matmul(&e.vectors)?.sub(&e.vectors.matmul(&lambda)?)?.fro_norm() / c.fro_norm();
        rows.push(row("eigen", format!("residual/d{d}"), residual, 1e-10));
        rows.push(row("eigen", format!("orthonormality/d{d}"), orthonormality_error(&e.vectors), 1e-10));
        let unsorted = e.values.windows(2).filter(|w| w[0] < w[1]).count();
        rows.push(row("eigen", format!("descending/d{d}"), unsorted as f64, 0.0));
    }
    Ok(rows)
}

fn projection_suite() -> Result<Vec<OracleRow>> {
    let mut rows = Vec::new();
    let mut rng = Rng::new(12);
    for (d, n, m, r) in [(16, 64, 8, 4), (64, 256, 32, 8), (32, 40, 5, 31)] {
        let x = rng.normal_matrix(n, d);
        let g_out = rng.normal_matrix(n, m);
        let w = rng.normal_matrix(d, m);
        let cfg = LayerConfig::new(r, TrackerKind::Oja(OjaConfig::default()));
        let mut layer = LinearLayer::new("oracle", w.clone(), cfg)?;
        layer.forward(&x)?;
        let u = layer.basis().expect("initialized by forward").matrix().clone();
        let (g_in, g_tilde) = layer.backward(&g_out)?;
        let full = x.t_matmul(&g_out)?;
        let lifted = u.matmul(&g_tilde)?;
        let projected = u.matmul(&u.t_matmul(&full)?)?;
        let scale = full.fro_norm().max(1.0);
        let tag = format!("d{d}_n{n}_m{m}_r{r}");
        rows.push(row("projection", format!("lift_equals_projection/{tag}"), lifted.sub(&projected)?.fro_norm() / scale, 1e-10));
        let normal_eq = u.t_matmul(&lifted.sub(&full)?)?.fro_norm() / scale;
        rows.push(row("projection", format!("normal_equations/{tag}"), normal_eq, 1e-10));
        let exact_in = g_out.matmul_t(&w)?;
        rows.push(row("projection", format!("input_gradient/{tag}"), g_in.sub(&exact_in)?.max_abs(), 1e-12));
    }
    let (d, n, m) = (10, 30, 4);
    let x = rng.normal_matrix(n, d);
    let g_out = rng.normal_matrix(n, m);
    let mut layer = LinearLayer::new("oracle", rng.normal_matrix(d, m), LayerConfig::new(d, TrackerKind::Fixed))?;
    layer.set_basis(SubspaceBasis::identity(d, d))?;
    layer.forward(&x)?;
    let (_, g_tilde) = layer.backward(&g_out)?;
    rows.push(row("projection", "identity_basis_exact", g_tilde.sub(&x.t_matmul(&g_out)?)?.max_abs(), 0.0));
    Ok(rows)
}

/// Worst relative error between materialized gradients of an r = d Mlp2 and central
/// differences at `coords` random weight coordinates.
pub fn finite_difference_error(coords: usize, seed: u64) -> Result<f64> {
    let (n, d, h, k) = (24, 6, 5, 3);
    let mut rng = Rng::new(seed);
    let cfg = LayerConfig::new(d, TrackerKind::Oja(OjaConfig::default()));
    let mut model = Model::mlp2(d, h, k, LossKind::SoftmaxCrossEntropy, cfg, &mut rng)?;
    let x = rng.normal_matrix(n, d);
    let labels = (0..n).map(|_| rng.below(k)).collect();
    let batch = Batch::classification(x, labels);
    model.compute_gradients(&batch)?;
    let step = 1e-5;
    let mut worst = 0.0_f64;
    for _ in 0..coords {
        let b = rng.below(2);
        let layer = &model.blocks()[b].linear;
        let grad = layer.materialized_gradient().expect("gradients computed");
        let (i, j) = (rng.below(layer.in_dim()), rng.below(layer.out_dim()));
        let w = layer.weight().clone();
        let loss_at = |delta: f64| -> Result<f64> {
            let mut probe = model.clone();
            let mut wp = w.clone();
            wp[(i, j)] += delta;
            probe.blocks_mut()[b].linear.set_weight(wp)?;
            Ok(probe.loss(&batch)?)
        };
        let fd = (loss_at(step)? - loss_at(-step)?) / (2.0 * step);
        let an = grad[(i, j)];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    Ok(worst)
}

fn fd_suite() -> Result<Vec<OracleRow>> {
    (0..2)
        .map(|seed| finite_difference_error(20, 100 + seed).map(|v| row("fd", format!("mlp2_full_rank/seed{seed}"), v, 1e-4)))
        .collect()
}
