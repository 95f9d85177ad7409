//! A small reverse-mode training graph built from compressed linear layers.
//!
//! A [`LinearLayer`] computes `Y = X·W` from the full input but only caches
//! `X̃ = X·U` (N×r) for backward. The weight gradient is produced directly in
//! subspace coordinates as `G̃ = X̃ᵀ G_out` (r×m); the full d×m gradient is never
//! formed. The input gradient `G_out·Wᵀ` needs no activations and stays exact.
//!
//! Models are plain stacks of [`Block`]s (linear → optional bias → activation)
//! with a mean-squared or softmax cross-entropy head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::optim::{apply_update, AdamHyper, FullAdamState, LowRankAdamState};
use crate::subspace::{
    covariance, fixed_step, init_basis, SubspaceBasis, TrackerKind, TransitionMatrix,
};

/// How the N activation rows factor into batch size and sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchShape {
    pub batch: usize,
    pub seq_len: usize,
}

impl BatchShape {
    pub fn rows(rows: usize) -> Self {
        Self { batch: rows, seq_len: 1 }
    }

    pub fn n(&self) -> usize {
        self.batch * self.seq_len
    }
}

/// Projected activations `X̃ = X·U` kept between forward and backward.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedActivationCache {
    pub projected: Matrix,
    pub shape: BatchShape,
}

#[derive(Debug, Clone, PartialEq)]
enum ActivationCache {
    Compressed(CompressedActivationCache),
    /// Opt-out layers keep the raw input.
    Full(Matrix),
}

/// Per-layer settings shared by the model constructors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub rank: usize,
    pub tracker: TrackerKind,
    /// Advance the tracker only every `stride` steps (1 = every step).
    pub tracker_stride: usize,
    pub compress: bool,
}

impl LayerConfig {
    pub fn new(rank: usize, tracker: TrackerKind) -> Self {
        Self { rank, tracker, tracker_stride: 1, compress: true }
    }
}

/// A linear layer `Y = X·W` with W d×m.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    name: String,
    weight: Matrix,
    rank: usize,
    compress: bool,
    tracker: TrackerKind,
    tracker_stride: usize,
    basis: Option<SubspaceBasis>,
    cache: Option<ActivationCache>,
    transition: Option<TransitionMatrix>,
    grad: Option<Matrix>,
    lowrank_opt: LowRankAdamState,
    full_opt: Option<FullAdamState>,
    last_rows: usize,
    last_drift: f64,
    last_gamma_eff: f64,
}

impl LinearLayer {
    /// Layer with the given initial weights; `cfg.rank` is clamped to the input dimension.
    pub fn new(name: impl Into<String>, weight: Matrix, cfg: LayerConfig) -> Result<Self> {
        cfg.tracker.validate()?;
        if cfg.rank == 0 {
            return Err(Error::InvalidConfig("rank must be >= 1".into()));
        }
        if cfg.tracker_stride == 0 {
            return Err(Error::InvalidConfig("tracker stride must be >= 1".into()));
        }
        let (d, m) = weight.shape();
        let rank = cfg.rank.min(d);
        Ok(Self {
            name: name.into(),
            weight,
            rank,
            compress: cfg.compress,
            tracker: cfg.tracker,
            tracker_stride: cfg.tracker_stride,
            basis: None,
            cache: None,
            transition: None,
            grad: None,
            lowrank_opt: LowRankAdamState::new(rank, m),
            full_opt: (!cfg.compress).then(|| FullAdamState::new(d, m)),
            last_rows: 0,
            last_drift: 0.0,
            last_gamma_eff: 0.0,
        })
    }

    /// Uniform `±1/√d` initialization.
    pub fn init_uniform(name: impl Into<String>, d: usize, m: usize, cfg: LayerConfig, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (d as f64).sqrt();
        Self::new(name, rng.uniform_matrix(d, m, -bound, bound), cfg)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn set_weight(&mut self, w: Matrix) -> Result<()> {
        if w.shape() != self.weight.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_weight",
                left_rows: self.weight.rows(),
                left_cols: self.weight.cols(),
                right_rows: w.rows(),
                right_cols: w.cols(),
            });
        }
        self.weight = w;
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_compressed(&self) -> bool {
        self.compress
    }

    pub fn basis(&self) -> Option<&SubspaceBasis> {
        self.basis.as_ref()
    }

    /// Replaces the current basis (e.g. to pin `U = I` in tests).
    pub fn set_basis(&mut self, basis: SubspaceBasis) -> Result<()> {
        if basis.dim() != self.in_dim() || basis.rank() != self.rank {
            return Err(Error::InvalidDimensions(format!(
                "basis {}x{} for layer {} expecting {}x{}",
                basis.dim(),
                basis.rank(),
                self.name,
                self.in_dim(),
                self.rank
            )));
        }
        self.basis = Some(basis);
        Ok(())
    }

    pub fn tracker(&self) -> TrackerKind {
        self.tracker
    }

    pub fn optimizer(&self) -> &LowRankAdamState {
        &self.lowrank_opt
    }

    pub fn compressed_cache(&self) -> Option<&CompressedActivationCache> {
        match &self.cache {
            Some(ActivationCache::Compressed(c)) => Some(c),
            _ => None,
        }
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Transition captured by the most recent forward pass.
    pub fn transition(&self) -> Option<&TransitionMatrix> {
        self.transition.as_ref()
    }

    /// Pending weight gradient: `G̃` (r×m) for compressed layers, `XᵀG_out` otherwise.
    pub fn gradient(&self) -> Option<&Matrix> {
        self.grad.as_ref()
    }

    /// The pending gradient lifted to d×m, i.e. `U·G̃`.
    pub fn materialized_gradient(&self) -> Option<Matrix> {
        let g = self.grad.as_ref()?;
        if !self.compress {
            return Some(g.clone());
        }
        self.basis.as_ref().map(|u| u.matrix().matmul(g).expect("basis and gradient agree"))
    }

    /// Rows N seen by the latest forward pass (0 before any).
    pub fn last_rows(&self) -> usize {
        self.last_rows
    }

    /// Drift of the latest tracker step.
    pub fn last_drift(&self) -> f64 {
        self.last_drift
    }

    /// Effective Oja step `γ/‖C‖` of the latest tracker step (0 for other trackers or skipped steps).
    pub fn last_gamma_eff(&self) -> f64 {
        self.last_gamma_eff
    }

    /// Initializes the basis from a first batch if it has none yet.
    pub fn ensure_basis(&mut self, x0: &Matrix) -> Result<()> {
        if self.compress && self.basis.is_none() {
            self.check_input(x0)?;
            self.basis = Some(init_basis(x0, self.rank)?);
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward_linear",
                left_rows: x.rows(),
                left_cols: x.cols(),
                right_rows: self.weight.rows(),
                right_cols: self.weight.cols(),
            });
        }
        Ok(())
    }

    /// Exact `X·W` without touching tracker or cache.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        x.matmul(&self.weight)
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        self.forward_shaped(x, BatchShape::rows(x.rows()))
    }

    /// Training forward pass: advance the tracker on `covariance(X)`, cache `X·U`, return `X·W`.
    pub fn forward_shaped(&mut self, x: &Matrix, shape: BatchShape) -> Result<Matrix> {
        if self.cache.is_some() {
            return Err(Error::PendingCache(self.name.clone()));
        }
        self.check_input(x)?;
        if shape.n() != x.rows() {
            return Err(Error::InvalidDimensions(format!(
                "batch shape {}x{} for {} activation rows",
                shape.batch,
                shape.seq_len,
                x.rows()
            )));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("input of layer {}", self.name)));
        }
        let y = x.matmul(&self.weight)?;

        if self.compress {
            self.ensure_basis(x)?;
            let prev = self.basis.take().expect("basis initialized");
            let c = covariance(x);
            let update_now = (prev.step() + 1).is_multiple_of(self.tracker_stride);
            let (next, transition) = if update_now {
                self.tracker.advance(&prev, &c)?
            } else {
                fixed_step(&prev)
            };
            self.last_gamma_eff = match (self.tracker, update_now) {
                (TrackerKind::Oja(cfg), true) => {
                    let norm = cfg.norm.of(&c);
                    if norm > cfg.norm_floor {
                        cfg.gamma / norm
                    } else {
                        0.0
                    }
                }
                _ => 0.0,
            };
            self.last_drift = transition.drift();
            let projected = x.matmul(next.matrix())?;
            self.cache = Some(ActivationCache::Compressed(CompressedActivationCache { projected, shape }));
            self.transition = Some(transition);
            self.basis = Some(next);
        } else {
            self.cache = Some(ActivationCache::Full(x.clone()));
        }
        self.last_rows = x.rows();
        Ok(y)
    }

    /// Consumes the cache; returns `(G_in, G̃)` and keeps `G̃` for the optimizer step.
    pub fn backward(&mut self, g_out: &Matrix) -> Result<(Matrix, Matrix)> {
        let cache = self.cache.take().ok_or_else(|| Error::MissingCache(self.name.clone()))?;
        let rows = match &cache {
            ActivationCache::Compressed(c) => c.projected.rows(),
            ActivationCache::Full(x) => x.rows(),
        };
        if g_out.rows() != rows || g_out.cols() != self.out_dim() {
            self.cache = Some(cache);
            return Err(Error::ShapeMismatch {
                op: "backward_linear",
                left_rows: rows,
                left_cols: self.out_dim(),
                right_rows: g_out.rows(),
                right_cols: g_out.cols(),
            });
        }
        let grad = match &cache {
            ActivationCache::Compressed(c) => c.projected.t_matmul(g_out)?,
            ActivationCache::Full(x) => x.t_matmul(g_out)?,
        };
        let g_in = g_out.matmul_t(&self.weight)?;
        self.grad = Some(grad.clone());
        Ok((g_in, grad))
    }

    /// Applies the pending gradient with the projection-aware optimizer (or full Adam for opt-out layers).
    pub fn optimizer_step(&mut self, hyper: &AdamHyper) -> Result<()> {
        let grad = self.grad.take().ok_or_else(|| Error::MissingGradient(self.name.clone()))?;
        if let Some(full) = self.full_opt.as_mut() {
            let update = full.step(&grad, hyper, &self.name)?;
            self.weight = self.weight.add(&update)?;
            return Ok(());
        }
        let basis = self.basis.as_ref().expect("compressed layer with gradient has a basis");
        let transition = self
            .transition
            .clone()
            .unwrap_or_else(|| TransitionMatrix::identity(self.rank, basis.step(), basis.step()));
        let direction = self.lowrank_opt.step(&grad, &transition, hyper, &self.name)?;
        self.weight = apply_update(&self.weight, basis, &direction, hyper.lr)?;
        Ok(())
    }

    pub fn footprint(&self) -> Footprint {
        Footprint::Linear {
            name: self.name.clone(),
            d: self.in_dim(),
            m: self.out_dim(),
            rank: self.compress.then_some(self.rank),
            rows: self.last_rows,
        }
    }
}

/// A bias row vector trained with full Adam.
#[derive(Debug, Clone)]
pub struct Bias {
    name: String,
    value: Matrix,
    opt: FullAdamState,
    grad: Option<Matrix>,
}

impl Bias {
    pub fn zeros(name: impl Into<String>, m: usize) -> Self {
        Self { name: name.into(), value: Matrix::zeros(1, m), opt: FullAdamState::new(1, m), grad: None }
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn gradient(&self) -> Option<&Matrix> {
        self.grad.as_ref()
    }

    fn step(&mut self, hyper: &AdamHyper) -> Result<()> {
        let grad = self.grad.take().ok_or_else(|| Error::MissingGradient(self.name.clone()))?;
        let update = self.opt.step(&grad, hyper, &self.name)?;
        self.value = self.value.add(&update)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Tanh,
}

/// `linear → (+ bias) → activation`.
#[derive(Debug, Clone)]
pub struct Block {
    pub linear: LinearLayer,
    pub bias: Option<Bias>,
    pub activation: Activation,
    /// Activation output, kept uncompressed for the tanh derivative.
    act_cache: Option<Matrix>,
}

impl Block {
    pub fn new(linear: LinearLayer, bias: bool, activation: Activation) -> Self {
        let bias = bias.then(|| Bias::zeros(format!("{}.bias", linear.name()), linear.out_dim()));
        Self { linear, bias, activation, act_cache: None }
    }

    fn post(&self, pre: Matrix) -> Result<Matrix> {
        let z = match &self.bias {
            Some(b) => pre.add_row_broadcast(&b.value)?,
            None => pre,
        };
        Ok(match self.activation {
            Activation::Identity => z,
            Activation::Tanh => z.map(f64::tanh),
        })
    }

    fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.post(self.linear.predict(x)?)
    }

    fn forward(&mut self, x: &Matrix, shape: BatchShape) -> Result<Matrix> {
        let pre = self.linear.forward_shaped(x, shape)?;
        let out = self.post(pre)?;
        if self.activation == Activation::Tanh {
            self.act_cache = Some(out.clone());
        }
        Ok(out)
    }

    fn backward(&mut self, g: &Matrix) -> Result<Matrix> {
        let g_pre = match self.activation {
            Activation::Identity => g.clone(),
            Activation::Tanh => {
                let a = self.act_cache.take().ok_or_else(|| Error::MissingCache(self.linear.name().to_string()))?;
                g.zip_with(&a, "tanh backward", |gi, ai| gi * (1.0 - ai * ai))?
            }
        };
        if let Some(b) = self.bias.as_mut() {
            b.grad = Some(g_pre.column_sums());
        }
        Ok(self.linear.backward(&g_pre)?.0)
    }

    fn step(&mut self, hyper: &AdamHyper) -> Result<()> {
        self.linear.optimizer_step(hyper)?;
        if let Some(b) = self.bias.as_mut() {
            b.step(hyper)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `½‖P − Y‖²_F / N`.
    MeanSquared,
    /// Mean softmax cross-entropy over rows.
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Matrix),
    Classes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
    pub shape: BatchShape,
}

impl Batch {
    pub fn regression(inputs: Matrix, targets: Matrix) -> Self {
        let shape = BatchShape::rows(inputs.rows());
        Self { inputs, targets: Targets::Values(targets), shape }
    }

    pub fn classification(inputs: Matrix, labels: Vec<usize>) -> Self {
        let shape = BatchShape::rows(inputs.rows());
        Self { inputs, targets: Targets::Classes(labels), shape }
    }

    pub fn with_shape(mut self, shape: BatchShape) -> Self {
        self.shape = shape;
        self
    }
}

/// Loss value and its gradient with respect to the model output.
pub fn loss_and_grad(kind: LossKind, output: &Matrix, targets: &Targets) -> Result<(f64, Matrix)> {
    let n = output.rows() as f64;
    match (kind, targets) {
        (LossKind::MeanSquared, Targets::Values(y)) => {
            let diff = output.sub(y)?;
            let sq: f64 = diff.as_slice().iter().map(|v| v * v).sum();
            Ok((0.5 * sq / n, diff.scale(1.0 / n)))
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
            if labels.len() != output.rows() {
                return Err(Error::InvalidDimensions(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    output.rows()
                )));
            }
            let mut grad = Matrix::zeros(output.rows(), output.cols());
            let mut total = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                if label >= output.cols() {
                    return Err(Error::InvalidDimensions(format!("label {label} with {} classes", output.cols())));
                }
                let row = output.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                total += log_z - row[label];
                for (j, &v) in row.iter().enumerate() {
                    let p = (v - log_z).exp();
                    grad[(i, j)] = (p - if j == label { 1.0 } else { 0.0 }) / n;
                }
            }
            Ok((total / n, grad))
        }
        _ => Err(Error::InvalidConfig("loss kind does not match target type".into())),
    }
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(output: &Matrix, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &label)| {
            let row = output.row(*i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearRegression,
    Mlp2,
    SeqBlock,
}

/// A stack of blocks with a loss head.
#[derive(Debug, Clone)]
pub struct Model {
    kind: ModelKind,
    blocks: Vec<Block>,
    loss: LossKind,
    elem_size: usize,
    step: usize,
}

/// Result of one training step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub ledger: MemoryLedger,
    /// `(layer name, drift)` for every compressed layer.
    pub drifts: Vec<(String, f64)>,
    /// Mean effective Oja step over compressed layers.
    pub gamma_eff: f64,
}

impl StepReport {
    /// Unweighted mean drift over compressed layers (0 if none).
    pub fn mean_drift(&self) -> f64 {
        if self.drifts.is_empty() {
            0.0
        } else {
            self.drifts.iter().map(|(_, d)| d).sum::<f64>() / self.drifts.len() as f64
        }
    }
}

pub const DEFAULT_ELEM_SIZE: usize = 2;

impl Model {
    pub fn from_blocks(kind: ModelKind, blocks: Vec<Block>, loss: LossKind) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one block".into()));
        }
        for w in blocks.windows(2) {
            if w[0].linear.out_dim() != w[1].linear.in_dim() {
                return Err(Error::InvalidDimensions(format!(
                    "block {} outputs {} but {} expects {}",
                    w[0].linear.name(),
                    w[0].linear.out_dim(),
                    w[1].linear.name(),
                    w[1].linear.in_dim()
                )));
            }
        }
        Ok(Self { kind, blocks, loss, elem_size: DEFAULT_ELEM_SIZE, step: 0 })
    }

    /// Single compressed linear layer with a mean-squared loss.
    pub fn linear_regression(d: usize, m: usize, cfg: LayerConfig, rng: &mut Rng) -> Result<Self> {
        let layer = LinearLayer::init_uniform("linear", d, m, cfg, rng)?;
        Self::from_blocks(ModelKind::LinearRegression, vec![Block::new(layer, false, Activation::Identity)], LossKind::MeanSquared)
    }

    /// `linear(d→h) + bias → tanh → linear(h→m) + bias`.
    pub fn mlp2(d: usize, hidden: usize, m: usize, loss: LossKind, cfg: LayerConfig, rng: &mut Rng) -> Result<Self> {
        let l1 = LinearLayer::init_uniform("mlp.0", d, hidden, cfg, rng)?;
        let l2 = LinearLayer::init_uniform("mlp.1", hidden, m, cfg, rng)?;
        Self::from_blocks(
            ModelKind::Mlp2,
            vec![Block::new(l1, true, Activation::Tanh), Block::new(l2, true, Activation::Identity)],
            loss,
        )
    }

    /// Character model over a one-hot context window of `context` tokens:
    /// embedding (`context·vocab → embed`) → `embed → hidden` + tanh → readout to `vocab` logits.
    pub fn seq_block(
        vocab: usize,
        context: usize,
        embed: usize,
        hidden: usize,
        cfg: LayerConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let emb = LinearLayer::init_uniform("seq.embed", context * vocab, embed, cfg, rng)?;
        let mix = LinearLayer::init_uniform("seq.hidden", embed, hidden, cfg, rng)?;
        let out = LinearLayer::init_uniform("seq.readout", hidden, vocab, cfg, rng)?;
        Self::from_blocks(
            ModelKind::SeqBlock,
            vec![
                Block::new(emb, false, Activation::Identity),
                Block::new(mix, true, Activation::Tanh),
                Block::new(out, true, Activation::Identity),
            ],
            LossKind::SoftmaxCrossEntropy,
        )
    }

    pub fn with_elem_size(mut self, elem_size: usize) -> Self {
        self.elem_size = elem_size;
        self
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn elem_size(&self) -> usize {
        self.elem_size
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn layers(&self) -> impl Iterator<Item = &LinearLayer> {
        self.blocks.iter().map(|b| &b.linear)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut LinearLayer> {
        self.blocks.iter_mut().map(|b| &mut b.linear)
    }

    /// Initializes every compressed layer's basis from the activations of a first batch.
    pub fn initialize(&mut self, x0: &Matrix) -> Result<()> {
        let mut h = x0.clone();
        for block in self.blocks.iter_mut() {
            block.linear.ensure_basis(&h)?;
            h = block.predict(&h)?;
        }
        Ok(())
    }

    /// Pure forward pass; no caches or tracker updates.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.predict(&h)?;
        }
        Ok(h)
    }

    /// Loss of a pure forward pass.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        Ok(loss_and_grad(self.loss, &self.predict(&batch.inputs)?, &batch.targets)?.0)
    }

    /// Held-out loss and, for class targets, accuracy.
    pub fn evaluate(&self, batch: &Batch) -> Result<(f64, Option<f64>)> {
        let out = self.predict(&batch.inputs)?;
        let (loss, _) = loss_and_grad(self.loss, &out, &batch.targets)?;
        let acc = match &batch.targets {
            Targets::Classes(labels) => Some(accuracy(&out, labels)),
            Targets::Values(_) => None,
        };
        Ok((loss, acc))
    }

    /// Forward with tracker updates and caching, then backward. Leaves gradients pending.
    pub fn compute_gradients(&mut self, batch: &Batch) -> Result<f64> {
        let mut h = batch.inputs.clone();
        for block in self.blocks.iter_mut() {
            h = block.forward(&h, batch.shape)?;
        }
        let (loss, mut g) = loss_and_grad(self.loss, &h, &batch.targets)?;
        if !loss.is_finite() {
            for block in self.blocks.iter_mut() {
                block.linear.cache = None;
                block.act_cache = None;
            }
            return Err(Error::NonFiniteLoss { step: self.step + 1, loss });
        }
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        Ok(loss)
    }

    /// Applies all pending gradients.
    pub fn apply_gradients(&mut self, hyper: &AdamHyper) -> Result<()> {
        for block in self.blocks.iter_mut() {
            block.step(hyper)?;
        }
        self.step += 1;
        Ok(())
    }

    /// Rescales all pending gradients so their joint Frobenius norm is at most `max_norm`.
    /// Returns the norm before clipping. A compressed gradient has the same norm as its lift `U·G̃`.
    pub fn clip_gradients(&mut self, max_norm: f64) -> Result<f64> {
        if max_norm.is_nan() || max_norm <= 0.0 {
            return Err(Error::InvalidConfig(format!("clip norm must be > 0, got {max_norm}")));
        }
        let mut sq = 0.0;
        for block in &self.blocks {
            let g = block.linear.grad.as_ref().ok_or_else(|| Error::MissingGradient(block.linear.name.clone()))?;
            sq += g.fro_norm().powi(2);
            if let Some(b) = &block.bias {
                sq += b.grad.as_ref().map_or(0.0, |g| g.fro_norm().powi(2));
            }
        }
        let norm = sq.sqrt();
        if norm > max_norm {
            let s = max_norm / norm;
            for block in self.blocks.iter_mut() {
                if let Some(g) = block.linear.grad.as_mut() {
                    *g = g.scale(s);
                }
                if let Some(g) = block.bias.as_mut().and_then(|b| b.grad.as_mut()) {
                    *g = g.scale(s);
                }
            }
        }
        Ok(norm)
    }

    /// One full iteration: track, project, backpropagate, transport and update.
    pub fn train_step(&mut self, batch: &Batch, hyper: &AdamHyper) -> Result<StepReport> {
        self.train_step_clipped(batch, hyper, None)
    }

    /// `train_step` with optional global gradient-norm clipping before the optimizer.
    pub fn train_step_clipped(&mut self, batch: &Batch, hyper: &AdamHyper, clip: Option<f64>) -> Result<StepReport> {
        let loss = self.compute_gradients(batch)?;
        if let Some(max_norm) = clip {
            self.clip_gradients(max_norm)?;
        }
        // peak footprint: caches, gradients and states are all live here
        let ledger = self.ledger_report();
        let drifts = self
            .layers()
            .filter(|l| l.is_compressed())
            .map(|l| (l.name().to_string(), l.last_drift()))
            .collect::<Vec<_>>();
        let compressed = self.layers().filter(|l| l.is_compressed()).count();
        let gamma_eff = if compressed == 0 {
            0.0
        } else {
            self.layers().filter(|l| l.is_compressed()).map(|l| l.last_gamma_eff()).sum::<f64>() / compressed as f64
        };
        self.apply_gradients(hyper)?;
        Ok(StepReport { step: self.step, loss, ledger, drifts, gamma_eff })
    }

    pub fn footprints(&self) -> Vec<Footprint> {
        let mut out = Vec::new();
        for block in &self.blocks {
            let linear = &block.linear;
            out.push(linear.footprint());
            if let Some(b) = &block.bias {
                out.push(Footprint::Vector { name: b.name.clone(), len: b.value.cols() });
            }
            if block.activation == Activation::Tanh {
                out.push(Footprint::Activation {
                    name: format!("{}.act", linear.name()),
                    rows: linear.last_rows(),
                    width: linear.out_dim(),
                });
            }
        }
        out
    }

    /// Analytic byte accounting for the current model at the last seen batch size.
    pub fn ledger_report(&self) -> MemoryLedger {
        MemoryLedger::from_footprints(&self.footprints(), self.elem_size)
    }
}

/// Shape information needed to account for one model component.
#[derive(Debug, Clone, PartialEq)]
pub enum Footprint {
    /// `rank = None` means the layer is uncompressed.
    Linear { name: String, d: usize, m: usize, rank: Option<usize>, rows: usize },
    /// Vector parameter trained with full Adam.
    Vector { name: String, len: usize },
    /// Nonlinearity output stored at full width.
    Activation { name: String, rows: usize, width: usize },
}

impl Footprint {
    /// (entry as trained, entry for the uncompressed baseline).
    pub fn entries(&self, elem: u64) -> (LedgerEntry, LedgerEntry) {
        match self {
            Footprint::Linear { name, d, m, rank, rows } => {
                let (d, m, n) = (*d as u64, *m as u64, *rows as u64);
                let baseline = LedgerEntry {
                    name: name.clone(),
                    weights_bytes: d * m * elem,
                    activation_bytes: n * d * elem,
                    gradient_bytes: d * m * elem,
                    optimizer_bytes: 2 * d * m * elem,
                };
                let entry = match rank {
                    Some(r) => {
                        let r = *r as u64;
                        LedgerEntry {
                            name: name.clone(),
                            weights_bytes: d * m * elem,
                            activation_bytes: n * r * elem,
                            gradient_bytes: r * m * elem,
                            optimizer_bytes: 2 * r * m * elem,
                        }
                    }
                    None => baseline.clone(),
                };
                (entry, baseline)
            }
            Footprint::Vector { name, len } => {
                let len = *len as u64;
                let e = LedgerEntry {
                    name: name.clone(),
                    weights_bytes: len * elem,
                    activation_bytes: 0,
                    gradient_bytes: len * elem,
                    optimizer_bytes: 2 * len * elem,
                };
                (e.clone(), e)
            }
            Footprint::Activation { name, rows, width } => {
                let e = LedgerEntry {
                    name: name.clone(),
                    weights_bytes: 0,
                    activation_bytes: (*rows as u64) * (*width as u64) * elem,
                    gradient_bytes: 0,
                    optimizer_bytes: 0,
                };
                (e.clone(), e)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub name: String,
    pub weights_bytes: u64,
    pub activation_bytes: u64,
    pub gradient_bytes: u64,
    pub optimizer_bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub weights_bytes: u64,
    pub activation_bytes: u64,
    pub gradient_bytes: u64,
    pub optimizer_bytes: u64,
    pub total_bytes: u64,
}

impl LedgerTotals {
    fn sum<'a>(entries: impl IntoIterator<Item = &'a LedgerEntry>) -> Self {
        let mut t = LedgerTotals::default();
        for e in entries {
            t.weights_bytes += e.weights_bytes;
            t.activation_bytes += e.activation_bytes;
            t.gradient_bytes += e.gradient_bytes;
            t.optimizer_bytes += e.optimizer_bytes;
        }
        t.total_bytes = t.weights_bytes + t.activation_bytes + t.gradient_bytes + t.optimizer_bytes;
        t
    }
}

/// Per-component byte counts under a configurable element size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLedger {
    pub layers: Vec<LedgerEntry>,
    pub totals: LedgerTotals,
    pub elem_size: usize,
    pub baseline_totals: LedgerTotals,
}

impl MemoryLedger {
    pub fn from_footprints(footprints: &[Footprint], elem_size: usize) -> Self {
        let (layers, baseline): (Vec<_>, Vec<_>) =
            footprints.iter().map(|f| f.entries(elem_size as u64)).unzip();
        Self {
            totals: LedgerTotals::sum(&layers),
            baseline_totals: LedgerTotals::sum(&baseline),
            layers,
            elem_size,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ledger serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::OjaConfig;

    fn oja_cfg(rank: usize) -> LayerConfig {
        LayerConfig::new(rank, TrackerKind::Oja(OjaConfig::default()))
    }

    #[test]
    fn forward_is_exact_for_identity_weight() {
        let mut rng = Rng::new(1);
        let x = rng.normal_matrix(10, 4);
        let mut layer = LinearLayer::new("w", Matrix::identity(4), oja_cfg(1)).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), x);
        assert_eq!(layer.compressed_cache().unwrap().projected.cols(), 1);
    }

    #[test]
    fn full_rank_identity_basis_caches_input() {
        let mut rng = Rng::new(2);
        let x = rng.normal_matrix(6, 3);
        let mut layer = LinearLayer::new("w", rng.normal_matrix(3, 2), LayerConfig::new(3, TrackerKind::Fixed)).unwrap();
        layer.set_basis(SubspaceBasis::identity(3, 3)).unwrap();
        layer.forward(&x).unwrap();
        assert_eq!(layer.compressed_cache().unwrap().projected, x);
    }

    #[test]
    fn cache_is_projection_of_input() {
        let mut rng = Rng::new(3);
        let x = rng.normal_matrix(20, 6);
        let mut layer = LinearLayer::init_uniform("w", 6, 3, oja_cfg(2), &mut rng).unwrap();
        layer.forward(&x).unwrap();
        let u = layer.basis().unwrap().matrix().clone();
        let cached = &layer.compressed_cache().unwrap().projected;
        assert!(cached.sub(&x.matmul(&u).unwrap()).unwrap().max_abs() < 1e-12);
        let recon = cached.matmul_t(&u).unwrap();
        let proj = x.matmul(&u.matmul_t(&u).unwrap()).unwrap();
        assert!(recon.sub(&proj).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn double_forward_and_missing_cache_error() {
        let mut rng = Rng::new(4);
        let x = rng.normal_matrix(5, 3);
        let mut layer = LinearLayer::init_uniform("l0", 3, 2, oja_cfg(2), &mut rng).unwrap();
        assert_eq!(layer.backward(&Matrix::zeros(5, 2)).unwrap_err(), Error::MissingCache("l0".into()));
        layer.forward(&x).unwrap();
        assert_eq!(layer.forward(&x).unwrap_err(), Error::PendingCache("l0".into()));
        assert!(layer.backward(&Matrix::zeros(4, 2)).is_err());
        assert!(layer.has_cache());
        layer.backward(&Matrix::zeros(5, 2)).unwrap();
        assert!(!layer.has_cache());
        assert!(layer.forward(&Matrix::zeros(5, 4)).is_err());
    }

    #[test]
    fn zero_output_gradient() {
        let mut rng = Rng::new(5);
        let x = rng.normal_matrix(7, 4);
        let mut layer = LinearLayer::init_uniform("w", 4, 3, oja_cfg(2), &mut rng).unwrap();
        layer.forward(&x).unwrap();
        let (g_in, g) = layer.backward(&Matrix::zeros(7, 3)).unwrap();
        assert_eq!(g_in, Matrix::zeros(7, 4));
        assert_eq!(g, Matrix::zeros(2, 3));
    }

    #[test]
    fn lowrank_gradient_is_projection_of_true_gradient() {
        let mut rng = Rng::new(6);
        let x = rng.normal_matrix(40, 8);
        let g_out = rng.normal_matrix(40, 5);
        let mut layer = LinearLayer::init_uniform("w", 8, 5, oja_cfg(3), &mut rng).unwrap();
        layer.forward(&x).unwrap();
        let (g_in, _) = layer.backward(&g_out).unwrap();
        let u = layer.basis().unwrap().matrix().clone();
        let full = x.t_matmul(&g_out).unwrap();
        let proj = u.matmul(&u.t_matmul(&full).unwrap()).unwrap();
        let lifted = layer.materialized_gradient().unwrap();
        assert!(lifted.sub(&proj).unwrap().fro_norm() < 1e-10);
        assert!(g_in.sub(&g_out.matmul(&layer.weight().transpose()).unwrap()).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn uncompressed_layer_uses_full_gradient() {
        let mut rng = Rng::new(7);
        let x = rng.normal_matrix(9, 4);
        let g_out = rng.normal_matrix(9, 2);
        let cfg = LayerConfig { compress: false, ..oja_cfg(1) };
        let mut layer = LinearLayer::init_uniform("w", 4, 2, cfg, &mut rng).unwrap();
        layer.forward(&x).unwrap();
        let (_, g) = layer.backward(&g_out).unwrap();
        assert_eq!(g, x.t_matmul(&g_out).unwrap());
        layer.optimizer_step(&AdamHyper::default()).unwrap();
        assert!(layer.basis().is_none());
        assert_eq!(layer.footprint().entries(2).0, layer.footprint().entries(2).1);
    }

    #[test]
    fn optimizer_step_requires_gradient() {
        let mut rng = Rng::new(8);
        let mut layer = LinearLayer::init_uniform("w", 3, 2, oja_cfg(2), &mut rng).unwrap();
        assert_eq!(layer.optimizer_step(&AdamHyper::default()).unwrap_err(), Error::MissingGradient("w".into()));
    }

    #[test]
    fn zero_gradient_batch_leaves_weights() {
        let mut rng = Rng::new(9);
        let mut model = Model::linear_regression(5, 3, oja_cfg(2), &mut rng).unwrap();
        let x = rng.normal_matrix(12, 5);
        let y = model.predict(&x).unwrap();
        let before = model.blocks()[0].linear.weight().clone();
        let rep = model.train_step(&Batch::regression(x, y), &AdamHyper::default()).unwrap();
        assert_eq!(rep.loss, 0.0);
        assert_eq!(model.blocks()[0].linear.weight(), &before);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = Rng::new(10);
        let logits = rng.normal_matrix(4, 3);
        let targets = Targets::Classes(vec![0, 2, 1, 2]);
        let (_, g) = loss_and_grad(LossKind::SoftmaxCrossEntropy, &logits, &targets).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut p = logits.clone();
                p[(i, j)] += h;
                let mut m = logits.clone();
                m[(i, j)] -= h;
                let lp = loss_and_grad(LossKind::SoftmaxCrossEntropy, &p, &targets).unwrap().0;
                let lm = loss_and_grad(LossKind::SoftmaxCrossEntropy, &m, &targets).unwrap().0;
                assert!(((lp - lm) / (2.0 * h) - g[(i, j)]).abs() < 1e-7);
            }
        }
        assert!(loss_and_grad(LossKind::MeanSquared, &logits, &targets).is_err());
        assert!(loss_and_grad(LossKind::SoftmaxCrossEntropy, &logits, &Targets::Classes(vec![5, 0, 0, 0])).is_err());
    }

    #[test]
    fn accuracy_counts_argmax() {
        let out = Matrix::from_rows(&[[0.1, 0.9], [0.8, 0.2], [0.3, 0.7]]);
        assert!((accuracy(&out, &[1, 0, 0]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_loss_reports_step() {
        let mut rng = Rng::new(11);
        let mut model = Model::linear_regression(3, 1, oja_cfg(1), &mut rng).unwrap();
        let x = rng.normal_matrix(4, 3);
        let mut y = Matrix::zeros(4, 1);
        y[(2, 0)] = 1e300;
        let batch = Batch::regression(x, y);
        let err = model.train_step(&batch, &AdamHyper::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 1, .. }));
        assert!(!model.blocks()[0].linear.has_cache());
    }

    #[test]
    fn ledger_layer_arithmetic() {
        let f = Footprint::Linear { name: "big".into(), d: 1024, m: 512, rank: Some(32), rows: 2048 };
        let (e, b) = f.entries(2);
        assert_eq!(e.activation_bytes, 131_072);
        assert_eq!(b.activation_bytes, 4_194_304);
        assert_eq!(b.gradient_bytes / e.gradient_bytes, 32);
        assert_eq!(b.optimizer_bytes / e.optimizer_bytes, 32);
        assert_eq!(e.weights_bytes, b.weights_bytes);

        let full = Footprint::Linear { name: "f".into(), d: 16, m: 4, rank: Some(16), rows: 10 };
        let (e, b) = full.entries(2);
        assert_eq!(e, b);
    }

    #[test]
    fn mlp_ledger_totals_are_sums() {
        let mut rng = Rng::new(12);
        let mut model = Model::mlp2(6, 5, 3, LossKind::MeanSquared, oja_cfg(2), &mut rng).unwrap();
        let x = rng.normal_matrix(8, 6);
        let y = rng.normal_matrix(8, 3);
        let rep = model.train_step(&Batch::regression(x, y), &AdamHyper::default()).unwrap();
        let l = &rep.ledger;
        let mut act = 0;
        let mut total = 0;
        for e in &l.layers {
            act += e.activation_bytes;
            total += e.weights_bytes + e.activation_bytes + e.gradient_bytes + e.optimizer_bytes;
        }
        assert_eq!(l.totals.activation_bytes, act);
        assert_eq!(l.totals.total_bytes, total);
        let mlp0 = l.layers.iter().find(|e| e.name == "mlp.0").unwrap();
        assert_eq!(mlp0.activation_bytes, 8 * 2 * 2);
        let json: serde_json::Value = serde_json::from_str(&l.to_json()).unwrap();
        for key in ["layers", "totals", "elem_size", "baseline_totals"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(json["layers"][0]["name"], "mlp.0");
    }

    #[test]
    fn seq_block_trains_one_step() {
        let mut rng = Rng::new(13);
        let (vocab, context) = (5, 2);
        let mut model = Model::seq_block(vocab, context, 4, 6, oja_cfg(3), &mut rng).unwrap();
        let n = 12;
        let mut x = Matrix::zeros(n, vocab * context);
        let mut labels = Vec::new();
        for i in 0..n {
            for c in 0..context {
                x[(i, c * vocab + rng.below(vocab))] = 1.0;
            }
            labels.push(rng.below(vocab));
        }
        let batch = Batch::classification(x, labels).with_shape(BatchShape { batch: 3, seq_len: 4 });
        let rep = model.train_step(&batch, &AdamHyper::default()).unwrap();
        assert!(rep.loss.is_finite());
        assert_eq!(rep.drifts.len(), 3);
        let cache_shape = BatchShape { batch: 3, seq_len: 4 };
        model.blocks_mut()[0].linear.forward_shaped(&batch.inputs, cache_shape).unwrap();
        assert_eq!(model.blocks()[0].linear.compressed_cache().unwrap().shape, cache_shape);
    }

    #[test]
    fn clipping_bounds_joint_gradient_norm() {
        let mut rng = Rng::new(14);
        let mut model = Model::mlp2(5, 4, 3, LossKind::MeanSquared, oja_cfg(2), &mut rng).unwrap();
        let x = rng.normal_matrix(16, 5);
        let y = rng.normal_matrix(16, 3).scale(50.0);
        model.compute_gradients(&Batch::regression(x, y)).unwrap();
        let before = model.clip_gradients(0.5).unwrap();
        assert!(before > 0.5);
        assert!((model.clip_gradients(1e9).unwrap() - 0.5).abs() < 1e-12);
        assert!(model.clip_gradients(0.0).is_err());
    }
}
