//! Synthetic tasks: a planted activation subspace rotating inside a fixed plane,
//! and a Markov-chain character stream.

use oasis_core::numerics::{Matrix, Rng};
use oasis_core::traingraph::{Batch, BatchShape};

use crate::config::{ExperimentConfig, TaskKind};
use crate::error::{HarnessError, Result};

/// Inputs `X_t = Z·B_tᵀ + σE` whose basis `B_t = P₁cos(θt) + P₂sin(θt)` turns at a constant
/// rate inside the 2·r_true-dimensional plane spanned by `[P₁ P₂]`.
///
/// Consecutive bases satisfy `B_{t+1}ᵀB_t = cos(θ)·I`, so the true drift is `|sin θ|` at every step.
/// The planted weights `W*` also live in the plane.
#[derive(Debug, Clone)]
pub struct DriftingTask {
    p1: Matrix,
    p2: Matrix,
    w_star: Matrix,
    rotation_rate: f64,
    noise: f64,
}

impl DriftingTask {
    pub fn new(d: usize, r_true: usize, m: usize, rotation_rate: f64, noise: f64, rng: &mut Rng) -> Result<Self> {
        if r_true == 0 || m == 0 || 2 * r_true > d {
            return Err(HarnessError::Config(format!("drifting task needs 1 <= 2*r_true <= d, got d={d}, r_true={r_true}")));
        }
        if rotation_rate.is_nan() || rotation_rate < 0.0 || noise.is_nan() || noise < 0.0 {
            return Err(HarnessError::Config("rotation_rate and noise must be >= 0".into()));
        }
        let plane = rng.orthonormal(d, 2 * r_true);
        let p1 = Matrix::from_fn(d, r_true, |i, j| plane[(i, j)]);
        let p2 = Matrix::from_fn(d, r_true, |i, j| plane[(i, r_true + j)]);
        // targets depend only on directions the activations can visit
        let w_star = plane.matmul(&rng.normal_matrix(2 * r_true, m)).expect("conforming");
        Ok(Self { p1, p2, w_star, rotation_rate, noise })
    }

    pub fn dim(&self) -> usize {
        self.p1.rows()
    }

    pub fn r_true(&self) -> usize {
        self.p1.cols()
    }

    pub fn w_star(&self) -> &Matrix {
        &self.w_star
    }

    /// True basis at step `t`.
    pub fn basis(&self, t: usize) -> Matrix {
        let angle = self.rotation_rate * t as f64;
        self.p1.scale(angle.cos()).add(&self.p2.scale(angle.sin())).expect("same shape")
    }

    pub fn inputs(&self, t: usize, rows: usize, rng: &mut Rng) -> Matrix {
        let z = rng.normal_matrix(rows, self.r_true());
        let clean = z.matmul_t(&self.basis(t)).expect("conforming");
        if self.noise == 0.0 {
            return clean;
        }
        clean.add(&rng.normal_matrix(rows, self.dim()).scale(self.noise)).expect("same shape")
    }

    /// Regression batch with targets `X·W*`.
    pub fn regression(&self, t: usize, rows: usize, rng: &mut Rng) -> Batch {
        let x = self.inputs(t, rows, rng);
        let y = x.matmul(&self.w_star).expect("conforming");
        Batch::regression(x, y)
    }

    /// Classification batch labelled by `argmax(x·W*)`.
    pub fn classification(&self, t: usize, rows: usize, rng: &mut Rng) -> Batch {
        let x = self.inputs(t, rows, rng);
        let scores = x.matmul(&self.w_star).expect("conforming");
        let labels = (0..rows).map(|i| argmax(scores.row(i))).collect();
        Batch::classification(x, labels)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// First-order Markov chain over `vocab` characters. Each character has three favoured
/// successors; the remaining mass is spread uniformly.
#[derive(Debug, Clone)]
pub struct CharChain {
    vocab: usize,
    context: usize,
    /// Row-wise cumulative transition probabilities.
    cumulative: Vec<Vec<f64>>,
}

impl CharChain {
    pub fn new(vocab: usize, context: usize, rng: &mut Rng) -> Result<Self> {
        if vocab < 2 || context == 0 {
            return Err(HarnessError::Config(format!("char chain needs vocab >= 2 and context >= 1, got {vocab}, {context}")));
        }
        let favoured = [0.6, 0.25, 0.1];
        let spread = (1.0 - favoured.iter().take(vocab).sum::<f64>()) / vocab as f64;
        let cumulative = (0..vocab)
            .map(|_| {
                let mut p = vec![spread; vocab];
                for &w in favoured.iter().take(vocab) {
                    p[rng.below(vocab)] += w;
                }
                let mut acc = 0.0;
                let mut c: Vec<f64> = p
                    .iter()
                    .map(|x| {
                        acc += x;
                        acc
                    })
                    .collect();
                *c.last_mut().expect("vocab >= 2") = 1.0;
                c
            })
            .collect();
        Ok(Self { vocab, context, cumulative })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn input_dim(&self) -> usize {
        self.vocab * self.context
    }

    fn next(&self, from: usize, rng: &mut Rng) -> usize {
        let u = rng.uniform(0.0, 1.0);
        self.cumulative[from].iter().position(|&c| u < c).unwrap_or(self.vocab - 1)
    }

    /// Raw character sequence of length `len`.
    pub fn sample(&self, len: usize, rng: &mut Rng) -> Vec<usize> {
        let mut seq = Vec::with_capacity(len);
        let mut c = rng.below(self.vocab);
        for _ in 0..len {
            seq.push(c);
            c = self.next(c, rng);
        }
        seq
    }

    /// `batch` sequences of `seq_len` prediction positions each. Row features are the one-hot
    /// encodings of the previous `context` characters, concatenated; labels are the next character.
    pub fn batch(&self, batch: usize, seq_len: usize, rng: &mut Rng) -> Batch {
        let rows = batch * seq_len;
        let mut x = Matrix::zeros(rows, self.input_dim());
        let mut labels = Vec::with_capacity(rows);
        for b in 0..batch {
            let seq = self.sample(self.context + seq_len, rng);
            for i in 0..seq_len {
                let row = b * seq_len + i;
                for (k, &ch) in seq[i..i + self.context].iter().enumerate() {
                    x[(row, k * self.vocab + ch)] = 1.0;
                }
                labels.push(seq[i + self.context]);
            }
        }
        Batch::classification(x, labels).with_shape(BatchShape { batch, seq_len })
    }
}

/// Batch source for one experiment. Batch `t` is drawn from a stream keyed by `t`, so every
/// tracker in a paired comparison sees exactly the same data.
#[derive(Debug, Clone)]
pub struct TaskStream {
    task: Task,
    train: Rng,
    eval: Rng,
    batch: usize,
    seq_len: usize,
    eval_rows: usize,
}

#[derive(Debug, Clone)]
enum Task {
    Regression(DriftingTask),
    Classify(DriftingTask),
    Chars(CharChain),
}

const TASK_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

impl TaskStream {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let root = Rng::new(cfg.seed);
        let mut task_rng = root.fork(TASK_STREAM);
        let task = match cfg.task {
            TaskKind::Regression => {
                Task::Regression(DriftingTask::new(cfg.d, cfg.r_true, cfg.m, 0.0, cfg.noise, &mut task_rng)?)
            }
            TaskKind::DriftingRegression => Task::Regression(DriftingTask::new(
                cfg.d,
                cfg.r_true,
                cfg.m,
                cfg.rotation_rate,
                cfg.noise,
                &mut task_rng,
            )?),
            TaskKind::MlpClassify => Task::Classify(DriftingTask::new(
                cfg.d,
                cfg.r_true,
                cfg.m,
                cfg.rotation_rate,
                cfg.noise,
                &mut task_rng,
            )?),
            TaskKind::CharSeq => Task::Chars(CharChain::new(cfg.vocab, cfg.context, &mut task_rng)?),
        };
        Ok(Self {
            task,
            train: root.fork(TRAIN_STREAM),
            eval: root.fork(EVAL_STREAM),
            batch: cfg.batch,
            seq_len: cfg.seq_len,
            eval_rows: cfg.eval_rows,
        })
    }

    /// Training batch for step `t` (`t = 0` is the initialization batch).
    pub fn train_batch(&self, t: usize) -> Batch {
        self.draw(t, self.batch, &mut self.train.fork(t as u64))
    }

    /// Held-out batch drawn from the data distribution at step `t`.
    pub fn eval_batch(&self, t: usize) -> Batch {
        let sequences = self.eval_rows.div_ceil(self.seq_len);
        self.draw(t, sequences, &mut self.eval.fork(t as u64))
    }

    fn draw(&self, t: usize, sequences: usize, rng: &mut Rng) -> Batch {
        let rows = sequences * self.seq_len;
        match &self.task {
            Task::Regression(task) => {
                task.regression(t, rows, rng).with_shape(BatchShape { batch: sequences, seq_len: self.seq_len })
            }
            Task::Classify(task) => {
                task.classification(t, rows, rng).with_shape(BatchShape { batch: sequences, seq_len: self.seq_len })
            }
            Task::Chars(chain) => chain.batch(sequences, self.seq_len, rng),
        }
    }

    pub fn drifting(&self) -> Option<&DriftingTask> {
        match &self.task {
            Task::Regression(t) | Task::Classify(t) => Some(t),
            Task::Chars(_) => None,
        }
    }
}
