//! Acceptance gate. Runs every criterion at its stated tolerance and runtime budget and
//! prints one PASS/FAIL line per criterion. Exits non-zero if any criterion fails.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use oasis_core::numerics::{singular_values, sym_eig_topr, Matrix, Rng};
use oasis_core::optim::{apply_update, AdamHyper, LowRankAdamState};
use oasis_core::subspace::{
    covariance, drift, fixed_step, max_principal_angle, oja_step, orthonormality_error, periodic_pca_step, OjaConfig,
    SubspaceBasis, TrackerKind, TransitionMatrix,
};
use oasis_core::traingraph::{Batch, Footprint, LayerConfig, LinearLayer, LossKind, Model};
use oasis_harness::config::{TaskKind, TrackerName};
use oasis_harness::experiment::{execute, LEDGER_FILE, METRICS_FILE};
use oasis_harness::{run_experiment, ExperimentConfig};
use rayon::prelude::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Elementwise Adam, the reference for criterion 1.
fn scalar_adam(w: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], t: i32, h: &AdamHyper) {
    for i in 0..w.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let m_hat = m[i] / (1.0 - h.beta1.powi(t));
        let v_hat = v[i] / (1.0 - h.beta2.powi(t));
        w[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

fn c1_full_rank_adam() -> Verdict {
    let mut worst = 0.0_f64;
    for seed in 0..5 {
        let (d, m) = (8, 5);
        let hyper = AdamHyper::with_lr(1e-2);
        let mut rng = Rng::new(seed);
        let mut w = rng.normal_matrix(d, m);
        let mut w_ref = w.as_slice().to_vec();
        let (mut m1, mut v1) = (vec![0.0; d * m], vec![0.0; d * m]);
        let basis = SubspaceBasis::identity(d, d);
        let mut state = LowRankAdamState::new(d, m);
        for t in 1..=150 {
            let g = rng.normal_matrix(d, m).scale(rng.uniform(0.05, 5.0));
            let dir = state.step(&g, &TransitionMatrix::identity(d, 0, 0), &hyper, "w").unwrap();
            w = apply_update(&w, &basis, &dir, hyper.lr).unwrap();
            scalar_adam(&mut w_ref, &mut m1, &mut v1, g.as_slice(), t, &hyper);
            let reference = Matrix::from_vec(d, m, w_ref.clone()).unwrap();
            worst = worst.max(w.sub(&reference).unwrap().fro_norm() / reference.fro_norm());
        }
    }
    verdict(worst <= 1e-10, format!("max relative divergence {worst:.2e} over 5 x 150 steps (tol 1e-10)"))
}

fn c2_oja_convergence() -> Verdict {
    let mut diag = vec![0.25; 8];
    diag[0] = 4.0;
    diag[1] = 1.0;
    let c = Matrix::diag(&diag);
    let oracle = sym_eig_topr(&c, 2).unwrap().vectors;
    let cfg = OjaConfig::with_gamma(0.1);
    let mut angles = Vec::new();
    for seed in 0..10 {
        let mut u = SubspaceBasis::new(Rng::new(seed).orthonormal(8, 2), 0).unwrap();
        let mut best = f64::INFINITY;
        for _ in 0..500 {
            u = oja_step(&u, &c, &cfg).unwrap().0;
            best = best.min(max_principal_angle(&oracle, u.matrix()).unwrap());
        }
        angles.push(best);
    }
    let misses: Vec<String> =
        angles.iter().enumerate().filter(|(_, &a)| a >= 1e-3).map(|(s, a)| format!("seed {s}: {a:.3e}")).collect();
    let worst = angles.iter().cloned().fold(0.0, f64::max);
    verdict(
        misses.is_empty(),
        format!("worst angle within 500 steps {worst:.3e} (tol 1e-3); misses [{}]", misses.join(", ")),
    )
}

fn c3_projection_optimality() -> Verdict {
    let mut rng = Rng::new(3);
    let mut worst_proj = 0.0_f64;
    let mut worst_normal = 0.0_f64;
    for _ in 0..25 {
        let d = 2 + rng.below(63);
        let n = 1 + rng.below(256);
        let m = 1 + rng.below(32);
        let r = 1 + rng.below(d);
        let x = rng.normal_matrix(n, d);
        let g_out = rng.normal_matrix(n, m);
        let cfg = LayerConfig::new(r, TrackerKind::Oja(OjaConfig::default()));
        let mut layer = LinearLayer::new("w", rng.normal_matrix(d, m), cfg).unwrap();
        layer.forward(&x).unwrap();
        let u = layer.basis().unwrap().matrix().clone();
        let (_, g_tilde) = layer.backward(&g_out).unwrap();
        let full = x.t_matmul(&g_out).unwrap();
        let lifted = u.matmul(&g_tilde).unwrap();
        let projected = u.matmul(&u.t_matmul(&full).unwrap()).unwrap();
        let scale = full.fro_norm().max(1.0);
        worst_proj = worst_proj.max(lifted.sub(&projected).unwrap().fro_norm() / scale);
        worst_normal = worst_normal.max(u.t_matmul(&lifted.sub(&full).unwrap()).unwrap().fro_norm() / scale);
    }
    verdict(
        worst_proj <= 1e-10 && worst_normal <= 1e-10,
        format!("projection error {worst_proj:.2e}, normal equations {worst_normal:.2e} (tol 1e-10, 25 instances)"),
    )
}

fn c4_drift_contract() -> Verdict {
    let tm = |m: Matrix| TransitionMatrix { matrix: m, from_step: 0, to_step: 1 };
    let identity = drift(&tm(Matrix::identity(3)), 3);
    let zero = drift(&tm(Matrix::zeros(3, 3)), 3);
    let half = drift(&tm(Matrix::diag(&[1.0, 0.0])), 2);
    let mut rng = Rng::new(4);
    let mut in_range = true;
    let mut worst_rotation = 0.0_f64;
    for _ in 0..200 {
        let d = 2 + rng.below(20);
        let r = 1 + rng.below(d);
        let a = SubspaceBasis::new(rng.orthonormal(d, r), 0).unwrap();
        let b = SubspaceBasis::new(rng.orthonormal(d, r), 1).unwrap();
        let v = drift(&TransitionMatrix::between(&b, &a).unwrap(), r);
        in_range &= (0.0..=1.0).contains(&v);
        let rotated = SubspaceBasis::new(a.matrix().matmul(&rng.orthonormal(r, r)).unwrap(), 1).unwrap();
        worst_rotation = worst_rotation.max(drift(&TransitionMatrix::between(&rotated, &a).unwrap(), r));
    }
    let exact = identity.abs() <= 1e-12 && (zero - 1.0).abs() <= 1e-12 && (half - 0.5f64.sqrt()).abs() <= 1e-12;
    verdict(
        exact && in_range && worst_rotation < 1e-8,
        format!(
            "drift(I)={identity:.1e}, drift(0)={zero}, drift(diag(1,0))={half:.15}, random pairs in [0,1]: {in_range}, worst in-span rotation {worst_rotation:.1e}"
        ),
    )
}

fn c5_ledger_arithmetic() -> Verdict {
    let (d, m, r, n) = (1024, 512, 32, 2048);
    let fp = Footprint::Linear { name: "w".into(), d, m, rank: Some(r), rows: n };
    let (entry, baseline) = fp.entries(2);
    let act_ok = entry.activation_bytes == 131_072 && baseline.activation_bytes == 4_194_304;
    let ratio = |a: u64, b: u64| b as f64 / a as f64;
    let ratios = [
        ratio(entry.activation_bytes, baseline.activation_bytes),
        ratio(entry.gradient_bytes, baseline.gradient_bytes),
        ratio(entry.optimizer_bytes, baseline.optimizer_bytes),
    ];
    let exact = ratios.iter().all(|&q| q == (d / r) as f64);
    let explicit = entry.gradient_bytes == (r * m * 2) as u64 && entry.optimizer_bytes == (2 * r * m * 2) as u64;
    verdict(
        act_ok && exact && explicit,
        format!(
            "activation {} vs {} bytes; baseline/compressed ratios act {} grad {} opt {} (expect 32)",
            entry.activation_bytes, baseline.activation_bytes, ratios[0], ratios[1], ratios[2]
        ),
    )
}

fn drifting_base() -> ExperimentConfig {
    ExperimentConfig {
        task: TaskKind::DriftingRegression,
        d: 64,
        r_true: 4,
        // true-basis drift sin(0.05) = 0.04998 per step
        rotation_rate: 0.05,
        steps: 2000,
        eval_every: 500,
        ..Default::default()
    }
}

fn mean_final_loss(cfg: &ExperimentConfig) -> f64 {
    let losses: Vec<f64> = (0..3u64)
        .map(|seed| {
            let out = execute(&ExperimentConfig { seed, ..cfg.clone() }).unwrap();
            assert!(out.succeeded(), "{:?}", out.failure);
            out.final_eval().unwrap()
        })
        .collect();
    losses.iter().sum::<f64>() / losses.len() as f64
}

fn c6_drifting_ablation() -> Verdict {
    let base = drifting_base();
    let mut cells = Vec::new();
    for rank in [2, 4, 8] {
        cells.push((rank, "oja", ExperimentConfig { rank, tracker: TrackerName::Oja, gamma: 0.1, ..base.clone() }));
        for interval in [10, 50, 200] {
            cells.push((rank, "pca", ExperimentConfig { rank, tracker: TrackerName::PeriodicPca, interval, ..base.clone() }));
        }
        cells.push((rank, "fixed", ExperimentConfig { rank, tracker: TrackerName::Fixed, ..base.clone() }));
    }
    let losses: Vec<f64> = cells.par_iter().map(|(_, _, cfg)| mean_final_loss(cfg)).collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, rank) in [2, 4, 8].into_iter().enumerate() {
        let l = &losses[5 * k..5 * k + 5];
        let (oja, pca, fixed) = (l[0], l[1].min(l[2]).min(l[3]), l[4]);
        let gain = (fixed - oja) / fixed;
        let ok = oja <= pca && pca <= fixed && gain >= 0.2;
        pass &= ok;
        parts.push(format!(
            "r={rank} {}: oja {oja:.4e} pca-best {pca:.4e} fixed {fixed:.4e} gain {:.0}%",
            if ok { "ok" } else { "violated" },
            100.0 * gain
        ));
    }
    verdict(pass, parts.join("; "))
}

fn c7_gamma_sweep() -> Verdict {
    let base = ExperimentConfig { rank: 4, tracker: TrackerName::Oja, ..drifting_base() };
    let gammas = [0.001, 0.01, 0.1, 1.0];
    let losses: Vec<f64> = gammas.par_iter().map(|&gamma| mean_final_loss(&ExperimentConfig { gamma, ..base.clone() })).collect();
    let pass = losses[2] <= losses[0] && losses[2] <= losses[3];
    let table: Vec<String> = gammas.iter().zip(&losses).map(|(g, l)| format!("{g}: {l:.4e}")).collect();
    verdict(pass, format!("mean final loss by gamma [{}]; need gamma 0.1 <= gamma 0.001 and gamma 1.0", table.join(", ")))
}

fn c8_finite_differences() -> Verdict {
    let (n, d, h, k) = (32, 6, 5, 4);
    let mut rng = Rng::new(8);
    let cfg = LayerConfig::new(d, TrackerKind::Oja(OjaConfig::default()));
    let mut model = Model::mlp2(d, h, k, LossKind::SoftmaxCrossEntropy, cfg, &mut rng).unwrap();
    let x = rng.normal_matrix(n, d);
    let labels = (0..n).map(|_| rng.below(k)).collect();
    let batch = Batch::classification(x, labels);
    model.compute_gradients(&batch).unwrap();
    let step = 1e-5;
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let b = rng.below(2);
        let layer = &model.blocks()[b].linear;
        let grad = layer.materialized_gradient().unwrap();
        let (i, j) = (rng.below(layer.in_dim()), rng.below(layer.out_dim()));
        let w = layer.weight().clone();
        let loss_at = |delta: f64| {
            let mut probe = model.clone();
            let mut wp = w.clone();
            wp[(i, j)] += delta;
            probe.blocks_mut()[b].linear.set_weight(wp).unwrap();
            probe.loss(&batch).unwrap()
        };
        let fd = (loss_at(step) - loss_at(-step)) / (2.0 * step);
        let an = grad[(i, j)];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8));
    }
    verdict(worst < 1e-4, format!("worst relative error {worst:.2e} on 20 coordinates (tol 1e-4)"))
}

fn c9_determinism() -> Verdict {
    let tmp = std::env::temp_dir().join(format!("oasis-acceptance-{}", std::process::id()));
    let mut identical = true;
    let mut checked = 0;
    for task in [TaskKind::DriftingRegression, TaskKind::MlpClassify, TaskKind::CharSeq] {
        let a = ExperimentConfig { task, steps: 300, eval_every: 50, output_dir: tmp.join(format!("{task:?}-a")), ..drifting_base() };
        let b = ExperimentConfig { output_dir: tmp.join(format!("{task:?}-b")), ..a.clone() };
        run_experiment(&a).unwrap();
        run_experiment(&b).unwrap();
        for f in [METRICS_FILE, LEDGER_FILE] {
            identical &= fs::read(a.output_dir.join(f)).unwrap() == fs::read(b.output_dir.join(f)).unwrap();
            checked += 1;
        }
    }
    let _ = fs::remove_dir_all(&tmp);
    verdict(identical, format!("{checked} file pairs compared byte for byte across 3 tasks"))
}

fn c10_invariants() -> Verdict {
    let mut rng = Rng::new(10);
    let mut worst_ortho = 0.0_f64;
    let mut min_v = f64::INFINITY;
    let mut worst_rank_excess = 0.0_f64;
    let mut worst_scale = 0.0_f64;
    let mut forward_exact = true;
    for _ in 0..40 {
        let d = 2 + rng.below(14);
        let r = 1 + rng.below(d);
        let m = 1 + rng.below(5);
        let start = SubspaceBasis::new(rng.orthonormal(d, r), 0).unwrap();
        let (mut oja, mut pca, mut fixed) = (start.clone(), start.clone(), start);
        let mut state = LowRankAdamState::new(r, m);
        let hyper = AdamHyper::with_lr(1e-2);
        let mut w = rng.normal_matrix(d, m);
        for t in 1..=20 {
            let c = covariance(&rng.normal_matrix(d + 3, d));
            let (next, transition) = oja_step(&oja, &c, &OjaConfig::default()).unwrap();
            pca = periodic_pca_step(&pca, &c, 3, t).unwrap().0;
            fixed = fixed_step(&fixed).0;
            for u in [&next, &pca, &fixed] {
                worst_ortho = worst_ortho.max(orthonormality_error(u.matrix()));
            }
            let dir = state.step(&rng.normal_matrix(r, m), &transition, &hyper, "w").unwrap();
            min_v = state.v.as_slice().iter().cloned().fold(min_v, f64::min);
            let w_new = apply_update(&w, &next, &dir, hyper.lr).unwrap();
            let sv = singular_values(&w_new.sub(&w).unwrap());
            let top = sv[0].max(1e-300);
            worst_rank_excess = sv.iter().skip(r).fold(worst_rank_excess, |acc, &s| acc.max(s / top));
            w = w_new;

            let alpha = 10f64.powf(rng.uniform(-3.0, 3.0));
            let scaled = oja_step(&oja, &c.scale(alpha), &OjaConfig::default()).unwrap().0;
            worst_scale = worst_scale.max(scaled.matrix().sub(next.matrix()).unwrap().max_abs());
            oja = next;
        }
        let x = rng.normal_matrix(d + 4, d);
        let weight = rng.normal_matrix(d, m);
        let mut layer = LinearLayer::new("w", weight.clone(), LayerConfig::new(r, TrackerKind::Oja(OjaConfig::default()))).unwrap();
        forward_exact &= layer.forward(&x).unwrap() == x.matmul(&weight).unwrap();
    }
    let pass = worst_ortho < 1e-8 && min_v >= 0.0 && worst_rank_excess < 1e-10 && worst_scale < 1e-12 && forward_exact;
    verdict(
        pass,
        format!(
            "orthonormality {worst_ortho:.1e}, min V {min_v:.1e}, trailing singular value ratio {worst_rank_excess:.1e}, scale equivariance {worst_scale:.1e}, forward exact {forward_exact}"
        ),
    )
}

type Criterion = (u32, &'static str, fn() -> Verdict, Option<Duration>);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "full-rank Adam equivalence", c1_full_rank_adam, Some(Duration::from_secs(10))),
        (2, "Oja convergence oracle", c2_oja_convergence, Some(Duration::from_secs(5))),
        (3, "gradient projection optimality", c3_projection_optimality, Some(Duration::from_secs(5))),
        (4, "drift metric contract", c4_drift_contract, None),
        (5, "memory ledger arithmetic", c5_ledger_arithmetic, None),
        (6, "drifting-task ablation ordering", c6_drifting_ablation, Some(Duration::from_secs(300))),
        (7, "subspace-LR sweep shape", c7_gamma_sweep, Some(Duration::from_secs(300))),
        (8, "finite-difference gradient check", c8_finite_differences, None),
        (9, "determinism", c9_determinism, None),
        (10, "invariant suite", c10_invariants, None),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, check, budget) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let in_budget = budget.is_none_or(|b| elapsed <= b);
        let pass = v.pass && in_budget;
        let budget_note = budget.map_or(String::new(), |b| format!(" / budget {}s", b.as_secs()));
        println!(
            "criterion {id:>2} {}: {name}: {} [{:.2}s{budget_note}]",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64()
        );
        if !pass {
            failed += 1;
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
