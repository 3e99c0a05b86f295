//! Acceptance suite: one PASS/FAIL line per criterion; exits nonzero on any
//! failure.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use cfw::fairmetrics::{
    accuracy_suite, delta_dp, delta_eo, off_diagonal_cells, weighted_mean_accuracy,
    PredictionRecords,
};
use cfw::linmodel::{gradient_check, LinearClassifier};
use cfw::matops::{frobenius_residual, inv_sqrt, InvSqrtMethod, Matrix};
use cfw::pipeline::{
    execute_run, run_experiment, sweep_to_csv, ArmResult, DataSource, OneOrMany, RunConfig,
    RunReport,
};
use cfw::synthdata::{generate, SynthSpec};
use cfw::whiten::{certificate, fit, WhitenConfig};
use common::{random_spd, rel_frobenius};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn solvers() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_res, mut worst_agree, mut compared) = (0.0f64, 0.0f64, 0);
    for i in 0..100 {
        let n = rng.random_range(2..=64);
        // first half κ ≤ 100, second half 100 < κ ≤ 1000
        let kappa = if i < 50 {
            10f64.powf(rng.random_range(0.0..=2.0))
        } else {
            10f64.powf(rng.random_range(2.0..=3.0))
        };
        let a = random_spd(n, kappa, &mut rng);
        let mut zca = None;
        let mut ns = None;
        for method in InvSqrtMethod::ALL {
            let r = inv_sqrt(&a, method, 20, 0.0).map_err(|e| format!("{method} failed: {e}"))?;
            let res = frobenius_residual(&r.matrix, &a).map_err(|e| e.to_string())?;
            worst_res = worst_res.max(res);
            match method {
                InvSqrtMethod::Zca => zca = Some(r.matrix),
                InvSqrtMethod::NewtonSchulz => ns = Some(r.matrix),
                InvSqrtMethod::Cholesky => {}
            }
        }
        if kappa <= 100.0 {
            let d = rel_frobenius(&ns.unwrap(), &zca.unwrap());
            worst_agree = worst_agree.max(d);
            compared += 1;
        }
    }
    check(
        worst_res <= 1e-6 && worst_agree <= 1e-6,
        format!("max residual {worst_res:.2e} (≤ 1e-6), max ZCA/NS disagreement {worst_agree:.2e} over {compared} matrices (≤ 1e-6)"),
    )
}

fn whitening_certificate() -> Outcome {
    let spec = SynthSpec {
        n_samples: 20000,
        target_dim: 8,
        bias_dim: 8,
        test_per_cell: 1,
        ..SynthSpec::default()
    };
    let set = generate(&spec).map_err(|e| e.to_string())?.train;
    let (mut worst_id, mut worst_ols) = (0.0f64, 0.0f64);
    for lambda in [0.0, 0.25, 0.5, 1.0] {
        for method in InvSqrtMethod::ALL {
            let cfg = WhitenConfig {
                lambda,
                method,
                iterations: 20,
                ..WhitenConfig::default()
            };
            let f = fit(&set.target, &set.bias, &set.y, &set.b, 2, 2, &cfg)
                .map_err(|e| format!("λ={lambda} {method}: {e}"))?;
            let w = f.sample_weights(&set.y, &set.b);
            let c = certificate(&f.transform, &set.target, &set.bias, &w).map_err(|e| e.to_string())?;
            worst_id = worst_id.max(c.identity_max_error);
            worst_ols = worst_ols.max(c.ols_norm);
        }
    }
    check(
        worst_id <= 1e-4 && worst_ols <= 1e-4,
        format!("max |Cov_λ(z_w) − I| {worst_id:.2e}, max OLS norm {worst_ols:.2e} over λ ∈ {{0, 0.25, 0.5, 1}} × {{zca, cd, cns@20}} (both ≤ 1e-4)"),
    )
}

fn records(y_hat: Vec<usize>, y: Vec<usize>, b: Vec<usize>) -> PredictionRecords {
    PredictionRecords::new(y_hat, y, b, 2, 2).unwrap()
}

/// `count` copies of each `(y_hat, y, b)` triple.
fn expand(spec: &[(usize, usize, usize, usize)]) -> PredictionRecords {
    let (mut yh, mut y, mut b) = (Vec::new(), Vec::new(), Vec::new());
    for &(p, t, g, count) in spec {
        for _ in 0..count {
            yh.push(p);
            y.push(t);
            b.push(g);
        }
    }
    records(yh, y, b)
}

fn metric_fixtures() -> Outcome {
    let mut fails = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-15 {
            fails.push(format!("{name}: {got} ≠ {want}"));
        }
    };
    // P(ŷ=1|b=0) = 0.8, P(ŷ=1|b=1) = 0.6
    let r = expand(&[(1, 1, 0, 8), (0, 0, 0, 2), (1, 1, 1, 6), (0, 0, 1, 4)]);
    expect("ΔDP 0.8 vs 0.6", delta_dp(&r).unwrap(), 0.2);
    let r = expand(&[(1, 1, 0, 3), (0, 0, 0, 2), (1, 0, 1, 3), (0, 1, 1, 2)]);
    expect("ΔDP independent of B", delta_dp(&r).unwrap(), 0.0);
    let r = records(vec![0, 1, 0, 1], vec![0, 0, 1, 1], vec![0, 1, 0, 1]);
    expect("ΔDP ŷ = b", delta_dp(&r).unwrap(), 1.0);
    let r = records(vec![0, 1, 1, 0], vec![0, 1, 1, 0], vec![0, 0, 1, 1]);
    expect("ΔEO perfect", delta_eo(&r).unwrap(), 0.0);
    // TPR 0.9 vs 0.5 on y = 1, TNR 0.7 in both groups on y = 0
    let r = expand(&[
        (1, 1, 0, 9), (0, 1, 0, 1), (1, 1, 1, 5), (0, 1, 1, 5),
        (0, 0, 0, 7), (1, 0, 0, 3), (0, 0, 1, 7), (1, 0, 1, 3),
    ]);
    expect("ΔEO TPR 0.9 vs 0.5", delta_eo(&r).unwrap(), 0.2);
    let r = records(vec![1; 4], vec![0, 1, 0, 1], vec![0, 0, 1, 1]);
    expect("ΔEO constant", delta_eo(&r).unwrap(), 0.0);

    let cs = off_diagonal_cells(2, 2);
    // per-cell accuracies 1, 0.5, 0.5, 1
    let r = expand(&[(0, 0, 0, 2), (0, 0, 1, 1), (1, 0, 1, 1), (1, 1, 0, 1), (0, 1, 0, 1), (1, 1, 1, 2)]);
    let a = accuracy_suite(&r, &cs).unwrap();
    expect("unbiased", a.unbiased, 0.75);
    expect("conflicting", a.conflicting, 0.5);
    expect("worst", a.worst_group, 0.5);
    let r = records(vec![0, 0, 1, 1], vec![0, 0, 1, 1], vec![0, 1, 0, 1]);
    let a = accuracy_suite(&r, &cs).unwrap();
    expect("perfect unbiased", a.unbiased, 1.0);
    expect("perfect conflicting", a.conflicting, 1.0);
    expect("perfect worst", a.worst_group, 1.0);
    let r = records(vec![0, 1, 0, 0], vec![0, 0, 1, 1], vec![0, 1, 0, 1]);
    let a = accuracy_suite(&r, &cs).unwrap();
    expect("only (0,0) worst", a.worst_group, 0.0);
    expect("only (0,0) unbiased", a.unbiased, 0.25);
    let r = records(vec![0, 1, 0, 1], vec![0, 0, 1, 1], vec![0, 1, 0, 1]);
    expect("weighted 0.45/0.05", weighted_mean_accuracy(&r, &[0.45, 0.05, 0.05, 0.45]).unwrap(), 0.9);
    expect("weighted uniform", weighted_mean_accuracy(&r, &[0.25; 4]).unwrap(), accuracy_suite(&r, &cs).unwrap().unbiased);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let nc = rng.random_range(2..5);
        let nb = rng.random_range(2..5);
        let per_cell = rng.random_range(1..8);
        let f: Vec<usize> = (0..nc).map(|_| rng.random_range(0..nc)).collect();
        let (mut yh, mut y, mut b) = (Vec::new(), Vec::new(), Vec::new());
        for g in 0..nc * nb {
            for _ in 0..per_cell {
                y.push(g / nb);
                b.push(g % nb);
                yh.push(f[g / nb]);
            }
        }
        let r = PredictionRecords::new(yh, y, b, nc, nb).unwrap();
        worst = worst.max((delta_dp(&r).unwrap() - delta_eo(&r).unwrap()).abs());
    }
    if worst > 1e-12 {
        fails.push(format!("|ΔDP − ΔEO| = {worst:.2e} under independence"));
    }
    check(
        fails.is_empty(),
        if fails.is_empty() {
            format!("all fixtures within 1e-15; max |ΔDP − ΔEO| {worst:.1e} on 500 independent record sets")
        } else {
            fails.join("; ")
        },
    )
}

const LAMBDAS: [f64; 4] = [0.0, 0.25, 0.5, 1.0];
const SEEDS: [u64; 3] = [0, 1, 2];

fn benchmark_run() -> Result<RunReport, String> {
    let cfg = RunConfig {
        run_id: "tradeoff".into(),
        data: DataSource::Synthetic { spec: SynthSpec::benchmark(0) },
        lambda: OneOrMany::Many(LAMBDAS.to_vec()),
        method: OneOrMany::One(InvSqrtMethod::Zca),
        seeds: SEEDS.to_vec(),
        ..RunConfig::default()
    };
    run_experiment(&cfg).map_err(|e| e.to_string())
}

fn arm(r: &RunReport, lambda: f64, seed: u64) -> &ArmResult {
    r.arms.iter().find(|a| a.arm.lambda == lambda && a.seed == seed).unwrap()
}

fn tradeoff() -> Outcome {
    let r = benchmark_run()?;
    let mut fails = Vec::new();
    let mut summary = Vec::new();
    for seed in SEEDS {
        let dp: Vec<f64> = LAMBDAS.iter().map(|&l| arm(&r, l, seed).target_head.train.delta_dp).collect();
        let eo: Vec<f64> = LAMBDAS.iter().map(|&l| arm(&r, l, seed).target_head.train.delta_eo).collect();
        if dp.iter().any(|&v| dp[0] > v + 0.02) {
            fails.push(format!("seed {seed}: ΔDP(λ=0) not minimal {dp:.3?}"));
        }
        if eo.iter().any(|&v| eo[3] > v + 0.02) {
            fails.push(format!("seed {seed}: ΔEO(λ=1) not minimal {eo:.3?}"));
        }
        summary.push(format!("seed {seed} ΔDP {dp:.3?} ΔEO {eo:.3?}"));
    }
    check(fails.is_empty(), if fails.is_empty() { summary.join("; ") } else { fails.join("; ") })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn vanilla_vs_cfw() -> Outcome {
    let r = benchmark_run()?;
    let vanilla_wg = mean(r.baselines.iter().map(|b| b.head.test.acc_worst_group));
    let vanilla_gap = mean(r.baselines.iter().map(|b| b.head.test.aligned_conflicting_gap().unwrap()));
    let cfw_wg = mean(SEEDS.iter().map(|&s| arm(&r, 0.25, s).target_head.test.acc_worst_group));
    let cfw0_gap = mean(SEEDS.iter().map(|&s| arm(&r, 0.0, s).target_head.test.aligned_conflicting_gap().unwrap()));
    check(
        cfw_wg - vanilla_wg >= 0.15 && vanilla_gap >= 0.20 && cfw0_gap.abs() < 0.08,
        format!(
            "worst-group vanilla {vanilla_wg:.3} → CFW λ=0.25+LW {cfw_wg:.3} (gain ≥ 0.15); aligned−conflicting gap vanilla {vanilla_gap:.3} (≥ 0.20) → CFW λ=0 {cfw0_gap:.3} (|·| < 0.08)"
        ),
    )
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let k = rng.random_range(2..=5);
        let d = rng.random_range(1..=6);
        let n = rng.random_range(1..=15);
        let x = Matrix::from_fn(d, n, |_, _| rng.random_range(-2.0..2.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let weights: Option<Vec<f64>> = rng
            .random_bool(0.5)
            .then(|| (0..n).map(|_| rng.random_range(0.1..3.0)).collect());
        let l2 = if rng.random_bool(0.5) { rng.random_range(0.0..0.1) } else { 0.0 };
        let clf = LinearClassifier {
            weights: Matrix::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0)),
            bias: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let e = gradient_check(&x, &labels, weights.as_deref(), &clf, l2, 1e-5).map_err(|e| e.to_string())?;
        worst = worst.max(e);
    }
    check(worst <= 1e-5, format!("max relative error {worst:.2e} over 20 instances (≤ 1e-5)"))
}

fn determinism() -> Outcome {
    let cfg = RunConfig {
        run_id: "determinism".into(),
        data: DataSource::Synthetic {
            spec: SynthSpec { n_samples: 4000, test_per_cell: 200, ..SynthSpec::benchmark(3) },
        },
        lambda: OneOrMany::Many(vec![0.0, 0.25]),
        method: OneOrMany::Many(vec![InvSqrtMethod::Zca, InvSqrtMethod::NewtonSchulz]),
        lw_enabled: OneOrMany::Many(vec![false, true]),
        seeds: vec![0, 1],
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let (_, files) = execute_run(&cfg, Some(&dir.path().join(name))).map_err(|e| e.to_string())?;
        let csv = std::fs::read(&files.report_csv).map_err(|e| e.to_string())?;
        let json = std::fs::read(&files.report_json).map_err(|e| e.to_string())?;
        outputs.push((csv, json));
    }
    check(
        outputs[0] == outputs[1],
        format!("report.csv ({} bytes) and report.json identical across two runs", outputs[0].0.len()),
    )
}

fn ablation() -> Outcome {
    let cfg = RunConfig {
        run_id: "ablation".into(),
        data: DataSource::Synthetic { spec: SynthSpec::benchmark(0) },
        lambda: OneOrMany::Many(vec![0.0, 0.25, 1.0]),
        method: OneOrMany::Many(InvSqrtMethod::ALL.to_vec()),
        iterations: OneOrMany::Many(vec![3, 5, 7]),
        seeds: vec![0, 1],
        ..RunConfig::default()
    };
    let r = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let csv = sweep_to_csv(&r);
    let mut fails = Vec::new();
    // zca, cd and cns at three T values per λ
    if r.arms.len() != 3 * 5 * 2 {
        fails.push(format!("{} arm results, expected 30", r.arms.len()));
    }
    for label in ["zca+lw,0", "cd+lw,0", "cns+lw,3", "cns+lw,5", "cns+lw,7"] {
        if !csv.contains(label) {
            fails.push(format!("no CSV rows for {label}"));
        }
    }
    let mut ratios = Vec::new();
    for seed in [0, 1] {
        for lambda in [0.0, 0.25, 1.0] {
            let res = |t: usize| {
                r.arms
                    .iter()
                    .find(|a| a.seed == seed && a.arm.lambda == lambda && a.arm.method == InvSqrtMethod::NewtonSchulz && a.arm.iterations == t)
                    .map(|a| a.fit_residual)
                    .unwrap()
            };
            let (r3, r7) = (res(3), res(7));
            ratios.push(r7 / r3);
            if r7 > r3 {
                fails.push(format!("seed {seed} λ={lambda}: residual T=7 {r7:.3e} > T=3 {r3:.3e}"));
            }
        }
    }
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    check(
        fails.is_empty(),
        if fails.is_empty() {
            format!("30 arms reported; cNS residual(T=7)/residual(T=3) ≤ {worst:.3} on all 6 fitted Σ_λ")
        } else {
            fails.join("; ")
        },
    )
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "solver correctness", budget: Some(Duration::from_secs(10)), run: solvers },
        Criterion { id: 2, name: "whitening certificate", budget: Some(Duration::from_secs(30)), run: whitening_certificate },
        Criterion { id: 3, name: "metric fixtures", budget: None, run: metric_fixtures },
        Criterion { id: 4, name: "lambda trade-off ordering", budget: Some(Duration::from_secs(300)), run: tradeoff },
        Criterion { id: 5, name: "vanilla vs CFW direction", budget: None, run: vanilla_vs_cfw },
        Criterion { id: 6, name: "gradient check", budget: None, run: gradients },
        Criterion { id: 7, name: "determinism", budget: None, run: determinism },
        Criterion { id: 8, name: "solver ablation harness", budget: None, run: ablation },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let over = c.budget.filter(|b| elapsed > *b);
        let (status, detail) = match (&outcome, over) {
            (Ok(d), None) => ("PASS", d.clone()),
            (Ok(d), Some(b)) => ("FAIL", format!("{d}; runtime over budget of {}s", b.as_secs())),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} [{}] {} ({:.1}s): {detail}", c.id, c.name, elapsed.as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
