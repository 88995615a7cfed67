//! End-to-end acceptance checks. Runs every criterion, prints one line per
//! criterion and exits non-zero if any of them fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use bartree_core::estimate::streaming_estimate;
use bartree_core::limits::{ell_direct, ell_fixed_point, ell_residual, t_matrix};
use bartree_core::model::is_stable;
use bartree_core::rng::Stream;
use bartree_core::simulate::simulate_tree_with_noise;
use bartree_core::{
    lambda_limit, ls_estimate, run_experiment, simulate_tree, BarParams, Check, ExperimentConfig,
    InitSpec, NoiseSpec, Tolerances, VerificationReport,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn reference_params() -> BarParams {
    BarParams::new(vec![1.0, 0.5], vec![2.0, 0.3]).unwrap()
}

fn reference(n: u32, replicates: usize, checks: Vec<Check>) -> ExperimentConfig {
    ExperimentConfig {
        params: reference_params(),
        noise: NoiseSpec::gaussian(1.0, 0.5).unwrap(),
        init: InitSpec::default(),
        n_generations: n,
        replicates,
        master_seed: 42,
        checks,
        tolerances: Tolerances::default(),
    }
}

fn describe(report: &VerificationReport) -> (bool, String) {
    let mut parts = Vec::new();
    for check in &report.checks {
        for s in &check.statistics {
            let mark = if s.pass { "ok" } else { "out" };
            parts.push(format!("{}={:.4} (target {:.4}, {mark})", s.name, s.value, s.target));
        }
    }
    (report.all_pass(), parts.join("; "))
}

fn exact_recovery() -> Outcome {
    let cases = [
        (BarParams::new(vec![1.0, 0.5], vec![2.0, 0.3]).unwrap(), vec![-3.0]),
        (BarParams::new(vec![0.5, 0.4, 0.2], vec![-1.0, 0.3, -0.25]).unwrap(), vec![2.0, -1.0, 4.0]),
        (
            BarParams::new(vec![0.2, 0.3, 0.1, 0.15], vec![1.0, -0.2, 0.25, 0.1]).unwrap(),
            vec![1.0, -2.0, 3.0, 0.5, -1.5, 2.5, -0.5],
        ),
    ];
    let mut worst: f64 = 0.0;
    for (params, init) in cases {
        let n = params.p as u32 + 4;
        let sample =
            simulate_tree_with_noise(&params, &InitSpec::Explicit { values: init }, n, 0, |_| (0.0, 0.0))
                .unwrap();
        let fit = ls_estimate(&sample, n).unwrap();
        let gap = (&fit.theta_hat - params.theta_vec()).amax();
        worst = worst.max(gap);
    }
    Outcome { pass: worst < 1e-9, detail: format!("max coordinate error {worst:.3e}") }
}

fn limit_consistency() -> Outcome {
    let mut stream = Stream::new(2024);
    let (mut worst_rel, mut worst_res, mut worst_closed) = (0.0f64, 0.0f64, 0.0f64);
    let mut draws = 0;
    while draws < 50 {
        let p = 1 + draws % 2;
        let mut coef = |scale: f64| scale * (2.0 * stream.uniform() - 1.0);
        let mut a = vec![coef(2.0)];
        let mut b = vec![coef(2.0)];
        for _ in 0..p {
            a.push(coef(0.9 / p as f64));
            b.push(coef(0.9 / p as f64));
        }
        let params = BarParams::new(a, b).unwrap();
        if !is_stable(&params).unwrap().stable {
            continue;
        }
        draws += 1;
        let sigma2 = 0.5 + stream.uniform();
        let lambda = lambda_limit(&params).unwrap();
        let pair = params.companion();
        let t = t_matrix(&params, sigma2, &lambda);
        let direct = ell_direct(&pair, &t).unwrap();
        let (iterated, _) = ell_fixed_point(&pair, &t).unwrap();
        worst_rel = worst_rel.max((&direct - &iterated).norm() / direct.norm());
        worst_res = worst_res.max(ell_residual(&pair, &t, &iterated));
        if p == 1 {
            let (x, y) = (&params.a, &params.b);
            let b_bar = (x[1] + y[1]) / 2.0;
            let l = (x[0] + y[0]) / 2.0 / (1.0 - b_bar);
            let ell = ((x[0] * x[0] + y[0] * y[0]) / 2.0 + sigma2 + l * (x[0] * x[1] + y[0] * y[1]))
                / (1.0 - (x[1] * x[1] + y[1] * y[1]) / 2.0);
            worst_closed = worst_closed.max((direct[(0, 0)] - ell).abs() / ell.abs());
            worst_closed = worst_closed.max((lambda[0] - l).abs() / l.abs().max(1e-300));
        }
    }
    Outcome {
        pass: worst_rel <= 1e-9 && worst_closed <= 1e-9 && worst_res <= 1e-10,
        detail: format!(
            "direct vs fixed point {worst_rel:.2e}, vs closed form {worst_closed:.2e}, residual {worst_res:.2e}"
        ),
    }
}

fn run_report(config: ExperimentConfig) -> Outcome {
    let report = run_experiment(&config).unwrap();
    let (pass, detail) = describe(&report);
    Outcome { pass, detail }
}

fn streaming_batch() -> Outcome {
    let params = [
        reference_params(),
        BarParams::new(vec![0.5, 0.4, 0.2], vec![-1.0, 0.3, -0.25]).unwrap(),
        BarParams::new(vec![0.2, 0.3, 0.1, 0.15], vec![1.0, -0.2, 0.25, 0.1]).unwrap(),
    ];
    let noise = NoiseSpec::gaussian(1.0, 0.5).unwrap();
    let (mut worst_theta, mut worst_inv) = (0.0f64, 0.0f64);
    for i in 0..100u64 {
        let p = &params[(i % 3) as usize];
        let n = 6 + (i % 5) as u32;
        let sample = simulate_tree(p, &noise, &InitSpec::default(), n, 1000 + i).unwrap();
        let batch = ls_estimate(&sample, n).unwrap();
        let (stream, state) = streaming_estimate(&sample, n).unwrap();
        worst_theta = worst_theta.max((&batch.theta_hat - &stream.theta_hat).norm() / batch.theta_hat.norm());
        let direct = state.s.clone().try_inverse().unwrap();
        let chained = state.s_inv.unwrap();
        worst_inv = worst_inv.max((&chained - &direct).norm() / direct.norm());
    }
    Outcome {
        pass: worst_theta <= 1e-8 && worst_inv <= 1e-8,
        detail: format!("theta relative gap {worst_theta:.2e}, inverse relative gap {worst_inv:.2e}"),
    }
}

fn bartree(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_bartree")).args(args).output().expect("binary runs")
}

fn without_runtime(text: &str) -> String {
    text.lines().filter(|l| !l.contains("\"runtime_seconds\"")).collect::<Vec<_>>().join("\n")
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let config = r#"{
  "params": {"p": 2, "a": [0.5, 0.4, 0.2], "b": [-1.0, 0.3, -0.25]},
  "noise": {"family": "rademacher-mixture-pair", "sigma2": 1.0, "rho": 0.3},
  "n_generations": 9,
  "replicates": 24,
  "master_seed": 7
}"#;
    std::fs::write(path("c.json"), config).unwrap();
    let c = path("c.json");
    let read = |name: &str| std::fs::read_to_string(Path::new(&path(name))).unwrap();

    let mut problems = Vec::new();
    for name in ["t1.csv", "t2.csv"] {
        let out = bartree(&["simulate", "--config", &c, "--out", &path(name)]);
        if !out.status.success() {
            problems.push(format!("simulate failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    for (jobs, name) in [("1", "r1.json"), ("4", "r4.json"), ("4", "r4b.json")] {
        let out = bartree(&["verify", "--config", &c, "--out", &path(name), "--jobs", jobs, "--emit-replicates"]);
        if !out.status.success() {
            problems.push(format!("verify failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    let lim1 = bartree(&["limits", "--config", &c]).stdout;
    let lim2 = bartree(&["limits", "--config", &c]).stdout;
    if problems.is_empty() {
        if read("t1.csv") != read("t2.csv") {
            problems.push("simulated trees differ".into());
        }
        let est1 = bartree(&["estimate", "--tree", &path("t1.csv"), "--p", "2"]).stdout;
        let est2 = bartree(&["estimate", "--tree", &path("t2.csv"), "--p", "2"]).stdout;
        if est1 != est2 || est1.is_empty() {
            problems.push("estimates differ".into());
        }
        if lim1 != lim2 || lim1.is_empty() {
            problems.push("limit documents differ".into());
        }
        let base = without_runtime(&read("r1.json"));
        for other in ["r4.json", "r4b.json"] {
            if without_runtime(&read(other)) != base {
                problems.push(format!("{other} differs from the single-thread report"));
            }
        }
        for other in ["r4.replicates.csv", "r4b.replicates.csv"] {
            if read(other) != read("r1.replicates.csv") {
                problems.push(format!("{other} differs from the single-thread table"));
            }
        }
    }
    Outcome {
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            "simulate, estimate, limits and verify (--jobs 1 and 4) byte-identical".into()
        } else {
            problems.join("; ")
        },
    }
}

fn main() {
    // accept and ignore libtest-style arguments such as --nocapture
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));

    type Criterion = (u32, &'static str, Duration, Box<dyn Fn() -> Outcome>);
    let criteria: Vec<Criterion> = vec![
        (1, "exact recovery", Duration::from_secs(1), Box::new(exact_recovery)),
        (2, "limit-object consistency", Duration::from_secs(5), Box::new(limit_consistency)),
        (
            3,
            "design bridge to L",
            Duration::from_secs(30),
            Box::new(|| {
                let mut cfg = reference(14, 20, vec![Check::LimitBridge]);
                cfg.master_seed = 42;
                run_report(cfg)
            }),
        ),
        (4, "estimation rate", Duration::from_secs(120), Box::new(|| run_report(reference(14, 50, vec![Check::Rate])))),
        (5, "quadratic strong law", Duration::from_secs(120), Box::new(|| run_report(reference(13, 100, vec![Check::Qsl])))),
        (
            6,
            "CLT for theta",
            Duration::from_secs(120),
            Box::new(|| run_report(reference(12, 500, vec![Check::CltTheta]))),
        ),
        (
            7,
            "CLT for sigma2 and rho",
            Duration::from_secs(120),
            Box::new(|| run_report(reference(12, 500, vec![Check::CltSigma, Check::CltRho]))),
        ),
        (
            8,
            "residual-gap constants",
            Duration::from_secs(120),
            Box::new(|| run_report(reference(13, 100, vec![Check::Diagnostics]))),
        ),
        (9, "streaming equals batch", Duration::from_secs(60), Box::new(streaming_batch)),
        (10, "determinism across --jobs", Duration::from_secs(120), Box::new(determinism)),
    ];

    let mut failed = 0;
    let mut ran = 0;
    for (id, name, budget, run) in &criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f) && f != id.to_string()) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let outcome = run();
        let elapsed = started.elapsed();
        let in_time = elapsed <= *budget;
        let pass = outcome.pass && in_time;
        if !pass {
            failed += 1;
        }
        let timing = if in_time { String::new() } else { format!(" [over budget {budget:?}]") };
        println!(
            "{} criterion {id:>2} {name}: {} ({:.2}s){timing}",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
