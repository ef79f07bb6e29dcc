//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! line per criterion and exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use monomial_harness::audit::{
    adversarial_control, equivariance_audit, inv_layer_audit, invariance_audit, preserve_audit, InvarianceOptions,
    NetworkChoice, CONTROL_THRESHOLD,
};
use monomial_harness::train::{train_toy, ToyConfig};
use monomial_nfn::completeness::completeness_dimension;
use monomial_nfn::equivariant::{param_count, permutation_baseline_count};
use monomial_nfn::invariant::{normalize_average_pool, AlphaBase};
use monomial_nfn::{ActivationKind, Family, SubgroupKind, Tensor, WeightSpaceSpec};
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn check(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    check(t < limit, format!("{what} took {:.1} s, limit {} s", t.as_secs_f64(), limit.as_secs()))
}

fn ac1_preservation() -> Outcome {
    let start = Instant::now();
    let report = preserve_audit(&ActivationKind::ALL, &[2, 3], 20, 0, "acceptance").map_err(|e| e.to_string())?;
    within(start, Duration::from_secs(30), "preservation check")?;
    let details = report.details.as_ref().expect("details");
    let misclassified = details["misclassified"].as_u64().unwrap();
    check(report.pass && misclassified == 0, format!("{misclassified} misclassified"))?;
    // Preserved monomials: n! permutations times the admissible entries per position
    // (three positive grid values for ReLU, two signs for sin and tanh).
    let fact = |n: u64| (1..=n).product::<u64>();
    for case in details["cases"].as_array().unwrap() {
        let n = case["n"].as_u64().unwrap();
        let per_entry: u64 = if case["sigma"] == "relu" { 3 } else { 2 };
        let expected = fact(n) * per_entry.pow(n as u32);
        let got = case["preserved"].as_u64().unwrap();
        check(got == expected, format!("{} n={n}: {got} preserved, expected {expected}", case["sigma"]))?;
    }
    Ok(format!(
        "0 misclassified over {} matrices in {:.2} s",
        report.trials,
        start.elapsed().as_secs_f64()
    ))
}

fn ac2_invariance() -> Outcome {
    let mut runs = 0;
    let mut worst: f64 = 0.0;
    for sigma in ActivationKind::ALL {
        for subgroup in [sigma.matched_subgroup(), SubgroupKind::PermOnly] {
            for network in [NetworkChoice::Fcnn, NetworkChoice::Cnn] {
                for (range, tol) in [((0.1, 10.0), 1e-10), ((1.0, 1e6), 1e-6)] {
                    let mut opts = InvarianceOptions::new(sigma, subgroup, network, 1000, 11);
                    opts.scale_range = range;
                    opts.tolerance = Some(tol);
                    let r = invariance_audit(&opts, "acceptance").map_err(|e| e.to_string())?;
                    check(
                        r.trials == 1000 && r.pass,
                        format!(
                            "{} / {} / {} / {range:?}: max rel dev {:e} > {tol:e}",
                            sigma.name(),
                            subgroup.name(),
                            network.name(),
                            r.max_rel_dev
                        ),
                    )?;
                    worst = worst.max(r.max_rel_dev / tol);
                    runs += 1;
                }
            }
        }
    }
    let mut lowest: f64 = 1.0;
    for sigma in ActivationKind::ALL {
        for network in [NetworkChoice::Fcnn, NetworkChoice::Cnn] {
            let r = adversarial_control(sigma, network, 1000, 23, 1, "acceptance").map_err(|e| e.to_string())?;
            let fraction = r.details.as_ref().unwrap()["fraction_above_threshold"].as_f64().unwrap();
            check(
                fraction >= 0.95,
                format!(
                    "control {} / {}: only {:.1}% of trials above {CONTROL_THRESHOLD:e}",
                    sigma.name(),
                    network.name(),
                    100.0 * fraction
                ),
            )?;
            lowest = lowest.min(fraction);
        }
    }
    Ok(format!(
        "{runs} runs of 1000 trials, worst dev/tol {worst:.2e}; controls above {CONTROL_THRESHOLD:e} in >= {:.1}%",
        100.0 * lowest
    ))
}

fn ac3_equivariance() -> Outcome {
    let mut worst: f64 = 0.0;
    for family in [Family::Relu, Family::SinTanh] {
        let r = equivariance_audit(family, 1000, 31, 1, (0.5, 2.0), 1e-9, "acceptance").map_err(|e| e.to_string())?;
        check(
            r.trials == 1000 && r.pass,
            format!("{}: max dev/kappa {:e}", family.name(), r.max_rel_dev),
        )?;
        worst = worst.max(r.max_rel_dev);
    }
    Ok(format!("2 families x 1000 trials, max relative dev / kappa {worst:.2e} <= 1e-9"))
}

fn ac4_completeness() -> Outcome {
    let specs = [
        WeightSpaceSpec::fcnn(vec![1, 2, 2, 1]).unwrap(),
        WeightSpaceSpec::fcnn(vec![2, 2, 2, 1]).unwrap(),
        WeightSpaceSpec::fcnn(vec![1, 3, 2, 2]).unwrap(),
        WeightSpaceSpec::fcnn(vec![2, 1, 2, 1, 2]).unwrap(),
        WeightSpaceSpec::new(vec![1, 2, 2, 1], vec![2, 1, 1], vec![1, 2, 1]).unwrap(),
        WeightSpaceSpec::new(vec![2, 2, 1, 2], vec![1, 2, 1], vec![1, 1, 2]).unwrap(),
    ];
    let mut checked = 0;
    for family in [Family::Relu, Family::SinTanh] {
        for (i, spec) in specs.iter().enumerate() {
            let start = Instant::now();
            let target = if i % 2 == 0 { spec.clone() } else { spec.with_uniform_dims(2, 1).unwrap() };
            let dim = completeness_dimension(spec, &target, family, 40, 7).map_err(|e| e.to_string())?;
            let count = param_count(spec, &target, family).map_err(|e| e.to_string())?.exact;
            within(start, Duration::from_secs(60), "completeness spec")?;
            check(
                dim as u128 == count,
                format!("{} {:?}: dimension {dim} vs count {count}", family.name(), spec.channels()),
            )?;
            checked += 1;
        }
    }
    let tiny = WeightSpaceSpec::fcnn(vec![1, 2, 2, 1]).unwrap();
    for (family, expected) in [(Family::Relu, 9), (Family::SinTanh, 11)] {
        let dim = completeness_dimension(&tiny, &tiny, family, 40, 3).map_err(|e| e.to_string())?;
        check(dim == expected, format!("{} on (1,2,2,1): {dim}, expected {expected}", family.name()))?;
    }
    Ok(format!("{checked} specs equal the parameter count; (1,2,2,1) gives 9 and 11"))
}

fn ac5_scaling() -> Outcome {
    let c = 3;
    let spec = |l: usize| WeightSpaceSpec::fcnn(vec![c; l + 1]).unwrap();
    let mut lines = Vec::new();
    for family in [Family::Relu, Family::SinTanh] {
        let ours = |l| param_count(&spec(l), &spec(l), family).unwrap().exact as i128;
        let (a, b, d) = (ours(4), ours(8), ours(12));
        check(b - a == d - b, format!("{}: {a}, {b}, {d} not linear", family.name()))?;
        // With all feature dims 1 a middle layer adds one weight and one bias block.
        let per_layer = ours(5) - ours(4);
        check(per_layer == 2 && b - a == 4 * per_layer, format!("{}: middle-layer delta {per_layer}", family.name()))?;
        lines.push(format!("{} +{}", family.name(), b - a));
    }
    for fix in [true, false] {
        let base = |l| permutation_baseline_count(&spec(l), &spec(l), fix).unwrap() as i128;
        let (a, b, d, e) = (base(4), base(8), base(12), base(16));
        let (s1, s2) = (d - 2 * b + a, e - 2 * d + b);
        check(s1 > 0 && s1 == s2, format!("baseline (fixed boundary {fix}) second differences {s1}, {s2}"))?;
    }
    Ok(format!("L 4->8->12 adds {}; baselines have constant positive second difference", lines.join(", ")))
}

fn ac6_invariant_pipeline() -> Outcome {
    let mut worst: f64 = 0.0;
    let runs = [
        (Family::Relu, None),
        (Family::SinTanh, None),
        (Family::SinTanh, Some(AlphaBase::AbsValue)),
        (Family::SinTanh, Some(AlphaBase::NormalizedSquares)),
    ];
    for (family, alpha) in runs {
        let r = inv_layer_audit(family, alpha, 1000, 41, 1, (0.1, 10.0), 1e-9, "acceptance").map_err(|e| e.to_string())?;
        check(
            r.trials == 1000 && r.pass,
            format!("{} {alpha:?}: max rel dev {:e}", family.name(), r.max_rel_dev),
        )?;
        worst = worst.max(r.max_rel_dev);
    }
    Ok(format!("{} runs x 1000 trials, max relative dev {worst:.2e} <= 1e-9", runs.len()))
}

fn ac7_pooling() -> Outcome {
    let w1 = Tensor::new(vec![2, 1, 3], vec![1.0, 0.0, 1.0, 2.0, 3.0, 1.0]).unwrap();
    let w2 = Tensor::new(vec![3, 2, 2], vec![2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0, -1.0, -1.0, 1.0, 0.0, -1.0]).unwrap();
    let w3 = Tensor::new(vec![1, 3, 3], vec![-1.0, 1.0, 0.0, 0.0, 0.0, 1.0, -1.0, 0.0, 2.0]).unwrap();
    let expected = [
        vec![11.0 / 28.0, 9.0 / 28.0, 8.0 / 28.0],
        vec![0.319230769230769, 0.680769230769231],
        vec![7.0 / 30.0, 5.0 / 30.0, 18.0 / 30.0],
    ];
    let out = normalize_average_pool(&[w1, w2, w3]).map_err(|e| e.to_string())?;
    check(out.len() == 3, format!("{} outputs", out.len()))?;
    let mut worst: f64 = 0.0;
    for (k, (o, e)) in out.iter().zip(&expected).enumerate() {
        check(o.len() == e.len(), format!("output {k} has {} entries", o.len()))?;
        for (a, b) in o.data().iter().zip(e) {
            worst = worst.max((a - b).abs());
        }
        check((o.sum() - 1.0).abs() <= 1e-12, format!("output {k} sums to {}", o.sum()))?;
    }
    check(worst <= 1e-12, format!("max error {worst:e}"))?;
    Ok(format!("three pooled vectors match, max error {worst:.1e}, each sums to 1"))
}

fn ac8_training() -> Outcome {
    let start = Instant::now();
    let (log, _) = train_toy(&ToyConfig::default(), 1, "acceptance").map_err(|e| e.to_string())?;
    within(start, Duration::from_secs(300), "toy training")?;
    check(log.steps <= 500 && log.aborted_at_step.is_none(), format!("aborted at {:?}", log.aborted_at_step))?;
    check(log.loss_ratio <= 0.5, format!("loss ratio {:.3} after {} steps", log.loss_ratio, log.steps))?;
    check(
        log.heldout_max_rel_dev <= 1e-7,
        format!("held-out augmented deviation {:e}", log.heldout_max_rel_dev),
    )?;
    Ok(format!(
        "MSE {:.4} -> {:.4} (ratio {:.3}) in {} steps, held-out dev {:.1e}, {:.1} s",
        log.initial_loss,
        log.final_loss,
        log.loss_ratio,
        log.steps,
        log.heldout_max_rel_dev,
        start.elapsed().as_secs_f64()
    ))
}

fn run_cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mnfn"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    match out.status.code() {
        Some(0) | Some(1) => Ok(out.stdout),
        code => Err(format!(
            "{args:?} exited with {code:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        )),
    }
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn ac9_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let weights = dir.path().join("w.json");
    let weights = weights.to_str().unwrap();
    let aug = dir.path().join("aug");
    let aug = aug.to_str().unwrap();
    run_cli(&["gen", "--channels", "2,3,2,1", "--seed", "5", "--output", weights])?;
    let commands: Vec<Vec<&str>> = vec![
        vec!["gen", "--channels", "2,3,2,1", "--weight-dim", "2,1,3", "--seed", "5"],
        vec!["augment", "--input", weights, "--subgroup", "positive", "--count", "3", "--seed", "2", "--output", aug],
        vec!["audit", "invariance", "--sigma", "relu", "--trials", "200", "--seed", "3"],
        vec!["audit", "invariance", "--sigma", "tanh", "--network", "cnn", "--trials", "200", "--seed", "3"],
        vec!["audit", "invariance", "--sigma", "relu", "--adversarial", "--trials", "100", "--seed", "3"],
        vec!["audit", "invariance", "--sigma", "relu", "--input", weights, "--trials", "50", "--seed", "3"],
        vec!["audit", "equivariance", "--family", "sintanh", "--trials", "200", "--seed", "4"],
        vec!["audit", "preserve", "--sizes", "2", "--seed", "4"],
        vec!["audit", "inv-layer", "--family", "relu", "--trials", "200", "--seed", "4"],
        vec!["params", "--channels", "3,3,3,3,3", "--family", "sintanh"],
        vec!["pool", "--input", weights],
        vec!["completeness", "--channels", "1,2,2,1", "--seed", "6"],
        vec!["train-toy", "--steps", "20", "--seed", "1"],
    ];
    for args in &commands {
        let first = run_cli(args)?;
        let first_files = if args[0] == "augment" { files_in(Path::new(aug)) } else { Vec::new() };
        let second = run_cli(args)?;
        check(!first.is_empty() && first == second, format!("{} differs between runs", args.join(" ")))?;
        if args[0] == "augment" {
            check(first_files == files_in(Path::new(aug)), "augment files differ between runs".into())?;
        }
    }
    let strip = |bytes: Vec<u8>| -> Result<Value, String> {
        let mut v: Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
        v.as_object_mut().unwrap().remove("command");
        Ok(v)
    };
    let serial = strip(run_cli(&["audit", "equivariance", "--family", "relu", "--trials", "100", "--jobs", "1"])?)?;
    let parallel = strip(run_cli(&["audit", "equivariance", "--family", "relu", "--trials", "100", "--jobs", "3"])?)?;
    check(serial == parallel, "report depends on --jobs".into())?;
    Ok(format!("{} commands byte-identical across two runs; --jobs does not change results", commands.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("AC1", "activation preservation", ac1_preservation),
        ("AC2", "network invariance", ac2_invariance),
        ("AC3", "layer equivariance", ac3_equivariance),
        ("AC4", "completeness", ac4_completeness),
        ("AC5", "parameter scaling", ac5_scaling),
        ("AC6", "invariant pipeline", ac6_invariant_pipeline),
        ("AC7", "pooling fixture", ac7_pooling),
        ("AC8", "toy training", ac8_training),
        ("AC9", "determinism", ac9_determinism),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        match f() {
            Ok(msg) => println!("[PASS] {id} {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("[FAIL] {id} {name}: {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
