use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use monomial_harness::audit::{self, InvarianceOptions, NetworkChoice};
use monomial_harness::train::{train_toy, ToyConfig};
use monomial_nfn::completeness::completeness_dimension;
use monomial_nfn::equivariant::{param_count, permutation_baseline_count, ASYMPTOTIC_HNP, ASYMPTOTIC_NP};
use monomial_nfn::invariant::{apply_alpha_stage, normalize_average_pool, pool_stage, AlphaBase, InvariantPipelineConfig, PoolMode};
use monomial_nfn::network::NetworkKind;
use monomial_nfn::weight_space::SpecDoc;
use monomial_nfn::{ActivationKind, Error, Family, GroupSampler, SplitMix64, SubgroupKind, WeightSpacePoint, WeightSpaceSpec};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "mnfn", version, about = "Monomial weight-space symmetry audits and toy training")]
struct Cli {
    /// Base seed; trial i uses seed + i.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Pass threshold on the relative deviation (command-specific default).
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Worker threads for trial loops.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output file (`gen`), directory (`augment`), or a copy of the report.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Add `elapsed_ms` to the report.
    #[arg(long, global = true)]
    timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random weight file.
    Gen(GenArgs),
    /// Apply random group elements to a weight file.
    Augment(AugmentArgs),
    /// Sampled property checks.
    Audit {
        #[command(subcommand)]
        kind: AuditKind,
    },
    /// Parameter count of the equivariant layer against permutation-only baselines.
    Params(SpecArgs),
    /// Normalize-and-average pooling and invariant pooled features of a weight file.
    Pool(PoolArgs),
    /// Brute-force dimension of the equivariant maps, compared with the parameter count.
    Completeness(CompletenessArgs),
    /// Train a small stacked network on a synthetic regression task.
    TrainToy(TrainArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    channels: Vec<usize>,
    /// Weight feature sizes per layer (kernel sizes for CNNs); default 1.
    #[arg(long, value_delimiter = ',')]
    weight_dim: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    bias_dim: Option<Vec<usize>>,
    /// Entries are Uniform[-scale, scale].
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "positive")]
    subgroup: SubgroupKind,
    #[arg(long, default_value_t = 1.0)]
    scale_min: f64,
    #[arg(long, default_value_t = 10.0)]
    scale_max: f64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Activation of the network; a subgroup it does not preserve triggers a warning.
    #[arg(long)]
    sigma: Option<ActivationKind>,
}

#[derive(Subcommand)]
enum AuditKind {
    /// Network output under hidden-neuron transformations.
    Invariance(InvarianceArgs),
    /// Equivariant layers commute with the group.
    Equivariance(FamilyAuditArgs),
    /// Exhaustive check of which monomial matrices commute with each activation.
    Preserve(PreserveArgs),
    /// Invariant pipeline output under the group.
    InvLayer(InvLayerArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum NetworkArg {
    Fcnn,
    Cnn,
}

#[derive(Args)]
struct InvarianceArgs {
    #[arg(long)]
    sigma: ActivationKind,
    /// Defaults to the subgroup matched to the activation.
    #[arg(long)]
    subgroup: Option<SubgroupKind>,
    #[arg(long, value_enum, default_value = "fcnn")]
    network: NetworkArg,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = 0.1)]
    scale_min: f64,
    #[arg(long, default_value_t = 10.0)]
    scale_max: f64,
    /// Audit this weight file instead of random networks.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Signal length for a CNN weight file.
    #[arg(long)]
    input_len: Option<usize>,
    /// Apply the activation after the last CNN layer too.
    #[arg(long)]
    outer_activation: bool,
    /// Use the worst single-neuron mismatched transformation on two-layer networks.
    #[arg(long)]
    adversarial: bool,
}

#[derive(Args)]
struct FamilyAuditArgs {
    #[arg(long)]
    family: Family,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = 0.5)]
    scale_min: f64,
    #[arg(long, default_value_t = 2.0)]
    scale_max: f64,
}

#[derive(Args)]
struct InvLayerArgs {
    #[arg(long)]
    family: Family,
    #[arg(long)]
    alpha: Option<AlphaBase>,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = 0.1)]
    scale_min: f64,
    #[arg(long, default_value_t = 10.0)]
    scale_max: f64,
}

#[derive(Args)]
struct PreserveArgs {
    /// Defaults to every activation.
    #[arg(long)]
    sigma: Option<ActivationKind>,
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    sizes: Vec<usize>,
    /// Random probes per matrix, on top of the structured ones.
    #[arg(long, default_value_t = 20)]
    probes: usize,
}

#[derive(Args)]
struct SpecArgs {
    /// Spec or weight file for the source space.
    #[arg(long, conflicts_with = "channels")]
    spec: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    weight_dim: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    bias_dim: Option<Vec<usize>>,
    /// Target feature sizes; default equal to the source.
    #[arg(long, value_delimiter = ',')]
    target_weight_dim: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    target_bias_dim: Option<Vec<usize>>,
    #[arg(long, default_value = "relu")]
    family: Family,
}

#[derive(Args)]
struct CompletenessArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long, default_value_t = 40)]
    samples: usize,
}

#[derive(Args)]
struct PoolArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "mean")]
    mode: PoolMode,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

/// Outcome of a command: the report and whether it passed.
struct Outcome {
    report: Value,
    pass: bool,
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::InvalidArgument(format!("cannot write {}: {e}", path.display())))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { path: inner, detail } => Error::Parse {
            path: format!("{}: {inner}", path.display()),
            detail,
        },
        other => Error::Parse {
            path: path.display().to_string(),
            detail: other.to_string(),
        },
    }
}

fn load_weights(path: &Path) -> Result<WeightSpacePoint, Error> {
    WeightSpacePoint::from_json(&read(path)?).map_err(|e| with_path(path, e))
}

/// A spec document, or the `spec` field of a weight file.
fn load_spec(path: &Path) -> Result<WeightSpaceSpec, Error> {
    let value: Value = serde_json::from_str(&read(path)?).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let doc = value.get("spec").cloned().unwrap_or(value);
    let doc: SpecDoc = serde_json::from_value(doc).map_err(|e| Error::Parse {
        path: format!("{}: spec", path.display()),
        detail: e.to_string(),
    })?;
    WeightSpaceSpec::try_from(doc).map_err(|e| with_path(path, e))
}

fn dims_or_ones(dims: &Option<Vec<usize>>, layers: usize) -> Vec<usize> {
    dims.clone().unwrap_or_else(|| vec![1; layers])
}

fn spec_pair(args: &SpecArgs) -> Result<(WeightSpaceSpec, WeightSpaceSpec), Error> {
    let source = match (&args.spec, &args.channels) {
        (Some(path), _) => load_spec(path)?,
        (None, Some(channels)) => {
            let l = channels.len().saturating_sub(1);
            WeightSpaceSpec::new(channels.clone(), dims_or_ones(&args.weight_dim, l), dims_or_ones(&args.bias_dim, l))?
        }
        (None, None) => return Err(Error::InvalidArgument("give --spec or --channels".into())),
    };
    let target = WeightSpaceSpec::new(
        source.channels().to_vec(),
        args.target_weight_dim.clone().unwrap_or_else(|| source.weight_dims().to_vec()),
        args.target_bias_dim.clone().unwrap_or_else(|| source.bias_dims().to_vec()),
    )?;
    Ok((source, target))
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

fn run(cli: &Cli, command: &str) -> Result<Outcome, Error> {
    let tol = cli.tol;
    match &cli.command {
        Command::Gen(a) => {
            let l = a.channels.len().saturating_sub(1);
            let spec = WeightSpaceSpec::new(a.channels.clone(), dims_or_ones(&a.weight_dim, l), dims_or_ones(&a.bias_dim, l))?;
            let u = WeightSpacePoint::random(&spec, cli.seed, a.scale)?;
            match &cli.output {
                None => Ok(Outcome {
                    report: to_value(&u.to_document()),
                    pass: true,
                }),
                Some(path) => {
                    write(path, &u.to_json())?;
                    Ok(Outcome {
                        report: json!({
                            "command": command,
                            "seed": cli.seed,
                            "path": path.display().to_string(),
                            "dimension": spec.dimension(),
                        }),
                        pass: true,
                    })
                }
            }
        }
        Command::Augment(a) => {
            let dir = cli
                .output
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("augment needs --output DIR".into()))?;
            fs::create_dir_all(dir).map_err(|e| Error::InvalidArgument(format!("cannot create {}: {e}", dir.display())))?;
            let u = load_weights(&a.input)?;
            if let Some(sigma) = a.sigma {
                let matched = sigma.matched_subgroup();
                let ok = a.subgroup == matched || matches!(a.subgroup, SubgroupKind::PermOnly | SubgroupKind::Trivial);
                if !ok {
                    eprintln!(
                        "warning: subgroup {} does not preserve {}; augmented networks may compute different functions",
                        a.subgroup.name(),
                        sigma.name()
                    );
                }
            }
            let sampler = GroupSampler::new(a.subgroup, (a.scale_min, a.scale_max));
            let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("weights");
            let mut files = Vec::new();
            for i in 0..a.count {
                let mut rng = SplitMix64::for_trial(cli.seed, i);
                let g = sampler.sample_with(u.spec().channels(), &mut rng)?;
                let moved = g.act_weights(&u)?;
                let wpath = dir.join(format!("{stem}_aug{i}.json"));
                let gpath = dir.join(format!("{stem}_aug{i}.group.json"));
                write(&wpath, &moved.to_json())?;
                write(&gpath, &serde_json::to_string_pretty(&g.to_document()).expect("group serializes"))?;
                files.push(json!({"weights": wpath.display().to_string(), "group": gpath.display().to_string()}));
            }
            Ok(Outcome {
                report: json!({
                    "command": command,
                    "seed": cli.seed,
                    "input": a.input.display().to_string(),
                    "subgroup": a.subgroup.name(),
                    "scale_range": [a.scale_min, a.scale_max],
                    "count": a.count,
                    "files": files,
                }),
                pass: true,
            })
        }
        Command::Audit { kind } => {
            let report = match kind {
                AuditKind::Invariance(a) => {
                    let network = match a.network {
                        NetworkArg::Fcnn => NetworkChoice::Fcnn,
                        NetworkArg::Cnn => NetworkChoice::Cnn,
                    };
                    if a.adversarial {
                        audit::adversarial_control(a.sigma, network, a.trials, cli.seed, cli.jobs, command)?
                    } else {
                        let mut opts = InvarianceOptions::new(
                            a.sigma,
                            a.subgroup.unwrap_or(a.sigma.matched_subgroup()),
                            network,
                            a.trials,
                            cli.seed,
                        );
                        opts.scale_range = (a.scale_min, a.scale_max);
                        opts.jobs = cli.jobs;
                        opts.tolerance = tol;
                        opts.outer_activation = a.outer_activation;
                        if let Some(path) = &a.input {
                            let u = load_weights(path)?;
                            let kind = match network {
                                NetworkChoice::Fcnn => NetworkKind::Fcnn,
                                NetworkChoice::Cnn => NetworkKind::Cnn {
                                    input_len: a.input_len.ok_or_else(|| {
                                        Error::InvalidArgument("a CNN weight file needs --input-len".into())
                                    })?,
                                    outer_activation: a.outer_activation,
                                },
                            };
                            opts.fixed = Some((u, kind));
                        }
                        audit::invariance_audit(&opts, command)?
                    }
                }
                AuditKind::Equivariance(a) => audit::equivariance_audit(
                    a.family,
                    a.trials,
                    cli.seed,
                    cli.jobs,
                    (a.scale_min, a.scale_max),
                    tol.unwrap_or(1e-9),
                    command,
                )?,
                AuditKind::Preserve(a) => {
                    let sigmas = a.sigma.map_or(ActivationKind::ALL.to_vec(), |s| vec![s]);
                    audit::preserve_audit(&sigmas, &a.sizes, a.probes, cli.seed, command)?
                }
                AuditKind::InvLayer(a) => audit::inv_layer_audit(
                    a.family,
                    a.alpha,
                    a.trials,
                    cli.seed,
                    cli.jobs,
                    (a.scale_min, a.scale_max),
                    tol.unwrap_or(1e-9),
                    command,
                )?,
            };
            Ok(Outcome {
                pass: report.pass,
                report: to_value(&report),
            })
        }
        Command::Params(a) => {
            let (source, target) = spec_pair(a)?;
            let ours = param_count(&source, &target, a.family)?;
            let np = permutation_baseline_count(&source, &target, false)?;
            let hnp = permutation_baseline_count(&source, &target, true)?;
            Ok(Outcome {
                report: json!({
                    "command": command,
                    "family": a.family.name(),
                    "channels": source.channels(),
                    "exact": ours.exact as u64,
                    "asymptotic": ours.asymptotic,
                    "baseline_hnp": hnp as u64,
                    "baseline_hnp_asymptotic": ASYMPTOTIC_HNP,
                    "baseline_np": np as u64,
                    "baseline_np_asymptotic": ASYMPTOTIC_NP,
                    "ratio": hnp as f64 / ours.exact as f64,
                }),
                pass: true,
            })
        }
        Command::Pool(a) => {
            let u = load_weights(&a.input)?;
            let averaged: Vec<Vec<f64>> = normalize_average_pool(u.weights())?
                .into_iter()
                .map(|t| t.into_data())
                .collect();
            let cfg = InvariantPipelineConfig::with_identity_mlp(u.spec(), Family::Relu, AlphaBase::NormalizedSquares, a.mode)?;
            let features = pool_stage(&cfg, &apply_alpha_stage(&cfg, &u)?)?;
            Ok(Outcome {
                report: json!({
                    "command": command,
                    "input": a.input.display().to_string(),
                    "normalize_average": averaged,
                    "pool_mode": a.mode,
                    "pool_layout_version": cfg.pool_layout_version,
                    "invariant_features": features.data(),
                }),
                pass: true,
            })
        }
        Command::Completeness(a) => {
            let (source, target) = spec_pair(&a.spec)?;
            let count = param_count(&source, &target, a.spec.family)?;
            let dim = completeness_dimension(&source, &target, a.spec.family, a.samples, cli.seed)?;
            let matches = dim as u128 == count.exact;
            Ok(Outcome {
                report: json!({
                    "command": command,
                    "seed": cli.seed,
                    "family": a.spec.family.name(),
                    "channels": source.channels(),
                    "samples": a.samples,
                    "dimension": dim,
                    "param_count": count.exact as u64,
                    "pass": matches,
                }),
                pass: matches,
            })
        }
        Command::TrainToy(a) => {
            let mut cfg = match &a.config {
                Some(path) => serde_json::from_str::<ToyConfig>(&read(path)?).map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    detail: e.to_string(),
                })?,
                None => ToyConfig::default(),
            };
            cfg.seed = cli.seed;
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            if let Some(lr) = a.lr {
                cfg.lr = lr;
            }
            if let Some(t) = tol {
                cfg.check_tolerance = t;
            }
            let (log, _) = train_toy(&cfg, cli.jobs, command)?;
            Ok(Outcome {
                pass: log.pass,
                report: to_value(&log),
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = std::env::args().skip(1).collect::<Vec<_>>().join(" ");
    let start = Instant::now();
    match run(&cli, &command) {
        Ok(mut out) => {
            if cli.timing {
                if let Value::Object(map) = &mut out.report {
                    map.insert("elapsed_ms".into(), json!(start.elapsed().as_millis() as u64));
                }
            }
            let text = serde_json::to_string_pretty(&out.report).expect("report serializes");
            // A closed pipe (for example `| head`) is not an error for the report.
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            let copy_report = !matches!(cli.command, Command::Gen(_) | Command::Augment(_));
            if let (true, Some(path)) = (copy_report, &cli.output) {
                if let Err(e) = write(path, &text) {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            }
            if out.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
