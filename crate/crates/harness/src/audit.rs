//! Sampled property checks behind the `audit` command.
//!
//! Trial `i` always draws from the generator seeded with `seed + i`, so a
//! report does not depend on how many worker threads ran it.

use monomial_nfn::equivariant::EquivariantLayer;
use monomial_nfn::group::{GroupElement, GroupSampler, MonomialElement, SubgroupKind};
use monomial_nfn::invariant::{apply_invariant, AlphaBase, InvariantOptions, InvariantPipelineConfig};
use monomial_nfn::network::{deviation, forward, random_input, NetworkKind};
use monomial_nfn::preserve::{classify_monomial, is_preserved, MonomialClass};
use monomial_nfn::trials::run_trials;
use monomial_nfn::{ActivationKind, Error, Family, Result, SplitMix64, Tensor, WeightSpacePoint, WeightSpaceSpec};
use serde_json::json;

use crate::report::AuditReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkChoice {
    Fcnn,
    Cnn,
}

impl NetworkChoice {
    pub fn name(self) -> &'static str {
        match self {
            NetworkChoice::Fcnn => "fcnn",
            NetworkChoice::Cnn => "cnn",
        }
    }
}

/// Draw `L ∈ layers`, channel counts in `1..=5` (hidden counts at least
/// `min_hidden`), kernels in `1..=3` for CNNs.
pub fn random_network(
    choice: NetworkChoice,
    layers: (usize, usize),
    min_hidden: usize,
    rng: &mut SplitMix64,
) -> Result<(WeightSpaceSpec, NetworkKind)> {
    let l = layers.0 + rng.below(layers.1 - layers.0 + 1);
    let channels: Vec<usize> = (0..=l)
        .map(|i| {
            let lo = if i == 0 || i == l { 1 } else { min_hidden };
            lo + rng.below(6 - lo)
        })
        .collect();
    match choice {
        NetworkChoice::Fcnn => Ok((WeightSpaceSpec::fcnn(channels)?, NetworkKind::Fcnn)),
        NetworkChoice::Cnn => {
            let kernels: Vec<usize> = (0..l).map(|_| 1 + rng.below(3)).collect();
            let input_len = kernels.iter().map(|k| k - 1).sum::<usize>() + 1 + rng.below(4);
            Ok((WeightSpaceSpec::cnn(channels, kernels)?, NetworkKind::cnn(input_len)))
        }
    }
}

/// Default tolerance for network invariance: `1e−12 · max(100, hi/lo)`,
/// i.e. `1e−10` for scales in `[0.1, 10]` and `1e−6` for `[1, 1e6]`.
pub fn default_invariance_tolerance(scale_range: (f64, f64)) -> f64 {
    1e-12 * (scale_range.1 / scale_range.0).max(100.0)
}

#[derive(Debug, Clone)]
pub struct InvarianceOptions {
    pub sigma: ActivationKind,
    pub subgroup: SubgroupKind,
    pub network: NetworkChoice,
    pub trials: usize,
    pub seed: u64,
    pub scale_range: (f64, f64),
    pub jobs: usize,
    pub tolerance: Option<f64>,
    /// Apply the activation after the last CNN layer as well.
    pub outer_activation: bool,
    /// Use this network in every trial instead of drawing one per trial.
    pub fixed: Option<(WeightSpacePoint, NetworkKind)>,
}

impl InvarianceOptions {
    pub fn new(sigma: ActivationKind, subgroup: SubgroupKind, network: NetworkChoice, trials: usize, seed: u64) -> Self {
        Self {
            sigma,
            subgroup,
            network,
            trials,
            seed,
            scale_range: (0.1, 10.0),
            jobs: 1,
            tolerance: None,
            outer_activation: false,
            fixed: None,
        }
    }
}

/// `f(x; gU)` against `f(x; U)` over random networks, inputs and `g`.
pub fn invariance_audit(opts: &InvarianceOptions, command: &str) -> Result<AuditReport> {
    let sampler = GroupSampler::new(opts.subgroup, opts.scale_range);
    let devs = run_trials(opts.trials, opts.jobs, |i| -> Result<(f64, f64)> {
        let mut rng = SplitMix64::for_trial(opts.seed, i);
        let (u, kind) = match &opts.fixed {
            Some((u, kind)) => (u.clone(), *kind),
            None => {
                let (spec, mut kind) = random_network(opts.network, (1, 4), 1, &mut rng)?;
                if let NetworkKind::Cnn { outer_activation, .. } = &mut kind {
                    *outer_activation = opts.outer_activation;
                }
                (WeightSpacePoint::random_with(&spec, &mut rng, 1.0)?, kind)
            }
        };
        let g = sampler.sample_with(u.spec().channels(), &mut rng)?;
        let x = random_input(&u, kind, &mut rng);
        let base = forward(&u, kind, opts.sigma, &x)?;
        let moved = forward(&g.act_weights(&u)?, kind, opts.sigma, &x)?;
        deviation(&base, &moved)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let tol = opts.tolerance.unwrap_or_else(|| default_invariance_tolerance(opts.scale_range));
    Ok(AuditReport::from_deviations(command, opts.seed, tol, &devs).with_details(json!({
        "sigma": opts.sigma.name(),
        "subgroup": opts.subgroup.name(),
        "network": opts.network.name(),
        "outer_activation": opts.outer_activation,
        "scale_range": [opts.scale_range.0, opts.scale_range.1],
    })))
}

/// Threshold a negative-control trial must exceed.
pub const CONTROL_THRESHOLD: f64 = 1e-3;
/// Share of control trials that must exceed [`CONTROL_THRESHOLD`].
pub const CONTROL_REQUIRED_FRACTION: f64 = 0.95;

/// The group element that acts on hidden neuron `j` of layer 1 only, with
/// the symmetry that `sigma` does not respect: a sign flip for ReLU, a
/// positive scale of 3 for sin and tanh.
fn mismatched_single_neuron(sizes: &[usize], sigma: ActivationKind, j: usize) -> Result<GroupElement> {
    let factor = match sigma {
        ActivationKind::Relu => -1.0,
        ActivationKind::Sin | ActivationKind::Tanh => 3.0,
    };
    let layers = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            if i == 1 {
                let d = (0..n).map(|k| if k == j { factor } else { 1.0 }).collect();
                MonomialElement::from_parts(d, (0..n).collect())
            } else {
                Ok(MonomialElement::identity(n))
            }
        })
        .collect::<Result<_>>()?;
    GroupElement::new(layers)
}

/// Negative control: two-layer networks, and for each trial the
/// single-neuron mismatched transformation that moves the output most.
/// The report passes when at least [`CONTROL_REQUIRED_FRACTION`] of trials
/// deviate by more than [`CONTROL_THRESHOLD`].
pub fn adversarial_control(
    sigma: ActivationKind,
    network: NetworkChoice,
    trials: usize,
    seed: u64,
    jobs: usize,
    command: &str,
) -> Result<AuditReport> {
    let devs = run_trials(trials, jobs, |i| -> Result<(f64, f64)> {
        let mut rng = SplitMix64::for_trial(seed, i);
        let (spec, kind) = random_network(network, (2, 2), 2, &mut rng)?;
        let u = WeightSpacePoint::random_with(&spec, &mut rng, 1.0)?;
        let x = random_input(&u, kind, &mut rng);
        let base = forward(&u, kind, sigma, &x)?;
        let mut worst = (0.0, 0.0);
        for j in 0..spec.channels()[1] {
            let g = mismatched_single_neuron(spec.channels(), sigma, j)?;
            let d = deviation(&base, &forward(&g.act_weights(&u)?, kind, sigma, &x)?)?;
            if d.1 > worst.1 {
                worst = d;
            }
        }
        Ok(worst)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let exceeded = devs.iter().filter(|d| d.1 > CONTROL_THRESHOLD).count();
    let fraction = if trials == 0 { 0.0 } else { exceeded as f64 / trials as f64 };
    let mut report = AuditReport::from_deviations(command, seed, CONTROL_THRESHOLD, &devs).with_details(json!({
        "sigma": sigma.name(),
        "network": network.name(),
        "control_threshold": CONTROL_THRESHOLD,
        "required_fraction": CONTROL_REQUIRED_FRACTION,
        "trials_above_threshold": exceeded,
        "fraction_above_threshold": fraction,
    }));
    report.pass = trials > 0 && fraction >= CONTROL_REQUIRED_FRACTION;
    Ok(report)
}

fn layer_range(family: Family) -> (usize, usize) {
    match family {
        Family::Relu => (2, 4),
        Family::SinTanh => (3, 4),
    }
}

/// Random source/target pair with `L ∈ layers`, `n_i ≤ 5`, feature dims `≤ 3`.
pub fn random_layer_specs(layers: (usize, usize), rng: &mut SplitMix64) -> Result<(WeightSpaceSpec, WeightSpaceSpec)> {
    let l = layers.0 + rng.below(layers.1 - layers.0 + 1);
    let channels: Vec<usize> = (0..=l).map(|_| 1 + rng.below(5)).collect();
    let mut dims = || (0..l).map(|_| 1 + rng.below(3)).collect::<Vec<_>>();
    let (w, b, wt, bt) = (dims(), dims(), dims(), dims());
    Ok((
        WeightSpaceSpec::new(channels.clone(), w, b)?,
        WeightSpaceSpec::new(channels, wt, bt)?,
    ))
}

/// `‖E(gU) − g E(U)‖∞ / (‖E(U)‖∞ · κ(g))` over random layers.
pub fn equivariance_audit(
    family: Family,
    trials: usize,
    seed: u64,
    jobs: usize,
    scale_range: (f64, f64),
    tolerance: f64,
    command: &str,
) -> Result<AuditReport> {
    let sampler = GroupSampler::new(family.subgroup(), scale_range);
    let devs = run_trials(trials, jobs, |i| -> Result<(f64, f64)> {
        let mut rng = SplitMix64::for_trial(seed, i);
        let (source, target) = random_layer_specs(layer_range(family), &mut rng)?;
        let layer = EquivariantLayer::random(family, &source, &target, &mut rng)?;
        let u = WeightSpacePoint::random_with(&source, &mut rng, 1.0)?;
        let g = sampler.sample_with(source.channels(), &mut rng)?;
        let e = layer.apply(&u)?;
        let lhs = layer.apply(&g.act_weights(&u)?)?;
        let rhs = g.act_weights(&e)?;
        let abs = lhs.sub(&rhs)?.max_abs();
        Ok((abs, abs / (e.max_abs().max(f64::MIN_POSITIVE) * g.kappa())))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(AuditReport::from_deviations(command, seed, tolerance, &devs).with_details(json!({
        "family": family.name(),
        "scale_range": [scale_range.0, scale_range.1],
    })))
}

/// `‖I(gU) − I(U)‖∞ / max(1, ‖I(U)‖∞)` over random pipelines with learnable
/// heads. With `alpha = None` the sin/tanh family alternates between the
/// two allowed α functions.
#[allow(clippy::too_many_arguments)]
pub fn inv_layer_audit(
    family: Family,
    alpha: Option<AlphaBase>,
    trials: usize,
    seed: u64,
    jobs: usize,
    scale_range: (f64, f64),
    tolerance: f64,
    command: &str,
) -> Result<AuditReport> {
    let sampler = GroupSampler::new(family.subgroup(), scale_range);
    let devs = run_trials(trials, jobs, |i| -> Result<(f64, f64)> {
        let mut rng = SplitMix64::for_trial(seed, i);
        let l = 1 + rng.below(4);
        let channels: Vec<usize> = (0..=l).map(|_| 1 + rng.below(4)).collect();
        let mut dims = || (0..l).map(|_| 1 + rng.below(3)).collect::<Vec<_>>();
        let (w, b) = (dims(), dims());
        let spec = WeightSpaceSpec::new(channels, w, b)?;
        let base = alpha.unwrap_or(match family {
            Family::Relu => AlphaBase::NormalizedSquares,
            Family::SinTanh if i % 2 == 0 => AlphaBase::AbsValue,
            Family::SinTanh => AlphaBase::NormalizedSquares,
        });
        let opts = InvariantOptions {
            base,
            learnable_head: true,
            hidden: vec![8],
            output: 2,
            ..Default::default()
        };
        let mut cfg = InvariantPipelineConfig::new(&spec, family, &opts, &mut rng)?;
        cfg.for_each_param_mut(&mut |p| *p += rng.uniform(-0.5, 0.5));
        let u = WeightSpacePoint::random_with(&spec, &mut rng, 1.0)?;
        let g = sampler.sample_with(spec.channels(), &mut rng)?;
        let a = apply_invariant(&cfg, &u)?;
        let b = apply_invariant(&cfg, &g.act_weights(&u)?)?;
        deviation(&a, &b)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(AuditReport::from_deviations(command, seed, tolerance, &devs).with_details(json!({
        "family": family.name(),
        "scale_range": [scale_range.0, scale_range.1],
    })))
}

/// Grid of nonzero entries used by the exhaustive preservation check.
pub const PRESERVE_GRID: [f64; 6] = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn expected_preserved(sigma: ActivationKind, entries: &[f64]) -> bool {
    match sigma {
        ActivationKind::Relu => entries.iter().all(|&v| v > 0.0),
        ActivationKind::Sin | ActivationKind::Tanh => entries.iter().all(|&v| v == 1.0 || v == -1.0),
    }
}

/// Every monomial matrix `A[π(k), k] = v_k` with `π` a permutation of size
/// `n ∈ sizes` and `v ∈ PRESERVE_GRID^n`, plus a non-monomial perturbation
/// of each. A matrix is misclassified when the sampled verdict disagrees
/// with the expected preserved set, or the structural classification
/// disagrees with the sampled verdict.
pub fn preserve_audit(
    sigmas: &[ActivationKind],
    sizes: &[usize],
    probes: usize,
    seed: u64,
    command: &str,
) -> Result<AuditReport> {
    let mut devs = Vec::new();
    let mut summary = Vec::new();
    let mut first_bad = None;
    for &sigma in sigmas {
        for &n in sizes {
            if n == 0 {
                return Err(Error::InvalidArgument("matrix size must be positive".into()));
            }
            let (mut checked, mut preserved, mut wrong) = (0usize, 0usize, 0usize);
            let mut rng = SplitMix64::new(seed);
            let g = PRESERVE_GRID.len();
            for perm in permutations(n) {
                for code in 0..g.pow(n as u32) {
                    let entries: Vec<f64> = (0..n).map(|k| PRESERVE_GRID[(code / g.pow(k as u32)) % g]).collect();
                    let mut a = Tensor::zeros(&[n, n])?;
                    for k in 0..n {
                        a.set(&[perm[k], k], entries[k]);
                    }
                    let mut cases = vec![(a.clone(), expected_preserved(sigma, &entries))];
                    if n > 1 {
                        let k = rng.below(n);
                        let mut row = rng.below(n - 1);
                        if row >= perm[k] {
                            row += 1;
                        }
                        let mut b = a;
                        b.set(&[row, k], 0.5);
                        cases.push((b, false));
                    }
                    for (m, expect) in cases {
                        let verdict = is_preserved(&m, sigma, probes, seed)?.preserved;
                        let structural = match classify_monomial(&m)? {
                            MonomialClass::NotMonomial => false,
                            MonomialClass::Monomial(kind) => match sigma {
                                ActivationKind::Relu => {
                                    matches!(kind, SubgroupKind::Positive | SubgroupKind::PermOnly | SubgroupKind::Trivial)
                                }
                                _ => matches!(kind, SubgroupKind::SignFlip | SubgroupKind::PermOnly | SubgroupKind::Trivial),
                            },
                        };
                        let bad = verdict != expect || structural != verdict;
                        checked += 1;
                        preserved += verdict as usize;
                        if bad {
                            wrong += 1;
                            first_bad.get_or_insert_with(|| json!({"sigma": sigma.name(), "matrix": m.data()}));
                        }
                        devs.push(if bad { (1.0, 1.0) } else { (0.0, 0.0) });
                    }
                }
            }
            summary.push(json!({
                "sigma": sigma.name(),
                "n": n,
                "checked": checked,
                "preserved": preserved,
                "misclassified": wrong,
            }));
        }
    }
    let misclassified = devs.iter().filter(|d| d.0 > 0.0).count();
    let mut report = AuditReport::from_deviations(command, seed, 0.0, &devs);
    report.max_abs_dev = misclassified as f64;
    report.max_rel_dev = if devs.is_empty() { 0.0 } else { misclassified as f64 / devs.len() as f64 };
    report.pass = misclassified == 0;
    Ok(report.with_details(json!({
        "misclassified": misclassified,
        "cases": summary,
        "first_misclassified": first_bad,
    })))
}
