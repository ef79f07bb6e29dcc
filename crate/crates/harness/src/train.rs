//! Toy regression on weight spaces: predict `f(x₀; U)` of small ReLU FCNNs
//! with an [`NfnStack`], trained by gradient descent on central
//! finite-difference gradients.

use monomial_nfn::invariant::{AlphaBase, InvariantOptions, PoolMode};
use monomial_nfn::network::{deviation, forward, NetworkKind};
use monomial_nfn::trials::run_trials;
use monomial_nfn::{ActivationKind, Error, GroupSampler, Result, SplitMix64, Tensor, WeightSpacePoint, WeightSpaceSpec};
use serde::{Deserialize, Serialize};

use crate::stack::NfnStack;

/// Largest stack accepted for finite-difference training.
pub const PARAM_BUDGET: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    /// Channel counts of the networks in the dataset.
    pub channels: Vec<usize>,
    /// Probe input `x₀`.
    pub probe: Vec<f64>,
    pub train_size: usize,
    pub test_size: usize,
    /// Entries of dataset weights are `Uniform[−scale, scale]`.
    pub weight_scale: f64,
    /// Feature sizes `(w, b)` of each equivariant layer's output.
    pub equivariant: Vec<(usize, usize)>,
    pub mlp_hidden: Vec<usize>,
    pub pool: PoolMode,
    /// Positive scales for the held-out invariance check.
    pub check_scale_range: (f64, f64),
    pub check_tolerance: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 500,
            lr: 0.05,
            channels: vec![1, 3, 3, 1],
            probe: vec![1.0],
            train_size: 48,
            test_size: 32,
            weight_scale: 1.0,
            equivariant: vec![(2, 2)],
            mlp_hidden: vec![16],
            pool: PoolMode::Mean,
            check_scale_range: (0.1, 10.0),
            check_tolerance: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    pub command: String,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub num_params: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_ratio: f64,
    /// Training loss before each step, then after the last.
    pub losses: Vec<f64>,
    /// Set when a non-finite loss stopped training; the state is the last finite one.
    pub aborted_at_step: Option<usize>,
    pub heldout_loss: f64,
    pub heldout_max_rel_dev: f64,
    pub check_tolerance: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
}

pub struct Dataset {
    pub inputs: Vec<WeightSpacePoint>,
    pub targets: Vec<f64>,
}

/// `n` random ReLU FCNNs with targets `f(x₀; U)`.
pub fn make_dataset(spec: &WeightSpaceSpec, probe: &[f64], n: usize, scale: f64, rng: &mut SplitMix64) -> Result<Dataset> {
    let x = Tensor::vector(probe.to_vec())?;
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let u = WeightSpacePoint::random_with(spec, rng, scale)?;
        let y = forward(&u, NetworkKind::Fcnn, ActivationKind::Relu, &x)?;
        if y.len() != 1 {
            return Err(Error::InvalidArgument("toy targets need a single network output".into()));
        }
        targets.push(y.data()[0]);
        inputs.push(u);
    }
    Ok(Dataset { inputs, targets })
}

pub fn mse(stack: &NfnStack, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for (u, y) in data.inputs.iter().zip(&data.targets) {
        let p = stack.forward(u)?.data()[0];
        total += (p - y) * (p - y);
    }
    Ok(total / data.inputs.len().max(1) as f64)
}

fn loss_at(stack: &NfnStack, params: &[f64], data: &Dataset) -> Result<f64> {
    let mut s = stack.clone();
    s.set_params(params)?;
    mse(&s, data)
}

/// Central differences with step `1e−4 · (1 + |θ_i|)`. Head-MLP parameters
/// (the trailing block of [`NfnStack::params`]) reuse cached pooled features.
pub fn fd_gradient(stack: &NfnStack, data: &Dataset, jobs: usize) -> Result<Vec<f64>> {
    let theta = stack.params();
    let mut mlp_len = 0;
    stack.head.mlp.clone().for_each_param_mut(&mut |_| mlp_len += 1);
    let mlp_start = theta.len() - mlp_len;
    let pooled = data.inputs.iter().map(|u| stack.pooled(u)).collect::<Result<Vec<_>>>()?;
    let mlp_loss = |params: &[f64]| -> Result<f64> {
        let mut mlp = stack.head.mlp.clone();
        let mut it = params[mlp_start..].iter();
        mlp.for_each_param_mut(&mut |p| *p = *it.next().unwrap());
        let mut total = 0.0;
        for (x, y) in pooled.iter().zip(&data.targets) {
            let p = mlp.forward(x)?.data()[0];
            total += (p - y) * (p - y);
        }
        Ok(total / data.inputs.len().max(1) as f64)
    };
    run_trials(theta.len(), jobs, |i| -> Result<f64> {
        let h = 1e-4 * (1.0 + theta[i].abs());
        let mut p = theta.clone();
        let eval = |p: &[f64]| if i >= mlp_start { mlp_loss(p) } else { loss_at(stack, p, data) };
        p[i] = theta[i] + h;
        let up = eval(&p)?;
        p[i] = theta[i] - h;
        let down = eval(&p)?;
        Ok((up - down) / (2.0 * h))
    })
    .into_iter()
    .collect()
}

pub fn build_stack(cfg: &ToyConfig, rng: &mut SplitMix64) -> Result<NfnStack> {
    let spec = WeightSpaceSpec::fcnn(cfg.channels.clone())?;
    let head = InvariantOptions {
        base: AlphaBase::NormalizedSquares,
        learnable_head: false,
        pool: cfg.pool,
        hidden: cfg.mlp_hidden.clone(),
        output: 1,
    };
    NfnStack::random(&spec, ActivationKind::Relu, &cfg.equivariant, &head, rng)
}

/// Train, then compare predictions on held-out points and on group-augmented
/// copies of them.
pub fn train_toy(cfg: &ToyConfig, jobs: usize, command: &str) -> Result<(TrainLog, NfnStack)> {
    if cfg.probe.len() != cfg.channels.first().copied().unwrap_or(0) {
        return Err(Error::InvalidArgument(format!(
            "probe has {} entries, networks take {}",
            cfg.probe.len(),
            cfg.channels.first().copied().unwrap_or(0)
        )));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {} must be finite and non-negative", cfg.lr)));
    }
    let mut rng = SplitMix64::new(cfg.seed);
    let mut stack = build_stack(cfg, &mut rng)?;
    let n = stack.num_params();
    if n > PARAM_BUDGET {
        return Err(Error::InvalidArgument(format!(
            "stack has {n} parameters, budget is {PARAM_BUDGET}"
        )));
    }
    let spec = stack.input_spec().clone();
    let train = make_dataset(&spec, &cfg.probe, cfg.train_size, cfg.weight_scale, &mut rng)?;
    let test = make_dataset(&spec, &cfg.probe, cfg.test_size, cfg.weight_scale, &mut rng)?;

    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut loss = mse(&stack, &train)?;
    losses.push(loss);
    let mut aborted = None;
    for step in 0..cfg.steps {
        let grad = fd_gradient(&stack, &train, jobs)?;
        let theta: Vec<f64> = stack.params().iter().zip(&grad).map(|(t, g)| t - cfg.lr * g).collect();
        let mut next = stack.clone();
        next.set_params(&theta)?;
        let next_loss = mse(&next, &train)?;
        if !next_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            aborted = Some(step);
            break;
        }
        stack = next;
        loss = next_loss;
        losses.push(loss);
    }

    let heldout_loss = mse(&stack, &test)?;
    let sampler = GroupSampler::new(stack.family().subgroup(), cfg.check_scale_range);
    let mut max_rel: f64 = 0.0;
    for u in &test.inputs {
        let g = sampler.sample_with(u.spec().channels(), &mut rng)?;
        let (_, rel) = deviation(&stack.forward(u)?, &stack.forward(&g.act_weights(u)?)?)?;
        max_rel = max_rel.max(if rel.is_nan() { f64::INFINITY } else { rel });
    }

    let initial = losses[0];
    let ratio = loss / initial;
    let pass = aborted.is_none() && ratio <= 0.5 && max_rel <= cfg.check_tolerance;
    Ok((
        TrainLog {
            command: command.into(),
            seed: cfg.seed,
            steps: cfg.steps,
            lr: cfg.lr,
            num_params: n,
            initial_loss: initial,
            final_loss: loss,
            loss_ratio: ratio,
            losses,
            aborted_at_step: aborted,
            heldout_loss,
            heldout_max_rel_dev: max_rel,
            check_tolerance: cfg.check_tolerance,
            pass,
            elapsed_ms: None,
        },
        stack,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_keeps_loss() {
        let cfg = ToyConfig {
            steps: 3,
            lr: 0.0,
            train_size: 8,
            test_size: 4,
            ..Default::default()
        };
        let (log, _) = train_toy(&cfg, 1, "t").unwrap();
        assert!(log.losses.iter().all(|&l| l == log.losses[0]));
    }

    #[test]
    fn fd_gradient_matches_quadratic_direction() {
        let cfg = ToyConfig {
            train_size: 6,
            ..Default::default()
        };
        let mut rng = SplitMix64::new(1);
        let stack = build_stack(&cfg, &mut rng).unwrap();
        let data = make_dataset(stack.input_spec(), &cfg.probe, 6, 1.0, &mut rng).unwrap();
        let g = fd_gradient(&stack, &data, 1).unwrap();
        let base = mse(&stack, &data).unwrap();
        let eps = 1e-4 / g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let theta: Vec<f64> = stack.params().iter().zip(&g).map(|(t, d)| t - eps * d).collect();
        let stepped = loss_at(&stack, &theta, &data).unwrap();
        assert!(stepped < base);
    }

    #[test]
    fn cached_head_gradient_matches_full_recompute() {
        let cfg = ToyConfig::default();
        let mut rng = SplitMix64::new(2);
        let stack = build_stack(&cfg, &mut rng).unwrap();
        let data = make_dataset(stack.input_spec(), &cfg.probe, 5, 1.0, &mut rng).unwrap();
        let fast = fd_gradient(&stack, &data, 1).unwrap();
        let theta = stack.params();
        for i in (0..theta.len()).step_by(7) {
            let h = 1e-4 * (1.0 + theta[i].abs());
            let mut p = theta.clone();
            p[i] += h;
            let up = loss_at(&stack, &p, &data).unwrap();
            p[i] = theta[i] - h;
            let down = loss_at(&stack, &p, &data).unwrap();
            let slow = (up - down) / (2.0 * h);
            assert!((fast[i] - slow).abs() <= 1e-9 * (1.0 + slow.abs()), "param {i}: {} vs {slow}", fast[i]);
        }
    }

    #[test]
    fn budget_enforced() {
        let cfg = ToyConfig {
            mlp_hidden: vec![200],
            ..Default::default()
        };
        assert!(matches!(train_toy(&cfg, 1, "t"), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn jobs_do_not_change_gradient() {
        let cfg = ToyConfig::default();
        let mut rng = SplitMix64::new(4);
        let stack = build_stack(&cfg, &mut rng).unwrap();
        let data = make_dataset(stack.input_spec(), &cfg.probe, 5, 1.0, &mut rng).unwrap();
        assert_eq!(fd_gradient(&stack, &data, 1).unwrap(), fd_gradient(&stack, &data, 3).unwrap());
    }
}
