//! Forward evaluation of the FCNNs and 1-D CNNs whose weight spaces the
//! library acts on, and a sampled check that they are invariant under the
//! hidden-neuron symmetry group matched to their activation.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::group::{GroupSampler, SubgroupKind};
use crate::rng::SplitMix64;
use crate::tensor::{conv1d_valid, Elementwise, Tensor};
use crate::trials::run_trials;
use crate::weight_space::WeightSpacePoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Sin,
    Tanh,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 3] = [ActivationKind::Relu, ActivationKind::Sin, ActivationKind::Tanh];

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        self.elementwise().apply(x)
    }

    pub fn elementwise(self) -> Elementwise {
        match self {
            ActivationKind::Relu => Elementwise::Relu,
            ActivationKind::Sin => Elementwise::Sin,
            ActivationKind::Tanh => Elementwise::Tanh,
        }
    }

    /// Subgroup of `G_n` whose elements commute with this activation.
    pub fn matched_subgroup(self) -> SubgroupKind {
        match self {
            ActivationKind::Relu => SubgroupKind::Positive,
            ActivationKind::Sin | ActivationKind::Tanh => SubgroupKind::SignFlip,
        }
    }

    pub fn family(self) -> Family {
        match self {
            ActivationKind::Relu => Family::Relu,
            ActivationKind::Sin | ActivationKind::Tanh => Family::SinTanh,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Sin => "sin",
            ActivationKind::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Self::Relu),
            "sin" => Ok(Self::Sin),
            "tanh" => Ok(Self::Tanh),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

/// Activation family of the network whose weights are being processed.
/// Decides the symmetry group: positive scalings for ReLU, sign flips for
/// sin and tanh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Relu,
    SinTanh,
}

impl Family {
    pub fn subgroup(self) -> SubgroupKind {
        match self {
            Family::Relu => SubgroupKind::Positive,
            Family::SinTanh => SubgroupKind::SignFlip,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Relu => "relu",
            Family::SinTanh => "sintanh",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" | "positive" => Ok(Self::Relu),
            "sintanh" | "sin" | "tanh" | "signflip" => Ok(Self::SinTanh),
            other => Err(Error::InvalidArgument(format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetworkKind {
    Fcnn,
    /// Valid 1-D convolutions on signals of length `input_len`; the final
    /// activation is applied only when `outer_activation` is set.
    Cnn { input_len: usize, outer_activation: bool },
}

impl NetworkKind {
    pub fn cnn(input_len: usize) -> Self {
        NetworkKind::Cnn {
            input_len,
            outer_activation: false,
        }
    }
}

/// Evaluate `f(x; U, σ)`.
///
/// FCNN: `x` has `n_0` entries and the result `n_L`; σ is applied after
/// every layer except the last.
///
/// CNN: `x` has shape `[n_0, input_len]`; channel `j` of layer `i` is
/// `Σ_k W^(i)_{jk} ∗ h_k + b^(i)_j` with `∗` the valid convolution and the
/// (scalar) bias added to every position.
pub fn forward(u: &WeightSpacePoint, kind: NetworkKind, sigma: ActivationKind, x: &Tensor) -> Result<Tensor> {
    match kind {
        NetworkKind::Fcnn => forward_fcnn(u, sigma, x),
        NetworkKind::Cnn {
            input_len,
            outer_activation,
        } => forward_cnn(u, sigma, x, input_len, outer_activation),
    }
}

fn forward_fcnn(u: &WeightSpacePoint, sigma: ActivationKind, x: &Tensor) -> Result<Tensor> {
    let spec = u.spec();
    if !spec.is_fcnn() {
        return Err(Error::InvalidArgument(
            "FCNN evaluation needs scalar weight and bias entries".into(),
        ));
    }
    let n0 = spec.channels()[0];
    if x.dims() != [n0] {
        return Err(dim_err(format!("FCNN input must have shape [{n0}], got {}", x.shape())));
    }
    let l = spec.layers();
    let mut h = x.data().to_vec();
    for t in 0..l {
        let [n, m, _] = spec.weight_shape(t);
        let w = u.weights()[t].data();
        let b = u.biases()[t].data();
        let mut next = Vec::with_capacity(n);
        for j in 0..n {
            let z: f64 = w[j * m..(j + 1) * m].iter().zip(&h).map(|(a, x)| a * x).sum::<f64>() + b[j];
            next.push(if t + 1 < l { sigma.apply(z) } else { z });
        }
        h = next;
    }
    Tensor::vector(h)
}

fn forward_cnn(
    u: &WeightSpacePoint,
    sigma: ActivationKind,
    x: &Tensor,
    input_len: usize,
    outer_activation: bool,
) -> Result<Tensor> {
    let spec = u.spec();
    if spec.bias_dims().iter().any(|&b| b != 1) {
        return Err(Error::InvalidArgument("CNN evaluation needs scalar biases".into()));
    }
    let n0 = spec.channels()[0];
    if x.dims() != [n0, input_len] {
        return Err(dim_err(format!(
            "CNN input must have shape [{n0}×{input_len}], got {}",
            x.shape()
        )));
    }
    let l = spec.layers();
    let mut len = input_len;
    let mut h: Vec<Vec<f64>> = (0..n0).map(|k| x.lane(&[k]).to_vec()).collect();
    for t in 0..l {
        let [n, m, w] = spec.weight_shape(t);
        if len < w {
            return Err(Error::LayerShape {
                layer: t + 1,
                detail: format!("signal of length {len} is shorter than kernel of size {w}"),
            });
        }
        let out_len = len - w + 1;
        let mut next = Vec::with_capacity(n);
        for j in 0..n {
            let bias = u.bias(t, j)[0];
            let mut acc = vec![bias; out_len];
            for (k, hk) in h.iter().enumerate().take(m) {
                let y = conv1d_valid(u.weight(t, j, k), hk)?;
                acc.iter_mut().zip(y).for_each(|(a, v)| *a += v);
            }
            if t + 1 < l || outer_activation {
                acc.iter_mut().for_each(|a| *a = sigma.apply(*a));
            }
            next.push(acc);
        }
        h = next;
        len = out_len;
    }
    Tensor::new(vec![h.len(), len], h.concat())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub trials: usize,
    pub max_abs_dev: f64,
    pub max_rel_dev: f64,
    pub argmax_trial: usize,
}

impl InvarianceReport {
    pub fn from_deviations(devs: &[(f64, f64)]) -> Self {
        let mut report = Self {
            trials: devs.len(),
            max_abs_dev: 0.0,
            max_rel_dev: 0.0,
            argmax_trial: 0,
        };
        for (i, &(abs, rel)) in devs.iter().enumerate() {
            report.max_abs_dev = report.max_abs_dev.max(abs);
            if rel > report.max_rel_dev {
                report.max_rel_dev = rel;
                report.argmax_trial = i;
            }
        }
        report
    }
}

/// Trial loop settings shared by the sampled checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialConfig {
    pub trials: usize,
    pub seed: u64,
    pub scale_range: (f64, f64),
    /// Worker threads; 1 runs inline.
    pub jobs: usize,
}

impl TrialConfig {
    pub fn new(trials: usize, seed: u64, scale_range: (f64, f64)) -> Self {
        Self {
            trials,
            seed,
            scale_range,
            jobs: 1,
        }
    }
}

/// Random probe input for the network kind.
pub fn random_input(u: &WeightSpacePoint, kind: NetworkKind, rng: &mut SplitMix64) -> Tensor {
    let n0 = u.spec().channels()[0];
    match kind {
        NetworkKind::Fcnn => Tensor::vector(rng.uniform_vec(n0, -1.0, 1.0)).unwrap(),
        NetworkKind::Cnn { input_len, .. } => {
            Tensor::new(vec![n0, input_len], rng.uniform_vec(n0 * input_len, -1.0, 1.0)).unwrap()
        }
    }
}

/// Deviation between `f(x; gU)` and `f(x; U)`: absolute, and relative to
/// `max(1, ‖f(x; U)‖∞)`.
pub fn deviation(reference: &Tensor, other: &Tensor) -> Result<(f64, f64)> {
    let abs = reference.sub(other)?.max_abs();
    Ok((abs, abs / reference.max_abs().max(1.0)))
}

/// For each trial, draw `g` from `subgroup` (boundary layers fixed) and a
/// probe `x`, and compare `f(x; gU)` with `f(x; U)`.
///
/// Trial `i` uses the generator seeded with `seed + i`, so results do not
/// depend on `jobs`.
pub fn check_invariance(
    u: &WeightSpacePoint,
    kind: NetworkKind,
    sigma: ActivationKind,
    subgroup: SubgroupKind,
    cfg: &TrialConfig,
) -> Result<InvarianceReport> {
    let sampler = GroupSampler::new(subgroup, cfg.scale_range);
    let sizes = u.spec().channels().to_vec();
    let devs = run_trials(cfg.trials, cfg.jobs, |i| -> Result<(f64, f64)> {
        let mut rng = SplitMix64::for_trial(cfg.seed, i);
        let g = sampler.sample_with(&sizes, &mut rng)?;
        let x = random_input(u, kind, &mut rng);
        let base = forward(u, kind, sigma, &x)?;
        let moved = forward(&g.act_weights(u)?, kind, sigma, &x)?;
        deviation(&base, &moved)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(InvarianceReport::from_deviations(&devs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{GroupElement, MonomialElement};
    use crate::weight_space::WeightSpaceSpec;

    #[test]
    fn zero_weights_give_last_bias() {
        let spec = WeightSpaceSpec::fcnn(vec![2, 3, 2]).unwrap();
        let mut u = WeightSpacePoint::zeros(&spec);
        u.biases_mut()[0].data_mut().copy_from_slice(&[1.0, -2.0, 3.0]);
        u.biases_mut()[1].data_mut().copy_from_slice(&[0.5, -0.25]);
        let x = Tensor::vector(vec![3.0, 4.0]).unwrap();
        for sigma in ActivationKind::ALL {
            assert_eq!(forward(&u, NetworkKind::Fcnn, sigma, &x).unwrap().data(), &[0.5, -0.25]);
        }
    }

    #[test]
    fn single_layer_is_affine() {
        let spec = WeightSpaceSpec::fcnn(vec![1, 1]).unwrap();
        let u = WeightSpacePoint::from_flat(&spec, &[2.0, 3.0]).unwrap();
        let y = forward(&u, NetworkKind::Fcnn, ActivationKind::Relu, &Tensor::vector(vec![5.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[13.0]);

        let spec = WeightSpaceSpec::fcnn(vec![3, 2]).unwrap();
        let mut rng = SplitMix64::new(2);
        let u = WeightSpacePoint::random_with(&spec, &mut rng, 1.0).unwrap();
        let x = Tensor::vector(rng.uniform_vec(3, -1.0, 1.0)).unwrap();
        let w = u.weights()[0].clone().reshape(vec![2, 3]).unwrap();
        let expected = w.matmul(&x).unwrap().add(&Tensor::vector(u.biases()[0].data().to_vec()).unwrap()).unwrap();
        let y = forward(&u, NetworkKind::Fcnn, ActivationKind::Tanh, &x).unwrap();
        assert!(y.sub(&expected).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn cnn_single_channel_matches_conv() {
        let spec = WeightSpaceSpec::cnn(vec![1, 1], vec![2]).unwrap();
        let u = WeightSpacePoint::from_flat(&spec, &[1.0, 1.0, 0.0]).unwrap();
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = forward(&u, NetworkKind::cnn(3), ActivationKind::Relu, &x).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);
    }

    #[test]
    fn cnn_too_short_names_layer() {
        let spec = WeightSpaceSpec::cnn(vec![1, 1, 1], vec![2, 3]).unwrap();
        let u = WeightSpacePoint::zeros(&spec);
        let x = Tensor::zeros(&[1, 3]).unwrap();
        match forward(&u, NetworkKind::cnn(3), ActivationKind::Relu, &x).unwrap_err() {
            Error::LayerShape { layer, .. } => assert_eq!(layer, 2),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn relu_homogeneity_identity() {
        // a·σ(W∗x + b) = σ((aW)∗x + ab) for a > 0.
        let mut rng = SplitMix64::new(31);
        for _ in 0..200 {
            let w = rng.uniform_vec(3, -1.0, 1.0);
            let x = rng.uniform_vec(7, -1.0, 1.0);
            let b = rng.uniform(-1.0, 1.0);
            let a = 2f64.powi(rng.below(16) as i32 - 8);
            let lhs: Vec<f64> = conv1d_valid(&w, &x).unwrap().iter().map(|z| a * (z + b).max(0.0)).collect();
            let aw: Vec<f64> = w.iter().map(|v| a * v).collect();
            let rhs: Vec<f64> = conv1d_valid(&aw, &x).unwrap().iter().map(|z| (z + a * b).max(0.0)).collect();
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn matched_pairs_are_invariant() {
        let spec = WeightSpaceSpec::fcnn(vec![2, 4, 3, 2]).unwrap();
        let u = WeightSpacePoint::random(&spec, 1, 1.0).unwrap();
        let cfg = TrialConfig::new(200, 5, (0.5, 2.0));
        let r = check_invariance(&u, NetworkKind::Fcnn, ActivationKind::Relu, SubgroupKind::Positive, &cfg).unwrap();
        assert!(r.max_rel_dev <= 1e-10, "{r:?}");
        let r = check_invariance(&u, NetworkKind::Fcnn, ActivationKind::Tanh, SubgroupKind::SignFlip, &cfg).unwrap();
        assert!(r.max_rel_dev <= 1e-12, "{r:?}");
        let r = check_invariance(&u, NetworkKind::Fcnn, ActivationKind::Sin, SubgroupKind::SignFlip, &cfg).unwrap();
        assert!(r.max_rel_dev <= 1e-12, "{r:?}");
    }

    #[test]
    fn cnn_invariance_with_outer_activation() {
        let spec = WeightSpaceSpec::cnn(vec![2, 3, 2], vec![3, 2]).unwrap();
        let u = WeightSpacePoint::random(&spec, 8, 1.0).unwrap();
        for outer in [false, true] {
            let kind = NetworkKind::Cnn {
                input_len: 9,
                outer_activation: outer,
            };
            let cfg = TrialConfig::new(100, 0, (0.1, 10.0));
            let r = check_invariance(&u, kind, ActivationKind::Relu, SubgroupKind::Positive, &cfg).unwrap();
            assert!(r.max_rel_dev <= 1e-10, "{r:?}");
        }
    }

    #[test]
    fn sign_flip_breaks_relu_network() {
        // W1 = [1], b1 = [0], W2 = [1]; x = 1: flipping the hidden neuron gives 0 instead of 1.
        let spec = WeightSpaceSpec::fcnn(vec![1, 1, 1]).unwrap();
        let u = WeightSpacePoint::from_flat(&spec, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        let g = GroupElement::new(vec![
            MonomialElement::identity(1),
            MonomialElement::from_parts(vec![-1.0], vec![0]).unwrap(),
            MonomialElement::identity(1),
        ])
        .unwrap();
        let x = Tensor::vector(vec![1.0]).unwrap();
        let a = forward(&u, NetworkKind::Fcnn, ActivationKind::Relu, &x).unwrap();
        let b = forward(&g.act_weights(&u).unwrap(), NetworkKind::Fcnn, ActivationKind::Relu, &x).unwrap();
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(b.data(), &[0.0]);
        assert!(deviation(&a, &b).unwrap().1 > 1e-3);
    }

    #[test]
    fn jobs_do_not_change_report() {
        let spec = WeightSpaceSpec::fcnn(vec![2, 3, 2]).unwrap();
        let u = WeightSpacePoint::random(&spec, 1, 1.0).unwrap();
        let mut cfg = TrialConfig::new(64, 9, (0.5, 2.0));
        let a = check_invariance(&u, NetworkKind::Fcnn, ActivationKind::Relu, SubgroupKind::SignFlip, &cfg).unwrap();
        cfg.jobs = 4;
        let b = check_invariance(&u, NetworkKind::Fcnn, ActivationKind::Relu, SubgroupKind::SignFlip, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
