//! A stacked network on weight spaces: equivariant layers with the
//! family's activation applied to every feature entry in between, followed
//! by an invariant head.

use monomial_nfn::equivariant::EquivariantLayer;
use monomial_nfn::invariant::{apply_alpha_stage, apply_invariant, pool_stage, InvariantOptions, InvariantPipelineConfig};
use monomial_nfn::{ActivationKind, Error, Family, Result, SplitMix64, Tensor, WeightSpacePoint, WeightSpaceSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfnStack {
    pub activation: ActivationKind,
    pub layers: Vec<EquivariantLayer>,
    pub head: InvariantPipelineConfig,
}

impl NfnStack {
    /// Equivariant layers through `hidden` feature sizes `(w, b)` (same for
    /// every layer), then the head on the last target space.
    pub fn random(
        input: &WeightSpaceSpec,
        activation: ActivationKind,
        hidden: &[(usize, usize)],
        head: &InvariantOptions,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let family = activation.family();
        let mut layers = Vec::with_capacity(hidden.len());
        let mut source = input.clone();
        for &(w, b) in hidden {
            let target = source.with_uniform_dims(w, b)?;
            layers.push(EquivariantLayer::random(family, &source, &target, rng)?);
            source = target;
        }
        let head = InvariantPipelineConfig::new(&source, family, head, rng)?;
        let stack = Self {
            activation,
            layers,
            head,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn family(&self) -> Family {
        self.activation.family()
    }

    pub fn input_spec(&self) -> &WeightSpaceSpec {
        self.layers.first().map_or(&self.head.spec, |l| l.source())
    }

    pub fn validate(&self) -> Result<()> {
        let family = self.family();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.family() != family {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} is {} but the stack activation is {}",
                    layer.family().name(),
                    self.activation.name()
                )));
            }
            let next = self.layers.get(i + 1).map_or(&self.head.spec, |l| l.source());
            if layer.target() != next {
                return Err(Error::InvalidArgument(format!("layer {i} output does not feed the next stage")));
            }
        }
        if self.head.family != family {
            return Err(Error::InvalidArgument("head family differs from the stack activation".into()));
        }
        self.head.validate()
    }

    pub fn forward(&self, u: &WeightSpacePoint) -> Result<Tensor> {
        apply_invariant(&self.head, &self.features(u)?)
    }

    /// Output of the last equivariant layer after the activation.
    pub fn features(&self, u: &WeightSpacePoint) -> Result<WeightSpacePoint> {
        let mut h = u.clone();
        for layer in &self.layers {
            let sigma = self.activation;
            h = layer.apply(&h)?.map(|v| sigma.apply(v));
        }
        Ok(h)
    }

    /// Input of the head MLP.
    pub fn pooled(&self, u: &WeightSpacePoint) -> Result<Tensor> {
        pool_stage(&self.head, &apply_alpha_stage(&self.head, &self.features(u)?)?)
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        for layer in &mut self.layers {
            layer.for_each_param_mut(f);
        }
        self.head.for_each_param_mut(f);
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.clone().for_each_param_mut(&mut |p| out.push(*p));
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        let n = self.num_params();
        if values.len() != n {
            return Err(Error::InvalidArgument(format!("expected {n} parameters, got {}", values.len())));
        }
        let mut it = values.iter();
        self.for_each_param_mut(&mut |p| *p = *it.next().unwrap());
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.clone().for_each_param_mut(&mut |_| n += 1);
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use monomial_nfn::invariant::AlphaBase;
    use monomial_nfn::GroupSampler;

    fn stack(activation: ActivationKind, channels: Vec<usize>, seed: u64) -> NfnStack {
        let spec = WeightSpaceSpec::fcnn(channels).unwrap();
        let opts = InvariantOptions {
            base: if activation == ActivationKind::Relu {
                AlphaBase::NormalizedSquares
            } else {
                AlphaBase::AbsValue
            },
            learnable_head: true,
            hidden: vec![6],
            output: 1,
            ..Default::default()
        };
        NfnStack::random(&spec, activation, &[(2, 2), (2, 1)], &opts, &mut SplitMix64::new(seed)).unwrap()
    }

    #[test]
    fn params_round_trip() {
        let mut s = stack(ActivationKind::Relu, vec![2, 3, 3, 1], 1);
        let p = s.params();
        assert_eq!(p.len(), s.num_params());
        let shifted: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
        s.set_params(&shifted).unwrap();
        assert_eq!(s.params(), shifted);
        assert!(s.set_params(&p[1..]).is_err());
    }

    #[test]
    fn stack_is_invariant() {
        for (act, channels) in [
            (ActivationKind::Relu, vec![2, 3, 3, 1]),
            (ActivationKind::Tanh, vec![2, 3, 2, 3, 1]),
            (ActivationKind::Sin, vec![1, 2, 3, 2, 2]),
        ] {
            let s = stack(act, channels, 5);
            let mut rng = SplitMix64::new(9);
            let sampler = GroupSampler::new(act.matched_subgroup(), (0.1, 10.0));
            for _ in 0..100 {
                let u = WeightSpacePoint::random_with(s.input_spec(), &mut rng, 1.0).unwrap();
                let g = sampler.sample_with(u.spec().channels(), &mut rng).unwrap();
                let a = s.forward(&u).unwrap();
                let b = s.forward(&g.act_weights(&u).unwrap()).unwrap();
                assert!(a.sub(&b).unwrap().max_abs() <= 1e-8 * g.kappa() * a.max_abs().max(1.0));
            }
        }
    }

    #[test]
    fn pooled_feeds_head() {
        let s = stack(ActivationKind::Relu, vec![2, 3, 3, 1], 3);
        let u = WeightSpacePoint::random_with(s.input_spec(), &mut SplitMix64::new(1), 1.0).unwrap();
        assert_eq!(s.head.mlp.forward(&s.pooled(&u).unwrap()).unwrap(), s.forward(&u).unwrap());
    }

    #[test]
    fn json_round_trip() {
        let s = stack(ActivationKind::Tanh, vec![2, 3, 2, 3, 1], 2);
        let text = serde_json::to_string(&s).unwrap();
        let back: NfnStack = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
