//! Invariant read-out `I = MLP ∘ pool ∘ α`.
//!
//! The α stage maps every weight and bias feature vector through a function
//! that kills the diagonal part of the group: positively homogeneous of
//! degree zero for positive scalings, even for sign flips. Positions that a
//! hidden permutation can exchange share one α, so the stage commutes with
//! permutations. Pooling over the permuted axes then removes the
//! permutations, and an MLP produces the output.

use serde::{Deserialize, Serialize};

use crate::equivariant::Slot;
use crate::error::{Error, Result};
use crate::network::Family;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::weight_space::{WeightSpacePoint, WeightSpaceSpec};

/// Version of the pooled-feature block order produced by [`pool_stage`].
pub const POOL_LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaBase {
    /// `x ↦ x²/Σx²`, with `0 ↦ 0`.
    NormalizedSquares,
    /// `x ↦ |x|`.
    AbsValue,
}

impl AlphaBase {
    pub fn apply(self, x: &[f64], out: &mut [f64]) {
        match self {
            AlphaBase::NormalizedSquares => {
                let s: f64 = x.iter().map(|v| v * v).sum();
                if s == 0.0 {
                    out.fill(0.0);
                } else {
                    for (o, v) in out.iter_mut().zip(x) {
                        *o = v * v / s;
                    }
                }
            }
            AlphaBase::AbsValue => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = v.abs();
                }
            }
        }
    }

    /// `α(λx) = α(x)` for every `λ > 0`.
    pub fn is_scale_invariant(self) -> bool {
        matches!(self, AlphaBase::NormalizedSquares)
    }

    /// `α(−x) = α(x)`.
    pub fn is_even(self) -> bool {
        true
    }

    pub fn allowed_for(self, family: Family) -> bool {
        match family {
            Family::Relu => self.is_scale_invariant(),
            Family::SinTanh => self.is_even(),
        }
    }
}

impl std::str::FromStr for AlphaBase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "normalized_squares" | "normalize" => Ok(Self::NormalizedSquares),
            "abs" | "abs_value" => Ok(Self::AbsValue),
            other => Err(Error::InvalidArgument(format!("unknown alpha function '{other}'"))),
        }
    }
}

/// Learnable `β(y) = A y + c` applied after the base α.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineHead {
    pub linear: Tensor,
    pub offset: Tensor,
}

impl AffineHead {
    pub fn identity(n: usize) -> Result<Self> {
        Ok(Self {
            linear: Tensor::identity(n)?,
            offset: Tensor::zeros(&[n])?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaKind {
    NormalizedSquares,
    AbsValue,
    Composed { base: AlphaBase, head: AffineHead },
}

impl AlphaKind {
    pub fn base(&self) -> AlphaBase {
        match self {
            AlphaKind::NormalizedSquares => AlphaBase::NormalizedSquares,
            AlphaKind::AbsValue => AlphaBase::AbsValue,
            AlphaKind::Composed { base, .. } => *base,
        }
    }

    pub fn from_base(base: AlphaBase) -> Self {
        match base {
            AlphaBase::NormalizedSquares => AlphaKind::NormalizedSquares,
            AlphaBase::AbsValue => AlphaKind::AbsValue,
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        match self {
            AlphaKind::NormalizedSquares | AlphaKind::AbsValue => self.base().apply(x, out),
            AlphaKind::Composed { base, head } => {
                let mut y = vec![0.0; x.len()];
                base.apply(x, &mut y);
                let n = y.len();
                for (i, o) in out.iter_mut().enumerate() {
                    let row = &head.linear.data()[i * n..(i + 1) * n];
                    *o = head.offset.data()[i] + row.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }

    fn head_mut(&mut self) -> Option<&mut AffineHead> {
        match self {
            AlphaKind::Composed { head, .. } => Some(head),
            _ => None,
        }
    }
}

/// Number of α slots for `spec` and the feature length each acts on.
///
/// With `L ≥ 2`: one weight slot per input neuron of layer 1 and one bias
/// slot; one weight and one bias slot per middle layer; one weight slot and
/// one bias slot per output neuron of layer `L`. With `L = 1` nothing is
/// permuted and every entry has its own slot.
pub fn alpha_slot_dims(spec: &WeightSpaceSpec) -> Vec<usize> {
    let l = spec.layers();
    let ch = spec.channels();
    let (w, b) = (spec.weight_dims(), spec.bias_dims());
    if l == 1 {
        let mut dims = vec![w[0]; ch[1] * ch[0]];
        dims.extend(vec![b[0]; ch[1]]);
        return dims;
    }
    let mut dims = vec![w[0]; ch[0]];
    dims.push(b[0]);
    for t in 1..l - 1 {
        dims.push(w[t]);
        dims.push(b[t]);
    }
    dims.extend(vec![w[l - 1]; ch[l]]);
    dims.extend(vec![b[l - 1]; ch[l]]);
    dims
}

/// Slot index of an entry of `spec`.
pub fn alpha_slot(spec: &WeightSpaceSpec, slot: Slot) -> usize {
    let l = spec.layers();
    let ch = spec.channels();
    let (n0, nl) = (ch[0], ch[l]);
    if l == 1 {
        return match slot {
            Slot::Weight { row, col, .. } => row * n0 + col,
            Slot::Bias { row, .. } => ch[1] * n0 + row,
        };
    }
    let last = n0 + 1 + 2 * (l - 2);
    match slot {
        Slot::Weight { layer: 1, col, .. } => col,
        Slot::Bias { layer: 1, .. } => n0,
        Slot::Weight { layer, row, .. } if layer == l => last + row,
        Slot::Bias { layer, row } if layer == l => last + nl + row,
        Slot::Weight { layer, .. } => n0 + 1 + 2 * (layer - 2),
        Slot::Bias { layer, .. } => n0 + 2 + 2 * (layer - 2),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Sum,
    #[default]
    Mean,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(Error::InvalidArgument(format!("unknown pool mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out × in`.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Dense network with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Layers `input → widths… → output`, weights and biases
    /// `Uniform[−1/√fan_in, 1/√fan_in]`.
    pub fn random(input: usize, widths: &[usize], output: usize, rng: &mut SplitMix64) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(widths);
        sizes.push(output);
        let layers = sizes
            .windows(2)
            .map(|p| {
                let (fan_in, fan_out) = (p[0], p[1]);
                let s = (1.0 / fan_in.max(1) as f64).sqrt();
                Ok(Linear {
                    weight: Tensor::new(vec![fan_out, fan_in], rng.uniform_vec(fan_out * fan_in, -s, s))?,
                    bias: Tensor::new(vec![fan_out], rng.uniform_vec(fan_out, -s, s))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// A single identity read-out on `n` features.
    pub fn identity(n: usize) -> Result<Self> {
        Ok(Self {
            layers: vec![Linear {
                weight: Tensor::identity(n)?,
                bias: Tensor::zeros(&[n])?,
            }],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.dims()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.weight.matmul(&h)?.add(&layer.bias)?;
            if i < last {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("MLP needs at least one layer".into()));
        }
        let mut prev = self.input_dim();
        for (i, l) in self.layers.iter().enumerate() {
            let d = l.weight.dims();
            if d.len() != 2 || d[1] != prev || l.bias.dims() != [d[0]] {
                return Err(Error::InvalidArgument(format!("MLP layer {i} has inconsistent shapes")));
            }
            prev = d[0];
        }
        Ok(())
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        for l in &mut self.layers {
            l.weight.data_mut().iter_mut().for_each(&mut *f);
            l.bias.data_mut().iter_mut().for_each(&mut *f);
        }
    }
}

/// Options for building an [`InvariantPipelineConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantOptions {
    pub base: AlphaBase,
    /// Follow every α with a learnable affine map, initialized to the identity.
    pub learnable_head: bool,
    pub pool: PoolMode,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl Default for InvariantOptions {
    fn default() -> Self {
        Self {
            base: AlphaBase::NormalizedSquares,
            learnable_head: false,
            pool: PoolMode::Mean,
            hidden: Vec::new(),
            output: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantPipelineConfig {
    pub family: Family,
    pub spec: WeightSpaceSpec,
    /// One α per slot, in [`alpha_slot_dims`] order.
    pub alpha: Vec<AlphaKind>,
    pub pool: PoolMode,
    pub mlp: Mlp,
    pub pool_layout_version: u32,
}

impl InvariantPipelineConfig {
    pub fn new(spec: &WeightSpaceSpec, family: Family, opts: &InvariantOptions, rng: &mut SplitMix64) -> Result<Self> {
        let alpha = alpha_slot_dims(spec)
            .into_iter()
            .map(|n| {
                Ok(if opts.learnable_head {
                    AlphaKind::Composed {
                        base: opts.base,
                        head: AffineHead::identity(n)?,
                    }
                } else {
                    AlphaKind::from_base(opts.base)
                })
            })
            .collect::<Result<_>>()?;
        let mlp = Mlp::random(pooled_dim(spec), &opts.hidden, opts.output, rng)?;
        let cfg = Self {
            family,
            spec: spec.clone(),
            alpha,
            pool: opts.pool,
            mlp,
            pool_layout_version: POOL_LAYOUT_VERSION,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pipeline whose read-out is the identity on pooled features.
    pub fn with_identity_mlp(spec: &WeightSpaceSpec, family: Family, base: AlphaBase, pool: PoolMode) -> Result<Self> {
        let cfg = Self {
            family,
            spec: spec.clone(),
            alpha: vec![AlphaKind::from_base(base); alpha_slot_dims(spec).len()],
            pool,
            mlp: Mlp::identity(pooled_dim(spec))?,
            pool_layout_version: POOL_LAYOUT_VERSION,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = alpha_slot_dims(&self.spec);
        if self.alpha.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} alpha slots, got {}",
                dims.len(),
                self.alpha.len()
            )));
        }
        for (i, (a, &n)) in self.alpha.iter().zip(&dims).enumerate() {
            if !a.base().allowed_for(self.family) {
                return Err(Error::InvalidArgument(format!(
                    "alpha slot {i}: {:?} does not remove the {} family's scalings",
                    a.base(),
                    self.family.name()
                )));
            }
            if let AlphaKind::Composed { head, .. } = a {
                if head.linear.dims() != [n, n] || head.offset.dims() != [n] {
                    return Err(Error::InvalidArgument(format!("alpha slot {i}: head must be {n}×{n}")));
                }
            }
        }
        if self.pool_layout_version != POOL_LAYOUT_VERSION {
            return Err(Error::Unsupported(format!(
                "pool layout version {} (supported: {POOL_LAYOUT_VERSION})",
                self.pool_layout_version
            )));
        }
        self.mlp.validate()?;
        if self.mlp.input_dim() != pooled_dim(&self.spec) {
            return Err(Error::InvalidArgument(format!(
                "MLP input {} does not match pooled dimension {}",
                self.mlp.input_dim(),
                pooled_dim(&self.spec)
            )));
        }
        Ok(())
    }

    fn check_input(&self, u: &WeightSpacePoint) -> Result<()> {
        if u.spec() != &self.spec {
            return Err(Error::InvalidArgument(format!(
                "input weight space {:?} does not match the pipeline's {:?}",
                u.spec(),
                self.spec
            )));
        }
        Ok(())
    }

    /// Visits α heads, then MLP weights.
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        for a in &mut self.alpha {
            if let Some(h) = a.head_mut() {
                h.linear.data_mut().iter_mut().for_each(&mut *f);
                h.offset.data_mut().iter_mut().for_each(&mut *f);
            }
        }
        self.mlp.for_each_param_mut(f);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.clone().for_each_param_mut(&mut |_| n += 1);
        n
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<invariant config>".into(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Apply each entry's α.
pub fn apply_alpha_stage(cfg: &InvariantPipelineConfig, u: &WeightSpacePoint) -> Result<WeightSpacePoint> {
    cfg.check_input(u)?;
    let mut out = u.clone();
    for slot in Slot::all(&cfg.spec) {
        let alpha = &cfg.alpha[alpha_slot(&cfg.spec, slot)];
        match slot {
            Slot::Weight { layer, row, col } => alpha.apply(u.weight(layer - 1, row, col), out.weight_mut(layer - 1, row, col)),
            Slot::Bias { layer, row } => alpha.apply(u.bias(layer - 1, row), out.bias_mut(layer - 1, row)),
        }
    }
    Ok(out)
}

/// Length of the pooled feature vector:
/// `w1·n0 + wL·nL + Σ_{1<i<L} wi + bL·nL + Σ_{i<L} bi`, or `dim U` when `L = 1`.
pub fn pooled_dim(spec: &WeightSpaceSpec) -> usize {
    let l = spec.layers();
    if l == 1 {
        return spec.dimension();
    }
    let ch = spec.channels();
    let (w, b) = (spec.weight_dims(), spec.bias_dims());
    w[0] * ch[0] + w[l - 1] * ch[l] + w[1..l - 1].iter().sum::<usize>() + b[l - 1] * ch[l] + b[..l - 1].iter().sum::<usize>()
}

fn accumulate<'a>(parts: impl Iterator<Item = &'a [f64]>, len: usize, mode: PoolMode, out: &mut Vec<f64>) {
    let mut acc = vec![0.0; len];
    let mut count = 0usize;
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
        count += 1;
    }
    if mode == PoolMode::Mean && count > 0 {
        acc.iter_mut().for_each(|a| *a /= count as f64);
    }
    out.extend(acc);
}

/// Pool over the permuted axes. Block order: layer-1 weights pooled over rows
/// (one vector per column), layer-`L` weights pooled over columns (one per
/// row), middle-layer weights pooled over both axes, the output biases in
/// full, then the biases of layers `1..L−1` pooled. With `L = 1` the point is
/// flattened unchanged.
pub fn pool_features(spec: &WeightSpaceSpec, mode: PoolMode, u: &WeightSpacePoint) -> Result<Tensor> {
    if u.spec() != spec {
        return Err(Error::InvalidArgument("pooled point does not match the pipeline's weight space".into()));
    }
    let l = spec.layers();
    if l == 1 {
        return Tensor::vector(u.to_flat());
    }
    let ch = spec.channels();
    let (w, b) = (spec.weight_dims(), spec.bias_dims());
    let mut out = Vec::with_capacity(pooled_dim(spec));
    for k in 0..ch[0] {
        accumulate((0..ch[1]).map(|j| u.weight(0, j, k)), w[0], mode, &mut out);
    }
    for j in 0..ch[l] {
        accumulate((0..ch[l - 1]).map(|k| u.weight(l - 1, j, k)), w[l - 1], mode, &mut out);
    }
    for t in 1..l - 1 {
        let m = ch[t];
        accumulate(
            (0..ch[t + 1] * m).map(|jk| u.weight(t, jk / m, jk % m)),
            w[t],
            mode,
            &mut out,
        );
    }
    for j in 0..ch[l] {
        out.extend_from_slice(u.bias(l - 1, j));
    }
    for t in 0..l - 1 {
        accumulate((0..ch[t + 1]).map(|j| u.bias(t, j)), b[t], mode, &mut out);
    }
    Tensor::vector(out)
}

pub fn pool_stage(cfg: &InvariantPipelineConfig, u: &WeightSpacePoint) -> Result<Tensor> {
    pool_features(&cfg.spec, cfg.pool, u)
}

/// `MLP(pool(α(U)))`.
pub fn apply_invariant(cfg: &InvariantPipelineConfig, u: &WeightSpacePoint) -> Result<Tensor> {
    let a = apply_alpha_stage(cfg, u)?;
    let pooled = pool_stage(cfg, &a)?;
    cfg.mlp.forward(&pooled)
}

/// Normalize every feature vector with normalized squares, then average over
/// both channel axes: one vector per `[n, m, w]` layer tensor.
pub fn normalize_average_pool(weights: &[Tensor]) -> Result<Vec<Tensor>> {
    weights
        .iter()
        .enumerate()
        .map(|(t, wt)| {
            let [n, m, w] = match wt.dims() {
                &[n, m, w] => [n, m, w],
                _ => {
                    return Err(Error::LayerShape {
                        layer: t,
                        detail: format!("expected a [rows, cols, features] tensor, got {}", wt.shape()),
                    })
                }
            };
            let mut acc = vec![0.0; w];
            let mut buf = vec![0.0; w];
            for entry in wt.data().chunks_exact(w.max(1)).take(n * m) {
                AlphaBase::NormalizedSquares.apply(entry, &mut buf);
                acc.iter_mut().zip(&buf).for_each(|(a, v)| *a += v);
            }
            let count = (n * m).max(1) as f64;
            Tensor::vector(acc.into_iter().map(|a| a / count).collect())
        })
        .collect()
}
