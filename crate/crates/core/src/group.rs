//! Monomial matrix groups `G_n = Δ_n ⋊ P_n` and their action on weight spaces.
//!
//! A [`MonomialElement`] is the matrix `D · P_π` with `D = diag(d)` invertible
//! and `P_π e_k = e_{π(k)}`. Products follow the semidirect-product rule
//!
//! ```text
//! (D₁P₁)(D₂P₂) = (D₁ · P₁D₂P₁⁻¹) · (P₁P₂),   P D P⁻¹ = diag(d_{π⁻¹(1)}, …, d_{π⁻¹(n)})
//! ```
//!
//! A [`GroupElement`] carries one monomial matrix per layer `0..=L` and acts
//! on a weight-space point by `W^(i) ↦ g^(i) W^(i) (g^(i−1))⁻¹`,
//! `b^(i) ↦ g^(i) b^(i)`, scaling each feature vector uniformly.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::weight_space::WeightSpacePoint;

/// Bijection of `0..n`, stored as forward image with a cached inverse.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    image: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn new(image: Vec<usize>) -> Result<Self> {
        let n = image.len();
        let mut inverse = vec![usize::MAX; n];
        for (src, &dst) in image.iter().enumerate() {
            if dst >= n || inverse[dst] != usize::MAX {
                return Err(Error::InvalidArgument(format!("{image:?} is not a permutation of 0..{n}")));
            }
            inverse[dst] = src;
        }
        Ok(Self { image, inverse })
    }

    pub fn identity(n: usize) -> Self {
        let image: Vec<usize> = (0..n).collect();
        Self {
            inverse: image.clone(),
            image,
        }
    }

    pub fn len(&self) -> usize {
        self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image.is_empty()
    }

    pub fn image(&self) -> &[usize] {
        &self.image
    }

    /// `π(i)`.
    #[inline]
    pub fn apply(&self, i: usize) -> usize {
        self.image[i]
    }

    /// `π⁻¹(i)`.
    #[inline]
    pub fn apply_inverse(&self, i: usize) -> usize {
        self.inverse[i]
    }

    pub fn inverse(&self) -> Self {
        Self {
            image: self.inverse.clone(),
            inverse: self.image.clone(),
        }
    }

    /// `self ∘ other`, so that `P_{self∘other} = P_self · P_other`.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(dim_err(format!(
                "cannot compose permutations of {} and {} points",
                self.len(),
                other.len()
            )));
        }
        Self::new(other.image.iter().map(|&i| self.image[i]).collect())
    }

    pub fn is_identity(&self) -> bool {
        self.image.iter().enumerate().all(|(i, &p)| i == p)
    }
}

/// Invertible diagonal matrix `diag(d_1, …, d_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalScaling {
    d: Vec<f64>,
}

impl DiagonalScaling {
    pub fn new(d: Vec<f64>) -> Result<Self> {
        if let Some(i) = d.iter().position(|x| *x == 0.0 || !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "diagonal entry {i} is {} (must be finite and nonzero)",
                d[i]
            )));
        }
        Ok(Self { d })
    }

    pub fn ones(n: usize) -> Self {
        Self { d: vec![1.0; n] }
    }

    pub fn entries(&self) -> &[f64] {
        &self.d
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }
}

/// Which subgroup of `G_n` an element is drawn from or belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubgroupKind {
    /// All of `G_n`: any nonzero scalings.
    Full,
    /// `G_n^{>0}`: positive scalings.
    Positive,
    /// `G_n^{±1}`: sign flips.
    SignFlip,
    /// `P_n`: permutations only.
    PermOnly,
    /// The identity only.
    Trivial,
}

impl SubgroupKind {
    pub fn contains(self, g: &MonomialElement) -> bool {
        let d = g.diag.entries();
        match self {
            SubgroupKind::Full => true,
            SubgroupKind::Positive => d.iter().all(|&x| x > 0.0),
            SubgroupKind::SignFlip => d.iter().all(|&x| x == 1.0 || x == -1.0),
            SubgroupKind::PermOnly => d.iter().all(|&x| x == 1.0),
            SubgroupKind::Trivial => d.iter().all(|&x| x == 1.0) && g.perm.is_identity(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SubgroupKind::Full => "full",
            SubgroupKind::Positive => "positive",
            SubgroupKind::SignFlip => "signflip",
            SubgroupKind::PermOnly => "permonly",
            SubgroupKind::Trivial => "trivial",
        }
    }
}

impl std::str::FromStr for SubgroupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Self::Full),
            "positive" => Ok(Self::Positive),
            "signflip" | "sign-flip" => Ok(Self::SignFlip),
            "permonly" | "perm-only" | "perm" => Ok(Self::PermOnly),
            "trivial" => Ok(Self::Trivial),
            other => Err(Error::InvalidArgument(format!("unknown subgroup `{other}`"))),
        }
    }
}

/// The monomial matrix `D · P_π`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialElement {
    diag: DiagonalScaling,
    perm: Permutation,
}

impl MonomialElement {
    pub fn new(diag: DiagonalScaling, perm: Permutation) -> Result<Self> {
        if diag.len() != perm.len() {
            return Err(dim_err(format!(
                "diagonal has {} entries but permutation acts on {} points",
                diag.len(),
                perm.len()
            )));
        }
        Ok(Self { diag, perm })
    }

    pub fn from_parts(d: Vec<f64>, image: Vec<usize>) -> Result<Self> {
        Self::new(DiagonalScaling::new(d)?, Permutation::new(image)?)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            diag: DiagonalScaling::ones(n),
            perm: Permutation::identity(n),
        }
    }

    pub fn size(&self) -> usize {
        self.perm.len()
    }

    pub fn diag(&self) -> &DiagonalScaling {
        &self.diag
    }

    pub fn perm(&self) -> &Permutation {
        &self.perm
    }

    /// `d_i`, the scaling applied to output coordinate `i`.
    #[inline]
    pub fn d(&self, i: usize) -> f64 {
        self.diag.d[i]
    }

    pub fn is_identity(&self) -> bool {
        SubgroupKind::Trivial.contains(self)
    }

    /// Dense `n × n` matrix: entry `(π(k), k)` equals `d_{π(k)}`.
    pub fn to_matrix(&self) -> Tensor {
        let n = self.size();
        let mut m = Tensor::zeros(&[n, n]).unwrap();
        for k in 0..n {
            let i = self.perm.apply(k);
            m.set(&[i, k], self.diag.d[i]);
        }
        m
    }

    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.size() != other.size() {
            return Err(dim_err(format!(
                "cannot compose monomial matrices of sizes {} and {}",
                self.size(),
                other.size()
            )));
        }
        let d = (0..self.size())
            .map(|i| self.diag.d[i] * other.diag.d[self.perm.apply_inverse(i)])
            .collect();
        Ok(Self {
            diag: DiagonalScaling { d },
            perm: self.perm.compose(&other.perm)?,
        })
    }

    /// `(DP)⁻¹ = (P⁻¹D⁻¹P) · P⁻¹`.
    pub fn inverse(&self) -> Self {
        let d = (0..self.size())
            .map(|i| 1.0 / self.diag.d[self.perm.apply(i)])
            .collect();
        Self {
            diag: DiagonalScaling { d },
            perm: self.perm.inverse(),
        }
    }

    /// `(D P x)_i = d_i · x_{π⁻¹(i)}`.
    pub fn act_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.size() {
            return Err(dim_err(format!(
                "monomial matrix of size {} applied to vector of length {}",
                self.size(),
                x.len()
            )));
        }
        Ok((0..x.len())
            .map(|i| self.diag.d[i] * x[self.perm.apply_inverse(i)])
            .collect())
    }

    /// `max |d_i| / min |d_i|`.
    pub fn kappa(&self) -> f64 {
        let (lo, hi) = self
            .diag
            .d
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), x| (lo.min(x.abs()), hi.max(x.abs())));
        if self.size() == 0 {
            1.0
        } else {
            hi / lo
        }
    }
}

/// One monomial matrix per layer, stored in index order `0..=L`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupElement {
    layers: Vec<MonomialElement>,
}

impl GroupElement {
    pub fn new(layers: Vec<MonomialElement>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::InvalidArgument(
                "group element needs at least layers 0 and 1".into(),
            ));
        }
        Ok(Self { layers })
    }

    pub fn identity(sizes: &[usize]) -> Self {
        Self {
            layers: sizes.iter().map(|&n| MonomialElement::identity(n)).collect(),
        }
    }

    /// `g^(i)`.
    pub fn layer(&self, i: usize) -> &MonomialElement {
        &self.layers[i]
    }

    pub fn layers(&self) -> &[MonomialElement] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.layers.iter().map(MonomialElement::size).collect()
    }

    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.sizes() != other.sizes() {
            return Err(dim_err(format!(
                "group elements act on channels {:?} and {:?}",
                self.sizes(),
                other.sizes()
            )));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.compose(b))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn inverse(&self) -> Self {
        Self {
            layers: self.layers.iter().map(MonomialElement::inverse).collect(),
        }
    }

    /// Scaling condition number over all layers.
    pub fn kappa(&self) -> f64 {
        let (lo, hi) = self
            .layers
            .iter()
            .flat_map(|g| g.diag.d.iter())
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), x| (lo.min(x.abs()), hi.max(x.abs())));
        hi / lo
    }

    /// Every layer lies in `kind`, and the first and last are identities
    /// when `fix_boundary` is set.
    pub fn in_subgroup(&self, kind: SubgroupKind, fix_boundary: bool) -> bool {
        let last = self.layers.len() - 1;
        self.layers.iter().enumerate().all(|(i, g)| {
            if fix_boundary && (i == 0 || i == last) {
                g.is_identity()
            } else {
                kind.contains(g)
            }
        })
    }

    /// `(gW)^(i)_{jk} = d^(i)_j / d^(i−1)_k · W^(i)_{π_i⁻¹(j), π_{i−1}⁻¹(k)}`,
    /// `(gb)^(i)_j = d^(i)_j · b^(i)_{π_i⁻¹(j)}`.
    pub fn act_weights(&self, u: &WeightSpacePoint) -> Result<WeightSpacePoint> {
        let spec = u.spec();
        if self.layers.len() != spec.channels().len() {
            return Err(dim_err(format!(
                "group element has {} layers, weight space has {} channel counts",
                self.layers.len(),
                spec.channels().len()
            )));
        }
        for (i, (g, &n)) in self.layers.iter().zip(spec.channels()).enumerate() {
            if g.size() != n {
                return Err(Error::LayerShape {
                    layer: i,
                    detail: format!("group acts on {} channels, weight space has {n}", g.size()),
                });
            }
        }
        let mut out = WeightSpacePoint::zeros(spec);
        for t in 0..spec.layers() {
            let (gi, gprev) = (&self.layers[t + 1], &self.layers[t]);
            let [n, m, _] = spec.weight_shape(t);
            for j in 0..n {
                let src_j = gi.perm.apply_inverse(j);
                for k in 0..m {
                    let src_k = gprev.perm.apply_inverse(k);
                    let factor = gi.d(j) / gprev.d(k);
                    let src = u.weight(t, src_j, src_k);
                    for (dst, &x) in out.weight_mut(t, j, k).iter_mut().zip(src) {
                        *dst = factor * x;
                    }
                }
                let src = u.bias(t, src_j);
                let dj = gi.d(j);
                for (dst, &x) in out.bias_mut(t, j).iter_mut().zip(src) {
                    *dst = dj * x;
                }
            }
        }
        Ok(out)
    }

    pub fn to_document(&self) -> GroupDoc {
        GroupDoc {
            layers: self
                .layers
                .iter()
                .map(|g| LayerDoc {
                    perm: g.perm.image.clone(),
                    diag: g.diag.d.clone(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: GroupDoc) -> Result<Self> {
        let layers = doc
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                MonomialElement::from_parts(l.diag, l.perm).map_err(|e| Error::Parse {
                    path: format!("layers[{i}]"),
                    detail: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Self::new(layers)
    }
}

/// JSON form of a group element; `layers[i]` is `g^(i)`, index order `0..=L`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupDoc {
    pub layers: Vec<LayerDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDoc {
    pub perm: Vec<usize>,
    pub diag: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleDistribution {
    /// `d ~ Uniform[lo, hi]`.
    #[default]
    Linear,
    /// `log d ~ Uniform[log lo, log hi]`.
    LogUniform,
}

/// Draws random group elements from a subgroup of `G_U`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupSampler {
    pub kind: SubgroupKind,
    pub scale_range: (f64, f64),
    pub distribution: ScaleDistribution,
    /// Force `g^(0)` and `g^(L)` to the identity, giving the symmetry
    /// subgroup of a network with fixed inputs and outputs.
    pub fix_boundary: bool,
}

impl GroupSampler {
    pub fn new(kind: SubgroupKind, scale_range: (f64, f64)) -> Self {
        Self {
            kind,
            scale_range,
            distribution: ScaleDistribution::Linear,
            fix_boundary: true,
        }
    }

    pub fn with_fix_boundary(mut self, fix: bool) -> Self {
        self.fix_boundary = fix;
        self
    }

    pub fn with_distribution(mut self, distribution: ScaleDistribution) -> Self {
        self.distribution = distribution;
        self
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        let needs_range = matches!(self.kind, SubgroupKind::Positive | SubgroupKind::Full);
        if needs_range && !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scale range [{lo}, {hi}] must satisfy 0 < lo ≤ hi"
            )));
        }
        Ok(())
    }

    fn scale(&self, rng: &mut SplitMix64) -> f64 {
        let (lo, hi) = self.scale_range;
        match self.distribution {
            ScaleDistribution::Linear => rng.uniform(lo, hi),
            ScaleDistribution::LogUniform => rng.uniform(lo.ln(), hi.ln()).exp(),
        }
    }

    pub fn sample_monomial(&self, n: usize, rng: &mut SplitMix64) -> MonomialElement {
        let d: Vec<f64> = match self.kind {
            SubgroupKind::Trivial => return MonomialElement::identity(n),
            SubgroupKind::PermOnly => vec![1.0; n],
            SubgroupKind::SignFlip => (0..n).map(|_| rng.sign()).collect(),
            SubgroupKind::Positive => (0..n).map(|_| self.scale(rng)).collect(),
            SubgroupKind::Full => (0..n).map(|_| rng.sign() * self.scale(rng)).collect(),
        };
        let perm = Permutation::new(rng.permutation(n)).expect("sampled permutation is valid");
        MonomialElement {
            diag: DiagonalScaling { d },
            perm,
        }
    }

    pub fn sample_with(&self, sizes: &[usize], rng: &mut SplitMix64) -> Result<GroupElement> {
        self.validate()?;
        let last = sizes.len().saturating_sub(1);
        let layers = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                if self.fix_boundary && (i == 0 || i == last) {
                    MonomialElement::identity(n)
                } else {
                    self.sample_monomial(n, rng)
                }
            })
            .collect();
        GroupElement::new(layers)
    }
}

/// Sample a symmetry-subgroup element (boundary layers fixed) with linear scale sampling.
pub fn sample(kind: SubgroupKind, sizes: &[usize], seed: u64, scale_range: (f64, f64)) -> Result<GroupElement> {
    GroupSampler::new(kind, scale_range).sample_with(sizes, &mut SplitMix64::new(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weight_space::WeightSpaceSpec;

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.sub(b).unwrap().max_abs() <= tol
    }

    #[test]
    fn compose_with_identity() {
        let g = MonomialElement::from_parts(vec![2.0, -3.0, 0.5], vec![2, 0, 1]).unwrap();
        let id = MonomialElement::identity(3);
        assert_eq!(id.compose(&g).unwrap(), g);
        assert_eq!(g.compose(&id).unwrap(), g);
    }

    #[test]
    fn scaled_swap_squared() {
        let g = MonomialElement::from_parts(vec![2.0, 3.0], vec![1, 0]).unwrap();
        let gg = g.compose(&g).unwrap();
        assert_eq!(gg.diag().entries(), &[6.0, 6.0]);
        assert!(gg.perm().is_identity());
        let dense = g.to_matrix().matmul(&g.to_matrix()).unwrap();
        assert_eq!(gg.to_matrix(), dense);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(MonomialElement::identity(4).inverse(), MonomialElement::identity(4));
        let g = MonomialElement::from_parts(vec![2.0, 4.0], vec![0, 1]).unwrap();
        assert_eq!(g.inverse().diag().entries(), &[0.5, 0.25]);
    }

    #[test]
    fn inverse_matches_dense_oracle() {
        let mut rng = SplitMix64::new(8);
        let sampler = GroupSampler::new(SubgroupKind::Full, (0.2, 5.0));
        for _ in 0..100 {
            let g = sampler.sample_monomial(4, &mut rng);
            let prod = g.to_matrix().matmul(&g.inverse().to_matrix()).unwrap();
            assert!(close(&prod, &Tensor::identity(4).unwrap(), 1e-12));
            assert!(g.compose(&g.inverse()).unwrap().to_matrix().sub(&Tensor::identity(4).unwrap()).unwrap().max_abs() < 1e-15);
        }
    }

    #[test]
    fn act_vector_examples() {
        let cycle = MonomialElement::from_parts(vec![1.0; 3], vec![1, 2, 0]).unwrap();
        assert_eq!(cycle.act_vector(&[10.0, 20.0, 30.0]).unwrap(), vec![30.0, 10.0, 20.0]);
        let dense = cycle.to_matrix().matmul(&Tensor::vector(vec![10.0, 20.0, 30.0]).unwrap()).unwrap();
        assert_eq!(dense.data(), &[30.0, 10.0, 20.0]);
        let flip = MonomialElement::from_parts(vec![-1.0, 1.0], vec![0, 1]).unwrap();
        assert_eq!(flip.act_vector(&[5.0, 7.0]).unwrap(), vec![-5.0, 7.0]);
        assert!(flip.act_vector(&[1.0]).is_err());
    }

    #[test]
    fn group_axioms_against_dense_matrices() {
        let mut rng = SplitMix64::new(99);
        let sampler = GroupSampler::new(SubgroupKind::Full, (0.25, 4.0));
        for trial in 0..500 {
            let n = 1 + trial % 6;
            let (a, b, c) = (
                sampler.sample_monomial(n, &mut rng),
                sampler.sample_monomial(n, &mut rng),
                sampler.sample_monomial(n, &mut rng),
            );
            let ab = a.compose(&b).unwrap();
            let dense_ab = a.to_matrix().matmul(&b.to_matrix()).unwrap();
            assert!(close(&ab.to_matrix(), &dense_ab, 1e-12));
            let left = ab.compose(&c).unwrap();
            let right = a.compose(&b.compose(&c).unwrap()).unwrap();
            assert!(close(&left.to_matrix(), &right.to_matrix(), 1e-12));
            let x = rng.uniform_vec(n, -1.0, 1.0);
            let lhs = ab.act_vector(&x).unwrap();
            let rhs = a.act_vector(&b.act_vector(&x).unwrap()).unwrap();
            for (p, q) in lhs.iter().zip(&rhs) {
                assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()));
            }
        }
    }

    #[test]
    fn hidden_scaling_example() {
        let spec = WeightSpaceSpec::fcnn(vec![1, 2, 1]).unwrap();
        let u = WeightSpacePoint::random(&spec, 4, 1.0).unwrap();
        let g = GroupElement::new(vec![
            MonomialElement::identity(1),
            MonomialElement::from_parts(vec![2.0, 1.0], vec![0, 1]).unwrap(),
            MonomialElement::identity(1),
        ])
        .unwrap();
        let v = g.act_weights(&u).unwrap();
        assert_eq!(v.weight(0, 0, 0)[0], 2.0 * u.weight(0, 0, 0)[0]);
        assert_eq!(v.weight(0, 1, 0)[0], u.weight(0, 1, 0)[0]);
        assert_eq!(v.weight(1, 0, 0)[0], 0.5 * u.weight(1, 0, 0)[0]);
        assert_eq!(v.bias(0, 0)[0], 2.0 * u.bias(0, 0)[0]);
        assert_eq!(v.bias(1, 0), u.bias(1, 0));

        // Dense matrix form g^(i) W^(i) (g^(i-1))^-1.
        let w2 = Tensor::new(vec![1, 2], u.weights()[1].data().to_vec()).unwrap();
        let expected = g.layer(2).to_matrix().matmul(&w2).unwrap().matmul(&g.layer(1).inverse().to_matrix()).unwrap();
        assert_eq!(expected.data(), v.weights()[1].data());
    }

    #[test]
    fn trivial_ends_leave_single_layer_unchanged() {
        let spec = WeightSpaceSpec::fcnn(vec![1, 1]).unwrap();
        let u = WeightSpacePoint::from_flat(&spec, &[3.0, 0.0]).unwrap();
        let g = sample(SubgroupKind::Positive, &[1, 1], 0, (0.5, 2.0)).unwrap();
        assert_eq!(g.act_weights(&u).unwrap(), u);
    }

    #[test]
    fn weight_action_is_left_action() {
        let spec = WeightSpaceSpec::new(vec![2, 3, 4, 2], vec![2, 1, 3], vec![1, 2, 1]).unwrap();
        let sizes = spec.channels().to_vec();
        let mut rng = SplitMix64::new(12);
        let sampler = GroupSampler::new(SubgroupKind::Full, (0.3, 3.0)).with_fix_boundary(false);
        for _ in 0..100 {
            let u = WeightSpacePoint::random_with(&spec, &mut rng, 1.0).unwrap();
            let g = sampler.sample_with(&sizes, &mut rng).unwrap();
            let h = sampler.sample_with(&sizes, &mut rng).unwrap();
            let lhs = g.compose(&h).unwrap().act_weights(&u).unwrap();
            let rhs = g.act_weights(&h.act_weights(&u).unwrap()).unwrap();
            let dev = lhs.sub(&rhs).unwrap().max_abs();
            assert!(dev <= 1e-10 * lhs.max_abs().max(1.0));
            let back = g.act_weights(&g.inverse().act_weights(&u).unwrap()).unwrap();
            assert!(back.sub(&u).unwrap().max_abs() <= 1e-12 * u.max_abs());
        }
    }

    #[test]
    fn sampler_respects_subgroups() {
        let sizes = [2, 4, 3, 1];
        for seed in 0..50 {
            let g = sample(SubgroupKind::SignFlip, &sizes, seed, (1.0, 1.0)).unwrap();
            assert!(g.in_subgroup(SubgroupKind::SignFlip, true));
            let g = sample(SubgroupKind::Positive, &sizes, seed, (1.0, 1e6)).unwrap();
            assert!(g.in_subgroup(SubgroupKind::Positive, true));
            assert!(g.layers().iter().flat_map(|m| m.diag().entries()).all(|&d| (1.0..=1e6).contains(&d)));
            let g = sample(SubgroupKind::Trivial, &sizes, seed, (1.0, 1.0)).unwrap();
            assert_eq!(g, GroupElement::identity(&sizes));
        }
        assert!(sample(SubgroupKind::Positive, &sizes, 0, (0.0, 1.0)).is_err());
        assert!(sample(SubgroupKind::Positive, &sizes, 0, (2.0, 1.0)).is_err());
    }

    #[test]
    fn log_uniform_stays_in_range() {
        let sampler = GroupSampler::new(SubgroupKind::Positive, (1.0, 1e6))
            .with_distribution(ScaleDistribution::LogUniform);
        let mut rng = SplitMix64::new(0);
        for _ in 0..200 {
            let g = sampler.sample_monomial(3, &mut rng);
            assert!(g.diag().entries().iter().all(|&d| (1.0..=1e6 * (1.0 + 1e-12)).contains(&d)));
        }
    }

    #[test]
    fn document_round_trip() {
        let g = sample(SubgroupKind::Positive, &[2, 3, 2], 5, (0.5, 2.0)).unwrap();
        let text = serde_json::to_string(&g.to_document()).unwrap();
        let back = GroupElement::from_document(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
