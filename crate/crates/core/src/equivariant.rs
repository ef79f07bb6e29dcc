//! Linear layers `E: U → U'` that commute with the hidden-neuron symmetry
//! group: positive monomial scalings for ReLU networks, signed permutations
//! for sin/tanh networks. Input and output neurons are never permuted.
//!
//! For `L ≥ 2` the ReLU-family layer is
//!
//! ```text
//! W'(1)_jk = Σ_q P1[k][q] W(1)_jq + Q1[k] b(1)_j      b'(1)_j = Σ_q R1[q] W(1)_jq + S1 b(1)_j
//! W'(i)_jk = Pmid[i] W(i)_jk                          b'(i)_j = Smid[i] b(i)_j            1 < i < L
//! W'(L)_jk = Σ_p PL[j][p] W(L)_pk                     b'(L)_j = Σ_p SL[j][p] b(L)_p + TL[j]
//! ```
//!
//! where every block is a small matrix mapping feature vectors of the
//! source space to those of the target space. Parameter sharing is
//! structural: an index over which a coefficient is shared simply does not
//! index its block. The sin/tanh family (`L ≥ 3`) adds two cross-layer terms,
//!
//! ```text
//! b'(L−1)_j += Σ_p RLm1[p] W(L)_pj        W'(L)_jk += QL[j] b(L−1)_k
//! ```
//!
//! because a sign flip of neuron `k` in layer `L−1` acts identically on
//! `b(L−1)_k` and on column `k` of `W(L)`.
//!
//! With a single layer the group is trivial and the layer is a dense affine map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Family;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::weight_space::{WeightSpacePoint, WeightSpaceSpec};

/// A weight or bias entry of a weight space; `layer` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Weight { layer: usize, row: usize, col: usize },
    Bias { layer: usize, row: usize },
}

impl Slot {
    pub fn layer(self) -> usize {
        match self {
            Slot::Weight { layer, .. } | Slot::Bias { layer, .. } => layer,
        }
    }

    /// Feature length of the entry in `spec`.
    pub fn feature_dim(self, spec: &WeightSpaceSpec) -> usize {
        match self {
            Slot::Weight { layer, .. } => spec.weight_dims()[layer - 1],
            Slot::Bias { layer, .. } => spec.bias_dims()[layer - 1],
        }
    }

    /// Offset of the entry's first feature in [`WeightSpacePoint::to_flat`] order.
    pub fn flat_offset(self, spec: &WeightSpaceSpec) -> usize {
        let t = self.layer() - 1;
        let before: usize = (0..t)
            .map(|s| {
                let [n, m, w] = spec.weight_shape(s);
                n * m * w + n * spec.bias_dims()[s]
            })
            .sum();
        let [n, m, w] = spec.weight_shape(t);
        match self {
            Slot::Weight { row, col, .. } => before + (row * m + col) * w,
            Slot::Bias { row, .. } => before + n * m * w + row * spec.bias_dims()[t],
        }
    }

    /// Every slot of `spec`, in flat order.
    pub fn all(spec: &WeightSpaceSpec) -> Vec<Slot> {
        let mut out = Vec::new();
        for t in 0..spec.layers() {
            let [n, m, _] = spec.weight_shape(t);
            for row in 0..n {
                for col in 0..m {
                    out.push(Slot::Weight { layer: t + 1, row, col });
                }
            }
            for row in 0..n {
                out.push(Slot::Bias { layer: t + 1, row });
            }
        }
        out
    }
}

/// Shared blocks of a ReLU-family layer with `L ≥ 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct ReluBlocks {
    /// `P1[k·n0 + q]`: `w1' × w1`.
    pub p1: Vec<Tensor>,
    /// `Q1[k]`: `w1' × b1`.
    pub q1: Vec<Tensor>,
    /// `R1[q]`: `b1' × w1`.
    pub r1: Vec<Tensor>,
    /// `b1' × b1`.
    pub s1: Tensor,
    /// One `wi' × wi` block per middle layer `1 < i < L`.
    #[serde(rename = "Pmid")]
    pub pmid: Vec<Tensor>,
    #[serde(rename = "Smid")]
    pub smid: Vec<Tensor>,
    /// `PL[j·nL + p]`: `wL' × wL`.
    pub pl: Vec<Tensor>,
    /// `SL[j·nL + p]`: `bL' × bL`.
    pub sl: Vec<Tensor>,
    /// `TL[j]`: length `bL'`.
    pub tl: Vec<Tensor>,
}

/// Dense affine map on flat coordinates; used when `L = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseAffine {
    pub linear: Tensor,
    pub offset: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ReluLayout {
    Dense(DenseAffine),
    Blocks(ReluBlocks),
}

/// Parameters of a ReLU-family equivariant layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluParams {
    source: WeightSpaceSpec,
    target: WeightSpaceSpec,
    layout: ReluLayout,
}

/// Cross-layer blocks of the sin/tanh family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossBlocks {
    /// `RLm1[p]`: `b'_{L−1} × w_L`.
    #[serde(rename = "RLm1")]
    pub rlm1: Vec<Tensor>,
    /// `QL[j]`: `w'_L × b_{L−1}`.
    #[serde(rename = "QL")]
    pub ql: Vec<Tensor>,
}

/// Parameters of a sin/tanh-family equivariant layer (`L ≥ 3`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinTanhParams {
    base: ReluParams,
    cross: CrossBlocks,
}

fn check_pair(source: &WeightSpaceSpec, target: &WeightSpaceSpec) -> Result<()> {
    if !source.same_channels(target) {
        return Err(Error::InvalidArgument(format!(
            "source channels {:?} and target channels {:?} differ",
            source.channels(),
            target.channels()
        )));
    }
    Ok(())
}

fn block_init(rows: usize, cols: usize, rng: Option<&mut SplitMix64>) -> Tensor {
    match rng {
        None => Tensor::zeros(&[rows, cols]).unwrap(),
        Some(rng) => {
            let s = 1.0 / (cols as f64).sqrt();
            Tensor::new(vec![rows, cols], rng.uniform_vec(rows * cols, -s, s)).unwrap()
        }
    }
}

/// `out += m · x`.
#[inline]
fn gemv_acc(m: &Tensor, x: &[f64], out: &mut [f64]) {
    let cols = m.dims()[1];
    for (o, row) in out.iter_mut().zip(m.data().chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn check_block(name: &str, t: &Tensor, dims: &[usize]) -> Result<()> {
    if t.dims() != dims {
        return Err(Error::InvalidArgument(format!(
            "block {name} has shape {}, expected {dims:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl ReluBlocks {
    fn build(source: &WeightSpaceSpec, target: &WeightSpaceSpec, mut rng: Option<&mut SplitMix64>) -> Self {
        let l = source.layers();
        let ch = source.channels();
        let (n0, nl) = (ch[0], ch[l]);
        let (w, b) = (source.weight_dims(), source.bias_dims());
        let (wt, bt) = (target.weight_dims(), target.bias_dims());
        let mut blk = |r: usize, c: usize| block_init(r, c, rng.as_deref_mut());
        ReluBlocks {
            p1: (0..n0 * n0).map(|_| blk(wt[0], w[0])).collect(),
            q1: (0..n0).map(|_| blk(wt[0], b[0])).collect(),
            r1: (0..n0).map(|_| blk(bt[0], w[0])).collect(),
            s1: blk(bt[0], b[0]),
            pmid: (1..l - 1).map(|t| blk(wt[t], w[t])).collect(),
            smid: (1..l - 1).map(|t| blk(bt[t], b[t])).collect(),
            pl: (0..nl * nl).map(|_| blk(wt[l - 1], w[l - 1])).collect(),
            sl: (0..nl * nl).map(|_| blk(bt[l - 1], b[l - 1])).collect(),
            tl: (0..nl).map(|_| blk(bt[l - 1], 1).reshape(vec![bt[l - 1]]).unwrap()).collect(),
        }
    }

    fn validate(&self, source: &WeightSpaceSpec, target: &WeightSpaceSpec) -> Result<()> {
        let l = source.layers();
        let ch = source.channels();
        let (n0, nl) = (ch[0], ch[l]);
        let (w, b) = (source.weight_dims(), source.bias_dims());
        let (wt, bt) = (target.weight_dims(), target.bias_dims());
        let counts = [
            ("P1", self.p1.len(), n0 * n0),
            ("Q1", self.q1.len(), n0),
            ("R1", self.r1.len(), n0),
            ("Pmid", self.pmid.len(), l - 2),
            ("Smid", self.smid.len(), l - 2),
            ("PL", self.pl.len(), nl * nl),
            ("SL", self.sl.len(), nl * nl),
            ("TL", self.tl.len(), nl),
        ];
        for (name, got, want) in counts {
            if got != want {
                return Err(Error::InvalidArgument(format!("block {name} has {got} entries, expected {want}")));
            }
        }
        self.p1.iter().try_for_each(|t| check_block("P1", t, &[wt[0], w[0]]))?;
        self.q1.iter().try_for_each(|t| check_block("Q1", t, &[wt[0], b[0]]))?;
        self.r1.iter().try_for_each(|t| check_block("R1", t, &[bt[0], w[0]]))?;
        check_block("S1", &self.s1, &[bt[0], b[0]])?;
        for (i, t) in self.pmid.iter().enumerate() {
            check_block("Pmid", t, &[wt[i + 1], w[i + 1]])?;
        }
        for (i, t) in self.smid.iter().enumerate() {
            check_block("Smid", t, &[bt[i + 1], b[i + 1]])?;
        }
        self.pl.iter().try_for_each(|t| check_block("PL", t, &[wt[l - 1], w[l - 1]]))?;
        self.sl.iter().try_for_each(|t| check_block("SL", t, &[bt[l - 1], b[l - 1]]))?;
        self.tl.iter().try_for_each(|t| check_block("TL", t, &[bt[l - 1]]))?;
        Ok(())
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.p1
            .iter_mut()
            .chain(self.q1.iter_mut())
            .chain(self.r1.iter_mut())
            .chain(std::iter::once(&mut self.s1))
            .chain(self.pmid.iter_mut())
            .chain(self.smid.iter_mut())
            .chain(self.pl.iter_mut())
            .chain(self.sl.iter_mut())
            .chain(self.tl.iter_mut())
    }

    fn apply(&self, u: &WeightSpacePoint, out: &mut WeightSpacePoint) {
        let spec = u.spec();
        let l = spec.layers();
        let ch = spec.channels();
        let (n0, n1, nl, nlm1) = (ch[0], ch[1], ch[l], ch[l - 1]);

        // First layer: mixes the row j of W(1) with b(1)_j.
        for j in 0..n1 {
            for k in 0..n0 {
                let dst = out.weight_mut(0, j, k);
                let mut acc = vec![0.0; dst.len()];
                for q in 0..n0 {
                    gemv_acc(&self.p1[k * n0 + q], u.weight(0, j, q), &mut acc);
                }
                gemv_acc(&self.q1[k], u.bias(0, j), &mut acc);
                out.weight_mut(0, j, k).copy_from_slice(&acc);
            }
            let mut acc = vec![0.0; out.bias(0, j).len()];
            for q in 0..n0 {
                gemv_acc(&self.r1[q], u.weight(0, j, q), &mut acc);
            }
            gemv_acc(&self.s1, u.bias(0, j), &mut acc);
            out.bias_mut(0, j).copy_from_slice(&acc);
        }

        // Middle layers: entrywise.
        for t in 1..l - 1 {
            let [n, m, _] = spec.weight_shape(t);
            for j in 0..n {
                for k in 0..m {
                    let dst = out.weight_mut(t, j, k);
                    dst.fill(0.0);
                    gemv_acc(&self.pmid[t - 1], u.weight(t, j, k), dst);
                }
                let dst = out.bias_mut(t, j);
                dst.fill(0.0);
                gemv_acc(&self.smid[t - 1], u.bias(t, j), dst);
            }
        }

        // Last layer: mixes each column of W(L) and all of b(L).
        let t = l - 1;
        for j in 0..nl {
            for k in 0..nlm1 {
                let mut acc = vec![0.0; out.weight(t, j, k).len()];
                for p in 0..nl {
                    gemv_acc(&self.pl[j * nl + p], u.weight(t, p, k), &mut acc);
                }
                out.weight_mut(t, j, k).copy_from_slice(&acc);
            }
            let mut acc = self.tl[j].data().to_vec();
            for p in 0..nl {
                gemv_acc(&self.sl[j * nl + p], u.bias(t, p), &mut acc);
            }
            out.bias_mut(t, j).copy_from_slice(&acc);
        }
    }

    fn coefficient(&self, spec: &WeightSpaceSpec, out: Slot, inp: Slot) -> Option<&Tensor> {
        let l = spec.layers();
        let n0 = spec.channels()[0];
        let nl = spec.channels()[l];
        use Slot::*;
        match (out, inp) {
            (Weight { layer: 1, row: j, col: k }, Weight { layer: 1, row: p, col: q }) if j == p => {
                Some(&self.p1[k * n0 + q])
            }
            (Weight { layer: 1, row: j, col: k }, Bias { layer: 1, row: p }) if j == p => Some(&self.q1[k]),
            (Bias { layer: 1, row: j }, Weight { layer: 1, row: p, col: q }) if j == p => Some(&self.r1[q]),
            (Bias { layer: 1, row: j }, Bias { layer: 1, row: p }) if j == p => Some(&self.s1),
            (Weight { layer: i, row: j, col: k }, Weight { layer: s, row: p, col: q })
                if i == s && i > 1 && i < l && j == p && k == q =>
            {
                Some(&self.pmid[i - 2])
            }
            (Bias { layer: i, row: j }, Bias { layer: s, row: p }) if i == s && i > 1 && i < l && j == p => {
                Some(&self.smid[i - 2])
            }
            (Weight { layer: i, row: j, col: k }, Weight { layer: s, row: p, col: q })
                if i == l && s == l && k == q =>
            {
                Some(&self.pl[j * nl + p])
            }
            (Bias { layer: i, row: j }, Bias { layer: s, row: p }) if i == l && s == l => Some(&self.sl[j * nl + p]),
            _ => None,
        }
    }
}

impl ReluParams {
    fn build(source: &WeightSpaceSpec, target: &WeightSpaceSpec, rng: Option<&mut SplitMix64>) -> Result<Self> {
        check_pair(source, target)?;
        let layout = if source.layers() == 1 {
            let (du, dt) = (source.dimension(), target.dimension());
            let (linear, offset) = match rng {
                None => (Tensor::zeros(&[dt, du])?, Tensor::zeros(&[dt])?),
                Some(rng) => {
                    let s = 1.0 / (du as f64).sqrt();
                    (
                        Tensor::new(vec![dt, du], rng.uniform_vec(dt * du, -s, s))?,
                        Tensor::new(vec![dt], rng.uniform_vec(dt, -1.0, 1.0))?,
                    )
                }
            };
            ReluLayout::Dense(DenseAffine { linear, offset })
        } else {
            ReluLayout::Blocks(ReluBlocks::build(source, target, rng))
        };
        Ok(Self {
            source: source.clone(),
            target: target.clone(),
            layout,
        })
    }

    pub fn zeros(source: &WeightSpaceSpec, target: &WeightSpaceSpec) -> Result<Self> {
        Self::build(source, target, None)
    }

    /// Blocks i.i.d. `Uniform[−1, 1] / √cols`.
    pub fn random(source: &WeightSpaceSpec, target: &WeightSpaceSpec, rng: &mut SplitMix64) -> Result<Self> {
        Self::build(source, target, Some(rng))
    }

    pub fn from_blocks(source: &WeightSpaceSpec, target: &WeightSpaceSpec, blocks: ReluBlocks) -> Result<Self> {
        check_pair(source, target)?;
        if source.layers() < 2 {
            return Err(Error::Unsupported("block layout needs at least two layers".into()));
        }
        blocks.validate(source, target)?;
        Ok(Self {
            source: source.clone(),
            target: target.clone(),
            layout: ReluLayout::Blocks(blocks),
        })
    }

    /// The identity map on `spec`.
    pub fn identity(spec: &WeightSpaceSpec) -> Result<Self> {
        let mut p = Self::zeros(spec, spec)?;
        let l = spec.layers();
        let ch = spec.channels();
        match &mut p.layout {
            ReluLayout::Dense(d) => d.linear = Tensor::identity(spec.dimension())?,
            ReluLayout::Blocks(b) => {
                let (n0, nl) = (ch[0], ch[l]);
                for k in 0..n0 {
                    b.p1[k * n0 + k] = Tensor::identity(spec.weight_dims()[0])?;
                }
                b.s1 = Tensor::identity(spec.bias_dims()[0])?;
                for t in 1..l - 1 {
                    b.pmid[t - 1] = Tensor::identity(spec.weight_dims()[t])?;
                    b.smid[t - 1] = Tensor::identity(spec.bias_dims()[t])?;
                }
                for j in 0..nl {
                    b.pl[j * nl + j] = Tensor::identity(spec.weight_dims()[l - 1])?;
                    b.sl[j * nl + j] = Tensor::identity(spec.bias_dims()[l - 1])?;
                }
            }
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_pair(&self.source, &self.target)?;
        match &self.layout {
            ReluLayout::Dense(d) => {
                if self.source.layers() != 1 {
                    return Err(Error::InvalidArgument("dense layout is only valid for a single layer".into()));
                }
                let (du, dt) = (self.source.dimension(), self.target.dimension());
                check_block("linear", &d.linear, &[dt, du])?;
                check_block("offset", &d.offset, &[dt])
            }
            ReluLayout::Blocks(b) => {
                if self.source.layers() < 2 {
                    return Err(Error::Unsupported("block layout needs at least two layers".into()));
                }
                b.validate(&self.source, &self.target)
            }
        }
    }

    pub fn source(&self) -> &WeightSpaceSpec {
        &self.source
    }

    pub fn target(&self) -> &WeightSpaceSpec {
        &self.target
    }

    pub fn blocks(&self) -> Option<&ReluBlocks> {
        match &self.layout {
            ReluLayout::Blocks(b) => Some(b),
            ReluLayout::Dense(_) => None,
        }
    }

    pub fn blocks_mut(&mut self) -> Option<&mut ReluBlocks> {
        match &mut self.layout {
            ReluLayout::Blocks(b) => Some(b),
            ReluLayout::Dense(_) => None,
        }
    }

    pub fn dense(&self) -> Option<&DenseAffine> {
        match &self.layout {
            ReluLayout::Dense(d) => Some(d),
            ReluLayout::Blocks(_) => None,
        }
    }

    fn check_input(&self, u: &WeightSpacePoint) -> Result<()> {
        if u.spec() != &self.source {
            return Err(Error::InvalidArgument(format!(
                "input weight space {:?} does not match the layer's source {:?}",
                u.spec(),
                self.source
            )));
        }
        Ok(())
    }

    pub fn apply(&self, u: &WeightSpacePoint) -> Result<WeightSpacePoint> {
        self.check_input(u)?;
        match &self.layout {
            ReluLayout::Dense(d) => {
                let x = Tensor::vector(u.to_flat())?;
                let y = d.linear.matmul(&x)?.add(&d.offset)?;
                WeightSpacePoint::from_flat(&self.target, y.data())
            }
            ReluLayout::Blocks(b) => {
                let mut out = WeightSpacePoint::zeros(&self.target);
                b.apply(u, &mut out);
                Ok(out)
            }
        }
    }

    /// Dense coefficient block from input entry `inp` to output entry `out`
    /// (`𝔭, 𝔮, 𝔯, 𝔰` depending on the slot kinds), shape `out_dim × in_dim`.
    pub fn coefficient(&self, out: Slot, inp: Slot) -> Tensor {
        let (r, c) = (out.feature_dim(&self.target), inp.feature_dim(&self.source));
        match &self.layout {
            ReluLayout::Dense(d) => {
                let (ro, co) = (out.flat_offset(&self.target), inp.flat_offset(&self.source));
                let cols = d.linear.dims()[1];
                let mut data = Vec::with_capacity(r * c);
                for a in 0..r {
                    data.extend_from_slice(&d.linear.data()[(ro + a) * cols + co..(ro + a) * cols + co + c]);
                }
                Tensor::new(vec![r, c], data).unwrap()
            }
            ReluLayout::Blocks(b) => b
                .coefficient(&self.source, out, inp)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&[r, c]).unwrap()),
        }
    }

    /// Constant term `𝔱` of output entry `out`.
    pub fn offset(&self, out: Slot) -> Tensor {
        let r = out.feature_dim(&self.target);
        match &self.layout {
            ReluLayout::Dense(d) => {
                let o = out.flat_offset(&self.target);
                Tensor::vector(d.offset.data()[o..o + r].to_vec()).unwrap()
            }
            ReluLayout::Blocks(b) => match out {
                Slot::Bias { layer, row } if layer == self.source.layers() => b.tl[row].clone(),
                _ => Tensor::zeros(&[r]).unwrap(),
            },
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        match &mut self.layout {
            ReluLayout::Dense(d) => {
                d.linear.data_mut().iter_mut().for_each(&mut *f);
                d.offset.data_mut().iter_mut().for_each(f);
            }
            ReluLayout::Blocks(b) => {
                for t in b.tensors_mut() {
                    t.data_mut().iter_mut().for_each(&mut *f);
                }
            }
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.clone().for_each_param_mut(&mut |_| n += 1);
        n
    }
}

impl SinTanhParams {
    fn build(source: &WeightSpaceSpec, target: &WeightSpaceSpec, mut rng: Option<&mut SplitMix64>) -> Result<Self> {
        check_pair(source, target)?;
        let l = source.layers();
        if l < 3 {
            return Err(Error::Unsupported(format!(
                "the sin/tanh equivariant layer needs at least 3 layers, got {l}"
            )));
        }
        let base = ReluParams::build(source, target, rng.as_deref_mut())?;
        let nl = source.channels()[l];
        let mut blk = |r: usize, c: usize| block_init(r, c, rng.as_deref_mut());
        let rlm1 = (0..nl)
            .map(|_| blk(target.bias_dims()[l - 2], source.weight_dims()[l - 1]))
            .collect();
        let ql = (0..nl)
            .map(|_| blk(target.weight_dims()[l - 1], source.bias_dims()[l - 2]))
            .collect();
        Ok(Self {
            base,
            cross: CrossBlocks { rlm1, ql },
        })
    }

    pub fn zeros(source: &WeightSpaceSpec, target: &WeightSpaceSpec) -> Result<Self> {
        Self::build(source, target, None)
    }

    pub fn random(source: &WeightSpaceSpec, target: &WeightSpaceSpec, rng: &mut SplitMix64) -> Result<Self> {
        Self::build(source, target, Some(rng))
    }

    pub fn from_parts(base: ReluParams, cross: CrossBlocks) -> Result<Self> {
        let l = base.source.layers();
        if l < 3 {
            return Err(Error::Unsupported(format!(
                "the sin/tanh equivariant layer needs at least 3 layers, got {l}"
            )));
        }
        let nl = base.source.channels()[l];
        if cross.rlm1.len() != nl || cross.ql.len() != nl {
            return Err(Error::InvalidArgument(format!("cross blocks need {nl} entries each")));
        }
        let rl = [base.target.bias_dims()[l - 2], base.source.weight_dims()[l - 1]];
        let qd = [base.target.weight_dims()[l - 1], base.source.bias_dims()[l - 2]];
        cross.rlm1.iter().try_for_each(|t| check_block("RLm1", t, &rl))?;
        cross.ql.iter().try_for_each(|t| check_block("QL", t, &qd))?;
        Ok(Self { base, cross })
    }

    pub fn base(&self) -> &ReluParams {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut ReluParams {
        &mut self.base
    }

    pub fn cross(&self) -> &CrossBlocks {
        &self.cross
    }

    pub fn cross_mut(&mut self) -> &mut CrossBlocks {
        &mut self.cross
    }

    pub fn source(&self) -> &WeightSpaceSpec {
        &self.base.source
    }

    pub fn target(&self) -> &WeightSpaceSpec {
        &self.base.target
    }

    pub fn apply(&self, u: &WeightSpacePoint) -> Result<WeightSpacePoint> {
        let mut out = self.base.apply(u)?;
        let spec = u.spec();
        let l = spec.layers();
        let (nl, nlm1) = (spec.channels()[l], spec.channels()[l - 1]);
        for j in 0..nlm1 {
            let dst = out.bias_mut(l - 2, j);
            for p in 0..nl {
                gemv_acc(&self.cross.rlm1[p], u.weight(l - 1, p, j), dst);
            }
        }
        for j in 0..nl {
            for k in 0..nlm1 {
                let src = u.bias(l - 2, k);
                gemv_acc(&self.cross.ql[j], src, out.weight_mut(l - 1, j, k));
            }
        }
        Ok(out)
    }

    pub fn coefficient(&self, out: Slot, inp: Slot) -> Tensor {
        let l = self.source().layers();
        match (out, inp) {
            (Slot::Bias { layer: i, row: j }, Slot::Weight { layer: s, row: p, col: q })
                if i == l - 1 && s == l && q == j =>
            {
                self.cross.rlm1[p].clone()
            }
            (Slot::Weight { layer: i, row: j, col: k }, Slot::Bias { layer: s, row: p })
                if i == l && s == l - 1 && p == k =>
            {
                self.cross.ql[j].clone()
            }
            _ => self.base.coefficient(out, inp),
        }
    }

    pub fn offset(&self, out: Slot) -> Tensor {
        self.base.offset(out)
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.base.for_each_param_mut(f);
        for t in self.cross.rlm1.iter_mut().chain(self.cross.ql.iter_mut()) {
            t.data_mut().iter_mut().for_each(&mut *f);
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.clone().for_each_param_mut(&mut |_| n += 1);
        n
    }
}

/// An equivariant layer of either family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum EquivariantLayer {
    Relu(ReluParams),
    #[serde(rename = "sintanh")]
    SinTanh(SinTanhParams),
}

impl EquivariantLayer {
    pub fn random(family: Family, source: &WeightSpaceSpec, target: &WeightSpaceSpec, rng: &mut SplitMix64) -> Result<Self> {
        Ok(match family {
            Family::Relu => Self::Relu(ReluParams::random(source, target, rng)?),
            Family::SinTanh => Self::SinTanh(SinTanhParams::random(source, target, rng)?),
        })
    }

    pub fn zeros(family: Family, source: &WeightSpaceSpec, target: &WeightSpaceSpec) -> Result<Self> {
        Ok(match family {
            Family::Relu => Self::Relu(ReluParams::zeros(source, target)?),
            Family::SinTanh => Self::SinTanh(SinTanhParams::zeros(source, target)?),
        })
    }

    pub fn family(&self) -> Family {
        match self {
            Self::Relu(_) => Family::Relu,
            Self::SinTanh(_) => Family::SinTanh,
        }
    }

    pub fn source(&self) -> &WeightSpaceSpec {
        match self {
            Self::Relu(p) => p.source(),
            Self::SinTanh(p) => p.source(),
        }
    }

    pub fn target(&self) -> &WeightSpaceSpec {
        match self {
            Self::Relu(p) => p.target(),
            Self::SinTanh(p) => p.target(),
        }
    }

    pub fn apply(&self, u: &WeightSpacePoint) -> Result<WeightSpacePoint> {
        match self {
            Self::Relu(p) => p.apply(u),
            Self::SinTanh(p) => p.apply(u),
        }
    }

    pub fn coefficient(&self, out: Slot, inp: Slot) -> Tensor {
        match self {
            Self::Relu(p) => p.coefficient(out, inp),
            Self::SinTanh(p) => p.coefficient(out, inp),
        }
    }

    pub fn offset(&self, out: Slot) -> Tensor {
        match self {
            Self::Relu(p) => p.offset(out),
            Self::SinTanh(p) => p.offset(out),
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        match self {
            Self::Relu(p) => p.for_each_param_mut(f),
            Self::SinTanh(p) => p.for_each_param_mut(f),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Self::Relu(p) => p.num_params(),
            Self::SinTanh(p) => p.num_params(),
        }
    }

    /// Check every block against the source and target specs.
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Relu(p) => p.validate(),
            Self::SinTanh(p) => {
                p.base.validate()?;
                SinTanhParams::from_parts(p.base.clone(), p.cross.clone()).map(|_| ())
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layer serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let layer: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<equivariant layer>".into(),
            detail: e.to_string(),
        })?;
        layer.validate()?;
        Ok(layer)
    }
}

/// Apply a ReLU-family layer.
pub fn apply_relu(params: &ReluParams, u: &WeightSpacePoint) -> Result<WeightSpacePoint> {
    params.apply(u)
}

/// Apply a sin/tanh-family layer.
pub fn apply_sintanh(params: &SinTanhParams, u: &WeightSpacePoint) -> Result<WeightSpacePoint> {
    params.apply(u)
}

/// Reconstruct the dense linear part (`dim U' × dim U`) and offset of a layer
/// from its coefficient blocks.
pub fn materialize_dense(layer: &EquivariantLayer) -> (Tensor, Tensor) {
    let (source, target) = (layer.source(), layer.target());
    let (du, dt) = (source.dimension(), target.dimension());
    let mut linear = Tensor::zeros(&[dt, du]).unwrap();
    let mut offset = Tensor::zeros(&[dt]).unwrap();
    let in_slots = Slot::all(source);
    for out in Slot::all(target) {
        let ro = out.flat_offset(target);
        let t = layer.offset(out);
        offset.data_mut()[ro..ro + t.len()].copy_from_slice(t.data());
        for &inp in &in_slots {
            let co = inp.flat_offset(source);
            let c = layer.coefficient(out, inp);
            let (r, cols) = (c.dims()[0], c.dims()[1]);
            for a in 0..r {
                for b in 0..cols {
                    linear.set(&[ro + a, co + b], c.get(&[a, b]));
                }
            }
        }
    }
    (linear, offset)
}

/// Exact parameter count with its asymptotic class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub exact: u128,
    pub asymptotic: &'static str,
}

pub const ASYMPTOTIC_OURS: &str = "O(cc'(L+n0+nL))";
pub const ASYMPTOTIC_NP: &str = "O(cc'L^2)";
pub const ASYMPTOTIC_HNP: &str = "O(cc'(L+n0+nL)^2)";

/// Number of free parameters of the equivariant layer `source → target`.
///
/// For `L ≥ 2`, ReLU family:
/// `w1'w1·n0² + w1'b1·n0 + b1'w1·n0 + b1'b1 + Σ_{1<i<L}(wi'wi + bi'bi)
///  + wL'wL·nL² + bL'bL·nL² + bL'·nL`; sin/tanh adds
/// `b'_{L−1}w_L·nL + w_L'b_{L−1}·nL`. A single layer carries the full
/// affine map, `dim U'·(dim U + 1)`.
pub fn param_count(source: &WeightSpaceSpec, target: &WeightSpaceSpec, family: Family) -> Result<ParamCount> {
    check_pair(source, target)?;
    let l = source.layers();
    if family == Family::SinTanh && l < 3 {
        return Err(Error::Unsupported(format!(
            "the sin/tanh equivariant layer needs at least 3 layers, got {l}"
        )));
    }
    let c = |x: usize| x as u128;
    if l == 1 {
        return Ok(ParamCount {
            exact: c(target.dimension()) * (c(source.dimension()) + 1),
            asymptotic: ASYMPTOTIC_OURS,
        });
    }
    let ch = source.channels();
    let (n0, nl) = (c(ch[0]), c(ch[l]));
    let (w, b) = (source.weight_dims(), source.bias_dims());
    let (wt, bt) = (target.weight_dims(), target.bias_dims());
    let mut exact = c(wt[0] * w[0]) * n0 * n0 + c(wt[0] * b[0]) * n0 + c(bt[0] * w[0]) * n0 + c(bt[0] * b[0]);
    for t in 1..l - 1 {
        exact += c(wt[t] * w[t] + bt[t] * b[t]);
    }
    exact += c(wt[l - 1] * w[l - 1]) * nl * nl + c(bt[l - 1] * b[l - 1]) * nl * nl + c(bt[l - 1]) * nl;
    if family == Family::SinTanh {
        exact += c(bt[l - 2] * w[l - 1]) * nl + c(wt[l - 1] * b[l - 2]) * nl;
    }
    Ok(ParamCount {
        exact,
        asymptotic: ASYMPTOTIC_OURS,
    })
}

/// Parameter count of the most general layer equivariant only to neuron
/// permutations: every hidden layer permuted, plus the input and output
/// layers unless `fix_boundary` is set.
///
/// The count is the number of group orbits on (output entry, input entry)
/// index pairs weighted by feature sizes, plus the orbits on output entries
/// for the constant term. Orbits factor over layers: two indices in a
/// permuted layer of size `n` are either equal or distinct (2 orbits, 1 if
/// `n = 1`); one index gives a single orbit; indices in a fixed layer are
/// never identified (`n` per index).
pub fn permutation_baseline_count(source: &WeightSpaceSpec, target: &WeightSpaceSpec, fix_boundary: bool) -> Result<u128> {
    check_pair(source, target)?;
    let l = source.layers();
    let ch = source.channels();
    let fixed = |layer: usize| fix_boundary && (layer == 0 || layer == l);

    // (channel layers touched, feature dim) for each entry kind.
    let kinds = |spec: &WeightSpaceSpec| -> Vec<(Vec<usize>, usize)> {
        (1..=l)
            .flat_map(|i| {
                [
                    (vec![i, i - 1], spec.weight_dims()[i - 1]),
                    (vec![i], spec.bias_dims()[i - 1]),
                ]
            })
            .collect()
    };
    let orbit_factor = |layers: &[usize]| -> u128 {
        let mut counts = vec![0usize; l + 1];
        for &x in layers {
            counts[x] += 1;
        }
        counts
            .iter()
            .enumerate()
            .map(|(layer, &c)| {
                let n = ch[layer] as u128;
                match (fixed(layer), c) {
                    (_, 0) => 1,
                    (true, c) => n.pow(c as u32),
                    (false, 1) => 1,
                    (false, _) => {
                        if n >= 2 {
                            2
                        } else {
                            1
                        }
                    }
                }
            })
            .product()
    };
    let (outs, ins) = (kinds(target), kinds(source));
    let mut total = 0u128;
    for (ol, od) in &outs {
        for (il, id) in &ins {
            let mut both = ol.clone();
            both.extend(il);
            total += orbit_factor(&both) * (*od as u128) * (*id as u128);
        }
        total += orbit_factor(ol) * (*od as u128);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::GroupSampler;

    fn spec(ch: &[usize], w: &[usize], b: &[usize]) -> WeightSpaceSpec {
        WeightSpaceSpec::new(ch.to_vec(), w.to_vec(), b.to_vec()).unwrap()
    }

    #[test]
    fn identity_params_give_identity_map() {
        for s in [
            spec(&[2, 3, 2], &[2, 1], &[1, 3]),
            spec(&[1, 2, 3, 2], &[1, 2, 3], &[2, 1, 1]),
            spec(&[2, 2], &[1], &[1]),
        ] {
            let id = ReluParams::identity(&s).unwrap();
            let u = WeightSpacePoint::random(&s, 3, 1.0).unwrap();
            assert_eq!(id.apply(&u).unwrap(), u);
        }
    }

    #[test]
    fn pure_bias_output() {
        let s = spec(&[2, 3, 2], &[1, 1], &[1, 1]);
        let t = spec(&[2, 3, 2], &[2, 2], &[2, 2]);
        let mut p = ReluParams::zeros(&s, &t).unwrap();
        let b = p.blocks_mut().unwrap();
        b.tl[0] = Tensor::vector(vec![1.5, -2.0]).unwrap();
        b.tl[1] = Tensor::vector(vec![0.25, 4.0]).unwrap();
        let u = WeightSpacePoint::random(&s, 1, 1.0).unwrap();
        let out = p.apply(&u).unwrap();
        assert_eq!(out.bias(1, 0), &[1.5, -2.0]);
        assert_eq!(out.bias(1, 1), &[0.25, 4.0]);
        let mut rest = out.clone();
        rest.biases_mut()[1].data_mut().fill(0.0);
        assert_eq!(rest.max_abs(), 0.0);
    }

    #[test]
    fn sintanh_with_zero_cross_equals_relu() {
        let s = spec(&[2, 3, 2, 2], &[1, 2, 1], &[1, 1, 2]);
        let t = spec(&[2, 3, 2, 2], &[2, 1, 2], &[2, 2, 1]);
        let mut rng = SplitMix64::new(1);
        let mut p = SinTanhParams::random(&s, &t, &mut rng).unwrap();
        let cross = p.cross_mut();
        for x in cross.rlm1.iter_mut().chain(cross.ql.iter_mut()) {
            x.data_mut().fill(0.0);
        }
        let u = WeightSpacePoint::random(&s, 9, 1.0).unwrap();
        assert_eq!(p.apply(&u).unwrap(), p.base().apply(&u).unwrap());
    }

    #[test]
    fn cross_block_reads_off_selected_column() {
        // L = 3, n = (1, 2, 2, 2); only RLm1 nonzero, W(3) one-hot at (p=1, k=0).
        let s = spec(&[1, 2, 2, 2], &[1, 1, 2], &[1, 1, 1]);
        let t = spec(&[1, 2, 2, 2], &[1, 1, 1], &[1, 3, 1]);
        let mut p = SinTanhParams::zeros(&s, &t).unwrap();
        p.cross_mut().rlm1[1] = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let mut u = WeightSpacePoint::zeros(&s);
        u.weight_mut(2, 1, 0)[1] = 1.0;
        let out = p.apply(&u).unwrap();
        assert_eq!(out.bias(1, 0), &[2.0, 4.0, 6.0]);
        assert_eq!(out.bias(1, 1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sintanh_rejects_short_networks() {
        let s = spec(&[1, 2, 1], &[1, 1], &[1, 1]);
        assert!(matches!(SinTanhParams::zeros(&s, &s), Err(Error::Unsupported(_))));
        assert!(matches!(param_count(&s, &s, Family::SinTanh), Err(Error::Unsupported(_))));
    }

    #[test]
    fn mismatched_input_rejected() {
        let s = spec(&[1, 2, 1], &[1, 1], &[1, 1]);
        let other = spec(&[1, 3, 1], &[1, 1], &[1, 1]);
        let p = ReluParams::zeros(&s, &s).unwrap();
        assert!(p.apply(&WeightSpacePoint::zeros(&other)).is_err());
        assert!(ReluParams::zeros(&s, &other).is_err());
    }

    #[test]
    fn tiny_spec_counts() {
        let s = WeightSpaceSpec::fcnn(vec![1, 2, 2, 1]).unwrap();
        assert_eq!(param_count(&s, &s, Family::Relu).unwrap().exact, 9);
        assert_eq!(param_count(&s, &s, Family::SinTanh).unwrap().exact, 11);
    }

    #[test]
    fn stored_params_match_count() {
        let mut rng = SplitMix64::new(0);
        for (s, t) in [
            (spec(&[2, 3, 4, 2], &[1, 2, 3], &[2, 1, 1]), spec(&[2, 3, 4, 2], &[3, 1, 2], &[1, 2, 2])),
            (spec(&[3, 2, 2, 2, 1], &[1, 1, 2, 1], &[1, 2, 1, 1]), spec(&[3, 2, 2, 2, 1], &[2, 2, 1, 1], &[1, 1, 2, 3])),
        ] {
            let r = ReluParams::random(&s, &t, &mut rng).unwrap();
            assert_eq!(r.num_params() as u128, param_count(&s, &t, Family::Relu).unwrap().exact);
            let st = SinTanhParams::random(&s, &t, &mut rng).unwrap();
            assert_eq!(st.num_params() as u128, param_count(&s, &t, Family::SinTanh).unwrap().exact);
        }
        let s = spec(&[2, 3, 1], &[1, 2], &[1, 1]);
        let r = ReluParams::random(&s, &s, &mut rng).unwrap();
        assert_eq!(r.num_params() as u128, param_count(&s, &s, Family::Relu).unwrap().exact);
        let single = spec(&[2, 3], &[2], &[1]);
        let r = ReluParams::random(&single, &single, &mut rng).unwrap();
        assert_eq!(r.num_params() as u128, param_count(&single, &single, Family::Relu).unwrap().exact);
    }

    #[test]
    fn apply_matches_materialized_dense_map() {
        let mut rng = SplitMix64::new(21);
        let s = spec(&[2, 3, 2, 2], &[1, 2, 2], &[2, 1, 1]);
        let t = spec(&[2, 3, 2, 2], &[2, 1, 1], &[1, 2, 3]);
        for family in [Family::Relu, Family::SinTanh] {
            let layer = EquivariantLayer::random(family, &s, &t, &mut rng).unwrap();
            let (lin, off) = materialize_dense(&layer);
            for _ in 0..10 {
                let u = WeightSpacePoint::random_with(&s, &mut rng, 1.0).unwrap();
                let dense = lin.matmul(&Tensor::vector(u.to_flat()).unwrap()).unwrap().add(&off).unwrap();
                let direct = Tensor::vector(layer.apply(&u).unwrap().to_flat()).unwrap();
                assert!(dense.sub(&direct).unwrap().max_abs() < 1e-13);
            }
        }
    }

    #[test]
    fn linear_when_offset_zero() {
        let mut rng = SplitMix64::new(2);
        let s = spec(&[2, 3, 3, 2], &[2, 1, 2], &[1, 2, 1]);
        let mut p = SinTanhParams::random(&s, &s, &mut rng).unwrap();
        for t in &mut p.base_mut().blocks_mut().unwrap().tl {
            t.data_mut().fill(0.0);
        }
        for _ in 0..20 {
            let u1 = WeightSpacePoint::random_with(&s, &mut rng, 1.0).unwrap();
            let u2 = WeightSpacePoint::random_with(&s, &mut rng, 1.0).unwrap();
            let (a, b) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
            let lhs = p.apply(&u1.scale(a).add(&u2.scale(b)).unwrap()).unwrap();
            let rhs = p.apply(&u1).unwrap().scale(a).add(&p.apply(&u2).unwrap().scale(b)).unwrap();
            assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-11);
        }
    }

    #[test]
    fn equivariance_small_sample() {
        let mut rng = SplitMix64::new(77);
        let s = spec(&[2, 3, 4, 2], &[1, 2, 3], &[2, 1, 1]);
        let t = spec(&[2, 3, 4, 2], &[2, 2, 1], &[1, 3, 2]);
        for family in [Family::Relu, Family::SinTanh] {
            let layer = EquivariantLayer::random(family, &s, &t, &mut rng).unwrap();
            let sampler = GroupSampler::new(family.subgroup(), (0.5, 2.0));
            for _ in 0..50 {
                let u = WeightSpacePoint::random_with(&s, &mut rng, 1.0).unwrap();
                let g = sampler.sample_with(s.channels(), &mut rng).unwrap();
                let lhs = layer.apply(&g.act_weights(&u).unwrap()).unwrap();
                let rhs = g.act_weights(&layer.apply(&u).unwrap()).unwrap();
                let scale = layer.apply(&u).unwrap().max_abs();
                assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-9 * scale * g.kappa());
            }
        }
    }

    #[test]
    fn baseline_counts_grow_quadratically() {
        let count = |l: usize, fix: bool| {
            let mut ch = vec![3; l + 1];
            ch[0] = 2;
            let s = WeightSpaceSpec::fcnn(ch).unwrap();
            permutation_baseline_count(&s, &s, fix).unwrap() as i128
        };
        for fix in [false, true] {
            let (a, b, c) = (count(4, fix), count(8, fix), count(12, fix));
            assert!((c - b) - (b - a) > 0, "{a} {b} {c}");
        }
    }

    #[test]
    fn baseline_single_layer_fixed_is_full_affine() {
        let s = spec(&[2, 3], &[2], &[1]);
        let d = s.dimension() as u128;
        assert_eq!(permutation_baseline_count(&s, &s, true).unwrap(), d * (d + 1));
    }
}
