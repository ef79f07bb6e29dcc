//! Weight spaces `U = W × B` of FCNNs and CNNs.
//!
//! A [`WeightSpaceSpec`] records the channel counts `n_0..n_L` together with the
//! per-entry feature sizes: every weight entry `W^(i)_{jk}` is a vector of
//! length `w_i` (the convolution kernel for CNNs) and every bias entry
//! `b^(i)_j` a vector of length `b_i`. FCNNs are the case `w_i = b_i = 1`.
//!
//! Storage: `weights[t]` holds layer `t + 1` with axes `[row j, column k,
//! feature]`, shape `[n_{t+1}, n_t, w_{t+1}]`; `biases[t]` has shape
//! `[n_{t+1}, b_{t+1}]`. Layer numbers in error messages are 1-based.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SpecDoc", into = "SpecDoc")]
pub struct WeightSpaceSpec {
    channels: Vec<usize>,
    weight_dims: Vec<usize>,
    bias_dims: Vec<usize>,
}

/// JSON form of a spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecDoc {
    pub layers: usize,
    pub channels: Vec<usize>,
    pub weight_dim: Vec<usize>,
    pub bias_dim: Vec<usize>,
}

impl TryFrom<SpecDoc> for WeightSpaceSpec {
    type Error = Error;

    fn try_from(doc: SpecDoc) -> Result<Self> {
        if doc.channels.len() != doc.layers + 1 {
            return Err(Error::Parse {
                path: "spec.channels".into(),
                detail: format!(
                    "{} layers need {} channel counts, got {}",
                    doc.layers,
                    doc.layers + 1,
                    doc.channels.len()
                ),
            });
        }
        WeightSpaceSpec::new(doc.channels, doc.weight_dim, doc.bias_dim)
    }
}

impl From<WeightSpaceSpec> for SpecDoc {
    fn from(s: WeightSpaceSpec) -> Self {
        SpecDoc {
            layers: s.layers(),
            channels: s.channels,
            weight_dim: s.weight_dims,
            bias_dim: s.bias_dims,
        }
    }
}

impl WeightSpaceSpec {
    pub fn new(channels: Vec<usize>, weight_dims: Vec<usize>, bias_dims: Vec<usize>) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a weight space needs at least one layer (two channel counts), got {channels:?}"
            )));
        }
        let layers = channels.len() - 1;
        if weight_dims.len() != layers || bias_dims.len() != layers {
            return Err(Error::InvalidArgument(format!(
                "{layers} layers need {layers} weight and bias dims, got {} and {}",
                weight_dims.len(),
                bias_dims.len()
            )));
        }
        for (name, v) in [("channel", &channels), ("weight dim", &weight_dims), ("bias dim", &bias_dims)] {
            if let Some(i) = v.iter().position(|&x| x == 0) {
                return Err(Error::InvalidArgument(format!("{name} #{i} is zero")));
            }
        }
        Ok(Self {
            channels,
            weight_dims,
            bias_dims,
        })
    }

    /// Fully connected network: every weight and bias entry is a scalar.
    pub fn fcnn(channels: Vec<usize>) -> Result<Self> {
        let l = channels.len().saturating_sub(1);
        Self::new(channels, vec![1; l], vec![1; l])
    }

    /// 1-D CNN with the given kernel sizes and scalar biases.
    pub fn cnn(channels: Vec<usize>, kernel_sizes: Vec<usize>) -> Result<Self> {
        let l = kernel_sizes.len();
        Self::new(channels, kernel_sizes, vec![1; l])
    }

    /// Same channels with every weight dim `w` and bias dim `b`.
    pub fn with_uniform_dims(&self, w: usize, b: usize) -> Result<Self> {
        Self::new(self.channels.clone(), vec![w; self.layers()], vec![b; self.layers()])
    }

    pub fn layers(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn weight_dims(&self) -> &[usize] {
        &self.weight_dims
    }

    pub fn bias_dims(&self) -> &[usize] {
        &self.bias_dims
    }

    pub fn is_fcnn(&self) -> bool {
        self.weight_dims.iter().chain(&self.bias_dims).all(|&d| d == 1)
    }

    /// Shape of the weight tensor of layer index `t` (layer `t + 1`).
    pub fn weight_shape(&self, t: usize) -> [usize; 3] {
        [self.channels[t + 1], self.channels[t], self.weight_dims[t]]
    }

    pub fn bias_shape(&self, t: usize) -> [usize; 2] {
        [self.channels[t + 1], self.bias_dims[t]]
    }

    /// `dim U = Σ_i (w_i n_i n_{i−1} + b_i n_i)`.
    pub fn dimension(&self) -> usize {
        (0..self.layers())
            .map(|t| {
                let [n, m, w] = self.weight_shape(t);
                let [_, b] = self.bias_shape(t);
                w * n * m + b * n
            })
            .sum()
    }

    /// Specs agree on layer count and channels (so they share a group).
    pub fn same_channels(&self, other: &WeightSpaceSpec) -> bool {
        self.channels == other.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSpacePoint {
    spec: WeightSpaceSpec,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl WeightSpacePoint {
    pub fn new(spec: WeightSpaceSpec, weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        let l = spec.layers();
        if weights.len() != l || biases.len() != l {
            return Err(Error::InvalidArgument(format!(
                "spec has {l} layers but point carries {} weight and {} bias tensors",
                weights.len(),
                biases.len()
            )));
        }
        for t in 0..l {
            if weights[t].dims() != spec.weight_shape(t) {
                return Err(Error::LayerShape {
                    layer: t + 1,
                    detail: format!(
                        "weight shape {} does not match spec {:?}",
                        weights[t].shape(),
                        spec.weight_shape(t)
                    ),
                });
            }
            if biases[t].dims() != spec.bias_shape(t) {
                return Err(Error::LayerShape {
                    layer: t + 1,
                    detail: format!(
                        "bias shape {} does not match spec {:?}",
                        biases[t].shape(),
                        spec.bias_shape(t)
                    ),
                });
            }
            if !weights[t].is_finite() || !biases[t].is_finite() {
                return Err(Error::LayerShape {
                    layer: t + 1,
                    detail: "non-finite entry".into(),
                });
            }
        }
        Ok(Self { spec, weights, biases })
    }

    pub fn zeros(spec: &WeightSpaceSpec) -> Self {
        let l = spec.layers();
        let weights = (0..l).map(|t| Tensor::zeros(&spec.weight_shape(t)).unwrap()).collect();
        let biases = (0..l).map(|t| Tensor::zeros(&spec.bias_shape(t)).unwrap()).collect();
        Self {
            spec: spec.clone(),
            weights,
            biases,
        }
    }

    /// Entries i.i.d. uniform on `[−scale, scale]`, fully determined by `seed`.
    pub fn random(spec: &WeightSpaceSpec, seed: u64, scale: f64) -> Result<Self> {
        let mut rng = SplitMix64::new(seed);
        Self::random_with(spec, &mut rng, scale)
    }

    pub fn random_with(spec: &WeightSpaceSpec, rng: &mut SplitMix64, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale must be positive and finite, got {scale}")));
        }
        let mut p = Self::zeros(spec);
        p.for_each_entry_mut(|x| *x = rng.uniform(-scale, scale));
        Ok(p)
    }

    pub fn spec(&self) -> &WeightSpaceSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Tensor] {
        &mut self.biases
    }

    /// Feature vector `W^(t+1)_{jk}`.
    pub fn weight(&self, t: usize, j: usize, k: usize) -> &[f64] {
        self.weights[t].lane(&[j, k])
    }

    pub fn weight_mut(&mut self, t: usize, j: usize, k: usize) -> &mut [f64] {
        self.weights[t].lane_mut(&[j, k])
    }

    /// Feature vector `b^(t+1)_j`.
    pub fn bias(&self, t: usize, j: usize) -> &[f64] {
        self.biases[t].lane(&[j])
    }

    pub fn bias_mut(&mut self, t: usize, j: usize) -> &mut [f64] {
        self.biases[t].lane_mut(&[j])
    }

    /// Visits entries in flat order: for each layer, its weights then its biases.
    pub fn for_each_entry_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.data_mut().iter_mut().for_each(&mut f);
            b.data_mut().iter_mut().for_each(&mut f);
        }
    }

    /// Flat coordinates, ordered as in [`Self::for_each_entry_mut`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.spec.dimension());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
        out
    }

    pub fn from_flat(spec: &WeightSpaceSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.dimension() {
            return Err(Error::Dimension(format!(
                "weight space has dimension {}, got {} coordinates",
                spec.dimension(),
                flat.len()
            )));
        }
        let mut p = Self::zeros(spec);
        let mut it = flat.iter();
        p.for_each_entry_mut(|x| *x = *it.next().unwrap());
        Ok(p)
    }

    pub fn dimension(&self) -> usize {
        self.spec.dimension()
    }

    fn combine(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.spec != other.spec {
            return Err(Error::Dimension("weight-space points have different specs".into()));
        }
        let weights = self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| a.zip_with(b, &f))
            .collect::<Result<_>>()?;
        let biases = self
            .biases
            .iter()
            .zip(&other.biases)
            .map(|(a, b)| a.zip_with(b, &f))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: self.spec.clone(),
            weights,
            biases,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.combine(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.combine(other, |a, b| a - b)
    }

    pub fn scale(&self, a: f64) -> Self {
        let mut p = self.clone();
        p.for_each_entry_mut(|x| *x *= a);
        p
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut p = self.clone();
        p.for_each_entry_mut(|x| *x = f(*x));
        p
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.biases)
            .fold(0.0, |m, t| m.max(t.max_abs()))
    }

    pub fn to_document(&self) -> WeightFile {
        let weights = self
            .weights
            .iter()
            .map(|w| {
                let [n, m, _] = [w.dims()[0], w.dims()[1], w.dims()[2]];
                (0..n)
                    .map(|j| (0..m).map(|k| w.lane(&[j, k]).to_vec()).collect())
                    .collect()
            })
            .collect();
        let biases = self
            .biases
            .iter()
            .map(|b| (0..b.dims()[0]).map(|j| b.lane(&[j]).to_vec()).collect())
            .collect();
        WeightFile {
            spec: self.spec.clone().into(),
            weights,
            biases,
        }
    }

    pub fn from_document(doc: WeightFile) -> Result<Self> {
        let spec = WeightSpaceSpec::try_from(doc.spec)?;
        let l = spec.layers();
        if doc.weights.len() != l {
            return Err(Error::Parse {
                path: "weights".into(),
                detail: format!("spec declares {l} layers, found {} weight tensors", doc.weights.len()),
            });
        }
        if doc.biases.len() != l {
            return Err(Error::Parse {
                path: "biases".into(),
                detail: format!("spec declares {l} layers, found {} bias tensors", doc.biases.len()),
            });
        }
        let mut weights = Vec::with_capacity(l);
        let mut biases = Vec::with_capacity(l);
        for t in 0..l {
            let [n, m, w] = spec.weight_shape(t);
            let rows = &doc.weights[t];
            let shape_err = |what: &str, detail: String| Error::LayerShape {
                layer: t + 1,
                detail: format!("{what}: {detail}"),
            };
            if rows.len() != n {
                return Err(shape_err("weights", format!("spec has {n} rows, document has {}", rows.len())));
            }
            let mut data = Vec::with_capacity(n * m * w);
            for (j, row) in rows.iter().enumerate() {
                if row.len() != m {
                    return Err(shape_err(
                        "weights",
                        format!("row {j} has {} columns, spec has {m}", row.len()),
                    ));
                }
                for (k, entry) in row.iter().enumerate() {
                    if entry.len() != w {
                        return Err(shape_err(
                            "weights",
                            format!("entry ({j},{k}) has {} features, spec has {w}", entry.len()),
                        ));
                    }
                    data.extend_from_slice(entry);
                }
            }
            weights.push(Tensor::new(vec![n, m, w], data)?);

            let [n, b] = spec.bias_shape(t);
            let rows = &doc.biases[t];
            if rows.len() != n {
                return Err(shape_err("biases", format!("spec has {n} rows, document has {}", rows.len())));
            }
            let mut data = Vec::with_capacity(n * b);
            for (j, entry) in rows.iter().enumerate() {
                if entry.len() != b {
                    return Err(shape_err(
                        "biases",
                        format!("entry {j} has {} features, spec has {b}", entry.len()),
                    ));
                }
                data.extend_from_slice(entry);
            }
            biases.push(Tensor::new(vec![n, b], data)?);
        }
        Self::new(spec, weights, biases)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("weight document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: WeightFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "document".into(),
            detail: e.to_string(),
        })?;
        Self::from_document(doc)
    }
}

/// On-disk weight file: `weights` axes are `[row][col][feature]`, `biases`
/// axes `[row][feature]`. Floats are written as shortest round-trip decimals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightFile {
    pub spec: SpecDoc,
    pub weights: Vec<Vec<Vec<Vec<f64>>>>,
    pub biases: Vec<Vec<Vec<f64>>>,
}
