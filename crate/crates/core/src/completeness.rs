//! Numerical dimension of the space of affine maps `U → U'` that commute with
//! a sampled set of group elements. Independent of the layer implementation:
//! the group action is read off [`GroupElement::act_weights`] directly.
//!
//! Each group element acts on flat coordinates as a signed/scaled
//! permutation `e_s ↦ a_s e_{σ(s)}`. Equivariance of `x ↦ M x + c` under
//! `(σ, a)` on `U` and `(τ, b)` on `U'` reads
//!
//! ```text
//! a_s · M[τ(r), σ(s)] = b_r · M[r, s]        c[τ(r)] = b_r · c[r]
//! ```
//!
//! Every equation couples at most two unknowns, so the system splits into
//! connected components that are solved independently by SVD.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::group::{GroupElement, GroupSampler};
use crate::network::Family;
use crate::rng::SplitMix64;
use crate::weight_space::{WeightSpacePoint, WeightSpaceSpec};

/// Largest `dim U · dim U'` accepted.
pub const MAX_UNKNOWNS: usize = 20_000;

/// Relative singular-value cutoff for the numerical rank.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// `g` on flat coordinates: `e_s ↦ factor[s] · e_{image[s]}`.
#[derive(Debug, Clone)]
pub struct CoordinateAction {
    pub image: Vec<usize>,
    pub factor: Vec<f64>,
}

/// Read off the action of `g` on the flat coordinates of `spec` from two
/// probe points: all ones gives the factors, `s + 1` at coordinate `s`
/// reveals where each coordinate is sent.
pub fn coordinate_action(g: &GroupElement, spec: &WeightSpaceSpec) -> Result<CoordinateAction> {
    let d = spec.dimension();
    let ones = WeightSpacePoint::from_flat(spec, &vec![1.0; d])?;
    let labels: Vec<f64> = (1..=d).map(|s| s as f64).collect();
    let labelled = WeightSpacePoint::from_flat(spec, &labels)?;
    let f1 = g.act_weights(&ones)?.to_flat();
    let f2 = g.act_weights(&labelled)?.to_flat();
    let mut image = vec![usize::MAX; d];
    let mut factor = vec![0.0; d];
    for t in 0..d {
        let s = (f2[t] / f1[t]).round() as usize - 1;
        if s >= d || image[s] != usize::MAX {
            return Err(Error::InvalidArgument("group element does not act monomially".into()));
        }
        image[s] = t;
        factor[s] = f1[t];
    }
    Ok(CoordinateAction { image, factor })
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Two-term equation `ca · x[a] + cb · x[b] = 0` (`a` may equal `b`).
struct Equation {
    a: usize,
    ca: f64,
    b: usize,
    cb: f64,
}

/// Null-space dimension of the equivariance system over `samples` draws of
/// `sampler`.
pub fn equivariant_map_dimension(
    source: &WeightSpaceSpec,
    target: &WeightSpaceSpec,
    sampler: &GroupSampler,
    samples: usize,
    seed: u64,
) -> Result<usize> {
    if !source.same_channels(target) {
        return Err(Error::InvalidArgument("source and target channels differ".into()));
    }
    let (du, dt) = (source.dimension(), target.dimension());
    if du * dt > MAX_UNKNOWNS {
        return Err(Error::ScaleLimit(format!(
            "dim U · dim U' = {} exceeds the limit of {MAX_UNKNOWNS}",
            du * dt
        )));
    }
    // Unknowns: M[r, s] at r·du + s, then c[r] at dt·du + r.
    let n = dt * du + dt;
    let mut rng = SplitMix64::new(seed);
    let mut eqs = Vec::new();
    for _ in 0..samples {
        let g = sampler.sample_with(source.channels(), &mut rng)?;
        let on_u = coordinate_action(&g, source)?;
        let on_t = coordinate_action(&g, target)?;
        for r in 0..dt {
            let (tr, br) = (on_t.image[r], on_t.factor[r]);
            for s in 0..du {
                let (ss, a_s) = (on_u.image[s], on_u.factor[s]);
                eqs.push(Equation {
                    a: tr * du + ss,
                    ca: a_s,
                    b: r * du + s,
                    cb: -br,
                });
            }
            eqs.push(Equation {
                a: dt * du + tr,
                ca: 1.0,
                b: dt * du + r,
                cb: -br,
            });
        }
    }
    Ok(null_dimension(n, &eqs))
}

fn null_dimension(n: usize, eqs: &[Equation]) -> usize {
    let mut uf = UnionFind::new(n);
    for e in eqs {
        uf.union(e.a, e.b);
    }
    let mut comp_of = vec![usize::MAX; n];
    let mut local = vec![0usize; n];
    let mut sizes: Vec<usize> = Vec::new();
    for x in 0..n {
        let root = uf.find(x);
        if comp_of[root] == usize::MAX {
            comp_of[root] = sizes.len();
            sizes.push(0);
        }
        let c = comp_of[root];
        comp_of[x] = c;
        local[x] = sizes[c];
        sizes[c] += 1;
    }
    let mut rows: Vec<Vec<&Equation>> = vec![Vec::new(); sizes.len()];
    for e in eqs {
        if e.a == e.b && e.ca + e.cb == 0.0 {
            continue;
        }
        rows[comp_of[e.a]].push(e);
    }

    let singular: Vec<Vec<f64>> = sizes
        .iter()
        .zip(&rows)
        .map(|(&k, eqs)| {
            if eqs.is_empty() {
                return Vec::new();
            }
            let mut m = DMatrix::<f64>::zeros(eqs.len(), k);
            for (i, e) in eqs.iter().enumerate() {
                m[(i, local[e.a])] += e.ca;
                m[(i, local[e.b])] += e.cb;
            }
            if m.nrows() > 2 * k {
                m = m.qr().r();
            }
            m.singular_values().iter().copied().collect()
        })
        .collect();
    let sigma_max = singular.iter().flatten().copied().fold(0.0, f64::max);
    let cutoff = RANK_TOLERANCE * sigma_max;
    sizes
        .iter()
        .zip(&singular)
        .map(|(&k, sv)| k - sv.iter().filter(|&&s| s > cutoff).count())
        .sum()
}

/// Dimension of the equivariant affine maps for the symmetry group of
/// `family`, sampled with positive scales in `[0.5, 2]`.
pub fn completeness_dimension(
    source: &WeightSpaceSpec,
    target: &WeightSpaceSpec,
    family: Family,
    samples: usize,
    seed: u64,
) -> Result<usize> {
    let sampler = GroupSampler::new(family.subgroup(), (0.5, 2.0));
    equivariant_map_dimension(source, target, &sampler, samples, seed)
}
