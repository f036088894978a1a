//! Rigid kernel point convolution with linear influence.
//!
//! For a query `x` with neighbors `x_i`:
//!
//! ```text
//! out(x) = sum_i sum_k h(x_i - x, p_k) * (f_i . W_k)
//! h(y, p) = max(0, 1 - |y - p| / sigma)
//! ```
//!
//! The forward pass first aggregates influence-weighted features per kernel
//! point, then applies the kernel weights once per query.

use std::sync::{Arc, OnceLock};

use rand::Rng;

use super::kernel_points::KernelDisposition;
use super::neighbors::NeighborLists;
use crate::error::{Error, Result};
use crate::gemm::{gemm, Op};
use crate::net2d::layers::kaiming_uniform;
use crate::par;
use crate::param::{join, Entry, Param, Visit};
use crate::tensor::Tensor;

/// Non-zero kernel influences of a set of neighborhoods. They depend only
/// on geometry, so a scan's influences can be reused across passes.
#[derive(Debug, Clone)]
pub struct Influences {
    pub disposition: KernelDisposition,
    n_support: usize,
    /// Per query, the start of its entries in `terms`.
    offsets: Vec<usize>,
    /// `(support point, kernel index, h)`, by query, then ascending support
    /// point, then ascending kernel index.
    terms: Vec<(u32, u32, f64)>,
    /// The same terms by support point, queries ascending, built on first
    /// use by the backward pass.
    by_support: OnceLock<(Vec<usize>, Vec<(u32, u32, f64)>)>,
}

impl PartialEq for Influences {
    fn eq(&self, other: &Self) -> bool {
        self.disposition == other.disposition
            && self.n_support == other.n_support
            && self.offsets == other.offsets
            && self.terms == other.terms
    }
}

impl Influences {
    pub fn compute(
        points: &[[f64; 3]],
        neighbors: &NeighborLists,
        disposition: &KernelDisposition,
    ) -> Result<Self> {
        if neighbors.num_queries() != points.len() {
            return Err(Error::argument(format!(
                "kpconv: {} neighbor lists for {} points",
                neighbors.num_queries(),
                points.len()
            )));
        }
        if points.len() > u32::MAX as usize {
            return Err(Error::argument("kpconv: too many points"));
        }
        if neighbors.iter().flatten().any(|&i| i >= points.len()) {
            return Err(Error::argument("kpconv: neighbor index out of range"));
        }
        let inv_sigma = 1.0 / disposition.sigma;
        let sigma2 = disposition.sigma * disposition.sigma;
        let per_query = par::map_range(points.len(), |q| {
            let x = points[q];
            let mut terms = Vec::new();
            for &i in neighbors.neighbors(q) {
                let y = [points[i][0] - x[0], points[i][1] - x[1], points[i][2] - x[2]];
                for (k, p) in disposition.positions.iter().enumerate() {
                    let d2 =
                        (y[0] - p[0]).powi(2) + (y[1] - p[1]).powi(2) + (y[2] - p[2]).powi(2);
                    if d2 >= sigma2 {
                        continue;
                    }
                    let h = 1.0 - d2.sqrt() * inv_sigma;
                    if h > 0.0 {
                        terms.push((i as u32, k as u32, h));
                    }
                }
            }
            terms
        });
        let mut offsets = Vec::with_capacity(points.len() + 1);
        offsets.push(0);
        let mut terms = Vec::with_capacity(per_query.iter().map(Vec::len).sum());
        for t in per_query {
            terms.extend(t);
            offsets.push(terms.len());
        }
        Ok(Influences {
            disposition: disposition.clone(),
            n_support: points.len(),
            offsets,
            terms,
            by_support: OnceLock::new(),
        })
    }

    pub fn num_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Influences among the points in `kept` only, renumbered by position
    /// in `kept`.
    pub fn subset(&self, kept: &[usize]) -> Influences {
        let mut new_index = vec![u32::MAX; self.n_support];
        for (j, &i) in kept.iter().enumerate() {
            new_index[i] = j as u32;
        }
        let mut offsets = Vec::with_capacity(kept.len() + 1);
        offsets.push(0);
        let mut terms = Vec::new();
        for &q in kept {
            for &(i, k, h) in &self.terms[self.offsets[q]..self.offsets[q + 1]] {
                let j = new_index[i as usize];
                if j != u32::MAX {
                    terms.push((j, k, h));
                }
            }
            offsets.push(terms.len());
        }
        Influences {
            disposition: self.disposition.clone(),
            n_support: kept.len(),
            offsets,
            terms,
            by_support: OnceLock::new(),
        }
    }

    fn by_support(&self) -> &(Vec<usize>, Vec<(u32, u32, f64)>) {
        self.by_support.get_or_init(|| {
            let mut starts = vec![0usize; self.n_support + 1];
            for t in &self.terms {
                starts[t.0 as usize + 1] += 1;
            }
            for i in 0..self.n_support {
                starts[i + 1] += starts[i];
            }
            let mut fill = starts.clone();
            let mut out = vec![(0u32, 0u32, 0.0f64); self.terms.len()];
            for q in 0..self.num_queries() {
                for &(i, k, h) in &self.terms[self.offsets[q]..self.offsets[q + 1]] {
                    let slot = &mut fill[i as usize];
                    out[*slot] = (q as u32, k, h);
                    *slot += 1;
                }
            }
            (starts, out)
        })
    }
}

/// State kept by [`kpconv_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct KPConvSaved {
    influences: Arc<Influences>,
    features: Tensor,
    weights: Tensor,
}

/// Returns `[N, C_out]` outputs and the state needed by [`kpconv_backward`].
pub fn kpconv_forward(
    features: &Tensor,
    points: &[[f64; 3]],
    neighbors: &NeighborLists,
    disposition: &KernelDisposition,
    weights: &Tensor,
) -> Result<(Tensor, KPConvSaved)> {
    let inf = Influences::compute(points, neighbors, disposition)?;
    kpconv_apply(features, Arc::new(inf), weights)
}

/// Queries (or support points) per block. A block's `[rows, K * C]`
/// scratch stays small enough to remain in cache.
const BLOCK: usize = 128;

/// `[rows, K, C_in]` influence-weighted feature sums for queries
/// `first..first + rows`.
fn aggregate_block(inf: &Influences, fd: &[f64], c_in: usize, first: usize, agg: &mut [f64]) {
    agg.fill(0.0);
    let kc_len = inf.disposition.len() * c_in;
    for (r, a) in agg.chunks_exact_mut(kc_len).enumerate() {
        let q = first + r;
        for &(i, k, h) in &inf.terms[inf.offsets[q]..inf.offsets[q + 1]] {
            let f = &fd[i as usize * c_in..][..c_in];
            for (o, &fv) in a[k as usize * c_in..][..c_in].iter_mut().zip(f) {
                *o += h * fv;
            }
        }
    }
}

/// [`kpconv_forward`] with precomputed influences.
pub fn kpconv_apply(
    features: &Tensor,
    influences: Arc<Influences>,
    weights: &Tensor,
) -> Result<(Tensor, KPConvSaved)> {
    let k_count = influences.disposition.len();
    if features.rank() != 2 || features.dim(0) != influences.n_support {
        return Err(Error::argument(format!(
            "kpconv: features {:?} for {} points",
            features.shape(),
            influences.n_support
        )));
    }
    if weights.rank() != 3 || weights.dim(0) != k_count || weights.dim(1) != features.dim(1) {
        return Err(Error::argument(format!(
            "kpconv: weights {:?} for K = {} and C_in = {}",
            weights.shape(),
            k_count,
            features.dim(1)
        )));
    }
    let n = influences.num_queries();
    let c_in = features.dim(1);
    let kc_len = k_count * c_in;
    let c_out = weights.dim(2);
    let (fd, wd) = (features.data(), weights.data());

    // out[q, :] = aggregated[q, :] W, one block of queries per task
    let mut out = vec![0.0; n * c_out];
    par::for_each_chunk(&mut out, (BLOCK * c_out).max(1), |blk, o| {
        let rows = o.len() / c_out;
        let mut agg = vec![0.0; rows * kc_len];
        aggregate_block(&influences, fd, c_in, blk * BLOCK, &mut agg);
        gemm(rows, kc_len, c_out, &agg, Op::N, wd, Op::N, o, false);
    });
    let saved = KPConvSaved {
        influences,
        features: features.clone(),
        weights: weights.clone(),
    };
    Ok((Tensor::from_vec(&[n, c_out], out)?, saved))
}

/// Returns `(grad_features, grad_weights)`.
pub fn kpconv_backward(grad_out: &Tensor, saved: &KPConvSaved) -> Result<(Tensor, Tensor)> {
    let inf = &*saved.influences;
    let n_query = inf.num_queries();
    let k_count = inf.disposition.len();
    let c_in = saved.features.dim(1);
    let kc_len = k_count * c_in;
    let c_out = saved.weights.dim(2);
    grad_out.expect_shape(&[n_query, c_out], "kpconv grad_out")?;
    let (gd, wd, fd) = (grad_out.data(), saved.weights.data(), saved.features.data());

    // dL/dW = sum over query blocks of aggregated^T g, reduced in block order
    let partials = par::map_range(n_query.div_ceil(BLOCK), |blk| {
        let first = blk * BLOCK;
        let rows = BLOCK.min(n_query - first);
        let mut agg = vec![0.0; rows * kc_len];
        aggregate_block(inf, fd, c_in, first, &mut agg);
        let mut p = vec![0.0; kc_len * c_out];
        let g = &gd[first * c_out..][..rows * c_out];
        gemm(kc_len, rows, c_out, &agg, Op::T, g, Op::N, &mut p, false);
        p
    });
    let mut gw = vec![0.0; kc_len * c_out];
    for p in partials {
        for (a, b) in gw.iter_mut().zip(p) {
            *a += b;
        }
    }

    // dL/df_i = sum_k (sum over terms (q, k, h) of i of h g_q) W_k^T, with
    // the bracket gathered per block of support points
    let mut w_t = vec![0.0; k_count * c_out * c_in];
    for k in 0..k_count {
        for c in 0..c_in {
            for o in 0..c_out {
                w_t[(k * c_out + o) * c_in + c] = wd[(k * c_in + c) * c_out + o];
            }
        }
    }
    let ko_len = k_count * c_out;
    let (starts, by_support) = inf.by_support();
    let mut gf = vec![0.0; inf.n_support * c_in];
    par::for_each_chunk(&mut gf, (BLOCK * c_in).max(1), |blk, out| {
        let rows = out.len() / c_in;
        let mut gathered = vec![0.0; rows * ko_len];
        for (r, acc) in gathered.chunks_exact_mut(ko_len).enumerate() {
            let i = blk * BLOCK + r;
            for &(q, k, h) in &by_support[starts[i]..starts[i + 1]] {
                let g = &gd[q as usize * c_out..][..c_out];
                for (o, &v) in acc[k as usize * c_out..][..c_out].iter_mut().zip(g) {
                    *o += h * v;
                }
            }
        }
        gemm(rows, ko_len, c_in, &gathered, Op::N, &w_t, Op::N, out, false);
    });
    Ok((
        Tensor::from_vec(&[inf.n_support, c_in], gf)?,
        Tensor::from_vec(saved.weights.shape(), gw)?,
    ))
}

/// A point convolution layer with frozen kernel positions.
#[derive(Debug, Clone)]
pub struct KPConv {
    pub disposition: KernelDisposition,
    /// `[K, C_in, C_out]`
    pub weights: Param,
    saved: Vec<KPConvSaved>,
}

impl KPConv {
    pub fn new<R: Rng>(
        disposition: KernelDisposition,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        disposition.validate()?;
        let k = disposition.len();
        let weights = kaiming_uniform(&[k, c_in, c_out], k * c_in, rng);
        Ok(KPConv {
            disposition,
            weights: Param::new(weights, true),
            saved: Vec::new(),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weights.value.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.value.dim(2)
    }

    /// Runs the convolution on one scan. Saved states stack up, so several
    /// scans can be processed before back-propagating them in reverse order.
    pub fn forward(
        &mut self,
        features: &Tensor,
        points: &[[f64; 3]],
        neighbors: &NeighborLists,
    ) -> Result<Tensor> {
        let (y, saved) = kpconv_forward(
            features,
            points,
            neighbors,
            &self.disposition,
            &self.weights.value,
        )?;
        self.saved.push(saved);
        Ok(y)
    }

    /// Like [`KPConv::forward`], reusing influences computed for this
    /// layer's kernel disposition.
    pub fn forward_with(&mut self, features: &Tensor, influences: Arc<Influences>) -> Result<Tensor> {
        if influences.disposition != self.disposition {
            return Err(Error::argument("kpconv: influences were computed for another kernel"));
        }
        let (y, saved) = kpconv_apply(features, influences, &self.weights.value)?;
        self.saved.push(saved);
        Ok(y)
    }

    /// Back-propagates the most recent unconsumed forward pass.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let saved = self
            .saved
            .pop()
            .ok_or_else(|| Error::state("kpconv: backward without a saved forward pass"))?;
        let (gf, gw) = kpconv_backward(grad_out, &saved)?;
        self.weights.grad.add_assign(&gw)?;
        Ok(gf)
    }

    pub fn clear_saved(&mut self) {
        self.saved.clear();
    }
}

impl Visit for KPConv {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_>)) {
        f(&join(prefix, "weights"), Entry::Param(&mut self.weights));
        let k = self.disposition.len();
        let flat: Vec<f64> = self.disposition.positions.iter().flatten().copied().collect();
        let mut pos = Tensor::from_vec(&[k, 3], flat).unwrap();
        let mut geom =
            Tensor::from_vec(&[2], vec![self.disposition.radius, self.disposition.sigma]).unwrap();
        f(&join(prefix, "kernel_points"), Entry::Buffer(&mut pos));
        f(&join(prefix, "kernel_geometry"), Entry::Buffer(&mut geom));
        self.disposition.positions = pos
            .data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        self.disposition.radius = geom.data()[0];
        self.disposition.sigma = geom.data()[1];
    }
}
