//! The attention-kernel abstraction and its name registry.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Spatial layout of one attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeometry {
    pub batch: usize,
    /// Query grid `(H, W)`.
    pub query: (usize, usize),
    /// Key grid `(H_k, W_k)`.
    pub key: (usize, usize),
}

impl AttnGeometry {
    pub fn queries(&self) -> usize {
        self.query.0 * self.query.1
    }

    pub fn keys(&self) -> usize {
        self.key.0 * self.key.1
    }
}

/// Softmax-normalised affinities produced by a kernel.
///
/// The row of weights of every query is laid out in the order returned by
/// [`AttentionKernel::key_coords`].
#[derive(Clone, Debug)]
pub struct AffinityMap {
    pub weights: Var,
    pub kernel: &'static str,
    pub geometry: AttnGeometry,
    pub keys_per_query: usize,
}

impl AffinityMap {
    /// Weights of query `(h, w)` of batch element `n`.
    pub fn row<'g>(&self, g: &'g Graph, n: usize, h: usize, w: usize) -> &'g [f64] {
        let l = self.keys_per_query;
        let q = self.geometry.queries();
        let p = h * self.geometry.query.1 + w;
        &g.value(self.weights).data()[(n * q + p) * l..][..l]
    }
}

/// One member of the family of interchangeable attention kernels.
///
/// Inputs are already projected: queries `N×d_k×H×W`, keys `N×d_k×H_k×W_k`,
/// values `N×d_v×H_k×W_k`.
pub trait AttentionKernel: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Number of keys each query attends to.
    fn keys_per_query(&self, geo: &AttnGeometry) -> usize;

    /// Key-grid coordinates visible to query `(h, w)`, in affinity-row order.
    fn key_coords(&self, geo: &AttnGeometry, h: usize, w: usize) -> Vec<(usize, usize)>;

    fn affinity(&self, g: &mut Graph, q: Var, k: Var) -> Result<AffinityMap>;

    fn attend(&self, g: &mut Graph, a: &AffinityMap, v: Var) -> Result<Var>;

    /// Elements of the affinity tensor for a whole batch.
    fn affinity_elements(&self, geo: &AttnGeometry) -> usize {
        geo.batch * geo.queries() * self.keys_per_query(geo)
    }

    /// Multiply-add FLOPs of the logits (per image).
    fn affinity_flops(&self, geo: &AttnGeometry, d_k: usize) -> u64 {
        2 * (d_k * geo.queries() * self.keys_per_query(geo)) as u64
    }

    /// Multiply-add FLOPs of the weighted aggregation (per image).
    fn aggregation_flops(&self, geo: &AttnGeometry, d_v: usize) -> u64 {
        2 * (d_v * geo.queries() * self.keys_per_query(geo)) as u64
    }
}

/// Shared validation for kernel inputs; returns the geometry and `d_k`.
pub(crate) fn projected_geometry(g: &Graph, q: Var, k: Var) -> Result<(AttnGeometry, usize)> {
    let (n, dq, h, w) = g.value(q).dims4("affinity")?;
    let (nk, dk, hk, wk) = g.value(k).dims4("affinity")?;
    if n != nk || dq != dk {
        return Err(Error::shape("affinity", g.shape(q), g.shape(k)));
    }
    Ok((
        AttnGeometry {
            batch: n,
            query: (h, w),
            key: (hk, wk),
        },
        dk,
    ))
}

pub(crate) fn check_values(g: &Graph, a: &AffinityMap, v: Var) -> Result<usize> {
    let (n, dv, hk, wk) = g.value(v).dims4("attend")?;
    let geo = &a.geometry;
    if n != geo.batch || (hk, wk) != geo.key {
        return Err(Error::invalid(
            "attend",
            format!(
                "values of shape {:?} do not match a {}×{} key grid",
                g.shape(v),
                geo.key.0,
                geo.key.1
            ),
        ));
    }
    Ok(dv)
}

/// Channel-major `N×C×P` to pixel-major `N×P×C`.
pub(crate) fn to_pixel_major(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..p {
                out[(b * p + i) * c + ch] = x[(b * c + ch) * p + i];
            }
        }
    }
    out
}

/// Pixel-major `N×P×C` to channel-major `N×C×P`.
pub(crate) fn to_channel_major(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for i in 0..p {
            for ch in 0..c {
                out[(b * c + ch) * p + i] = x[(b * p + i) * c + ch];
            }
        }
    }
    out
}

/// Name → kernel table. Kernels may be registered under several aliases.
#[derive(Debug, Default)]
pub struct AttentionRegistry {
    kernels: BTreeMap<String, Arc<dyn AttentionKernel>>,
}

impl AttentionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding the built-in kernels.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        let full: Arc<dyn AttentionKernel> = Arc::new(super::FullAttention);
        let cc: Arc<dyn AttentionKernel> = Arc::new(super::CrissCrossAttention);
        r.register("full", full.clone());
        r.register("non_local", full);
        r.register("criss_cross", cc.clone());
        r.register("rcca", cc);
        r
    }

    pub fn register(&mut self, name: impl Into<String>, kernel: Arc<dyn AttentionKernel>) {
        self.kernels.insert(name.into(), kernel);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn AttentionKernel>> {
        self.kernels.get(name).cloned().ok_or_else(|| {
            Error::config(
                "gai.attention",
                format!(
                    "unknown attention kernel `{name}` (registered: {})",
                    self.names().join(", ")
                ),
            )
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.kernels.keys().map(String::as_str).collect()
    }
}

/// Process-wide registry of the built-in kernels.
pub fn registry() -> &'static AttentionRegistry {
    static REGISTRY: OnceLock<AttentionRegistry> = OnceLock::new();
    REGISTRY.get_or_init(AttentionRegistry::with_builtins)
}

/// Numerically stable softmax of each length-`l` row, in place.
/// Fails on non-finite logits.
pub(crate) fn softmax_rows(x: &mut [f64], l: usize) -> Result<()> {
    for row in x.chunks_mut(l) {
        let mut max = f64::NEG_INFINITY;
        for &v in row.iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite { op: "attention softmax" });
            }
            max = max.max(v);
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(())
}

/// Gradient of the logits given softmax output `a` and its gradient `da`.
pub(crate) fn softmax_rows_backward(a: &[f64], da: &[f64], l: usize) -> Vec<f64> {
    let mut de = vec![0.0; a.len()];
    for ((ar, gr), er) in a.chunks(l).zip(da.chunks(l)).zip(de.chunks_mut(l)) {
        let dot: f64 = ar.iter().zip(gr).map(|(a, g)| a * g).sum();
        for ((e, a), g) in er.iter_mut().zip(ar).zip(gr) {
            *e = a * (g - dot);
        }
    }
    de
}

/// FLOPs charged per softmax logit (max, subtract, exp, sum, divide).
pub const SOFTMAX_FLOPS_PER_ELEMENT: u64 = 5;
