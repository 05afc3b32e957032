use std::sync::Arc;

use super::{registry, AffinityMap, AttentionKernel, GaiConfig, KeySource, QueryMode};
use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, Conv2d, Ctx, ParamId, ParamStore};
use crate::tensor::{ops, Rng, Var};

/// Guided attentive interpolation: upsamples a low-resolution map to the grid
/// of a high-resolution one by attending from high-resolution queries into
/// the low-resolution features.
#[derive(Clone, Debug)]
pub struct Gai {
    pub cfg: GaiConfig,
    kernel: Arc<dyn AttentionKernel>,
    pub reduce_low: Conv2d,
    pub reduce_query: Conv2d,
    pub w_q: Conv2d,
    pub w_k: Conv2d,
    pub w_v: Conv2d,
    /// Feeds the attended values back into the query between passes.
    pub broadcast_proj: Option<Conv2d>,
    pub out_proj: Conv2d,
}

/// Intermediate maps produced before attention.
#[derive(Clone, Copy, Debug)]
pub struct QueryParts {
    pub q: Var,
    /// Low-resolution features reduced to `C` channels and resized to `H×W`.
    pub f_l: Var,
    pub k_src: Var,
}

#[derive(Clone, Debug)]
pub struct GaiTrace {
    pub output: Var,
    pub parts: QueryParts,
    /// One affinity map per recurrence step.
    pub affinities: Vec<AffinityMap>,
    pub attended: Vec<Var>,
}

impl Gai {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cfg: GaiConfig,
        c_high: usize,
        c_low: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let kernel = registry().get(&cfg.attention)?;
        let c = cfg.channels;
        let query_in = match cfg.query {
            QueryMode::Concat => c_high + c,
            QueryMode::HighOnly => c_high,
            QueryMode::LowOnly => c,
        };
        let mut pw = |n: &str, cin, cout, bias| Conv2d::pointwise(store, rng, &format!("{name}.{n}"), cin, cout, bias);
        let reduce_low = pw("reduce_low", c_low, c, true);
        let reduce_query = pw("reduce_query", query_in, c, true);
        let w_q = pw("w_q", c, cfg.d_k, false);
        let w_k = pw("w_k", c, cfg.d_k, false);
        let w_v = pw("w_v", c, cfg.d_v, false);
        let broadcast_proj = (cfg.recurrence > 1).then(|| pw("broadcast_proj", cfg.d_v, c, true));
        let out_proj = pw("out_proj", c + cfg.d_v, cfg.out_channels, true);
        Ok(Gai {
            cfg,
            kernel,
            reduce_low,
            reduce_query,
            w_q,
            w_k,
            w_v,
            broadcast_proj,
            out_proj,
        })
    }

    pub fn kernel(&self) -> &dyn AttentionKernel {
        self.kernel.as_ref()
    }

    /// Every parameter owned by the module.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let convs = [&self.reduce_low, &self.reduce_query, &self.w_q, &self.w_k, &self.w_v, &self.out_proj];
        convs
            .into_iter()
            .chain(self.broadcast_proj.as_ref())
            .flat_map(|c| std::iter::once(c.weight).chain(c.bias))
            .collect()
    }

    pub fn build_query(&self, ctx: &mut Ctx<'_>, f_high: Var, f_low: Var) -> Result<QueryParts> {
        let (n, _, h, w) = ctx.graph.value(f_high).dims4("gai")?;
        let (nl, _, hl, wl) = ctx.graph.value(f_low).dims4("gai")?;
        if n != nl {
            return Err(Error::shape("gai", ctx.graph.shape(f_high), ctx.graph.shape(f_low)));
        }
        if hl > h || wl > w {
            return Err(Error::invalid(
                "gai",
                format!("low-resolution input {hl}×{wl} is larger than the high-resolution input {h}×{w}"),
            ));
        }
        let low = self.reduce_low.forward(ctx, f_low)?;
        let f_l = bilinear_resize(ctx.graph, low, h, w)?;
        let q_in = match self.cfg.query {
            QueryMode::Concat => ops::concat(ctx.graph, &[f_high, f_l], 1)?,
            QueryMode::HighOnly => f_high,
            QueryMode::LowOnly => f_l,
        };
        let q = self.reduce_query.forward(ctx, q_in)?;
        let k_src = match self.cfg.key_source {
            KeySource::LowRes => low,
            KeySource::HighRes => f_l,
        };
        Ok(QueryParts { q, f_l, k_src })
    }

    /// Projects `q` and `k_src` and computes their affinity.
    pub fn affinity(&self, ctx: &mut Ctx<'_>, q: Var, k_src: Var) -> Result<AffinityMap> {
        let k = self.w_k.forward(ctx, k_src)?;
        self.affinity_with_keys(ctx, q, k)
    }

    fn affinity_with_keys(&self, ctx: &mut Ctx<'_>, q: Var, k: Var) -> Result<AffinityMap> {
        let qp = self.w_q.forward(ctx, q)?;
        let a = self.kernel.affinity(ctx.graph, qp, k)?;
        assert_eq!(
            ctx.graph.value(a.weights).numel(),
            self.kernel.affinity_elements(&a.geometry),
            "{} affinity has the wrong element count",
            a.kernel
        );
        Ok(a)
    }

    /// Projects `v_src` and aggregates it with the affinity weights.
    pub fn attend(&self, ctx: &mut Ctx<'_>, a: &AffinityMap, v_src: Var) -> Result<Var> {
        let v = self.w_v.forward(ctx, v_src)?;
        self.kernel.attend(ctx.graph, a, v)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, f_high: Var, f_low: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, f_high, f_low)?.output)
    }

    pub fn forward_traced(&self, ctx: &mut Ctx<'_>, f_high: Var, f_low: Var) -> Result<GaiTrace> {
        let parts = self.build_query(ctx, f_high, f_low)?;
        // Keys and values are projected once and shared by every pass.
        let k = self.w_k.forward(ctx, parts.k_src)?;
        let v = self.w_v.forward(ctx, parts.k_src)?;
        let mut q = parts.q;
        let mut affinities = Vec::with_capacity(self.cfg.recurrence);
        let mut attended = Vec::with_capacity(self.cfg.recurrence);
        for step in 0..self.cfg.recurrence {
            let a = self.affinity_with_keys(ctx, q, k)?;
            let o = self.kernel.attend(ctx.graph, &a, v)?;
            affinities.push(a);
            attended.push(o);
            if step + 1 < self.cfg.recurrence {
                let proj = self.broadcast_proj.as_ref().expect("recurrence > 1 builds broadcast_proj");
                let fb = proj.forward(ctx, o)?;
                q = ops::add(ctx.graph, q, fb)?;
            }
        }
        let last = *attended.last().expect("recurrence >= 1");
        let cat = ops::concat(ctx.graph, &[parts.q, last], 1)?;
        let output = self.out_proj.forward(ctx, cat)?;
        Ok(GaiTrace {
            output,
            parts,
            affinities,
            attended,
        })
    }
}
