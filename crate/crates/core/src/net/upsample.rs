//! Interchangeable ways to bring a low-resolution map to stride 8.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::OnceLock;

use crate::attention::{Gai, GaiConfig};
use crate::cost::{gai_records, OpRecord};
use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, Conv2d, Ctx, ParamId, ParamStore};
use crate::tensor::{Rng, Var};

/// Fuses a low-resolution map into the grid of a high-resolution one.
pub trait Upsampler: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn out_channels(&self) -> usize;

    /// Returns an `N×out_channels×H×W` map on the grid of `f_high`.
    fn forward(&self, ctx: &mut Ctx<'_>, f_high: Var, f_low: Var) -> Result<Var>;

    fn param_ids(&self) -> Vec<ParamId>;

    /// Analytic FLOPs for one image.
    fn flops(&self, module: &str, high: (usize, usize), low: (usize, usize)) -> Vec<OpRecord>;

    /// The attention module, for upsamplers that have one.
    fn as_gai(&self) -> Option<&Gai> {
        None
    }
}

/// Arguments shared by every upsampler factory.
pub struct UpsamplerSpec<'a> {
    pub name: &'a str,
    pub gai: &'a GaiConfig,
    pub c_high: usize,
    pub c_low: usize,
}

pub type UpsamplerFactory = fn(&mut ParamStore, &mut Rng, &UpsamplerSpec<'_>) -> Result<Box<dyn Upsampler>>;

#[derive(Debug)]
pub struct GaiUpsampler {
    gai: Gai,
    c_high: usize,
    c_low: usize,
}

impl GaiUpsampler {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, spec: &UpsamplerSpec<'_>) -> Result<Self> {
        Ok(GaiUpsampler {
            gai: Gai::new(store, rng, spec.name, spec.gai.clone(), spec.c_high, spec.c_low)?,
            c_high: spec.c_high,
            c_low: spec.c_low,
        })
    }

    pub fn gai(&self) -> &Gai {
        &self.gai
    }
}

impl Upsampler for GaiUpsampler {
    fn name(&self) -> &'static str {
        "gai"
    }

    fn out_channels(&self) -> usize {
        self.gai.cfg.out_channels
    }

    fn forward(&self, ctx: &mut Ctx<'_>, f_high: Var, f_low: Var) -> Result<Var> {
        self.gai.forward(ctx, f_high, f_low)
    }

    fn as_gai(&self) -> Option<&Gai> {
        Some(&self.gai)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.gai.param_ids()
    }

    fn flops(&self, module: &str, high: (usize, usize), low: (usize, usize)) -> Vec<OpRecord> {
        gai_records(module, &self.gai.cfg, self.gai.kernel(), self.c_high, high, self.c_low, low)
    }
}

/// Baseline: 1×1 channel reduction at low resolution, then bilinear resize.
#[derive(Debug)]
pub struct BilinearUpsampler {
    reduce: Conv2d,
}

impl BilinearUpsampler {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, spec: &UpsamplerSpec<'_>) -> Self {
        let reduce = Conv2d::pointwise(store, rng, &format!("{}.reduce", spec.name), spec.c_low, spec.gai.out_channels, true);
        BilinearUpsampler { reduce }
    }
}

impl Upsampler for BilinearUpsampler {
    fn name(&self) -> &'static str {
        "bilinear"
    }

    fn out_channels(&self) -> usize {
        self.reduce.cout
    }

    fn forward(&self, ctx: &mut Ctx<'_>, f_high: Var, f_low: Var) -> Result<Var> {
        let (_, _, h, w) = ctx.graph.value(f_high).dims4("bilinear upsampler")?;
        let y = self.reduce.forward(ctx, f_low)?;
        bilinear_resize(ctx.graph, y, h, w)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.reduce.weight).chain(self.reduce.bias).collect()
    }

    fn flops(&self, module: &str, high: (usize, usize), low: (usize, usize)) -> Vec<OpRecord> {
        let mut r = vec![OpRecord::conv(module, "reduce", self.reduce.cin, self.reduce.cout, 1, low, 1)];
        r.extend(OpRecord::resize(module, "resize", self.reduce.cout, low, high));
        r
    }
}

#[derive(Debug, Default)]
pub struct UpsamplerRegistry {
    factories: BTreeMap<String, UpsamplerFactory>,
}

impl UpsamplerRegistry {
    pub fn with_builtins() -> Self {
        let mut r = UpsamplerRegistry::default();
        r.register("gai", |s, r, spec| Ok(Box::new(GaiUpsampler::new(s, r, spec)?)));
        r.register("bilinear", |s, r, spec| Ok(Box::new(BilinearUpsampler::new(s, r, spec))));
        r
    }

    pub fn register(&mut self, name: impl Into<String>, f: UpsamplerFactory) {
        self.factories.insert(name.into(), f);
    }

    pub fn build(
        &self,
        kind: &str,
        store: &mut ParamStore,
        rng: &mut Rng,
        spec: &UpsamplerSpec<'_>,
    ) -> Result<Box<dyn Upsampler>> {
        let f = self.factories.get(kind).ok_or_else(|| {
            let known: Vec<_> = self.factories.keys().map(String::as_str).collect();
            Error::config("net.upsampler", format!("unknown upsampler `{kind}` (registered: {})", known.join(", ")))
        })?;
        f(store, rng, spec)
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }
}

pub fn upsamplers() -> &'static UpsamplerRegistry {
    static REGISTRY: OnceLock<UpsamplerRegistry> = OnceLock::new();
    REGISTRY.get_or_init(UpsamplerRegistry::with_builtins)
}
