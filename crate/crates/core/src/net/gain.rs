use super::{upsamplers, Backbone, BackboneConfig, FeaturePyramid, Upsampler, UpsamplerSpec};
use crate::attention::{GaiConfig, GaiTrace};
use crate::cost::{FlopsReport, OpRecord};
use crate::error::{Error, Result};
use crate::nn::{
    bilinear_resize, expand_spatial, global_avg_pool, ohem_cross_entropy, Conv2d, ConvBnRelu, Ctx, Init, LabelMap,
    OhemConfig, ParamId, ParamStore,
};
use crate::tensor::{ops, Rng, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GainConfig {
    pub backbone: BackboneConfig,
    pub gai: GaiConfig,
    pub num_classes: usize,
    /// GAI upsampling; bilinear upsampling when off.
    pub use_gai: bool,
    pub use_aux: bool,
    pub use_spatial_c2: bool,
    pub use_gap: bool,
    pub fused_channels: usize,
    /// Hidden width of the auxiliary heads.
    pub aux_channels: usize,
    pub aux_weight: f64,
}

impl Default for GainConfig {
    fn default() -> Self {
        GainConfig {
            backbone: BackboneConfig::default(),
            gai: GaiConfig::default(),
            num_classes: 4,
            use_gai: true,
            use_aux: true,
            use_spatial_c2: true,
            use_gap: true,
            fused_channels: 128,
            aux_channels: 32,
            aux_weight: 1.0,
        }
    }
}

impl GainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.gai.validate()?;
        if self.num_classes < 2 {
            return Err(Error::config("net.num_classes", "need at least 2 classes"));
        }
        if self.fused_channels == 0 || self.aux_channels == 0 {
            return Err(Error::config("net.fused_channels", "channel counts must be positive"));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::config("net.aux_weight", format!("must be finite and non-negative, got {}", self.aux_weight)));
        }
        Ok(())
    }

    /// Registered upsampler selected by `use_gai`.
    pub fn upsampler(&self) -> &'static str {
        if self.use_gai {
            "gai"
        } else {
            "bilinear"
        }
    }
}

#[derive(Clone, Debug)]
struct AuxHead {
    hidden: ConvBnRelu,
    classify: Conv2d,
}

impl AuxHead {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.hidden.forward(ctx, x)?;
        self.classify.forward(ctx, y)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GainOutput {
    /// `N×K×H×W` at input resolution.
    pub logits: Var,
    /// Auxiliary logits at stride 8 behind the two upsamplers.
    pub aux: Option<(Var, Var)>,
}

#[derive(Debug)]
pub struct Gain {
    pub cfg: GainConfig,
    pub backbone: Backbone,
    pub gap: Option<Conv2d>,
    pub up4: Box<dyn Upsampler>,
    pub up5: Box<dyn Upsampler>,
    fuse_reduce: ConvBnRelu,
    fuse_spatial: ConvBnRelu,
    pub classifier: Conv2d,
    aux: Option<[AuxHead; 2]>,
}

impl Gain {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: GainConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(store, rng, cfg.backbone.clone())?;
        let [c2, c3, c4, c5] = cfg.backbone.channels;
        let gap = cfg
            .use_gap
            .then(|| Conv2d::new(store, rng, "gap.conv", c5, c5, 1, 1, true, Init::Zeros));
        let reg = upsamplers();
        let spec = |name, c_low| UpsamplerSpec {
            name,
            gai: &cfg.gai,
            c_high: c3,
            c_low,
        };
        let up4 = reg.build(cfg.upsampler(), store, rng, &spec("up4", c4))?;
        let up5 = reg.build(cfg.upsampler(), store, rng, &spec("up5", c5))?;
        let f = cfg.fused_channels;
        let cat = c3 + up4.out_channels() + up5.out_channels();
        let fuse_reduce = ConvBnRelu::new(store, rng, "fuse.reduce", cat, f, 1, 1);
        let fuse_spatial = ConvBnRelu::new(store, rng, "fuse.spatial", f, f, 3, 1);
        let head_in = if cfg.use_spatial_c2 { f + c2 } else { f };
        let classifier = Conv2d::pointwise(store, rng, "classifier", head_in, cfg.num_classes, true);
        let aux = cfg.use_aux.then(|| {
            [("aux4", up4.out_channels()), ("aux5", up5.out_channels())].map(|(name, cin)| AuxHead {
                hidden: ConvBnRelu::new(store, rng, &format!("{name}.hidden"), cin, cfg.aux_channels, 3, 1),
                classify: Conv2d::pointwise(store, rng, &format!("{name}.classify"), cfg.aux_channels, cfg.num_classes, true),
            })
        });
        Ok(Gain {
            cfg,
            backbone,
            gap,
            up4,
            up5,
            fuse_reduce,
            fuse_spatial,
            classifier,
            aux,
        })
    }

    /// Builds the network and its parameters from a seed.
    pub fn build(cfg: GainConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = Rng::seeded(seed);
        let net = Gain::new(&mut store, &mut rng, cfg)?;
        Ok((net, store))
    }

    /// Parameters of the attention modules and the GAP branch.
    pub fn context_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if self.cfg.use_gai {
            ids.extend(self.up4.param_ids());
            ids.extend(self.up5.param_ids());
        }
        if let Some(c) = &self.gap {
            ids.push(c.weight);
            ids.extend(c.bias);
        }
        ids
    }

    /// `c5 + broadcast(conv1x1(gap(c5)))`.
    pub fn gap_enhance(&self, ctx: &mut Ctx<'_>, c5: Var) -> Result<Var> {
        let Some(conv) = &self.gap else {
            return Ok(c5);
        };
        let (_, _, h, w) = ctx.graph.value(c5).dims4("gap")?;
        let pooled = global_avg_pool(ctx.graph, c5)?;
        let g = conv.forward(ctx, pooled)?;
        let g = expand_spatial(ctx.graph, g, h, w)?;
        ops::add(ctx.graph, c5, g)
    }

    fn trunk(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<(FeaturePyramid, Var, Var, Var)> {
        let p = self.backbone.forward(ctx, image)?;
        let c5 = self.gap_enhance(ctx, p.c5)?;
        let u4 = self.up4.forward(ctx, p.c3, p.c4)?;
        let u5 = self.up5.forward(ctx, p.c3, c5)?;
        let cat = ops::concat(ctx.graph, &[p.c3, u4, u5], 1)?;
        let fused = self.fuse_reduce.forward(ctx, cat)?;
        let fused = self.fuse_spatial.forward(ctx, fused)?;
        Ok((p, u4, u5, fused))
    }

    fn head(&self, ctx: &mut Ctx<'_>, p: &FeaturePyramid, fused: Var, size: (usize, usize)) -> Result<Var> {
        let x = if self.cfg.use_spatial_c2 {
            let (_, _, h2, w2) = ctx.graph.value(p.c2).dims4("gain")?;
            let up = bilinear_resize(ctx.graph, fused, h2, w2)?;
            ops::concat(ctx.graph, &[up, p.c2], 1)?
        } else {
            fused
        };
        let logits = self.classifier.forward(ctx, x)?;
        bilinear_resize(ctx.graph, logits, size.0, size.1)
    }

    /// Traces of both GAI modules (`up4`, `up5`) on `image`; empty for the
    /// bilinear variant.
    pub fn attention_traces(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<Vec<(&'static str, GaiTrace)>> {
        let p = self.backbone.forward(ctx, image)?;
        let c5 = self.gap_enhance(ctx, p.c5)?;
        let mut out = Vec::new();
        for (name, up, low) in [("up4", &self.up4, p.c4), ("up5", &self.up5, c5)] {
            if let Some(gai) = up.as_gai() {
                out.push((name, gai.forward_traced(ctx, p.c3, low)?));
            }
        }
        Ok(out)
    }

    /// Main and (if enabled) auxiliary logits.
    pub fn forward(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<GainOutput> {
        let (_, _, h, w) = ctx.graph.value(image).dims4("gain")?;
        let (p, u4, u5, fused) = self.trunk(ctx, image)?;
        let logits = self.head(ctx, &p, fused, (h, w))?;
        let aux = match &self.aux {
            Some([a4, a5]) => Some((a4.forward(ctx, u4)?, a5.forward(ctx, u5)?)),
            None => None,
        };
        Ok(GainOutput { logits, aux })
    }

    /// Main logits only.
    pub fn predict(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<Var> {
        let (_, _, h, w) = ctx.graph.value(image).dims4("gain")?;
        let (p, _, _, fused) = self.trunk(ctx, image)?;
        self.head(ctx, &p, fused, (h, w))
    }

    /// Analytic FLOPs of the inference path (auxiliary heads included when
    /// enabled) for one `h×w` image.
    pub fn flops(&self, input: (usize, usize)) -> FlopsReport {
        let (h, w) = input;
        let [c2, c3, _, c5] = self.cfg.backbone.channels;
        let s = |k: usize| (h / k, w / k);
        let mut r = self.backbone.flops(input);
        if self.gap.is_some() {
            r.push(OpRecord::conv("gap", "conv", c5, c5, 1, (1, 1), 1));
        }
        r.extend(self.up4.flops("gai4", s(8), s(16)));
        r.extend(self.up5.flops("gai5", s(8), s(32)));
        let f = self.cfg.fused_channels;
        let cat = c3 + self.up4.out_channels() + self.up5.out_channels();
        r.push(OpRecord::conv("fuse", "reduce", cat, f, 1, s(8), 1));
        r.push(OpRecord::conv("fuse", "spatial", f, f, 3, s(8), 1));
        let k = self.cfg.num_classes;
        let (head_res, head_in) = if self.cfg.use_spatial_c2 {
            r.extend(OpRecord::resize("head", "resize_fused", f, s(8), s(4)));
            (s(4), f + c2)
        } else {
            (s(8), f)
        };
        r.push(OpRecord::conv("head", "classifier", head_in, k, 1, head_res, 1));
        r.extend(OpRecord::resize("head", "resize_logits", k, head_res, input));
        if self.aux.is_some() {
            for (m, cin) in [("aux4", self.up4.out_channels()), ("aux5", self.up5.out_channels())] {
                r.push(OpRecord::conv(m, "hidden", cin, self.cfg.aux_channels, 3, s(8), 1));
                r.push(OpRecord::conv(m, "classify", self.cfg.aux_channels, k, 1, s(8), 1));
            }
        }
        FlopsReport::new(vec![3, h, w], r)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub main: Var,
    /// Sum of the two auxiliary losses.
    pub aux: Option<Var>,
}

/// `L_out + λ·(L_aux4 + L_aux5)`; auxiliary labels are nearest-neighbour
/// downsampled to the auxiliary grid.
pub fn total_loss(
    ctx: &mut Ctx<'_>,
    out: &GainOutput,
    labels: &LabelMap,
    lambda: f64,
    ohem: &OhemConfig,
) -> Result<LossParts> {
    let g = &mut *ctx.graph;
    let main = ohem_cross_entropy(g, out.logits, labels, ohem)?;
    let Some((a4, a5)) = out.aux else {
        return Ok(LossParts { total: main, main, aux: None });
    };
    let (_, _, h, w) = g.value(a4).dims4("total_loss")?;
    let small = labels.resize_nearest(h, w);
    let l4 = ohem_cross_entropy(g, a4, &small, ohem)?;
    let l5 = ohem_cross_entropy(g, a5, &small, ohem)?;
    let aux = ops::add(g, l4, l5)?;
    let total = if lambda == 0.0 {
        main
    } else {
        let scaled = ops::mul_scalar(g, aux, lambda);
        ops::add(g, main, scaled)?
    };
    Ok(LossParts {
        total,
        main,
        aux: Some(aux),
    })
}
