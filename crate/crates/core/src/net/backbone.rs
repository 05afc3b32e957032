use crate::cost::OpRecord;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvBnRelu, Ctx, Init, ParamStore};
use crate::tensor::{ops, Rng, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Output channels of the stride-4, 8, 16 and 32 stages.
    pub channels: [usize; 4],
    /// Blocks per stage: one strided block followed by residual blocks.
    pub blocks: usize,
    pub in_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: [32, 64, 128, 256],
            blocks: 2,
            in_channels: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::config("backbone.channels", "channel counts must be positive"));
        }
        if self.blocks == 0 {
            return Err(Error::config("backbone.blocks", "must be at least 1"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("backbone.in_channels", "must be positive"));
        }
        Ok(())
    }

    pub fn stem_channels(&self) -> usize {
        (self.channels[0] / 2).max(8)
    }
}

/// Backbone outputs at strides 4, 8, 16 and 32.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub c2: Var,
    pub c3: Var,
    pub c4: Var,
    pub c5: Var,
}

/// `relu(x + bn(conv3x3(x)))`.
#[derive(Clone, Debug)]
struct Residual {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl Residual {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        let y = ops::add(ctx.graph, x, y)?;
        Ok(ops::relu(ctx.graph, y))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvBnRelu,
    blocks: Vec<Residual>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stem: ConvBnRelu,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = ConvBnRelu::new(store, rng, "backbone.stem", cfg.in_channels, cfg.stem_channels(), 3, 2);
        let mut cin = cfg.stem_channels();
        let mut stages = Vec::new();
        for (s, &cout) in cfg.channels.iter().enumerate() {
            let name = format!("backbone.stage{}", s + 2);
            let down = ConvBnRelu::new(store, rng, &format!("{name}.down"), cin, cout, 3, 2);
            let blocks = (1..cfg.blocks)
                .map(|b| Residual {
                    conv: Conv2d::new(store, rng, &format!("{name}.res{b}.conv"), cout, cout, 3, 1, false, Init::Kaiming),
                    bn: BatchNorm2d::new(store, &format!("{name}.res{b}.bn"), cout),
                })
                .collect();
            stages.push(Stage { down, blocks });
            cin = cout;
        }
        Ok(Backbone { cfg, stem, stages })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<FeaturePyramid> {
        let (_, c, h, w) = ctx.graph.value(image).dims4("backbone")?;
        if c != self.cfg.in_channels {
            return Err(Error::invalid(
                "backbone",
                format!("expected {} input channels, got {c}", self.cfg.in_channels),
            ));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::invalid("backbone", format!("input size {h}×{w} is not divisible by 32")));
        }
        let mut x = self.stem.forward(ctx, image)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.down.forward(ctx, x)?;
            for b in &stage.blocks {
                x = b.forward(ctx, x)?;
            }
            outs.push(x);
        }
        Ok(FeaturePyramid {
            c2: outs[0],
            c3: outs[1],
            c4: outs[2],
            c5: outs[3],
        })
    }

    pub fn flops(&self, input: (usize, usize)) -> Vec<OpRecord> {
        let m = "backbone";
        let mut r = vec![OpRecord::conv(m, "stem", self.cfg.in_channels, self.cfg.stem_channels(), 3, input, 2)];
        let mut hw = (input.0 / 2, input.1 / 2);
        let mut cin = self.cfg.stem_channels();
        for (s, &cout) in self.cfg.channels.iter().enumerate() {
            r.push(OpRecord::conv(m, &format!("stage{}.down", s + 2), cin, cout, 3, hw, 2));
            hw = (hw.0 / 2, hw.1 / 2);
            for b in 1..self.cfg.blocks {
                r.push(OpRecord::conv(m, &format!("stage{}.res{b}", s + 2), cout, cout, 3, hw, 1));
            }
            cin = cout;
        }
        r
    }
}
