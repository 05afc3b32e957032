//! Plain-text run configuration: one `key = value` per line, dotted keys,
//! `#` comments. Every key has a default; unknown keys are rejected.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::attention::{KeySource, QueryMode};
use crate::cost::{parse_axes, Axis, BenchConfig};
use crate::error::{Error, Result};
use crate::net::GainConfig;
use crate::train::{DatasetSpec, TrainConfig};

/// Everything a CLI invocation can be configured with.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub net: GainConfig,
    pub data: DatasetSpec,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub bench_repeats: usize,
    pub bench_warmups: usize,
    /// Input size of the network FLOPs report.
    pub flops_input: (usize, usize),
    pub ablate_axes: Vec<Axis>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            net: GainConfig::default(),
            data: DatasetSpec::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            bench_repeats: 5,
            bench_warmups: 2,
            flops_input: (1024, 2048),
            ablate_axes: Axis::COMPONENTS.to_vec(),
        }
    }
}

/// One documented configuration key.
pub struct Key {
    pub name: &'static str,
    pub doc: &'static str,
    get: fn(&Config) -> String,
    set: fn(&mut Config, &str) -> std::result::Result<(), String>,
}

fn scalar<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

/// `HxW`, e.g. `64x128`.
fn size(v: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = v
        .split_once(['x', 'X', '×'])
        .ok_or_else(|| format!("expected HxW, got `{v}`"))?;
    Ok((scalar(h.trim())?, scalar(w.trim())?))
}

fn show_size((h, w): (usize, usize)) -> String {
    format!("{h}x{w}")
}

fn channels4(v: &str) -> std::result::Result<[usize; 4], String> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| scalar(p.trim()))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<usize>| format!("expected 4 comma-separated channel counts, got {}", p.len()))
}

macro_rules! key {
    ($name:literal, $doc:literal, |$c:ident| $field:expr, $parse:expr) => {
        Key {
            name: $name,
            doc: $doc,
            get: |$c| $field.to_string(),
            set: |$c, v| {
                $field = $parse(v)?;
                Ok(())
            },
        }
    };
}

pub const KEYS: &[Key] = &[
    key!("seed", "Seed of parameter initialisation and batch order (--seed overrides it)", |c| c.train.seed, scalar),
    Key {
        name: "backbone.channels",
        doc: "Channels of the C2,C3,C4,C5 stages, comma-separated",
        get: |c| c.net.backbone.channels.map(|x| x.to_string()).join(","),
        set: |c, v| Ok(c.net.backbone.channels = channels4(v)?),
    },
    key!("backbone.blocks", "Blocks per backbone stage (one stride-2 conv then residual blocks)", |c| c.net.backbone.blocks, scalar),
    key!("backbone.in_channels", "Input image channels", |c| c.net.backbone.in_channels, scalar),
    key!("gai.channels", "Width C of the fused query and reduced low-resolution map", |c| c.net.gai.channels, scalar),
    key!("gai.d_k", "Query/key projection width", |c| c.net.gai.d_k, scalar),
    key!("gai.d_v", "Value projection width", |c| c.net.gai.d_v, scalar),
    key!("gai.out_channels", "Output width of each GAI module", |c| c.net.gai.out_channels, scalar),
    key!("gai.attention", "Attention kernel: criss_cross (alias rcca) or full (alias non_local)", |c| c.net.gai.attention, |v: &str| Ok::<_, String>(v.to_string())),
    key!("gai.recurrence", "Attention passes sharing one set of projections", |c| c.net.gai.recurrence, scalar),
    key!("gai.query_mode", "Query features: concat, high_only or low_only", |c| c.net.gai.query, |v: &str| v.parse::<QueryMode>()),
    key!("gai.key_source", "Key/value resolution: low_res or high_res", |c| c.net.gai.key_source, |v: &str| v.parse::<KeySource>()),
    key!("net.num_classes", "Number of output classes", |c| c.net.num_classes, scalar),
    key!("net.use_gai", "GAI upsamplers (false: 1x1 reduction plus bilinear resize)", |c| c.net.use_gai, boolean),
    key!("net.use_aux", "Auxiliary heads on both upsampler outputs", |c| c.net.use_aux, boolean),
    key!("net.use_spatial_c2", "Fuse stride-4 backbone features before the classifier", |c| c.net.use_spatial_c2, boolean),
    key!("net.use_gap", "Global-average-pooling context on C5", |c| c.net.use_gap, boolean),
    key!("net.fused_channels", "Width of the stride-8 fusion convolutions", |c| c.net.fused_channels, scalar),
    key!("net.aux_channels", "Hidden width of the auxiliary heads", |c| c.net.aux_channels, scalar),
    key!("net.aux_weight", "Weight of the summed auxiliary losses", |c| c.net.aux_weight, scalar),
    key!("data.seed", "Seed of the synthetic training set (validation uses a disjoint stream)", |c| c.data.seed, scalar),
    key!("data.num_samples", "Training images", |c| c.data.num_samples, scalar),
    key!("data.height", "Image height", |c| c.data.height, scalar),
    key!("data.width", "Image width", |c| c.data.width, scalar),
    key!("data.noise", "Standard deviation of per-pixel Gaussian noise", |c| c.data.noise, scalar),
    key!("data.color_jitter", "Half-width of the per-shape colour perturbation", |c| c.data.color_jitter, scalar),
    key!("data.min_shapes", "Fewest shapes per image", |c| c.data.min_shapes, scalar),
    key!("data.max_shapes", "Most shapes per image", |c| c.data.max_shapes, scalar),
    key!("train.iters", "SGD iterations", |c| c.train.iters, scalar),
    key!("train.batch", "Images per iteration (also the evaluation batch)", |c| c.train.batch, scalar),
    key!("train.lr0", "Initial learning rate of the poly schedule", |c| c.train.lr0, scalar),
    key!("train.power", "Exponent of the poly schedule", |c| c.train.power, scalar),
    key!("train.momentum", "SGD momentum", |c| c.train.sgd.momentum, scalar),
    key!("train.weight_decay", "L2 weight decay", |c| c.train.sgd.weight_decay, scalar),
    key!("train.ohem_threshold", "Pixels whose true-class probability is below this are hard", |c| c.train.ohem.prob_threshold, scalar),
    key!("train.ohem_min_kept", "Fraction of valid pixels always kept by OHEM", |c| c.train.ohem.min_kept_fraction, scalar),
    key!("train.val_every", "Validation period in iterations (the last iteration is always validated)", |c| c.train.val_every, scalar),
    key!("train.val_samples", "Validation images", |c| c.train.val_samples, scalar),
    key!("bench.c_high", "Channels of the high-resolution bench input", |c| c.bench.c_high, scalar),
    key!("bench.c_low", "Channels of the low-resolution bench input", |c| c.bench.c_low, scalar),
    Key {
        name: "bench.high",
        doc: "High-resolution (query) grid, HxW",
        get: |c| show_size(c.bench.high),
        set: |c, v| Ok(c.bench.high = size(v)?),
    },
    Key {
        name: "bench.low",
        doc: "Low-resolution grid, HxW",
        get: |c| show_size(c.bench.low),
        set: |c, v| Ok(c.bench.low = size(v)?),
    },
    key!("bench.repeats", "Timed repeats (at least 5)", |c| c.bench_repeats, scalar),
    key!("bench.warmups", "Untimed warm-up runs (at least 2)", |c| c.bench_warmups, scalar),
    Key {
        name: "flops.input",
        doc: "Input size of the network FLOPs report, HxW",
        get: |c| show_size(c.flops_input),
        set: |c, v| Ok(c.flops_input = size(v)?),
    },
    Key {
        name: "ablate.axes",
        doc: "Comma-separated ablation axes: use_gai, use_aux, use_spatial_c2, use_gap (enabled cumulatively in the order given), query_mode, attention_kind, key_source (crossed with every row); empty for the base config alone",
        get: |c| c.ablate_axes.iter().map(|a| a.as_str()).collect::<Vec<_>>().join(","),
        set: |c, v| Ok(c.ablate_axes = parse_axes(v).map_err(|e| match e {
            Error::Config { msg, .. } => msg,
            e => e.to_string(),
        })?),
    },
];

impl Config {
    pub fn key(name: &str) -> Option<&'static Key> {
        KEYS.iter().find(|k| k.name == name)
    }

    pub fn get(&self, name: &str) -> Result<String> {
        Self::key(name)
            .map(|k| (k.get)(self))
            .ok_or_else(|| Error::config(name, "unknown key"))
    }

    /// Sets one key from its textual value (no validation across keys).
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let key = Self::key(name).ok_or_else(|| Error::config(name, "unknown key"))?;
        (key.set)(self, value.trim()).map_err(|msg| Error::config(name, msg))
    }

    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen: Vec<&str> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if seen.contains(&k) {
                return Err(Error::config(k, format!("line {}: key given twice", n + 1)));
            }
            seen.push(k);
            cfg.set(k, v).map_err(|e| match e {
                Error::Config { key, msg } => Error::config(key, format!("line {}: {msg}", n + 1)),
                e => e,
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Every key with its current value, one per line, parseable by [`Config::parse`].
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{} = {}\n", k.name, (k.get)(self))).collect()
    }

    /// The bench setup with the configured GAI variant.
    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            gai: self.net.gai.clone(),
            ..self.bench.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.bench.low.0 > self.bench.high.0 || self.bench.low.1 > self.bench.high.1 {
            return Err(Error::config("bench.low", "must not exceed bench.high"));
        }
        if self.bench_repeats < crate::cost::MIN_REPEATS {
            return Err(Error::config("bench.repeats", format!("must be at least {}", crate::cost::MIN_REPEATS)));
        }
        if self.bench_warmups < crate::cost::MIN_WARMUPS {
            return Err(Error::config("bench.warmups", format!("must be at least {}", crate::cost::MIN_WARMUPS)));
        }
        let (h, w) = self.flops_input;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config("flops.input", "must be a positive multiple of 32 in both dimensions"));
        }
        if self.data.height % 32 != 0 || self.data.width % 32 != 0 {
            return Err(Error::config("data.height", "image size must be a multiple of 32"));
        }
        Ok(())
    }
}
