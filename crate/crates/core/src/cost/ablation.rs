//! Ablation sweeps over network toggles and GAI variants.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{KeySource, QueryMode};
use crate::error::{Error, Result};
use crate::net::{Gain, GainConfig};
use crate::train::{train, DatasetSpec, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    UseGai,
    UseAux,
    UseSpatialC2,
    UseGap,
    QueryMode,
    AttentionKind,
    KeySource,
}

impl Axis {
    pub const ALL: [Axis; 7] = [
        Axis::UseGai,
        Axis::UseAux,
        Axis::UseSpatialC2,
        Axis::UseGap,
        Axis::QueryMode,
        Axis::AttentionKind,
        Axis::KeySource,
    ];

    /// The cumulative component toggles, in the order they are enabled.
    pub const COMPONENTS: [Axis; 4] = [Axis::UseGai, Axis::UseAux, Axis::UseSpatialC2, Axis::UseGap];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::UseGai => "use_gai",
            Axis::UseAux => "use_aux",
            Axis::UseSpatialC2 => "use_spatial_c2",
            Axis::UseGap => "use_gap",
            Axis::QueryMode => "query_mode",
            Axis::AttentionKind => "attention_kind",
            Axis::KeySource => "key_source",
        }
    }

    fn is_toggle(self) -> bool {
        Axis::COMPONENTS.contains(&self)
    }

    fn set_toggle(self, cfg: &mut GainConfig, on: bool) {
        match self {
            Axis::UseGai => cfg.use_gai = on,
            Axis::UseAux => cfg.use_aux = on,
            Axis::UseSpatialC2 => cfg.use_spatial_c2 = on,
            Axis::UseGap => cfg.use_gap = on,
            _ => unreachable!("not a toggle"),
        }
    }

    /// Variants of a categorical axis applied to `cfg`.
    fn variants(self, cfg: &GainConfig) -> Vec<GainConfig> {
        let with = |f: &dyn Fn(&mut GainConfig)| {
            let mut c = cfg.clone();
            f(&mut c);
            c
        };
        match self {
            Axis::QueryMode => QueryMode::ALL.iter().map(|&q| with(&|c| c.gai.query = q)).collect(),
            Axis::KeySource => KeySource::ALL.iter().map(|&k| with(&|c| c.gai.key_source = k)).collect(),
            Axis::AttentionKind => ["criss_cross", "full"]
                .iter()
                .map(|&a| with(&|c| c.gai.attention = a.into()))
                .collect(),
            _ => unreachable!("not categorical"),
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = Axis::ALL.iter().map(|a| a.as_str()).collect();
            Error::config("ablate.axes", format!("unknown axis `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parses a comma-separated axis list; an empty string is no axes.
pub fn parse_axes(s: &str) -> Result<Vec<Axis>> {
    let axes: Vec<Axis> = s
        .split(',')
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    for (i, a) in axes.iter().enumerate() {
        if axes[..i].contains(a) {
            return Err(Error::config("ablate.axes", format!("axis `{a}` listed twice")));
        }
    }
    Ok(axes)
}

/// Short description of the settings the axes control.
pub fn describe(cfg: &GainConfig, axes: &[Axis]) -> String {
    let b = |v: bool| if v { "1" } else { "0" };
    axes.iter()
        .map(|a| {
            let v = match a {
                Axis::UseGai => b(cfg.use_gai).to_string(),
                Axis::UseAux => b(cfg.use_aux).to_string(),
                Axis::UseSpatialC2 => b(cfg.use_spatial_c2).to_string(),
                Axis::UseGap => b(cfg.use_gap).to_string(),
                Axis::QueryMode => cfg.gai.query.to_string(),
                Axis::AttentionKind => cfg.gai.attention.clone(),
                Axis::KeySource => cfg.gai.key_source.to_string(),
            };
            format!("{a}={v}")
        })
        .collect::<Vec<_>>()
        .join(";")
}

/// Configurations of the sweep. Toggle axes are enabled cumulatively in the
/// order given (all off, then one more per row); categorical axes are crossed
/// with every cumulative row. No axes gives the base configuration alone.
pub fn ablation_configs(base: &GainConfig, axes: &[Axis]) -> Vec<GainConfig> {
    let toggles: Vec<Axis> = axes.iter().copied().filter(|a| a.is_toggle()).collect();
    let mut rows = Vec::new();
    for enabled in 0..=toggles.len() {
        let mut cfg = base.clone();
        for (i, t) in toggles.iter().enumerate() {
            t.set_toggle(&mut cfg, i < enabled);
        }
        rows.push(cfg);
    }
    for axis in axes.iter().filter(|a| !a.is_toggle()) {
        rows = rows.iter().flat_map(|c| axis.variants(c)).collect();
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub config: String,
    pub flops: Option<u64>,
    pub miou: Option<f64>,
    /// `ok` or the error that stopped the row.
    pub status: String,
}

/// Trains every configuration with the shared schedule and seed. A failing
/// row is recorded and the sweep continues.
pub fn ablation_matrix(
    base: &GainConfig,
    axes: &[Axis],
    data: &DatasetSpec,
    train_cfg: &TrainConfig,
    mut progress: impl FnMut(&AblationRow),
) -> Vec<AblationRow> {
    let configs = ablation_configs(base, axes);
    configs
        .iter()
        .enumerate()
        .map(|(row, cfg)| {
            let config = describe(cfg, axes);
            let flops = Gain::build(cfg.clone(), train_cfg.seed)
                .ok()
                .map(|(net, _)| net.flops((data.height, data.width)).total_excluding_resize);
            let r = match train(cfg, data, train_cfg) {
                Ok((_, out)) => AblationRow {
                    row,
                    config,
                    flops,
                    miou: Some(out.final_val_miou),
                    status: "ok".into(),
                },
                Err(e) => AblationRow {
                    row,
                    config,
                    flops,
                    miou: None,
                    status: e.to_string(),
                },
            };
            progress(&r);
            r
        })
        .collect()
}

pub fn write_ablation<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["row", "config", "flops", "miou", "status"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
