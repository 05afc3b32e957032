//! Closed-form FLOPs accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKernel, AttnGeometry, GaiConfig, KeySource, QueryMode, SOFTMAX_FLOPS_PER_ELEMENT};
use crate::nn::RESIZE_FLOPS_PER_OUTPUT;

pub const CONVENTION: &str = "1 multiply-add = 2 FLOPs; k×k conv = 2·Cin·Cout·k²·Hout·Wout; \
attention logits = 2·d_k·queries·keys; aggregation = 2·d_v·queries·keys; softmax = 5 FLOPs per logit; \
bilinear resize = 8 FLOPs per output element (reported, excluded from `total_excluding_resize`); \
normalisation, activations, pooling, additions and index arithmetic are not counted; batch size 1";

/// One counted operator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpRecord {
    pub module: String,
    pub name: String,
    /// `conv1x1`, `conv3x3`, `affinity`, `softmax`, `aggregation` or `resize`.
    pub kind: String,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub flops: u64,
}

impl OpRecord {
    pub fn conv(module: &str, name: &str, cin: usize, cout: usize, k: usize, input: (usize, usize), stride: usize) -> Self {
        let out = (input.0.div_ceil(stride), input.1.div_ceil(stride));
        OpRecord {
            module: module.into(),
            name: name.into(),
            kind: if k == 1 { "conv1x1" } else { "conv3x3" }.into(),
            input: vec![cin, input.0, input.1],
            output: vec![cout, out.0, out.1],
            flops: 2 * (cin * cout * k * k * out.0 * out.1) as u64,
        }
    }

    /// `None` when the sizes match (the resize is skipped).
    pub fn resize(module: &str, name: &str, c: usize, input: (usize, usize), output: (usize, usize)) -> Option<Self> {
        (input != output).then(|| OpRecord {
            module: module.into(),
            name: name.into(),
            kind: "resize".into(),
            input: vec![c, input.0, input.1],
            output: vec![c, output.0, output.1],
            flops: RESIZE_FLOPS_PER_OUTPUT * (c * output.0 * output.1) as u64,
        })
    }

    fn attention(module: &str, name: &str, kind: &str, input: Vec<usize>, output: Vec<usize>, flops: u64) -> Self {
        OpRecord {
            module: module.into(),
            name: name.into(),
            kind: kind.into(),
            input,
            output,
            flops,
        }
    }
}

/// Itemised FLOPs of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub convention: String,
    pub input: Vec<usize>,
    pub records: Vec<OpRecord>,
    pub module_totals: BTreeMap<String, u64>,
    pub kind_totals: BTreeMap<String, u64>,
    pub total: u64,
    pub total_excluding_resize: u64,
}

impl FlopsReport {
    pub fn new(input: Vec<usize>, records: Vec<OpRecord>) -> Self {
        let mut module_totals = BTreeMap::new();
        let mut kind_totals = BTreeMap::new();
        for r in &records {
            *module_totals.entry(r.module.clone()).or_insert(0) += r.flops;
            *kind_totals.entry(r.kind.clone()).or_insert(0) += r.flops;
        }
        let total = records.iter().map(|r| r.flops).sum();
        let resize = kind_totals.get("resize").copied().unwrap_or(0);
        FlopsReport {
            convention: CONVENTION.into(),
            input,
            records,
            module_totals,
            kind_totals,
            total,
            total_excluding_resize: total - resize,
        }
    }

    /// Total of one module, resize excluded.
    pub fn module_excluding_resize(&self, module: &str) -> u64 {
        self.records
            .iter()
            .filter(|r| r.module == module && r.kind != "resize")
            .map(|r| r.flops)
            .sum()
    }

    /// Total of the records of the given kinds.
    pub fn kinds(&self, kinds: &[&str]) -> u64 {
        self.records
            .iter()
            .filter(|r| kinds.contains(&r.kind.as_str()))
            .map(|r| r.flops)
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Human-readable table.
    pub fn render(&self) -> String {
        let mut s = format!("# {}\n", self.convention);
        s += &format!("{:<10} {:<28} {:<12} {:>18}\n", "module", "op", "kind", "FLOPs");
        for r in &self.records {
            s += &format!("{:<10} {:<28} {:<12} {:>18}\n", r.module, r.name, r.kind, r.flops);
        }
        for (m, t) in &self.module_totals {
            s += &format!("total[{m}] = {t} ({:.3} G)\n", *t as f64 / 1e9);
        }
        s += &format!("total = {} ({:.3} G)\n", self.total, self.total as f64 / 1e9);
        s += &format!(
            "total excluding resize = {} ({:.3} G)\n",
            self.total_excluding_resize,
            self.total_excluding_resize as f64 / 1e9
        );
        s
    }
}

/// Analytic records of one GAI module (batch 1).
#[allow(clippy::too_many_arguments)]
pub fn gai_records(
    module: &str,
    cfg: &GaiConfig,
    kernel: &dyn AttentionKernel,
    c_high: usize,
    high: (usize, usize),
    c_low: usize,
    low: (usize, usize),
) -> Vec<OpRecord> {
    let c = cfg.channels;
    let mut r = vec![OpRecord::conv(module, "reduce_low", c_low, c, 1, low, 1)];
    r.extend(OpRecord::resize(module, "resize_low", c, low, high));
    let query_in = match cfg.query {
        QueryMode::Concat => c_high + c,
        QueryMode::HighOnly => c_high,
        QueryMode::LowOnly => c,
    };
    r.push(OpRecord::conv(module, "reduce_query", query_in, c, 1, high, 1));
    let key = match cfg.key_source {
        KeySource::LowRes => low,
        KeySource::HighRes => high,
    };
    r.push(OpRecord::conv(module, "w_k", c, cfg.d_k, 1, key, 1));
    r.push(OpRecord::conv(module, "w_v", c, cfg.d_v, 1, key, 1));
    let geo = AttnGeometry {
        batch: 1,
        query: high,
        key,
    };
    let l = kernel.keys_per_query(&geo);
    let a_shape = vec![high.0, high.1, l];
    for t in 0..cfg.recurrence {
        r.push(OpRecord::conv(module, &format!("w_q[{t}]"), c, cfg.d_k, 1, high, 1));
        r.push(OpRecord::attention(
            module,
            &format!("affinity[{t}]"),
            "affinity",
            vec![cfg.d_k, high.0, high.1],
            a_shape.clone(),
            kernel.affinity_flops(&geo, cfg.d_k),
        ));
        r.push(OpRecord::attention(
            module,
            &format!("softmax[{t}]"),
            "softmax",
            a_shape.clone(),
            a_shape.clone(),
            SOFTMAX_FLOPS_PER_ELEMENT * (geo.queries() * l) as u64,
        ));
        r.push(OpRecord::attention(
            module,
            &format!("aggregation[{t}]"),
            "aggregation",
            vec![cfg.d_v, key.0, key.1],
            vec![cfg.d_v, high.0, high.1],
            kernel.aggregation_flops(&geo, cfg.d_v),
        ));
        if t + 1 < cfg.recurrence {
            r.push(OpRecord::conv(module, &format!("broadcast_proj[{t}]"), cfg.d_v, c, 1, high, 1));
        }
    }
    r.push(OpRecord::conv(module, "out_proj", c + cfg.d_v, cfg.out_channels, 1, high, 1));
    r
}
