use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::gai_records;
use crate::attention::{registry, AttnGeometry, Gai, GaiConfig, KeySource};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Graph, Rng, Tensor};

pub const MIN_REPEATS: usize = 5;
pub const MIN_WARMUPS: usize = 2;

/// One GAI module applied to a high/low feature pair.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub gai: GaiConfig,
    pub c_high: usize,
    pub c_low: usize,
    pub high: (usize, usize),
    pub low: (usize, usize),
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            gai: GaiConfig::default(),
            c_high: 128,
            c_low: 256,
            high: (64, 128),
            low: (32, 64),
        }
    }
}

impl BenchConfig {
    pub fn id(&self) -> String {
        format!(
            "{}_r{}_{}_{}_h{}x{}_l{}x{}",
            self.gai.attention,
            self.gai.recurrence,
            self.gai.key_source,
            self.gai.query,
            self.high.0,
            self.high.1,
            self.low.0,
            self.low.1
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub config_id: String,
    pub repeats: usize,
    pub warmups: usize,
    /// Affinity elements of one forward pass (all recurrence steps).
    pub affinity_elements: usize,
    pub flops: u64,
    /// Wall-clock fields; excluded from determinism comparisons.
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub std_ms: f64,
}

impl BenchResult {
    /// The result with every timing field zeroed.
    pub fn without_timings(&self) -> Self {
        BenchResult {
            samples_ms: Vec::new(),
            median_ms: 0.0,
            mean_ms: 0.0,
            min_ms: 0.0,
            std_ms: 0.0,
            ..self.clone()
        }
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Forward-only wall-clock timing of one GAI module on seeded inputs.
pub fn bench_time(cfg: &BenchConfig, repeats: usize, warmups: usize, seed: u64) -> Result<BenchResult> {
    if repeats < MIN_REPEATS {
        return Err(Error::config("bench.repeats", format!("must be at least {MIN_REPEATS}, got {repeats}")));
    }
    if warmups < MIN_WARMUPS {
        return Err(Error::config("bench.warmups", format!("must be at least {MIN_WARMUPS}, got {warmups}")));
    }
    let mut store = ParamStore::new();
    let mut rng = Rng::seeded(seed);
    let gai = Gai::new(&mut store, &mut rng, "gai", cfg.gai.clone(), cfg.c_high, cfg.c_low)?;
    let fh = Tensor::randn([1, cfg.c_high, cfg.high.0, cfg.high.1], 1.0, &mut rng);
    let fl = Tensor::randn([1, cfg.c_low, cfg.low.0, cfg.low.1], 1.0, &mut rng);

    let mut samples = Vec::with_capacity(repeats);
    let mut elements = 0;
    for i in 0..warmups + repeats {
        let start = Instant::now();
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, &mut store, false);
        let (h, l) = (ctx.input(fh.clone()), ctx.input(fl.clone()));
        let trace = gai.forward_traced(&mut ctx, h, l)?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        elements = trace.affinities.iter().map(|a| g.value(a.weights).numel()).sum();
        drop(g);
        if i >= warmups {
            samples.push(elapsed);
        }
    }
    let kernel = registry().get(&cfg.gai.attention)?;
    let key = match cfg.gai.key_source {
        KeySource::LowRes => cfg.low,
        KeySource::HighRes => cfg.high,
    };
    let geo = AttnGeometry {
        batch: 1,
        query: cfg.high,
        key,
    };
    debug_assert_eq!(elements, cfg.gai.recurrence * kernel.affinity_elements(&geo));
    let flops = gai_records("gai", &cfg.gai, kernel.as_ref(), cfg.c_high, cfg.high, cfg.c_low, cfg.low)
        .iter()
        .map(|r| r.flops)
        .sum();
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / samples.len() as f64;
    Ok(BenchResult {
        config_id: cfg.id(),
        repeats,
        warmups,
        affinity_elements: elements,
        flops,
        median_ms: median(&samples),
        mean_ms: mean,
        min_ms: samples.iter().cloned().fold(f64::INFINITY, f64::min),
        std_ms: var.sqrt(),
        samples_ms: samples,
    })
}
