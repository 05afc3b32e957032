//! The finite-difference gradient suite: every differentiable operator, the
//! GAI module and a sampled check of the whole network.

use crate::attention::{registry, Gai, GaiConfig};
use crate::error::Result;
use crate::net::{total_loss, Gain, GainConfig};
use crate::nn::{
    batch_norm, bilinear_resize, conv2d, cross_entropy_masked, expand_spatial, global_avg_pool, Ctx, LabelMap,
    OhemConfig, ParamKind, ParamStore, RunningStats,
};
use crate::tensor::{ops, GradCheck, GradCheckReport, Graph, Rng, Tensor, Var};

/// Tolerance of the whole-network spot check.
pub const NETWORK_TOLERANCE: f64 = 1e-3;
pub const NETWORK_SAMPLES: usize = 50;

#[derive(Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Random tensor whose entries stay at least `gap` away from zero, so that
/// ReLU kinks are never straddled by the finite-difference step.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut Rng) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let v = rng.range(gap, 1.5);
            if rng.below(2) == 0 {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized by construction")
}

/// Reduces `y` to a scalar with fixed random weights.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(g.shape(y).to_vec(), 1.0, &mut Rng::stream(seed, 99));
    ops::weighted_sum(g, y, &w)
}

fn check<F>(name: &'static str, f: F, inputs: &[Tensor], seed: u64) -> SuiteEntry
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = GradCheck::default().run(
        |g, v| {
            let y = f(g, v)?;
            if g.value(y).numel() == 1 {
                Ok(y)
            } else {
                project(g, y, seed)
            }
        },
        inputs,
    );
    SuiteEntry { name, report }
}

/// Operator-level and module-level checks at the default tolerance.
pub fn operator_suite(seed: u64) -> Vec<SuiteEntry> {
    let mut rng = Rng::stream(seed, 0);
    let mut r = |shape: &[usize]| Tensor::randn(shape.to_vec(), 1.0, &mut rng);
    let a = r(&[2, 3, 4]);
    let b = r(&[2, 3, 4]);
    let positive = Tensor::uniform([2, 3, 4], 0.5, 2.0, &mut Rng::stream(seed, 1));
    let m1 = r(&[3, 4]);
    let m2 = r(&[4, 5]);
    let x4 = r(&[2, 3, 5, 6]);
    let w1 = r(&[4, 3, 1, 1]);
    let w3 = r(&[4, 3, 3, 3]);
    let bias = r(&[4]);
    let small = r(&[2, 3, 3, 4]);
    let gamma = Tensor::uniform([3], 0.5, 1.5, &mut Rng::stream(seed, 2));
    let beta = r(&[3]);
    let logits = r(&[2, 4, 3, 3]);
    let mut lrng = Rng::stream(seed, 3);
    let labels = LabelMap::new(2, 3, 3, (0..18).map(|i| if i % 7 == 3 { 255 } else { lrng.below(4) as u32 }).collect())
        .expect("sized by construction");
    let relu_in = away_from_zero(&[2, 3, 4], 1e-2, &mut Rng::stream(seed, 4));
    let q = r(&[2, 3, 4, 5]);
    let k = r(&[2, 3, 2, 3]);
    let v = r(&[2, 2, 2, 3]);

    let mut out = vec![
        check("add", |g, v| ops::add(g, v[0], v[1]), &[a.clone(), b.clone()], seed),
        check("sub", |g, v| ops::sub(g, v[0], v[1]), &[a.clone(), b.clone()], seed),
        check("mul", |g, v| ops::mul(g, v[0], v[1]), &[a.clone(), b.clone()], seed),
        check("div", |g, v| ops::div(g, v[0], v[1]), &[a.clone(), positive], seed),
        check("affine", |g, v| Ok(ops::affine(g, v[0], -1.7, 0.3)), &[a.clone()], seed),
        check("sum", |g, v| Ok(ops::sum(g, v[0])), &[a.clone()], seed),
        check("mean", |g, v| Ok(ops::mean(g, v[0])), &[a.clone()], seed),
        check("relu", |g, v| Ok(ops::relu(g, v[0])), &[relu_in], seed),
        check("matmul", |g, v| ops::matmul(g, v[0], v[1]), &[m1, m2], seed),
        check("softmax", |g, v| ops::softmax(g, v[0], 1), &[a.clone()], seed),
        check("concat", |g, v| ops::concat(g, &[v[0], v[1]], 2), &[a.clone(), b.clone()], seed),
        check("slice", |g, v| ops::slice(g, v[0], 2, 1, 2), &[a.clone()], seed),
        check("reshape", |g, v| ops::reshape(g, v[0], &[6, 4]), &[a], seed),
        check("conv1x1", |g, v| conv2d(g, v[0], v[1], Some(v[2]), 1, 0), &[x4.clone(), w1, bias.clone()], seed),
        check("conv3x3", |g, v| conv2d(g, v[0], v[1], Some(v[2]), 1, 1), &[x4.clone(), w3.clone(), bias.clone()], seed),
        check("conv3x3_stride2", |g, v| conv2d(g, v[0], v[1], None, 2, 1), &[x4.clone(), w3], seed),
        check("resize_up", |g, v| bilinear_resize(g, v[0], 7, 9), &[small.clone()], seed),
        check("resize_down", |g, v| bilinear_resize(g, v[0], 2, 3), &[x4.clone()], seed),
        check("global_avg_pool", |g, v| global_avg_pool(g, v[0]), &[x4.clone()], seed),
        check(
            "expand_spatial",
            |g, v| {
                let p = global_avg_pool(g, v[0])?;
                expand_spatial(g, p, 3, 2)
            },
            &[small.clone()],
            seed,
        ),
        check(
            "batch_norm_train",
            |g, v| batch_norm(g, v[0], v[1], v[2], &mut RunningStats::new(3), true),
            &[small.clone(), gamma.clone(), beta.clone()],
            seed,
        ),
        check(
            "batch_norm_eval",
            |g, v| {
                let mut s = RunningStats::new(3);
                s.mean = vec![0.1, -0.2, 0.3];
                s.var = vec![0.5, 1.5, 2.0];
                batch_norm(g, v[0], v[1], v[2], &mut s, false)
            },
            &[small, gamma, beta],
            seed,
        ),
        check(
            "cross_entropy",
            move |g, v| {
                let mask: Vec<bool> = labels.data.iter().enumerate().map(|(i, _)| i % 3 != 1).collect();
                cross_entropy_masked(g, v[0], &labels, &mask)
            },
            &[logits],
            seed,
        ),
    ];
    for name in ["full", "criss_cross"] {
        let kernel = registry().get(name).expect("built-in kernel");
        let label = if name == "full" { "full_attention" } else { "criss_cross_attention" };
        out.push(check(
            label,
            move |g, v| {
                let a = kernel.affinity(g, v[0], v[1])?;
                kernel.attend(g, &a, v[2])
            },
            &[q.clone(), k.clone(), v.clone()],
            seed,
        ));
    }
    for name in ["criss_cross", "full"] {
        out.push(gai_check(name, seed));
    }
    out
}

/// Whole-module check on a 6×6 high / 3×3 low pair, with respect to both
/// inputs and the attention projections.
fn gai_check(attention: &str, seed: u64) -> SuiteEntry {
    let cfg = GaiConfig {
        channels: 6,
        d_k: 3,
        d_v: 4,
        out_channels: 5,
        attention: attention.into(),
        ..GaiConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = Rng::stream(seed, 10);
    let gai = Gai::new(&mut store, &mut rng, "gai", cfg, 4, 5).expect("valid config");
    for id in gai.param_ids() {
        if store.name(id).ends_with(".bias") {
            *store.get_mut(id) = Tensor::randn(store.get(id).shape().to_vec(), 0.1, &mut rng);
        }
    }
    let bound = [
        gai.w_q.weight,
        gai.w_k.weight,
        gai.w_v.weight,
        gai.broadcast_proj.as_ref().expect("R = 2").weight,
    ];
    let mut inputs = vec![
        Tensor::randn([1, 4, 6, 6], 1.0, &mut rng),
        Tensor::randn([1, 5, 3, 3], 1.0, &mut rng),
    ];
    inputs.extend(bound.iter().map(|&id| store.get(id).clone()));
    let name = if attention == "full" { "gai_forward_full" } else { "gai_forward_criss_cross" };
    check(
        name,
        |g, v| {
            let mut st = store.clone();
            let mut ctx = Ctx::new(g, &mut st, true);
            for (&id, &var) in bound.iter().zip(&v[2..]) {
                ctx.bind(id, var);
            }
            gai.forward(&mut ctx, v[0], v[1])
        },
        &inputs,
        seed,
    )
}

/// Total loss of the default network on a 32×32 batch of four, checked on
/// `NETWORK_SAMPLES` randomly chosen trainable scalars. OHEM is configured to
/// keep every pixel so that the selection cannot change under perturbation.
pub fn network_check(seed: u64) -> SuiteEntry {
    network_check_with(seed, GradCheck::with_tolerance(NETWORK_TOLERANCE))
}

/// [`network_check`] with an explicit step and tolerance.
pub fn network_check_with(seed: u64, check: GradCheck) -> SuiteEntry {
    let cfg = GainConfig::default();
    let (net, store) = Gain::build(cfg, seed).expect("default config is valid");
    let ids: Vec<_> = store.ids().filter(|&id| store.kind(id) == ParamKind::Trainable).collect();
    let inputs: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
    let mut rng = Rng::stream(seed, 20);
    let image = Tensor::uniform([4, 3, 32, 32], 0.0, 1.0, &mut rng);
    let labels = LabelMap::new(4, 32, 32, (0..4 * 32 * 32).map(|_| rng.below(4) as u32).collect())
        .expect("sized by construction");
    let mut picks = Vec::with_capacity(NETWORK_SAMPLES);
    while picks.len() < NETWORK_SAMPLES {
        let i = rng.below(inputs.len());
        let e = rng.below(inputs[i].numel());
        if !picks.contains(&(i, e)) {
            picks.push((i, e));
        }
    }
    let ohem = OhemConfig {
        prob_threshold: 1.0,
        min_kept_fraction: 1.0,
    };
    let report = check.run_sampled(
        |g, v| {
            let mut st = store.clone();
            let mut ctx = Ctx::new(g, &mut st, true);
            for (&id, &var) in ids.iter().zip(v) {
                ctx.bind(id, var);
            }
            let x = ctx.input(image.clone());
            let out = net.forward(&mut ctx, x)?;
            Ok(total_loss(&mut ctx, &out, &labels, 1.0, &ohem)?.total)
        },
        &inputs,
        &picks,
    );
    SuiteEntry {
        name: "network_spot_check",
        report,
    }
}

/// Operator suite followed by the network spot check.
pub fn full_suite(seed: u64) -> Vec<SuiteEntry> {
    let mut all = operator_suite(seed);
    all.push(network_check(seed));
    all
}
