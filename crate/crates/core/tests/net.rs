use gain_core::attention::GaiConfig;
use gain_core::net::{
    checkpoint_bytes, load_into, read_entries, total_loss, BackboneConfig, Gain, GainConfig, GainOutput,
};
use gain_core::nn::{sgd_step, Ctx, LabelMap, OhemConfig, ParamStore, IGNORE_INDEX};
use gain_core::tensor::ops;
use gain_core::{Error, Graph, Rng, Tensor, Var};

fn tiny() -> GainConfig {
    GainConfig {
        backbone: BackboneConfig {
            channels: [8, 12, 16, 16],
            ..BackboneConfig::default()
        },
        gai: GaiConfig {
            channels: 8,
            d_k: 4,
            d_v: 6,
            out_channels: 8,
            ..GaiConfig::default()
        },
        fused_channels: 8,
        aux_channels: 6,
        ..GainConfig::default()
    }
}

fn image(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::uniform([n, 3, h, w], 0.0, 1.0, &mut Rng::seeded(seed))
}

fn labels(n: usize, h: usize, w: usize, seed: u64) -> LabelMap {
    let mut rng = Rng::seeded(seed);
    LabelMap::new(n, h, w, (0..n * h * w).map(|_| rng.below(4) as u32).collect()).unwrap()
}

fn run(net: &Gain, store: &mut ParamStore, img: &Tensor, training: bool) -> (Graph, GainOutput) {
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, store, training);
    let x = ctx.input(img.clone());
    let out = net.forward(&mut ctx, x).unwrap();
    (g, out)
}

#[test]
fn backbone_strides() {
    let (net, mut store) = Gain::build(tiny(), 0).unwrap();
    for ((h, w), c5) in [((64, 64), (2, 2)), ((96, 64), (3, 2))] {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &mut store, false);
        let x = ctx.input(image(1, h, w, 1));
        let p = net.backbone.forward(&mut ctx, x).unwrap();
        let hw = |v: Var| (g.shape(v)[2], g.shape(v)[3]);
        assert_eq!(hw(p.c5), c5);
        assert_eq!(hw(p.c2), (h / 4, w / 4));
        assert_eq!(hw(p.c3), (h / 8, w / 8));
        assert_eq!(hw(p.c4), (h / 16, w / 16));
        assert_eq!(g.shape(p.c4)[1], 16);
    }
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &mut store, false);
    let x = ctx.input(image(1, 48, 64, 1));
    let err = net.backbone.forward(&mut ctx, x).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument { .. }));
}

#[test]
fn construction_and_forward_are_deterministic() {
    let (net, mut a) = Gain::build(tiny(), 5).unwrap();
    let (_, mut b) = Gain::build(tiny(), 5).unwrap();
    assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&b));
    let img = image(2, 32, 32, 2);
    let (ga, oa) = run(&net, &mut a, &img, true);
    let (gb, ob) = run(&net, &mut b, &img, true);
    assert_eq!(ga.value(oa.logits), gb.value(ob.logits));
    let (_, mut c) = Gain::build(tiny(), 6).unwrap();
    assert_ne!(checkpoint_bytes(&a), checkpoint_bytes(&c));
    let (gc, oc) = run(&net, &mut c, &img, true);
    assert_ne!(ga.value(oa.logits), gc.value(oc.logits));
}

#[test]
fn gap_branch_starts_as_identity_and_receives_gradient() {
    let (net, mut store) = Gain::build(tiny(), 7).unwrap();
    let mut rng = Rng::seeded(8);
    let c5 = Tensor::randn([2, 16, 2, 3], 1.0, &mut rng);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &mut store, true);
    let x = ctx.graph.param(c5.clone());
    let y = net.gap_enhance(&mut ctx, x).unwrap();
    assert_eq!(ctx.graph.value(y), &c5);
    let w = Tensor::randn([2, 16, 2, 3], 1.0, &mut rng);
    let s = ops::weighted_sum(ctx.graph, y, &w).unwrap();
    ctx.graph.backward(s).unwrap();
    let grads = ctx.param_grads();
    let gap = net.gap.as_ref().unwrap();
    let gw = &grads.iter().find(|(id, _)| *id == gap.weight).unwrap().1;
    assert!(gw.iter().any(|&v| v != 0.0));
    assert!(g.grad_or_zeros(x).iter().any(|&v| v != 0.0));

    // Constant input stays constant once the branch is non-zero.
    *store.get_mut(gap.weight) = Tensor::randn([16, 16, 1, 1], 1.0, &mut rng);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &mut store, false);
    let x = ctx.input(Tensor::full([1, 16, 2, 2], 0.7));
    let y = net.gap_enhance(&mut ctx, x).unwrap();
    for plane in g.value(y).data().chunks(4) {
        assert!(plane.iter().all(|&v| v == plane[0]));
    }
}

#[test]
fn output_shapes_for_both_upsamplers() {
    for use_gai in [true, false] {
        let cfg = GainConfig { use_gai, ..tiny() };
        let (net, mut store) = Gain::build(cfg, 9).unwrap();
        let (g, out) = run(&net, &mut store, &image(2, 64, 64, 3), true);
        assert_eq!(g.shape(out.logits), &[2, 4, 64, 64]);
        let (a4, a5) = out.aux.unwrap();
        assert_eq!(g.shape(a4), &[2, 4, 8, 8]);
        assert_eq!(g.shape(a5), &[2, 4, 8, 8]);
    }
}

#[test]
fn logits_match_input_size_for_several_sizes() {
    let (net, mut store) = Gain::build(tiny(), 10).unwrap();
    for (h, w) in [(32, 32), (32, 96), (64, 32)] {
        let (g, out) = run(&net, &mut store, &image(1, h, w, 4), false);
        assert_eq!(g.shape(out.logits), &[1, 4, h, w]);
    }
}

#[test]
fn all_sixteen_toggle_combinations_train() {
    let img = image(2, 32, 32, 11);
    let lab = labels(2, 32, 32, 12);
    for bits in 0..16u32 {
        let cfg = GainConfig {
            use_gai: bits & 1 != 0,
            use_aux: bits & 2 != 0,
            use_spatial_c2: bits & 4 != 0,
            use_gap: bits & 8 != 0,
            ..tiny()
        };
        let (net, mut store) = Gain::build(cfg, 13).unwrap();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &mut store, true);
        let x = ctx.input(img.clone());
        let out = net.forward(&mut ctx, x).unwrap();
        assert_eq!(out.aux.is_some(), bits & 2 != 0);
        let loss = total_loss(&mut ctx, &out, &lab, 1.0, &OhemConfig::default()).unwrap();
        let v = ctx.graph.value(loss.total).item();
        assert!(v.is_finite() && v > 0.0, "combination {bits:04b}: {v}");
        ctx.graph.backward(loss.total).unwrap();
        let grads = ctx.param_grads();
        assert!(grads.iter().all(|(_, g)| g.iter().all(|v| v.is_finite())));
        assert!(!grads.is_empty());
    }
}

#[test]
fn baseline_has_no_context_parameters() {
    let cfg = GainConfig {
        use_gai: false,
        use_gap: false,
        ..tiny()
    };
    let (net, mut store) = Gain::build(cfg, 14).unwrap();
    assert!(net.context_param_ids().is_empty());
    let names: Vec<String> = store.ids().map(|id| store.name(id).to_string()).collect();
    assert!(names.iter().all(|n| !n.starts_with("gap.") && !n.contains(".w_q") && !n.contains(".w_k")));
    let (mut g, out) = run(&net, &mut store, &image(2, 32, 32, 15), true);
    let s = ops::sum(&mut g, out.logits);
    g.backward(s).unwrap();

    let (full, fstore) = Gain::build(tiny(), 14).unwrap();
    let ids = full.context_param_ids();
    assert!(ids.iter().any(|&id| fstore.name(id).starts_with("up4.w_q")));
    assert!(ids.iter().any(|&id| fstore.name(id).starts_with("gap.")));
}

#[test]
fn total_loss_composition() {
    let (net, mut store) = Gain::build(tiny(), 16).unwrap();
    let img = image(2, 32, 32, 17);
    let lab = labels(2, 32, 32, 18);
    let ohem = OhemConfig::default();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &mut store, false);
    let x = ctx.input(img);
    let out = net.forward(&mut ctx, x).unwrap();
    let l0 = total_loss(&mut ctx, &out, &lab, 0.0, &ohem).unwrap();
    let l1 = total_loss(&mut ctx, &out, &lab, 1.0, &ohem).unwrap();
    let main = ctx.graph.value(l0.main).item();
    assert_eq!(ctx.graph.value(l0.total).item(), main);

    let (a4, a5) = out.aux.unwrap();
    let small = lab.resize_nearest(4, 4);
    let a = gain_core::nn::ohem_cross_entropy(ctx.graph, a4, &small, &ohem).unwrap();
    let b = gain_core::nn::ohem_cross_entropy(ctx.graph, a5, &small, &ohem).unwrap();
    let (a, b) = (ctx.graph.value(a).item(), ctx.graph.value(b).item());
    assert!(a > 0.0 && b > 0.0);
    let total = ctx.graph.value(l1.total).item();
    assert!((total - (main + a + b)).abs() < 1e-12 * total);

    let ignore = LabelMap::filled(2, 32, 32, IGNORE_INDEX);
    let li = total_loss(&mut ctx, &out, &ignore, 1.0, &ohem).unwrap();
    assert_eq!(ctx.graph.value(li.total).item(), 0.0);
}

fn loss_value(net: &Gain, store: &mut ParamStore, img: &Tensor, lab: &LabelMap, ohem: &OhemConfig) -> (f64, Vec<(gain_core::nn::ParamId, Vec<f64>)>) {
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, store, true);
    let x = ctx.input(img.clone());
    let out = net.forward(&mut ctx, x).unwrap();
    let l = total_loss(&mut ctx, &out, lab, 1.0, ohem).unwrap();
    let v = ctx.graph.value(l.total).item();
    ctx.graph.backward(l.total).unwrap();
    (v, ctx.param_grads())
}

#[test]
fn one_small_sgd_step_decreases_the_loss() {
    let ohem = OhemConfig::default();
    let trials = 20;
    let mut decreased = 0;
    for seed in 0..trials {
        let (net, mut store) = Gain::build(tiny(), 100 + seed).unwrap();
        // 64x64 keeps the stride-32 maps at 2x2; at 32x32 with two images the
        // deepest batch norm sees two values per channel and is nearly a step.
        let img = image(4, 64, 64, 200 + seed);
        let lab = labels(4, 64, 64, 300 + seed);
        let (before, grads) = loss_value(&net, &mut store, &img, &lab, &ohem);
        for (id, grad) in grads {
            let mut v = vec![0.0; grad.len()];
            sgd_step(store.get_mut(id).data_mut(), &grad, &mut v, 1e-3, 0.9, 0.0).unwrap();
        }
        let (after, _) = loss_value(&net, &mut store, &img, &lab, &ohem);
        if after < before {
            decreased += 1;
        }
    }
    assert!(decreased * 100 >= 95 * trials, "{decreased}/{trials}");
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let (_, store) = Gain::build(tiny(), 19).unwrap();
    let bytes = checkpoint_bytes(&store);
    assert_eq!(&bytes[..8], b"GAINCKPT");
    let entries = read_entries(&bytes).unwrap();
    assert_eq!(entries.len(), store.len());
    let (_, mut other) = Gain::build(tiny(), 20).unwrap();
    load_into(&mut other, &bytes).unwrap();
    assert_eq!(checkpoint_bytes(&other), bytes);

    let (_, mut wrong) = Gain::build(GainConfig { num_classes: 5, ..tiny() }, 19).unwrap();
    assert!(matches!(load_into(&mut wrong, &bytes), Err(Error::Checkpoint(_))));
    let (_, mut fewer) = Gain::build(GainConfig { use_aux: false, ..tiny() }, 19).unwrap();
    assert!(load_into(&mut fewer, &bytes).is_err());
    assert!(load_into(&mut other, &bytes[..bytes.len() - 3]).is_err());
    assert!(load_into(&mut other, b"NOTACKPT").is_err());
}

#[test]
fn analytic_flops_match_counted_ops() {
    for use_gai in [true, false] {
        for attention in ["criss_cross", "full"] {
            let mut cfg = GainConfig { use_gai, ..tiny() };
            cfg.gai.attention = attention.into();
            let (net, mut store) = Gain::build(cfg, 21).unwrap();
            let mut g = Graph::inference().with_op_counts();
            let mut ctx = Ctx::new(&mut g, &mut store, false);
            let x = ctx.input(image(1, 64, 96, 22));
            net.forward(&mut ctx, x).unwrap();
            let report = net.flops((64, 96));
            let mut counted = std::collections::BTreeMap::new();
            for c in g.op_counts() {
                *counted.entry(c.kind.to_string()).or_insert(0u64) += c.flops;
            }
            assert_eq!(counted, report.kind_totals, "use_gai={use_gai} {attention}");
        }
    }
}

#[test]
fn unknown_upsampler_or_bad_config_is_a_validation_error() {
    let mut cfg = tiny();
    cfg.gai.attention = "window".into();
    assert!(Gain::build(cfg, 0).unwrap_err().is_validation());
    let cfg = GainConfig { num_classes: 1, ..tiny() };
    assert!(Gain::build(cfg, 0).unwrap_err().is_validation());
    let mut cfg = tiny();
    cfg.backbone.blocks = 0;
    assert!(Gain::build(cfg, 0).unwrap_err().is_validation());
}

