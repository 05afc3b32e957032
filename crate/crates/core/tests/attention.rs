use gain_core::attention::{
    registry, write_attention, AffinityMap, AttentionKernel, AttnGeometry, Gai, GaiConfig, KeySource, QueryMode,
};
use gain_core::nn::{Ctx, ParamStore};
use gain_core::tensor::{ops, GradCheck};
use gain_core::{Error, Graph, Rng, Tensor, Var};
use proptest::prelude::*;

fn kernel(name: &str) -> std::sync::Arc<dyn AttentionKernel> {
    registry().get(name).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// `x[n, c, h, w]` of a row-major NCHW buffer.
fn at(t: &Tensor, n: usize, c: usize, h: usize, w: usize) -> f64 {
    t.at(&[n, c, h, w])
}

/// Brute-force softmax of `<q_p, k_i>` over the given key coordinates.
fn oracle_row(q: &Tensor, k: &Tensor, n: usize, h: usize, w: usize, keys: &[(usize, usize)]) -> Vec<f64> {
    let dk = q.shape()[1];
    let logits: Vec<f64> = keys
        .iter()
        .map(|&(i, j)| (0..dk).map(|c| at(q, n, c, h, w) * at(k, n, c, i, j)).sum())
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn affinity_of(name: &str, q: &Tensor, k: &Tensor) -> (Graph, AffinityMap) {
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
    let a = kernel(name).affinity(&mut g, qv, kv).unwrap();
    (g, a)
}

#[test]
fn registry_resolves_names_and_aliases() {
    assert_eq!(kernel("full").name(), "full");
    assert_eq!(kernel("non_local").name(), "full");
    assert_eq!(kernel("criss_cross").name(), "criss_cross");
    assert_eq!(kernel("rcca").name(), "criss_cross");
    let err = registry().get("axial").unwrap_err();
    assert!(matches!(err, Error::Config { .. }) && err.is_validation());
    assert!(registry().names().contains(&"criss_cross"));
}

#[test]
fn full_affinity_matches_brute_force_softmax() {
    let mut rng = Rng::seeded(11);
    let q = Tensor::randn([2, 4, 3, 3], 1.0, &mut rng);
    let k = Tensor::randn([2, 4, 2, 2], 1.0, &mut rng);
    let (g, a) = affinity_of("full", &q, &k);
    assert_eq!(g.shape(a.weights), &[2, 9, 4]);
    let all: Vec<_> = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).collect();
    for n in 0..2 {
        for h in 0..3 {
            for w in 0..3 {
                let want = oracle_row(&q, &k, n, h, w, &all);
                for (x, y) in a.row(&g, n, h, w).iter().zip(&want) {
                    assert!(rel(*x, *y) < 1e-10, "{x} vs {y}");
                }
            }
        }
    }
}

#[test]
fn full_affinity_degenerate_cases() {
    let mut rng = Rng::seeded(12);
    let q = Tensor::randn([1, 3, 4, 4], 1.0, &mut rng);
    let (g, a) = affinity_of("full", &q, &Tensor::randn([1, 3, 1, 1], 1.0, &mut rng));
    assert!(g.value(a.weights).data().iter().all(|&v| v == 1.0));

    let (g, a) = affinity_of("full", &Tensor::zeros([1, 3, 4, 4]), &Tensor::randn([1, 3, 2, 3], 1.0, &mut rng));
    assert!(g.value(a.weights).data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
}

#[test]
fn criss_cross_shape_and_single_key() {
    let mut rng = Rng::seeded(13);
    let q = Tensor::randn([1, 2, 4, 4], 1.0, &mut rng);
    let (g, a) = affinity_of("criss_cross", &q, &Tensor::randn([1, 2, 2, 2], 1.0, &mut rng));
    assert_eq!(g.shape(a.weights), &[1, 4, 4, 3]);
    for row in g.value(a.weights).data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let k1 = Tensor::randn([1, 2, 1, 1], 1.0, &mut rng);
    let (gc, ac) = affinity_of("criss_cross", &q, &k1);
    let (gf, af) = affinity_of("full", &q, &k1);
    assert_eq!(gc.value(ac.weights).data(), gf.value(af.weights).data());
}

#[test]
fn criss_cross_key_set_follows_the_anchor() {
    let cc = kernel("criss_cross");
    let geo = AttnGeometry {
        batch: 1,
        query: (6, 6),
        key: (3, 3),
    };
    // Query (5, 2) sits in key cell (2, 1).
    let keys = cc.key_coords(&geo, 5, 2);
    assert_eq!(keys, vec![(2, 0), (2, 1), (2, 2), (0, 1), (1, 1)]);
    let same = AttnGeometry { key: (6, 6), ..geo };
    let keys = cc.key_coords(&same, 5, 2);
    assert_eq!(keys.len(), 11);
    assert!(keys.iter().all(|&(i, j)| i == 5 || j == 2));
}

/// Criss-cross equals full attention restricted to the criss-cross support
/// and renormalised.
#[test]
fn criss_cross_is_masked_renormalised_full() {
    let mut rng = Rng::seeded(14);
    let cc = kernel("criss_cross");
    for &((h, w), (hk, wk)) in &[((4, 4), (2, 2)), ((5, 7), (3, 2)), ((6, 6), (6, 6)), ((8, 4), (3, 4)), ((3, 5), (1, 5))] {
        let q = Tensor::randn([2, 3, h, w], 1.0, &mut rng);
        let k = Tensor::randn([2, 3, hk, wk], 1.0, &mut rng);
        let (gf, af) = affinity_of("full", &q, &k);
        let (gc, ac) = affinity_of("criss_cross", &q, &k);
        for n in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    let full = af.row(&gf, n, i, j);
                    let keys = cc.key_coords(&ac.geometry, i, j);
                    let masked: Vec<f64> = keys.iter().map(|&(a, b)| full[a * wk + b]).collect();
                    let z: f64 = masked.iter().sum();
                    for (x, m) in ac.row(&gc, n, i, j).iter().zip(&masked) {
                        assert!(rel(*x, m / z) < 1e-10, "{h}x{w}/{hk}x{wk}: {x} vs {}", m / z);
                    }
                }
            }
        }
    }
}

#[test]
fn affinity_element_counts() {
    let mut rng = Rng::seeded(15);
    let q = Tensor::randn([2, 2, 6, 5], 1.0, &mut rng);
    let k = Tensor::randn([2, 2, 3, 4], 1.0, &mut rng);
    let (g, a) = affinity_of("criss_cross", &q, &k);
    assert_eq!(g.value(a.weights).numel(), 2 * 30 * (3 + 4 - 1));
    assert_eq!(kernel("criss_cross").affinity_elements(&a.geometry), 2 * 30 * 6);
    let (g, a) = affinity_of("full", &q, &k);
    assert_eq!(g.value(a.weights).numel(), 2 * 30 * 12);
    assert_eq!(kernel("full").affinity_elements(&a.geometry), 2 * 30 * 12);
}

#[test]
fn attend_matches_weighted_sum_oracle() {
    let mut rng = Rng::seeded(16);
    for name in ["full", "criss_cross"] {
        let q = Tensor::randn([2, 3, 4, 4], 1.0, &mut rng);
        let k = Tensor::randn([2, 3, 2, 2], 1.0, &mut rng);
        let v = Tensor::randn([2, 5, 2, 2], 1.0, &mut rng);
        let kern = kernel(name);
        let (mut g, a) = affinity_of(name, &q, &k);
        let vv = g.constant(v.clone());
        let o = kern.attend(&mut g, &a, vv).unwrap();
        assert_eq!(g.shape(o), &[2, 5, 4, 4]);
        for n in 0..2 {
            for h in 0..4 {
                for w in 0..4 {
                    let keys = kern.key_coords(&a.geometry, h, w);
                    let row = a.row(&g, n, h, w);
                    for c in 0..5 {
                        let want: f64 = keys.iter().zip(row).map(|(&(i, j), p)| p * at(&v, n, c, i, j)).sum();
                        assert!(rel(at(g.value(o), n, c, h, w), want) < 1e-10, "{name}");
                    }
                }
            }
        }
    }
}

#[test]
fn attend_constant_values_and_one_hot_selection() {
    let mut rng = Rng::seeded(17);
    for name in ["full", "criss_cross"] {
        let kern = kernel(name);
        let q = Tensor::randn([1, 3, 4, 4], 3.0, &mut rng);
        let k = Tensor::randn([1, 3, 2, 2], 3.0, &mut rng);
        let (mut g, a) = affinity_of(name, &q, &k);
        let v = g.constant(Tensor::full([1, 2, 2, 2], 0.375));
        let o = kern.attend(&mut g, &a, v).unwrap();
        assert!(g.value(o).data().iter().all(|x| (x - 0.375).abs() < 1e-15));

        // One-hot rows pick slot (p mod L).
        let l = a.keys_per_query;
        let mut hot = vec![0.0; 16 * l];
        for p in 0..16 {
            hot[p * l + p % l] = 1.0;
        }
        let shape = g.shape(a.weights).to_vec();
        let w = g.constant(Tensor::new(shape, hot).unwrap());
        let onehot = AffinityMap { weights: w, ..a.clone() };
        let vt = Tensor::randn([1, 2, 2, 2], 1.0, &mut rng);
        let vv = g.constant(vt.clone());
        let o = kern.attend(&mut g, &onehot, vv).unwrap();
        for h in 0..4 {
            for wq in 0..4 {
                let (i, j) = kern.key_coords(&a.geometry, h, wq)[(h * 4 + wq) % l];
                for c in 0..2 {
                    assert_eq!(at(g.value(o), 0, c, h, wq), at(&vt, 0, c, i, j));
                }
            }
        }
    }
}

/// Permuting key pixels together with the affinity columns leaves the full
/// kernel's output unchanged. Dyadic weights and integer values make every
/// partial sum exact, so the comparison is bitwise.
#[test]
fn full_attend_is_permutation_equivariant_in_keys() {
    let mut rng = Rng::seeded(18);
    let (p, nk, dv) = (6, 6, 3);
    let mut a = vec![0.0; p * nk];
    for row in a.chunks_mut(nk) {
        let mut left = 32u32;
        for (s, slot) in row.iter_mut().enumerate() {
            let take = if s + 1 == nk { left } else { rng.below(left as usize + 1) as u32 };
            *slot = take as f64 / 32.0;
            left -= take;
        }
    }
    let v: Vec<f64> = (0..dv * nk).map(|_| rng.below(21) as f64 - 10.0).collect();
    let mut perm: Vec<usize> = (0..nk).collect();
    rng.shuffle(&mut perm);
    let pa: Vec<f64> = (0..p).flat_map(|r| perm.iter().map(move |&c| (r, c))).map(|(r, c)| a[r * nk + c]).collect();
    let pv: Vec<f64> = (0..dv).flat_map(|ch| perm.iter().map(move |&c| (ch, c))).map(|(ch, c)| v[ch * nk + c]).collect();
    let geo = AttnGeometry {
        batch: 1,
        query: (2, 3),
        key: (2, 3),
    };
    let run = |a: Vec<f64>, v: Vec<f64>| {
        let mut g = Graph::new();
        let w = g.constant(Tensor::new([1, p, nk], a).unwrap());
        let vv = g.constant(Tensor::new([1, dv, 2, 3], v).unwrap());
        let map = AffinityMap {
            weights: w,
            kernel: "full",
            geometry: geo,
            keys_per_query: nk,
        };
        let o = kernel("full").attend(&mut g, &map, vv).unwrap();
        g.value(o).clone()
    };
    assert_eq!(run(a, v), run(pa, pv));
}

#[test]
fn kernel_gradients() {
    let mut rng = Rng::seeded(19);
    for name in ["full", "criss_cross"] {
        let inputs = [
            Tensor::randn([2, 3, 4, 5], 1.0, &mut rng),
            Tensor::randn([2, 3, 2, 3], 1.0, &mut rng),
            Tensor::randn([2, 2, 2, 3], 1.0, &mut rng),
        ];
        let w = Tensor::randn([2, 2, 4, 5], 1.0, &mut rng);
        let r = GradCheck::default().run(
            |g, v| {
                let kern = kernel(name);
                let a = kern.affinity(g, v[0], v[1])?;
                let o = kern.attend(g, &a, v[2])?;
                ops::weighted_sum(g, o, &w)
            },
            &inputs,
        );
        assert!(r.passed(), "{name}: {r}");
    }
}

fn small_cfg(attention: &str) -> GaiConfig {
    GaiConfig {
        channels: 6,
        d_k: 3,
        d_v: 4,
        out_channels: 5,
        attention: attention.into(),
        ..GaiConfig::default()
    }
}

fn build(cfg: GaiConfig, c_high: usize, c_low: usize, seed: u64) -> (Gai, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = Rng::seeded(seed);
    let gai = Gai::new(&mut store, &mut rng, "gai", cfg, c_high, c_low).unwrap();
    // Non-zero biases so that they take part in the checks.
    for id in gai.param_ids() {
        if store.name(id).ends_with(".bias") {
            *store.get_mut(id) = Tensor::randn(store.get(id).shape().to_vec(), 0.1, &mut rng);
        }
    }
    (gai, store)
}

#[test]
fn gai_gradients_through_the_whole_module() {
    let mut rng = Rng::seeded(20);
    for name in ["criss_cross", "full"] {
        let (gai, store) = build(small_cfg(name), 4, 5, 21);
        let checked = [gai.w_q.weight, gai.w_k.weight, gai.broadcast_proj.as_ref().unwrap().weight, gai.reduce_low.weight];
        let mut inputs = vec![
            Tensor::randn([1, 4, 6, 6], 1.0, &mut rng),
            Tensor::randn([1, 5, 3, 3], 1.0, &mut rng),
        ];
        inputs.extend(checked.iter().map(|&id| store.get(id).clone()));
        let w = Tensor::randn([1, 5, 6, 6], 1.0, &mut rng);
        let r = GradCheck::default().run(
            |g, v| {
                let mut st = store.clone();
                let mut ctx = Ctx::new(g, &mut st, true);
                for (id, var) in checked.iter().zip(&v[2..]) {
                    ctx.bind(*id, *var);
                }
                let y = gai.forward(&mut ctx, v[0], v[1])?;
                ops::weighted_sum(ctx.graph, y, &w)
            },
            &inputs,
        );
        assert!(r.passed(), "{name}: {r}");
    }
}

fn forward_trace(gai: &Gai, store: &ParamStore, fh: &Tensor, fl: &Tensor) -> (Graph, gain_core::attention::GaiTrace, Var) {
    let mut g = Graph::new();
    let mut st = store.clone();
    let mut ctx = Ctx::new(&mut g, &mut st, false);
    let (h, l) = (ctx.input(fh.clone()), ctx.input(fl.clone()));
    let tr = gai.forward_traced(&mut ctx, h, l).unwrap();
    (g, tr, h)
}

#[test]
fn default_query_shape_and_identity_resize() {
    let mut store = ParamStore::new();
    let mut rng = Rng::seeded(22);
    let gai = Gai::new(&mut store, &mut rng, "gai", GaiConfig::default(), 16, 24).unwrap();
    let fh = Tensor::randn([2, 16, 4, 4], 1.0, &mut rng);
    let fl = Tensor::randn([2, 24, 4, 4], 1.0, &mut rng);
    let (g, tr, _) = forward_trace(&gai, &store, &fh, &fl);
    assert_eq!(g.shape(tr.parts.q), &[2, 128, 4, 4]);
    assert_eq!(g.shape(tr.output), &[2, 128, 4, 4]);
    // Equal sizes: F_l is the channel-reduced low map itself.
    assert_eq!(tr.parts.f_l, tr.parts.k_src);
    assert_eq!(g.op_name(tr.parts.f_l), Some("conv2d"));
}

#[test]
fn output_shape_contract_for_every_variant() {
    let mut rng = Rng::seeded(23);
    let fh = Tensor::randn([1, 4, 6, 8], 1.0, &mut rng);
    let fl = Tensor::randn([1, 5, 3, 4], 1.0, &mut rng);
    for attention in ["full", "criss_cross"] {
        for query in QueryMode::ALL {
            for key_source in KeySource::ALL {
                for recurrence in [1, 2, 3] {
                    let cfg = GaiConfig {
                        query,
                        key_source,
                        recurrence,
                        ..small_cfg(attention)
                    };
                    let (gai, store) = build(cfg, 4, 5, 24);
                    let (g, tr, _) = forward_trace(&gai, &store, &fh, &fl);
                    assert_eq!(g.shape(tr.output), &[1, 5, 6, 8]);
                    assert_eq!(tr.affinities.len(), recurrence);
                    for a in &tr.affinities {
                        let rows = g.value(a.weights).data().chunks(a.keys_per_query);
                        assert!(rows.into_iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-9));
                    }
                }
            }
        }
    }
}

#[test]
fn low_resolution_larger_than_high_is_rejected() {
    let (gai, mut store) = build(small_cfg("criss_cross"), 4, 5, 25);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &mut store, false);
    let h = ctx.input(Tensor::zeros([1, 4, 4, 4]));
    let l = ctx.input(Tensor::zeros([1, 5, 4, 5]));
    let err = gai.forward(&mut ctx, h, l).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument { .. }));
}

#[test]
fn low_only_queries_ignore_the_high_resolution_input() {
    let mut rng = Rng::seeded(26);
    let cfg = GaiConfig {
        query: QueryMode::LowOnly,
        ..small_cfg("criss_cross")
    };
    let (gai, store) = build(cfg, 4, 5, 27);
    let fl = Tensor::randn([1, 5, 3, 3], 1.0, &mut rng);
    let fh1 = Tensor::randn([1, 4, 6, 6], 1.0, &mut rng);
    let fh2 = Tensor::randn([1, 4, 6, 6], 5.0, &mut rng);
    let (g1, t1, _) = forward_trace(&gai, &store, &fh1, &fl);
    let (g2, t2, _) = forward_trace(&gai, &store, &fh2, &fl);
    assert_eq!(g1.value(t1.parts.q), g2.value(t2.parts.q));
    assert_eq!(g1.value(t1.output), g2.value(t2.output));

    // No gradient reaches F_h.
    let mut g = Graph::new();
    let mut st = store.clone();
    let mut ctx = Ctx::new(&mut g, &mut st, true);
    let h = ctx.graph.param(fh1);
    let l = ctx.input(fl);
    let y = gai.forward(&mut ctx, h, l).unwrap();
    let s = ops::sum(ctx.graph, y);
    g.backward(s).unwrap();
    assert!(g.grad_or_zeros(h).iter().all(|&v| v == 0.0));
}

#[test]
fn constant_value_map_gives_constant_attention_output() {
    let mut rng = Rng::seeded(28);
    for name in ["full", "criss_cross"] {
        let (gai, store) = build(small_cfg(name), 4, 5, 29);
        let mut fl = Tensor::zeros([1, 5, 3, 3]);
        for c in 0..5 {
            let v = rng.normal();
            fl.data_mut()[c * 9..][..9].fill(v);
        }
        let fh = Tensor::randn([1, 4, 6, 6], 1.0, &mut rng);
        let (g, tr, _) = forward_trace(&gai, &store, &fh, &fl);
        for &o in &tr.attended {
            for ch in g.value(o).data().chunks(36) {
                assert!(ch.iter().all(|x| (x - ch[0]).abs() < 1e-12), "{name}");
            }
        }
    }
}

/// With one pass, keys at query resolution and equal input sizes, the module
/// is plain dot-product self-attention over the fused map followed by the
/// output projection. Recomputed here with explicit loops.
#[test]
fn degenerate_configuration_is_standard_self_attention() {
    let mut rng = Rng::seeded(30);
    let cfg = GaiConfig {
        recurrence: 1,
        key_source: KeySource::HighRes,
        ..small_cfg("full")
    };
    let (gai, store) = build(cfg, 4, 5, 31);
    let (hh, ww) = (3, 4);
    let p = hh * ww;
    let fh = Tensor::randn([1, 4, hh, ww], 1.0, &mut rng);
    let fl = Tensor::randn([1, 5, hh, ww], 1.0, &mut rng);
    let (g, tr, _) = forward_trace(&gai, &store, &fh, &fl);

    // 1×1 conv as a per-pixel matvec: x is C×P.
    let conv = |c: &gain_core::nn::Conv2d, x: &[f64]| -> Vec<f64> {
        let w = store.get(c.weight).data();
        let b = c.bias.map(|b| store.get(b).data().to_vec());
        let mut y = vec![0.0; c.cout * p];
        for o in 0..c.cout {
            for i in 0..p {
                let mut s = b.as_ref().map_or(0.0, |b| b[o]);
                for k in 0..c.cin {
                    s += w[o * c.cin + k] * x[k * p + i];
                }
                y[o * p + i] = s;
            }
        }
        y
    };
    let low = conv(&gai.reduce_low, fl.data());
    let mut cat = fh.data().to_vec();
    cat.extend_from_slice(&low);
    let q = conv(&gai.reduce_query, &cat);
    let (qp, kp, vp) = (conv(&gai.w_q, &q), conv(&gai.w_k, &low), conv(&gai.w_v, &low));
    let (dk, dv) = (3, 4);
    let mut o = vec![0.0; dv * p];
    for i in 0..p {
        let logits: Vec<f64> = (0..p).map(|j| (0..dk).map(|c| qp[c * p + i] * kp[c * p + j]).sum()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..dv {
            o[c * p + i] = (0..p).map(|j| e[j] / z * vp[c * p + j]).sum();
        }
    }
    let mut cat = q.clone();
    cat.extend_from_slice(&o);
    let want = conv(&gai.out_proj, &cat);
    for (x, y) in g.value(tr.output).data().iter().zip(&want) {
        assert!((x - y).abs() < 1e-10 * y.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn disabled_recurrence_has_no_feedback_parameters() {
    let cfg = GaiConfig {
        recurrence: 1,
        ..small_cfg("criss_cross")
    };
    let (gai, store) = build(cfg, 4, 5, 32);
    assert!(gai.broadcast_proj.is_none());
    assert!(store.find("gai.broadcast_proj.weight").is_none());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut store = ParamStore::new();
    let mut rng = Rng::seeded(33);
    for cfg in [
        GaiConfig { d_k: 7, ..small_cfg("full") },
        GaiConfig { d_v: 0, ..small_cfg("full") },
        GaiConfig { recurrence: 0, ..small_cfg("full") },
        small_cfg("window"),
    ] {
        let err = Gai::new(&mut store, &mut rng, "g", cfg, 4, 4).unwrap_err();
        assert!(err.is_validation(), "{err}");
    }
}

#[test]
fn attention_dump_lists_every_key_of_each_query() {
    let mut rng = Rng::seeded(34);
    let q = Tensor::randn([1, 2, 6, 6], 1.0, &mut rng);
    let k = Tensor::randn([1, 2, 3, 3], 1.0, &mut rng);
    let (g, a) = affinity_of("criss_cross", &q, &k);
    let mut buf = Vec::new();
    write_attention(&g, kernel("criss_cross").as_ref(), &a, &[(0, 0), (5, 2)], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "qh,qw,kh,kw,weight");
    assert_eq!(lines.len(), 1 + 2 * 5);
    assert!(lines[6..].iter().any(|l| l.starts_with("5,2,0,1,")));
    let total: f64 = lines[1..6].iter().map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);

    let err = write_attention(&g, kernel("criss_cross").as_ref(), &a, &[(6, 0)], Vec::new()).unwrap_err();
    assert!(err.is_validation());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn affinity_rows_are_distributions(
        h in 1usize..7, w in 1usize..7, fh in 0.1f64..1.0, fw in 0.1f64..1.0,
        dk in 1usize..4, scale in 0.1f64..20.0, seed in any::<u64>(), full in any::<bool>(),
    ) {
        let hk = ((h as f64 * fh).ceil() as usize).max(1);
        let wk = ((w as f64 * fw).ceil() as usize).max(1);
        let mut rng = Rng::seeded(seed);
        let q = Tensor::randn([1, dk, h, w], scale, &mut rng);
        let k = Tensor::randn([1, dk, hk, wk], scale, &mut rng);
        let name = if full { "full" } else { "criss_cross" };
        let (g, a) = affinity_of(name, &q, &k);
        prop_assert_eq!(g.value(a.weights).numel(), kernel(name).affinity_elements(&a.geometry));
        for row in g.value(a.weights).data().chunks(a.keys_per_query) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
