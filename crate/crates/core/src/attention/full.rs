//! Dense attention: every query sees every key.

use super::kernel::{check_values, projected_geometry, softmax_rows, softmax_rows_backward, SOFTMAX_FLOPS_PER_ELEMENT};
use super::{AffinityMap, AttentionKernel, AttnGeometry};
use crate::error::Result;
use crate::tensor::{gemm, BackwardOp, GradSink, Graph, Layout, Tensor, Var};

#[derive(Clone, Copy, Debug, Default)]
pub struct FullAttention;

struct FullAffinity {
    q: Var,
    k: Var,
    geo: AttnGeometry,
    dk: usize,
}

impl BackwardOp for FullAffinity {
    fn name(&self) -> &'static str {
        "full_affinity"
    }

    fn backward(&self, out: &Tensor, da: &[f64], sink: &mut GradSink<'_>) {
        let (p, l, dk) = (self.geo.queries(), self.geo.keys(), self.dk);
        let de = softmax_rows_backward(out.data(), da, l);
        let (qd, kd) = (sink.value(self.q).data(), sink.value(self.k).data());
        if sink.wants(self.q) {
            let mut gq = vec![0.0; qd.len()];
            for b in 0..self.geo.batch {
                // dQ_b (dk×P) = K_b (dk×L) · dEᵀ (L×P)
                let e = &de[b * p * l..][..p * l];
                gemm(dk, l, p, 1.0, &kd[b * dk * l..], Layout::Normal, e, Layout::Transposed, 0.0, &mut gq[b * dk * p..]);
            }
            sink.accumulate(self.q, &gq);
        }
        if sink.wants(self.k) {
            let mut gk = vec![0.0; kd.len()];
            for b in 0..self.geo.batch {
                // dK_b (dk×L) = Q_b (dk×P) · dE (P×L)
                let e = &de[b * p * l..][..p * l];
                gemm(dk, p, l, 1.0, &qd[b * dk * p..], Layout::Normal, e, Layout::Normal, 0.0, &mut gk[b * dk * l..]);
            }
            sink.accumulate(self.k, &gk);
        }
    }
}

struct FullAttend {
    a: Var,
    v: Var,
    geo: AttnGeometry,
    dv: usize,
}

impl BackwardOp for FullAttend {
    fn name(&self) -> &'static str {
        "full_attend"
    }

    fn backward(&self, _out: &Tensor, go: &[f64], sink: &mut GradSink<'_>) {
        let (p, l, dv) = (self.geo.queries(), self.geo.keys(), self.dv);
        let (ad, vd) = (sink.value(self.a).data(), sink.value(self.v).data());
        if sink.wants(self.a) {
            let mut ga = vec![0.0; ad.len()];
            for b in 0..self.geo.batch {
                // dA_b (P×L) = dOᵀ (P×dv) · V_b (dv×L)
                gemm(p, dv, l, 1.0, &go[b * dv * p..], Layout::Transposed, &vd[b * dv * l..], Layout::Normal, 0.0, &mut ga[b * p * l..]);
            }
            sink.accumulate(self.a, &ga);
        }
        if sink.wants(self.v) {
            let mut gv = vec![0.0; vd.len()];
            for b in 0..self.geo.batch {
                // dV_b (dv×L) = dO (dv×P) · A_b (P×L)
                gemm(dv, p, l, 1.0, &go[b * dv * p..], Layout::Normal, &ad[b * p * l..], Layout::Normal, 0.0, &mut gv[b * dv * l..]);
            }
            sink.accumulate(self.v, &gv);
        }
    }
}

impl AttentionKernel for FullAttention {
    fn name(&self) -> &'static str {
        "full"
    }

    fn keys_per_query(&self, geo: &AttnGeometry) -> usize {
        geo.keys()
    }

    fn key_coords(&self, geo: &AttnGeometry, _h: usize, _w: usize) -> Vec<(usize, usize)> {
        let (hk, wk) = geo.key;
        (0..hk).flat_map(|i| (0..wk).map(move |j| (i, j))).collect()
    }

    fn affinity(&self, g: &mut Graph, q: Var, k: Var) -> Result<AffinityMap> {
        let (geo, dk) = projected_geometry(g, q, k)?;
        let (p, l) = (geo.queries(), geo.keys());
        let mut a = vec![0.0; geo.batch * p * l];
        {
            let (qd, kd) = (g.value(q).data(), g.value(k).data());
            for b in 0..geo.batch {
                // E_b (P×L) = Q_bᵀ (P×dk) · K_b (dk×L)
                gemm(p, dk, l, 1.0, &qd[b * dk * p..], Layout::Transposed, &kd[b * dk * l..], Layout::Normal, 0.0, &mut a[b * p * l..]);
            }
        }
        softmax_rows(&mut a, l)?;
        g.count("affinity", geo.batch as u64 * self.affinity_flops(&geo, dk));
        g.count("softmax", (geo.batch * p * l) as u64 * SOFTMAX_FLOPS_PER_ELEMENT);
        let weights = g.record(Tensor::from_parts(vec![geo.batch, p, l], a), &[q, k], FullAffinity { q, k, geo, dk });
        Ok(AffinityMap {
            weights,
            kernel: self.name(),
            geometry: geo,
            keys_per_query: l,
        })
    }

    fn attend(&self, g: &mut Graph, a: &AffinityMap, v: Var) -> Result<Var> {
        let dv = check_values(g, a, v)?;
        let geo = a.geometry;
        let (p, l) = (geo.queries(), geo.keys());
        let mut o = vec![0.0; geo.batch * dv * p];
        {
            let (ad, vd) = (g.value(a.weights).data(), g.value(v).data());
            for b in 0..geo.batch {
                // O_b (dv×P) = V_b (dv×L) · A_bᵀ (L×P)
                gemm(dv, l, p, 1.0, &vd[b * dv * l..], Layout::Normal, &ad[b * p * l..], Layout::Transposed, 0.0, &mut o[b * dv * p..]);
            }
        }
        g.count("aggregation", geo.batch as u64 * self.aggregation_flops(&geo, dv));
        let shape = vec![geo.batch, dv, geo.query.0, geo.query.1];
        Ok(g.record(Tensor::from_parts(shape, o), &[a.weights, v], FullAttend { a: a.weights, v, geo, dv }))
    }
}
