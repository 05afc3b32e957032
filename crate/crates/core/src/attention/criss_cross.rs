//! Criss-cross attention: each query sees the row and column of the key grid
//! through its anchor, the key cell containing the query.

use super::kernel::{
    check_values, projected_geometry, softmax_rows, softmax_rows_backward, to_channel_major, to_pixel_major,
    SOFTMAX_FLOPS_PER_ELEMENT,
};
use super::{AffinityMap, AttentionKernel, AttnGeometry};
use crate::error::Result;
use crate::tensor::{BackwardOp, GradSink, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default)]
pub struct CrissCrossAttention;

/// Key-grid cell of query `(h, w)`.
pub fn anchor(geo: &AttnGeometry, h: usize, w: usize) -> (usize, usize) {
    let ((qh, qw), (kh, kw)) = (geo.query, geo.key);
    (h * kh / qh, w * kw / qw)
}

/// Flat key index of every (query, slot) pair, `P×L` row-major.
fn key_table(geo: &AttnGeometry) -> Vec<usize> {
    let (hk, wk) = geo.key;
    let l = hk + wk - 1;
    let mut t = Vec::with_capacity(geo.queries() * l);
    for h in 0..geo.query.0 {
        for w in 0..geo.query.1 {
            let (ah, aw) = anchor(geo, h, w);
            t.extend((0..wk).map(|j| ah * wk + j));
            t.extend((0..hk).filter(|&i| i != ah).map(|i| i * wk + aw));
        }
    }
    t
}

struct CcAffinity {
    q: Var,
    k: Var,
    geo: AttnGeometry,
    dk: usize,
    /// Pixel-major copies of the inputs.
    qt: Vec<f64>,
    kt: Vec<f64>,
    table: Vec<usize>,
}

impl BackwardOp for CcAffinity {
    fn name(&self) -> &'static str {
        "criss_cross_affinity"
    }

    fn backward(&self, out: &Tensor, da: &[f64], sink: &mut GradSink<'_>) {
        let (n, p, nk, dk) = (self.geo.batch, self.geo.queries(), self.geo.keys(), self.dk);
        let l = self.geo.key.0 + self.geo.key.1 - 1;
        let de = softmax_rows_backward(out.data(), da, l);
        let mut gq = vec![0.0; self.qt.len()];
        let mut gk = vec![0.0; self.kt.len()];
        for b in 0..n {
            for i in 0..p {
                let row = (b * p + i) * l;
                let qi = &self.qt[(b * p + i) * dk..][..dk];
                let gqi = &mut gq[(b * p + i) * dk..][..dk];
                for (s, &key) in self.table[i * l..][..l].iter().enumerate() {
                    let e = de[row + s];
                    let kk = (b * nk + key) * dk;
                    for c in 0..dk {
                        gqi[c] += e * self.kt[kk + c];
                        gk[kk + c] += e * qi[c];
                    }
                }
            }
        }
        sink.accumulate(self.q, &to_channel_major(&gq, n, dk, p));
        sink.accumulate(self.k, &to_channel_major(&gk, n, dk, nk));
    }
}

struct CcAttend {
    a: Var,
    v: Var,
    geo: AttnGeometry,
    dv: usize,
    vt: Vec<f64>,
    table: Vec<usize>,
}

impl BackwardOp for CcAttend {
    fn name(&self) -> &'static str {
        "criss_cross_attend"
    }

    fn backward(&self, _out: &Tensor, go: &[f64], sink: &mut GradSink<'_>) {
        let (n, p, nk, dv) = (self.geo.batch, self.geo.queries(), self.geo.keys(), self.dv);
        let l = self.geo.key.0 + self.geo.key.1 - 1;
        let got = to_pixel_major(go, n, dv, p);
        let ad = sink.value(self.a).data();
        let mut ga = vec![0.0; ad.len()];
        let mut gv = vec![0.0; self.vt.len()];
        for b in 0..n {
            for i in 0..p {
                let row = (b * p + i) * l;
                let gi = &got[(b * p + i) * dv..][..dv];
                for (s, &key) in self.table[i * l..][..l].iter().enumerate() {
                    let kv = (b * nk + key) * dv;
                    let vk = &self.vt[kv..][..dv];
                    ga[row + s] = gi.iter().zip(vk).map(|(g, v)| g * v).sum();
                    let w = ad[row + s];
                    for (acc, g) in gv[kv..][..dv].iter_mut().zip(gi) {
                        *acc += w * g;
                    }
                }
            }
        }
        sink.accumulate(self.a, &ga);
        if sink.wants(self.v) {
            sink.accumulate(self.v, &to_channel_major(&gv, n, dv, nk));
        }
    }
}

impl AttentionKernel for CrissCrossAttention {
    fn name(&self) -> &'static str {
        "criss_cross"
    }

    fn keys_per_query(&self, geo: &AttnGeometry) -> usize {
        geo.key.0 + geo.key.1 - 1
    }

    fn key_coords(&self, geo: &AttnGeometry, h: usize, w: usize) -> Vec<(usize, usize)> {
        let (hk, wk) = geo.key;
        let (ah, aw) = anchor(geo, h, w);
        (0..wk)
            .map(|j| (ah, j))
            .chain((0..hk).filter(|&i| i != ah).map(|i| (i, aw)))
            .collect()
    }

    fn affinity(&self, g: &mut Graph, q: Var, k: Var) -> Result<AffinityMap> {
        let (geo, dk) = projected_geometry(g, q, k)?;
        let (n, p, nk) = (geo.batch, geo.queries(), geo.keys());
        let l = self.keys_per_query(&geo);
        let qt = to_pixel_major(g.value(q).data(), n, dk, p);
        let kt = to_pixel_major(g.value(k).data(), n, dk, nk);
        let table = key_table(&geo);
        let mut a = vec![0.0; n * p * l];
        for b in 0..n {
            for i in 0..p {
                let qi = &qt[(b * p + i) * dk..][..dk];
                let row = &mut a[(b * p + i) * l..][..l];
                for (e, &key) in row.iter_mut().zip(&table[i * l..][..l]) {
                    let kk = &kt[(b * nk + key) * dk..][..dk];
                    *e = qi.iter().zip(kk).map(|(x, y)| x * y).sum();
                }
            }
        }
        softmax_rows(&mut a, l)?;
        g.count("affinity", n as u64 * self.affinity_flops(&geo, dk));
        g.count("softmax", (n * p * l) as u64 * SOFTMAX_FLOPS_PER_ELEMENT);
        let shape = vec![n, geo.query.0, geo.query.1, l];
        let op = CcAffinity {
            q,
            k,
            geo,
            dk,
            qt,
            kt,
            table,
        };
        let weights = g.record(Tensor::from_parts(shape, a), &[q, k], op);
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
        let (n, p, nk) = (geo.batch, geo.queries(), geo.keys());
        let l = self.keys_per_query(&geo);
        let vt = to_pixel_major(g.value(v).data(), n, dv, nk);
        let table = key_table(&geo);
        let ad = g.value(a.weights).data();
        let mut ot = vec![0.0; n * p * dv];
        for b in 0..n {
            for i in 0..p {
                let row = &ad[(b * p + i) * l..][..l];
                let oi = &mut ot[(b * p + i) * dv..][..dv];
                for (&w, &key) in row.iter().zip(&table[i * l..][..l]) {
                    for (o, x) in oi.iter_mut().zip(&vt[(b * nk + key) * dv..][..dv]) {
                        *o += w * x;
                    }
                }
            }
        }
        let o = to_channel_major(&ot, n, dv, p);
        g.count("aggregation", n as u64 * self.aggregation_flops(&geo, dv));
        let shape = vec![n, dv, geo.query.0, geo.query.1];
        let op = CcAttend {
            a: a.weights,
            v,
            geo,
            dv,
            vt,
            table,
        };
        Ok(g.record(Tensor::from_parts(shape, o), &[a.weights, v], op))
    }
}
