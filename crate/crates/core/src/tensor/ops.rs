//! Differentiable tensor primitives.

use super::gemm::{gemm, Layout};
use super::graph::{BackwardOp, GradSink, Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }
}

struct Binary {
    kind: BinaryKind,
    a: Var,
    b: Var,
}

impl BackwardOp for Binary {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(&self, _out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        let av = sink.value(self.a).data();
        let bv = sink.value(self.b).data();
        let at = |i: usize| if av.len() == 1 { av[0] } else { av[i] };
        let bt = |i: usize| if bv.len() == 1 { bv[0] } else { bv[i] };
        let kind = self.kind;
        // a and b may be the same variable; accumulate sequentially.
        if sink.wants(self.a) {
            let mut ga = vec![0.0; av.len()];
            for (i, gi) in g.iter().enumerate() {
                let d = match kind {
                    BinaryKind::Add | BinaryKind::Sub => *gi,
                    BinaryKind::Mul => gi * bt(i),
                    BinaryKind::Div => gi / bt(i),
                };
                ga[if av.len() == 1 { 0 } else { i }] += d;
            }
            sink.accumulate(self.a, &ga);
        }
        if sink.wants(self.b) {
            let mut gb = vec![0.0; bv.len()];
            for (i, gi) in g.iter().enumerate() {
                let d = match kind {
                    BinaryKind::Add => *gi,
                    BinaryKind::Sub => -gi,
                    BinaryKind::Mul => gi * at(i),
                    BinaryKind::Div => -gi * at(i) / (bt(i) * bt(i)),
                };
                gb[if bv.len() == 1 { 0 } else { i }] += d;
            }
            sink.accumulate(self.b, &gb);
        }
    }
}

/// Elementwise binary op. Shapes must be equal, or one side a single element.
pub fn binary(g: &mut Graph, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (g.value(a), g.value(b));
    let shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
        ta.shape().to_vec()
    } else if ta.numel() == 1 {
        tb.shape().to_vec()
    } else {
        return Err(Error::shape(kind.name(), ta.shape(), tb.shape()));
    };
    let n: usize = shape.iter().product();
    let (ad, bd) = (ta.data(), tb.data());
    let data: Vec<f64> = (0..n)
        .map(|i| {
            let x = if ad.len() == 1 { ad[0] } else { ad[i] };
            let y = if bd.len() == 1 { bd[0] } else { bd[i] };
            kind.apply(x, y)
        })
        .collect();
    Ok(g.record(Tensor::from_parts(shape, data), &[a, b], Binary { kind, a, b }))
}

pub fn add(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    binary(g, BinaryKind::Add, a, b)
}

pub fn sub(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    binary(g, BinaryKind::Sub, a, b)
}

pub fn mul(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    binary(g, BinaryKind::Mul, a, b)
}

pub fn div(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    binary(g, BinaryKind::Div, a, b)
}

struct Affine {
    x: Var,
    scale: f64,
}

impl BackwardOp for Affine {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn backward(&self, _out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        if let Some(gx) = sink.grad_mut(self.x) {
            for (a, b) in gx.iter_mut().zip(g) {
                *a += self.scale * b;
            }
        }
    }
}

/// `scale · x + shift` with constant reals.
pub fn affine(g: &mut Graph, x: Var, scale: f64, shift: f64) -> Var {
    let t = g.value(x);
    let data = t.data().iter().map(|v| scale * v + shift).collect();
    let out = Tensor::from_parts(t.shape().to_vec(), data);
    g.record(out, &[x], Affine { x, scale })
}

pub fn mul_scalar(g: &mut Graph, x: Var, s: f64) -> Var {
    affine(g, x, s, 0.0)
}

pub fn add_scalar(g: &mut Graph, x: Var, s: f64) -> Var {
    affine(g, x, 1.0, s)
}

struct Sum {
    x: Var,
    scale: f64,
}

impl BackwardOp for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, _out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        let d = g[0] * self.scale;
        if let Some(gx) = sink.grad_mut(self.x) {
            for v in gx {
                *v += d;
            }
        }
    }
}

pub fn sum(g: &mut Graph, x: Var) -> Var {
    let s = g.value(x).data().iter().sum();
    g.record(Tensor::scalar(s), &[x], Sum { x, scale: 1.0 })
}

pub fn mean(g: &mut Graph, x: Var) -> Var {
    let t = g.value(x);
    let n = t.numel() as f64;
    let s = t.data().iter().sum::<f64>() / n;
    g.record(Tensor::scalar(s), &[x], Sum { x, scale: 1.0 / n })
}

/// `Σ x ⊙ w` for a constant weight tensor of the same shape.
pub fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = mul(g, x, wv)?;
    Ok(sum(g, p))
}

struct Relu {
    x: Var,
}

impl BackwardOp for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, _out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        let xv = sink.value(self.x).data();
        if let Some(gx) = sink.grad_mut(self.x) {
            for ((a, &x), &d) in gx.iter_mut().zip(xv).zip(g) {
                if x > 0.0 {
                    *a += d;
                }
            }
        }
    }
}

pub fn relu(g: &mut Graph, x: Var) -> Var {
    let t = g.value(x);
    let data = t.data().iter().map(|&v| v.max(0.0)).collect();
    let out = Tensor::from_parts(t.shape().to_vec(), data);
    g.record(out, &[x], Relu { x })
}

struct Matmul {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
}

impl BackwardOp for Matmul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, _out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let av = sink.value(self.a).data();
        let bv = sink.value(self.b).data();
        if sink.wants(self.a) {
            // dA = dC · Bᵀ
            let mut ga = vec![0.0; m * k];
            gemm(m, n, k, 1.0, g, Layout::Normal, bv, Layout::Transposed, 0.0, &mut ga);
            sink.accumulate(self.a, &ga);
        }
        if sink.wants(self.b) {
            // dB = Aᵀ · dC
            let mut gb = vec![0.0; k * n];
            gemm(k, m, n, 1.0, av, Layout::Transposed, g, Layout::Normal, 0.0, &mut gb);
            sink.accumulate(self.b, &gb);
        }
    }
}

/// `[m×k] · [k×n] → [m×n]`.
pub fn matmul(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (g.value(a), g.value(b));
    let (m, k, k2, n) = match (ta.shape(), tb.shape()) {
        (&[m, k], &[k2, n]) => (m, k, k2, n),
        (sa, sb) => return Err(Error::shape("matmul", sa, sb)),
    };
    if k != k2 {
        return Err(Error::shape("matmul", ta.shape(), tb.shape()));
    }
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, ta.data(), Layout::Normal, tb.data(), Layout::Normal, 0.0, &mut c);
    g.count("matmul", 2 * (m * k * n) as u64);
    Ok(g.record(Tensor::from_parts(vec![m, n], c), &[a, b], Matmul { a, b, m, k, n }))
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

struct Softmax {
    x: Var,
    outer: usize,
    dim: usize,
    inner: usize,
}

impl BackwardOp for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        let y = out.data();
        let Some(gx) = sink.grad_mut(self.x) else {
            return;
        };
        for o in 0..self.outer {
            for i in 0..self.inner {
                let base = o * self.dim * self.inner + i;
                let dot: f64 = (0..self.dim)
                    .map(|j| {
                        let p = base + j * self.inner;
                        g[p] * y[p]
                    })
                    .sum();
                for j in 0..self.dim {
                    let p = base + j * self.inner;
                    gx[p] += y[p] * (g[p] - dot);
                }
            }
        }
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax(g: &mut Graph, x: Var, axis: usize) -> Result<Var> {
    let t = g.value(x);
    check_axis("softmax", t.shape(), axis)?;
    if !t.is_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let (outer, dim, inner) = split_axis(t.shape(), axis);
    let xd = t.data();
    let mut y = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * dim * inner + i;
            let max = (0..dim)
                .map(|j| xd[base + j * inner])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..dim {
                let e = (xd[base + j * inner] - max).exp();
                y[base + j * inner] = e;
                z += e;
            }
            for j in 0..dim {
                y[base + j * inner] /= z;
            }
        }
    }
    let shape = t.shape().to_vec();
    g.count("softmax", 5 * y.len() as u64);
    Ok(g.record(
        Tensor::from_parts(shape, y),
        &[x],
        Softmax {
            x,
            outer,
            dim,
            inner,
        },
    ))
}

struct Concat {
    parts: Vec<(Var, usize)>,
    outer: usize,
    inner: usize,
    total: usize,
}

impl BackwardOp for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, _out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        let mut offset = 0;
        for &(v, dim) in &self.parts {
            let chunk = dim * self.inner;
            if let Some(gv) = sink.grad_mut(v) {
                for o in 0..self.outer {
                    let src = &g[o * self.total * self.inner + offset..][..chunk];
                    for (a, b) in gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
            offset += chunk;
        }
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat(g: &mut Graph, parts: &[Var], axis: usize) -> Result<Var> {
    let Some(&first) = parts.first() else {
        return Err(Error::invalid("concat", "no inputs"));
    };
    if parts.len() == 1 {
        return Ok(first);
    }
    let base = g.value(first).shape().to_vec();
    check_axis("concat", &base, axis)?;
    let mut total = 0;
    let mut dims = Vec::with_capacity(parts.len());
    for &p in parts {
        let s = g.value(p).shape();
        let ragged = s.len() != base.len()
            || s.iter()
                .zip(&base)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b);
        if ragged {
            return Err(Error::shape("concat", &base, s));
        }
        dims.push(s[axis]);
        total += s[axis];
    }
    let (outer, _, inner) = split_axis(&base, axis);
    let mut data = vec![0.0; outer * total * inner];
    let mut offset = 0;
    for (&p, &dim) in parts.iter().zip(&dims) {
        let src = g.value(p).data();
        let chunk = dim * inner;
        for o in 0..outer {
            data[o * total * inner + offset..][..chunk]
                .copy_from_slice(&src[o * chunk..(o + 1) * chunk]);
        }
        offset += chunk;
    }
    let mut shape = base;
    shape[axis] = total;
    let op = Concat {
        parts: parts.iter().copied().zip(dims).collect(),
        outer,
        inner,
        total,
    };
    Ok(g.record(Tensor::from_parts(shape, data), parts, op))
}

struct Slice {
    x: Var,
    outer: usize,
    dim: usize,
    inner: usize,
    start: usize,
    len: usize,
}

impl BackwardOp for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(&self, _out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        let chunk = self.len * self.inner;
        if let Some(gx) = sink.grad_mut(self.x) {
            for o in 0..self.outer {
                let dst = &mut gx[(o * self.dim + self.start) * self.inner..][..chunk];
                for (a, b) in dst.iter_mut().zip(&g[o * chunk..(o + 1) * chunk]) {
                    *a += b;
                }
            }
        }
    }
}

/// Entries `start..start + len` along `axis`.
pub fn slice(g: &mut Graph, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
    let t = g.value(x);
    check_axis("slice", t.shape(), axis)?;
    if len == 0 || start + len > t.shape()[axis] {
        return Err(Error::invalid(
            "slice",
            format!(
                "range {start}..{} out of bounds for axis of size {}",
                start + len,
                t.shape()[axis]
            ),
        ));
    }
    let (outer, dim, inner) = split_axis(t.shape(), axis);
    let chunk = len * inner;
    let src = t.data();
    let mut data = Vec::with_capacity(outer * chunk);
    for o in 0..outer {
        data.extend_from_slice(&src[(o * dim + start) * inner..][..chunk]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    let op = Slice {
        x,
        outer,
        dim,
        inner,
        start,
        len,
    };
    Ok(g.record(Tensor::from_parts(shape, data), &[x], op))
}

struct Reshape {
    x: Var,
}

impl BackwardOp for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        sink.accumulate(self.x, g);
    }
}

pub fn reshape(g: &mut Graph, x: Var, shape: &[usize]) -> Result<Var> {
    let t = g.value(x);
    if shape.iter().product::<usize>() != t.numel() {
        return Err(Error::shape("reshape", t.shape(), shape));
    }
    let out = Tensor::new(shape.to_vec(), t.data().to_vec())?;
    Ok(g.record(out, &[x], Reshape { x }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{GradCheck, Rng};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_zero_and_hand_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let c = add(&mut g, a, b).unwrap();
        assert_eq!(g.value(c), &Tensor::zeros([2, 3]));

        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let c = add(&mut g, a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_one_is_exact() {
        let mut rng = Rng::seeded(3);
        let x = Tensor::randn([4, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let one = g.constant(Tensor::scalar(1.0));
        let y = mul(&mut g, xv, one).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([3, 2]));
        let err = add(&mut g, a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn matmul_hand_case_identity_and_zero() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = matmul(&mut g, a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);

        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let ai = matmul(&mut g, a, eye).unwrap();
        assert_eq!(g.value(ai), g.value(a));

        let zero = g.constant(Tensor::zeros([2, 3]));
        let az = matmul(&mut g, a, zero).unwrap();
        assert_eq!(g.value(az), &Tensor::zeros([2, 3]));

        let bad = g.constant(Tensor::zeros([3, 3]));
        assert!(matmul(&mut g, a, bad).is_err());
    }

    #[test]
    fn softmax_closed_form_and_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = softmax(&mut g, x, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

        let u = g.constant(Tensor::full([3, 5], 2.5));
        let y = softmax(&mut g, u, 1).unwrap();
        for v in g.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, f64::NAN]));
        assert!(matches!(
            softmax(&mut g, x, 0),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn concat_single_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones([2, 3]));
        assert_eq!(concat(&mut g, &[a], 1).unwrap(), a);
        let b = g.constant(Tensor::zeros([2, 5]));
        let c = concat(&mut g, &[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 8]);
        let ragged = g.constant(Tensor::zeros([3, 5]));
        assert!(concat(&mut g, &[a, ragged], 1).is_err());
    }

    #[test]
    fn slice_inverts_concat_bit_exactly() {
        let mut rng = Rng::seeded(11);
        let a = Tensor::randn([2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn([2, 2, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = concat(&mut g, &[av, bv], 1).unwrap();
        let a2 = slice(&mut g, c, 1, 0, 3).unwrap();
        let b2 = slice(&mut g, c, 1, 3, 2).unwrap();
        assert_eq!(g.value(a2), &a);
        assert_eq!(g.value(b2), &b);
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = Rng::seeded(17);
        let a = Tensor::randn([3, 4], 1.0, &mut rng);
        let b = Tensor::uniform([3, 4], 0.5, 2.0, &mut rng);
        let w = Tensor::randn([3, 4], 1.0, &mut rng);
        let check = GradCheck::default();
        for kind in [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul, BinaryKind::Div] {
            let r = check.run(
                |g, v| {
                    let y = binary(g, kind, v[0], v[1])?;
                    weighted_sum(g, y, &w)
                },
                &[a.clone(), b.clone()],
            );
            assert!(r.passed(), "{kind:?}: {r}");
        }
        let r = check.run(
            |g, v| {
                let y = relu(g, v[0]);
                weighted_sum(g, y, &w)
            },
            &[a.clone()],
        );
        assert!(r.passed(), "relu: {r}");
        let m = Tensor::randn([4, 2], 1.0, &mut rng);
        let wm = Tensor::randn([3, 2], 1.0, &mut rng);
        let r = check.run(
            |g, v| {
                let y = matmul(g, v[0], v[1])?;
                weighted_sum(g, y, &wm)
            },
            &[a.clone(), m],
        );
        assert!(r.passed(), "matmul: {r}");
        for axis in 0..2 {
            let r = check.run(
                |g, v| {
                    let y = softmax(g, v[0], axis)?;
                    weighted_sum(g, y, &w)
                },
                &[a.clone()],
            );
            assert!(r.passed(), "softmax axis {axis}: {r}");
        }
    }

    #[test]
    fn scalar_broadcast_gradient() {
        let mut rng = Rng::seeded(5);
        let a = Tensor::randn([2, 3], 1.0, &mut rng);
        let s = Tensor::scalar(1.7);
        let w = Tensor::randn([2, 3], 1.0, &mut rng);
        let r = GradCheck::default().run(
            |g, v| {
                let y = div(g, v[0], v[1])?;
                weighted_sum(g, y, &w)
            },
            &[a, s],
        );
        assert!(r.passed(), "{r}");
    }
}
