use crate::error::{Error, Result};
use crate::tensor::{gemm, BackwardOp, GradSink, Graph, Layout, Tensor, Var};

/// Geometry of one 2-D convolution over an N×C×H×W batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Range of output columns `ox` whose input column `ox·stride + kx − pad`
/// falls inside `[0, w)`.
fn valid_cols(geo: &Geometry, kx: usize) -> (usize, usize) {
    let Geometry { w, stride, pad, wo, .. } = *geo;
    // ox·stride ≥ pad − kx  and  ox·stride < w + pad − kx
    let lo = pad.saturating_sub(kx).div_ceil(stride).min(wo);
    let hi = (w + pad).saturating_sub(kx).div_ceil(stride).clamp(lo, wo);
    (lo, hi)
}

/// Patch matrix `[Cin·k·k, N·Ho·Wo]`, written front to back so that no
/// zero-filled buffer is needed.
fn im2col(x: &[f64], geo: &Geometry) -> Vec<f64> {
    let Geometry {
        n,
        cin,
        h,
        w,
        k,
        stride,
        pad,
        ho,
        wo,
        ..
    } = *geo;
    let mut col = Vec::with_capacity(geo.rows() * geo.cols());
    if k == 1 && stride == 1 && pad == 0 {
        for ci in 0..cin {
            for b in 0..n {
                col.extend_from_slice(&x[(b * cin + ci) * h * w..][..h * w]);
            }
        }
        return col;
    }
    let zeros = |col: &mut Vec<f64>, len: usize| col.extend(std::iter::repeat_n(0.0, len));
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_cols(geo, kx);
                for b in 0..n {
                    let src = &x[(b * cin + ci) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            zeros(&mut col, wo);
                            continue;
                        }
                        let srow = &src[iy as usize * w..][..w];
                        zeros(&mut col, lo);
                        if hi > lo {
                            let first = lo * stride + kx - pad;
                            if stride == 1 {
                                col.extend_from_slice(&srow[first..first + hi - lo]);
                            } else {
                                col.extend(srow[first..].iter().step_by(stride).take(hi - lo));
                            }
                        }
                        zeros(&mut col, wo - hi);
                    }
                }
            }
        }
    }
    debug_assert_eq!(col.len(), geo.rows() * geo.cols());
    col
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients into `dx`.
fn col2im(col: &[f64], geo: &Geometry, dx: &mut [f64]) {
    let Geometry {
        n,
        cin,
        h,
        w,
        k,
        stride,
        pad,
        ho,
        wo,
        ..
    } = *geo;
    let cols = geo.cols();
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_cols(geo, kx);
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for b in 0..n {
                    let dst = &mut dx[(b * cin + ci) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize || hi == lo {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * w..][..w];
                        let srow = &src[(b * ho + oy) * wo..][lo..hi];
                        let first = lo * stride + kx - pad;
                        for (d, s) in drow[first..].iter_mut().step_by(stride).zip(srow) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

struct Conv {
    x: Var,
    weight: Var,
    bias: Option<Var>,
    geo: Geometry,
    col: Vec<f64>,
}

impl BackwardOp for Conv {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, _out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        let geo = &self.geo;
        let (cout, p, cols, rows) = (geo.cout, geo.ho * geo.wo, geo.cols(), geo.rows());
        // [N, Cout, P] -> [Cout, N·P]
        let mut gmat = Vec::with_capacity(cout * cols);
        for co in 0..cout {
            for b in 0..geo.n {
                gmat.extend_from_slice(&g[(b * cout + co) * p..][..p]);
            }
        }
        if let Some(bias) = self.bias {
            if let Some(gb) = sink.grad_mut(bias) {
                for (co, acc) in gb.iter_mut().enumerate() {
                    *acc += gmat[co * cols..(co + 1) * cols].iter().sum::<f64>();
                }
            }
        }
        if sink.wants(self.weight) {
            let mut gw = vec![0.0; cout * rows];
            gemm(cout, cols, rows, 1.0, &gmat, Layout::Normal, &self.col, Layout::Transposed, 0.0, &mut gw);
            sink.accumulate(self.weight, &gw);
        }
        if sink.wants(self.x) {
            let wv = sink.value(self.weight).data();
            let mut gcol = vec![0.0; rows * cols];
            gemm(rows, cout, cols, 1.0, wv, Layout::Transposed, &gmat, Layout::Normal, 0.0, &mut gcol);
            if let Some(gx) = sink.grad_mut(self.x) {
                col2im(&gcol, geo, gx);
            }
        }
    }
}

/// 2-D convolution of `x: N×Cin×H×W` with `weight: Cout×Cin×k×k` and an
/// optional per-channel `bias`.
pub fn conv2d(
    g: &mut Graph,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let (n, cin, h, w) = g.value(x).dims4("conv2d")?;
    let (cout, wcin, k, k2) = g.value(weight).dims4("conv2d")?;
    if wcin != cin || k != k2 {
        return Err(Error::shape("conv2d", g.shape(x), g.shape(weight)));
    }
    if let Some(b) = bias {
        if g.shape(b) != [cout] {
            return Err(Error::shape("conv2d", g.shape(weight), g.shape(b)));
        }
    }
    if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {k} with stride {stride} and padding {pad} does not fit a {h}×{w} input"),
        ));
    }
    let (ho, wo) = (conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad));
    let geo = Geometry {
        n,
        cin,
        h,
        w,
        cout,
        k,
        stride,
        pad,
        ho,
        wo,
    };
    let col = im2col(g.value(x).data(), &geo);
    let (rows, cols, p) = (geo.rows(), geo.cols(), ho * wo);
    let mut omat = vec![0.0; cout * cols];
    gemm(cout, rows, cols, 1.0, g.value(weight).data(), Layout::Normal, &col, Layout::Normal, 0.0, &mut omat);
    let bias_vals = bias.map(|b| g.value(b).data().to_vec());
    let mut out = Vec::with_capacity(n * cout * p);
    for b in 0..n {
        for co in 0..cout {
            let src = &omat[co * cols + b * p..][..p];
            match &bias_vals {
                Some(bv) => out.extend(src.iter().map(|v| v + bv[co])),
                None => out.extend_from_slice(src),
            }
        }
    }
    g.count(if k == 1 { "conv1x1" } else { "conv3x3" }, 2 * (cin * cout * k * k * p * n) as u64);
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    let op = Conv {
        x,
        weight,
        bias,
        geo,
        col,
    };
    Ok(g.record(Tensor::from_parts(vec![n, cout, ho, wo], out), &inputs, op))
}
