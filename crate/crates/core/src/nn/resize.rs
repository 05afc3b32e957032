//! Bilinear resampling with half-pixel centres and clamped borders.
//!
//! Output index `d` samples source coordinate `s = (d + 0.5)·(in/out) − 0.5`,
//! clamped to `[0, in − 1]`, and blends the two neighbours `floor(s)` and
//! `min(floor(s) + 1, in − 1)` by the fractional part of `s`.

use crate::error::{Error, Result};
use crate::tensor::{BackwardOp, GradSink, Graph, Tensor, Var};

/// FLOPs charged per output element (four multiply-adds).
pub const RESIZE_FLOPS_PER_OUTPUT: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = s.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(input - 1),
                frac: s - lo as f64,
            }
        })
        .collect()
}

/// `a + t·(b − a)`, kept inside `[min(a, b), max(a, b)]`.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

struct Resize {
    x: Var,
    planes: usize,
    h: usize,
    w: usize,
    ys: Vec<Tap>,
    xs: Vec<Tap>,
}

impl BackwardOp for Resize {
    fn name(&self) -> &'static str {
        "bilinear_resize"
    }

    fn backward(&self, _out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        let (oh, ow) = (self.ys.len(), self.xs.len());
        let Some(gx) = sink.grad_mut(self.x) else {
            return;
        };
        // Separable adjoint: rows first into `acc`, then columns into `gx`.
        let mut acc = vec![0.0; self.h * ow];
        for p in 0..self.planes {
            let dst = &mut gx[p * self.h * self.w..][..self.h * self.w];
            let src = &g[p * oh * ow..][..oh * ow];
            acc.fill(0.0);
            for (oy, ty) in self.ys.iter().enumerate() {
                let grow = &src[oy * ow..][..ow];
                let fy = ty.frac;
                for (ox, &d) in grow.iter().enumerate() {
                    acc[ty.lo * ow + ox] += d * (1.0 - fy);
                    acc[ty.hi * ow + ox] += d * fy;
                }
            }
            for r in 0..self.h {
                let arow = &acc[r * ow..][..ow];
                let drow = &mut dst[r * self.w..][..self.w];
                for (tx, &d) in self.xs.iter().zip(arow) {
                    drow[tx.lo] += d * (1.0 - tx.frac);
                    drow[tx.hi] += d * tx.frac;
                }
            }
        }
    }
}

pub fn bilinear_resize(g: &mut Graph, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4("bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize", "output size must be at least 1×1"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x);
    }
    let (ys, xs) = (taps(h, out_h), taps(w, out_w));
    let planes = n * c;
    let src = g.value(x).data();
    // Horizontal pass over every source row, then vertical blends of the
    // two rows each output row needs; same values as the 2-D formula.
    let mut rows = vec![0.0; h * out_w];
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &src[p * h * w..][..h * w];
        for (r, dst) in rows.chunks_exact_mut(out_w).enumerate() {
            let srow = &plane[r * w..][..w];
            for (d, tx) in dst.iter_mut().zip(&xs) {
                *d = lerp(srow[tx.lo], srow[tx.hi], tx.frac);
            }
        }
        for ty in &ys {
            let (top, bot) = (&rows[ty.lo * out_w..][..out_w], &rows[ty.hi * out_w..][..out_w]);
            out.extend(top.iter().zip(bot).map(|(&a, &b)| lerp(a, b, ty.frac)));
        }
    }
    g.count("resize", RESIZE_FLOPS_PER_OUTPUT * out.len() as u64);
    let op = Resize {
        x,
        planes,
        h,
        w,
        ys,
        xs,
    };
    Ok(g.record(Tensor::from_parts(vec![n, c, out_h, out_w], out), &[x], op))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ops, GradCheck, Rng};
    use proptest::prelude::*;

    fn resize_const(t: Tensor, oh: usize, ow: usize) -> Tensor {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = bilinear_resize(&mut g, x, oh, ow).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn hand_evaluated_upsample() {
        let t = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = resize_const(t, 4, 4);
        // s = 0.25 on both axes at output (1, 1)
        let want = 1.0 * 0.5625 + 2.0 * 0.1875 + 3.0 * 0.1875 + 4.0 * 0.0625;
        assert!((out.at(&[0, 0, 1, 1]) - want).abs() < 1e-15);
        assert_eq!(want, 1.75);
        // clamped corner
        assert_eq!(out.at(&[0, 0, 0, 0]), 1.0);
        assert_eq!(out.at(&[0, 0, 3, 3]), 4.0);
    }

    #[test]
    fn same_size_is_identity() {
        let mut rng = Rng::seeded(1);
        let t = Tensor::randn([2, 3, 5, 4], 1.0, &mut rng);
        assert_eq!(resize_const(t.clone(), 5, 4), t);
    }

    #[test]
    fn taps_of_identity_scale_are_exact() {
        for (d, tap) in taps(7, 7).iter().enumerate() {
            assert_eq!(tap.lo, d);
            assert_eq!(tap.frac, 0.0);
        }
    }

    #[test]
    fn gradients_up_and_down() {
        let mut rng = Rng::seeded(2);
        for (oh, ow) in [(7, 5), (2, 3), (1, 1)] {
            let x = Tensor::randn([1, 2, 3, 4], 1.0, &mut rng);
            let w = Tensor::randn([1, 2, oh, ow], 1.0, &mut rng);
            let r = GradCheck::default().run(
                |g, v| {
                    let y = bilinear_resize(g, v[0], oh, ow)?;
                    ops::weighted_sum(g, y, &w)
                },
                &[x],
            );
            assert!(r.passed(), "{oh}x{ow}: {r}");
        }
    }

    proptest! {
        #[test]
        fn constants_preserved_exactly(c in -1e3f64..1e3, h in 1usize..6, w in 1usize..6, oh in 1usize..12, ow in 1usize..12) {
            let out = resize_const(Tensor::full([1, 2, h, w], c), oh, ow);
            prop_assert!(out.data().iter().all(|&v| v == c));
        }

        #[test]
        fn output_is_convex_combination(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, oh in 1usize..12, ow in 1usize..12) {
            let mut rng = Rng::seeded(seed);
            let t = Tensor::randn([1, 1, h, w], 1.0, &mut rng);
            let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = resize_const(t, oh, ow);
            prop_assert!(out.data().iter().all(|&v| v >= lo && v <= hi));
        }
    }
}
