use crate::error::{Error, Result};
use crate::tensor::{BackwardOp, GradSink, Graph, Tensor, Var};

struct AvgPool {
    x: Var,
    area: usize,
}

impl BackwardOp for AvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, _out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        let scale = 1.0 / self.area as f64;
        if let Some(gx) = sink.grad_mut(self.x) {
            for (plane, d) in gx.chunks_exact_mut(self.area).zip(g) {
                for v in plane {
                    *v += d * scale;
                }
            }
        }
    }
}

/// Per-channel spatial mean: `N×C×H×W → N×C×1×1`.
pub fn global_avg_pool(g: &mut Graph, x: Var) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4("global_avg_pool")?;
    let area = h * w;
    let data = g
        .value(x)
        .data()
        .chunks_exact(area)
        .map(|p| p.iter().sum::<f64>() / area as f64)
        .collect();
    Ok(g.record(Tensor::from_parts(vec![n, c, 1, 1], data), &[x], AvgPool { x, area }))
}

struct Expand {
    x: Var,
    area: usize,
}

impl BackwardOp for Expand {
    fn name(&self) -> &'static str {
        "expand_spatial"
    }

    fn backward(&self, _out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        if let Some(gx) = sink.grad_mut(self.x) {
            for (acc, plane) in gx.iter_mut().zip(g.chunks_exact(self.area)) {
                *acc += plane.iter().sum::<f64>();
            }
        }
    }
}

/// Broadcasts `N×C×1×1` over an `h×w` grid.
pub fn expand_spatial(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let (n, c, xh, xw) = g.value(x).dims4("expand_spatial")?;
    if (xh, xw) != (1, 1) {
        return Err(Error::invalid(
            "expand_spatial",
            format!("expected a 1×1 map, got {xh}×{xw}"),
        ));
    }
    let area = h * w;
    let mut data = Vec::with_capacity(n * c * area);
    for &v in g.value(x).data() {
        data.extend(std::iter::repeat_n(v, area));
    }
    Ok(g.record(Tensor::from_parts(vec![n, c, h, w], data), &[x], Expand { x, area }))
}
