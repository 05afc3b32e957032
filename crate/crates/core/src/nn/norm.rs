use crate::error::{Error, Result};
use crate::tensor::{BackwardOp, GradSink, Graph, Tensor, Var};

/// Running statistics of one batch-normalisation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

struct BatchNorm {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    n: usize,
    c: usize,
    area: usize,
    training: bool,
}

impl BackwardOp for BatchNorm {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, _out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        let (n, c, area) = (self.n, self.c, self.area);
        let m = (n * area) as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * area;
                for i in off..off + area {
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * self.xhat[i];
                }
            }
        }
        sink.accumulate(self.beta, &sum_g);
        sink.accumulate(self.gamma, &sum_gx);
        let gamma = sink.value(self.gamma).data();
        let Some(gx) = sink.grad_mut(self.x) else {
            return;
        };
        for b in 0..n {
            for ch in 0..c {
                let scale = gamma[ch] * self.inv_std[ch];
                let off = (b * c + ch) * area;
                if self.training {
                    let mg = sum_g[ch] / m;
                    let mgx = sum_gx[ch] / m;
                    for i in off..off + area {
                        gx[i] += scale * (g[i] - mg - self.xhat[i] * mgx);
                    }
                } else {
                    for i in off..off + area {
                        gx[i] += scale * g[i];
                    }
                }
            }
        }
    }
}

/// Batch normalisation over `N×C×H×W`.
///
/// Training mode normalises with the (biased) batch statistics and folds them
/// into `stats` (the running variance receives the unbiased estimate). Eval
/// mode uses the running statistics only.
pub fn batch_norm(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &mut RunningStats,
    training: bool,
) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4("batch_norm")?;
    if g.shape(gamma) != [c] || g.shape(beta) != [c] || stats.mean.len() != c {
        return Err(Error::shape("batch_norm", g.shape(x), g.shape(gamma)));
    }
    let area = h * w;
    let m = n * area;
    let xd = g.value(x).data();
    let (mean, var) = if training {
        let mut mean = vec![0.0; c];
        for b in 0..n {
            for (ch, mu) in mean.iter_mut().enumerate() {
                *mu += xd[(b * c + ch) * area..][..area].iter().sum::<f64>();
            }
        }
        for mu in &mut mean {
            *mu /= m as f64;
        }
        let mut var = vec![0.0; c];
        for b in 0..n {
            for (ch, v) in var.iter_mut().enumerate() {
                *v += xd[(b * c + ch) * area..][..area]
                    .iter()
                    .map(|x| (x - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= m as f64;
        }
        let mom = stats.momentum;
        let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
        for ch in 0..c {
            stats.mean[ch] = (1.0 - mom) * stats.mean[ch] + mom * mean[ch];
            stats.var[ch] = (1.0 - mom) * stats.var[ch] + mom * var[ch] * unbias;
        }
        (mean, var)
    } else {
        (stats.mean.clone(), stats.var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
    let (gd, bd) = (g.value(gamma).data(), g.value(beta).data());
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * area;
            for i in off..off + area {
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                out[i] = gd[ch] * xhat[i] + bd[ch];
            }
        }
    }
    let shape = g.shape(x).to_vec();
    let op = BatchNorm {
        x,
        gamma,
        beta,
        xhat,
        inv_std,
        n,
        c,
        area,
        training,
    };
    Ok(g.record(Tensor::from_parts(shape, out), &[x, gamma, beta], op))
}
