//! Pixel-wise cross-entropy with online hard example mining (OHEM).

use crate::error::{Error, Result};
use crate::tensor::{BackwardOp, GradSink, Graph, Tensor, Var};

pub const IGNORE_INDEX: u32 = 255;

/// Integer class map of shape `N×H×W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::invalid(
                "label_map",
                format!("{}×{}×{} labels expected, got {}", n, h, w, data.len()),
            ));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, label: u32) -> Self {
        LabelMap {
            n,
            h,
            w,
            data: vec![label; n * h * w],
        }
    }

    /// Nearest-neighbour resampling with half-pixel centres.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> LabelMap {
        let pick = |d: usize, input: usize, output: usize| {
            (((d as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1)
        };
        let mut data = Vec::with_capacity(self.n * out_h * out_w);
        for b in 0..self.n {
            for oy in 0..out_h {
                let sy = pick(oy, self.h, out_h);
                for ox in 0..out_w {
                    let sx = pick(ox, self.w, out_w);
                    data.push(self.data[(b * self.h + sy) * self.w + sx]);
                }
            }
        }
        LabelMap {
            n: self.n,
            h: out_h,
            w: out_w,
            data,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&l| l != IGNORE_INDEX && l as usize >= classes)
        {
            Some(bad) => Err(Error::invalid(
                "cross_entropy",
                format!("label {bad} outside [0, {classes}) and not the ignore index"),
            )),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OhemConfig {
    /// Pixels whose true-class probability is below this are hard.
    pub prob_threshold: f64,
    /// Fraction of valid pixels that always contributes.
    pub min_kept_fraction: f64,
}

impl Default for OhemConfig {
    fn default() -> Self {
        OhemConfig {
            prob_threshold: 0.7,
            min_kept_fraction: 1.0 / 16.0,
        }
    }
}

impl OhemConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v <= 1.0;
        if !ok(self.prob_threshold) || !ok(self.min_kept_fraction) {
            return Err(Error::invalid(
                "ohem",
                format!("threshold and min-kept fraction must lie in (0, 1], got {self:?}"),
            ));
        }
        Ok(())
    }

    pub fn min_kept(&self, valid: usize) -> usize {
        ((self.min_kept_fraction * valid as f64).ceil() as usize).min(valid)
    }
}

fn check_logits(logits: &Tensor, labels: &LabelMap) -> Result<(usize, usize, usize)> {
    let (n, k, h, w) = logits.dims4("cross_entropy")?;
    if (n, h, w) != (labels.n, labels.h, labels.w) {
        return Err(Error::shape(
            "cross_entropy",
            logits.shape(),
            &[labels.n, labels.h, labels.w],
        ));
    }
    labels.validate(k)?;
    Ok((n, k, h * w))
}

/// Per-pixel softmax over the class axis.
fn class_softmax(logits: &[f64], n: usize, k: usize, area: usize) -> Vec<f64> {
    let mut probs = vec![0.0; logits.len()];
    for b in 0..n {
        for p in 0..area {
            let at = |c: usize| (b * k + c) * area + p;
            let max = (0..k).map(|c| logits[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..k {
                let e = (logits[at(c)] - max).exp();
                probs[at(c)] = e;
                z += e;
            }
            for c in 0..k {
                probs[at(c)] /= z;
            }
        }
    }
    probs
}

/// OHEM selection: every valid pixel whose true-class probability is below
/// the threshold, topped up with the least confident remaining pixels until
/// `ceil(min_kept_fraction · valid)` are kept. Ignored pixels never count.
pub fn ohem_mask(logits: &Tensor, labels: &LabelMap, cfg: &OhemConfig) -> Result<Vec<bool>> {
    cfg.validate()?;
    let (n, k, area) = check_logits(logits, labels)?;
    let probs = class_softmax(logits.data(), n, k, area);
    let mut valid: Vec<(f64, usize)> = Vec::new();
    for b in 0..n {
        for p in 0..area {
            let pix = b * area + p;
            let l = labels.data[pix];
            if l != IGNORE_INDEX {
                valid.push((probs[(b * k + l as usize) * area + p], pix));
            }
        }
    }
    let mut mask = vec![false; labels.data.len()];
    let min_kept = cfg.min_kept(valid.len());
    let hard = valid.iter().filter(|(p, _)| *p < cfg.prob_threshold).count();
    if hard >= min_kept {
        for &(p, pix) in &valid {
            mask[pix] = p < cfg.prob_threshold;
        }
    } else {
        valid.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, pix) in valid.iter().take(min_kept) {
            mask[pix] = true;
        }
    }
    Ok(mask)
}

struct MaskedCrossEntropy {
    logits: Var,
    probs: Vec<f64>,
    targets: Vec<Option<usize>>,
    n: usize,
    k: usize,
    area: usize,
    count: usize,
}

impl BackwardOp for MaskedCrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, _out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        if self.count == 0 {
            return;
        }
        let scale = g[0] / self.count as f64;
        let (k, area) = (self.k, self.area);
        let Some(gl) = sink.grad_mut(self.logits) else {
            return;
        };
        for b in 0..self.n {
            for p in 0..area {
                let Some(y) = self.targets[b * area + p] else {
                    continue;
                };
                for c in 0..k {
                    let i = (b * k + c) * area + p;
                    let onehot = if c == y { 1.0 } else { 0.0 };
                    gl[i] += scale * (self.probs[i] - onehot);
                }
            }
        }
    }
}

/// Mean of `−log p_true` over pixels selected by `mask`; zero when none is.
pub fn cross_entropy_masked(g: &mut Graph, logits: Var, labels: &LabelMap, mask: &[bool]) -> Result<Var> {
    let (n, k, area) = check_logits(g.value(logits), labels)?;
    if mask.len() != labels.data.len() {
        return Err(Error::invalid("cross_entropy", "mask length differs from label count"));
    }
    let ld = g.value(logits).data();
    let probs = class_softmax(ld, n, k, area);
    let targets: Vec<Option<usize>> = labels
        .data
        .iter()
        .zip(mask)
        .map(|(&l, &m)| (m && l != IGNORE_INDEX).then_some(l as usize))
        .collect();
    let mut total = 0.0;
    let mut count = 0;
    for b in 0..n {
        for p in 0..area {
            let Some(y) = targets[b * area + p] else {
                continue;
            };
            let at = |c: usize| ld[(b * k + c) * area + p];
            let max = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..k).map(|c| (at(c) - max).exp()).sum::<f64>().ln();
            total += lse - at(y);
            count += 1;
        }
    }
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    let op = MaskedCrossEntropy {
        logits,
        probs,
        targets,
        n,
        k,
        area,
        count,
    };
    Ok(g.record(Tensor::scalar(loss), &[logits], op))
}

pub fn ohem_cross_entropy(g: &mut Graph, logits: Var, labels: &LabelMap, cfg: &OhemConfig) -> Result<Var> {
    let mask = ohem_mask(g.value(logits), labels, cfg)?;
    cross_entropy_masked(g, logits, labels, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{GradCheck, Rng};
    use proptest::prelude::*;

    fn loss_of(logits: Tensor, labels: &LabelMap, cfg: &OhemConfig) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let l = g.param(logits);
        let y = ohem_cross_entropy(&mut g, l, labels, cfg).unwrap();
        g.backward(y).unwrap();
        (g.value(y).item(), g.grad_or_zeros(l))
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let labels = LabelMap::new(1, 2, 2, vec![0, 1, 2, 1]).unwrap();
        let mut logits = Tensor::zeros([1, 3, 2, 2]);
        for (p, &l) in labels.data.iter().enumerate() {
            logits.data_mut()[l as usize * 4 + p] = 30.0;
        }
        let (loss, _) = loss_of(logits, &labels, &OhemConfig::default());
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let labels = LabelMap::new(2, 3, 3, (0..18).map(|i| i % 4).collect()).unwrap();
        let (loss, _) = loss_of(Tensor::zeros([2, 4, 3, 3]), &labels, &OhemConfig::default());
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_gives_zero_loss_and_gradient() {
        let labels = LabelMap::filled(1, 3, 3, IGNORE_INDEX);
        let mut rng = Rng::seeded(1);
        let (loss, grad) = loss_of(Tensor::randn([1, 4, 3, 3], 1.0, &mut rng), &labels, &OhemConfig::default());
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let labels = LabelMap::new(1, 1, 2, vec![0, 7]).unwrap();
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros([1, 3, 1, 2]));
        assert!(ohem_cross_entropy(&mut g, l, &labels, &OhemConfig::default()).is_err());
    }

    #[test]
    fn backfill_picks_least_confident() {
        // every pixel is confident, so only min_kept = ceil(4/16) = 1 pixel is
        // kept: the one with the lowest true-class probability
        let labels = LabelMap::new(1, 1, 4, vec![0, 0, 0, 0]).unwrap();
        let margins = [5.0, 3.0, 7.0, 4.0];
        let mut logits = Tensor::zeros([1, 2, 1, 4]);
        logits.data_mut()[..4].copy_from_slice(&margins);
        let mask = ohem_mask(&logits, &labels, &OhemConfig::default()).unwrap();
        assert_eq!(mask, vec![false, true, false, false]);
    }

    #[test]
    fn nearest_downsample_picks_cell_centres() {
        let labels = LabelMap::new(1, 4, 4, (0..16).collect()).unwrap();
        let small = labels.resize_nearest(2, 2);
        assert_eq!(small.data, vec![5, 7, 13, 15]);
    }

    #[test]
    fn frozen_selection_gradient() {
        let mut rng = Rng::seeded(7);
        let logits = Tensor::randn([2, 3, 3, 2], 1.5, &mut rng);
        let mut labels = LabelMap::new(2, 3, 2, (0..12).map(|i| (i * 7 % 3) as u32).collect()).unwrap();
        labels.data[4] = IGNORE_INDEX;
        let mask = ohem_mask(&logits, &labels, &OhemConfig::default()).unwrap();
        let r = GradCheck::default().run(
            |g, v| cross_entropy_masked(g, v[0], &labels, &mask),
            &[logits],
        );
        assert!(r.passed(), "{r}");
    }

    proptest! {
        #[test]
        fn keeps_at_least_min_kept(seed in any::<u64>(), thr in 0.05f64..1.0, frac in 0.01f64..1.0, ignore_every in 2usize..6) {
            let mut rng = Rng::seeded(seed);
            let logits = Tensor::randn([2, 3, 4, 4], 3.0, &mut rng);
            let data = (0..32).map(|i| if i % ignore_every == 0 { IGNORE_INDEX } else { (i % 3) as u32 }).collect();
            let labels = LabelMap::new(2, 4, 4, data).unwrap();
            let cfg = OhemConfig { prob_threshold: thr, min_kept_fraction: frac };
            let mask = ohem_mask(&logits, &labels, &cfg).unwrap();
            let valid = labels.data.iter().filter(|&&l| l != IGNORE_INDEX).count();
            let kept = mask.iter().filter(|&&m| m).count();
            prop_assert!(kept >= cfg.min_kept(valid));
            prop_assert!(mask.iter().zip(&labels.data).all(|(&m, &l)| !m || l != IGNORE_INDEX));
        }
    }
}
