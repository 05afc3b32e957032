//! Deterministic synthetic scenes: rectangles, disks and stripes over a
//! textured background.

use crate::error::{Error, Result};
use crate::nn::LabelMap;
use crate::tensor::{Rng, Tensor};

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "rectangle", "disk", "stripe"];

/// Mean RGB of each class. Neighbouring palettes overlap once jitter is
/// added, so colour alone does not separate the classes.
pub const PALETTE: [[f64; 3]; NUM_CLASSES] = [
    [0.45, 0.45, 0.45],
    [0.70, 0.35, 0.30],
    [0.35, 0.60, 0.35],
    [0.35, 0.40, 0.70],
];

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub num_samples: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    /// Half-width of the uniform per-shape colour perturbation.
    pub color_jitter: f64,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            num_samples: 1024,
            height: 64,
            width: 64,
            noise: 0.08,
            color_jitter: 0.12,
            min_shapes: 2,
            max_shapes: 4,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("data.height", "image size must be positive"));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::config("data.min_shapes", "must not exceed data.max_shapes"));
        }
        if !(self.noise >= 0.0 && self.color_jitter >= 0.0) {
            return Err(Error::config("data.noise", "noise and jitter must be non-negative"));
        }
        Ok(())
    }

    /// Same generator settings, disjoint random stream.
    pub fn with_seed(&self, seed: u64, num_samples: usize) -> Self {
        DatasetSpec {
            seed,
            num_samples,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `3×H×W` in `[0, 1]`.
    pub image: Tensor,
    /// `H×W` class ids.
    pub labels: Vec<u32>,
}

#[derive(Clone, Copy)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
    /// Band of half-width `half` around the line through `(cy, cx)` with unit normal `(ny, nx)`.
    Stripe { cy: f64, cx: f64, ny: f64, nx: f64, half: f64 },
}

impl Shape {
    fn class(self) -> u32 {
        match self {
            Shape::Rect { .. } => 1,
            Shape::Disk { .. } => 2,
            Shape::Stripe { .. } => 3,
        }
    }

    fn contains(self, y: f64, x: f64) -> bool {
        match self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Stripe { cy, cx, ny, nx, half } => ((y - cy) * ny + (x - cx) * nx).abs() <= half,
        }
    }

    fn random(rng: &mut Rng, h: f64, w: f64) -> Shape {
        let s = h.min(w);
        match rng.below(3) {
            0 => {
                let (rh, rw) = (rng.range(0.2, 0.45) * s, rng.range(0.2, 0.45) * s);
                let (y0, x0) = (rng.range(0.0, h - rh), rng.range(0.0, w - rw));
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + rh,
                    x1: x0 + rw,
                }
            }
            1 => {
                let r = rng.range(0.1, 0.22) * s;
                Shape::Disk {
                    cy: rng.range(r, h - r),
                    cx: rng.range(r, w - r),
                    r,
                }
            }
            _ => {
                let theta = rng.range(0.0, std::f64::consts::PI);
                Shape::Stripe {
                    cy: rng.range(0.25 * h, 0.75 * h),
                    cx: rng.range(0.25 * w, 0.75 * w),
                    ny: theta.sin(),
                    nx: theta.cos(),
                    half: rng.range(0.04, 0.08) * s,
                }
            }
        }
    }
}

/// Renders sample `index` of `spec`; each sample owns an RNG stream.
pub fn generate_sample(spec: &DatasetSpec, index: usize) -> SegSample {
    let mut rng = Rng::stream(spec.seed, index as u64);
    let (h, w) = (spec.height, spec.width);
    let count = spec.min_shapes + rng.below(spec.max_shapes - spec.min_shapes + 1);
    let shapes: Vec<Shape> = (0..count).map(|_| Shape::random(&mut rng, h as f64, w as f64)).collect();
    let color = |class: u32, rng: &mut Rng| -> [f64; 3] {
        PALETTE[class as usize].map(|c| c + rng.range(-spec.color_jitter, spec.color_jitter))
    };
    let mut colors = vec![color(0, &mut rng)];
    colors.extend(shapes.iter().map(|s| color(s.class(), &mut rng)));

    let mut labels = vec![0u32; h * w];
    let mut image = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            // Later shapes are painted over earlier ones.
            let top = shapes.iter().rposition(|s| s.contains(py, px));
            let (label, rgb) = match top {
                Some(i) => (shapes[i].class(), colors[i + 1]),
                None => (0, colors[0]),
            };
            labels[y * w + x] = label;
            for c in 0..3 {
                image[(c * h + y) * w + x] = rgb[c];
            }
        }
    }
    if spec.noise > 0.0 {
        for v in &mut image {
            *v += spec.noise * rng.normal();
        }
    }
    for v in &mut image {
        *v = v.clamp(0.0, 1.0);
    }
    SegSample {
        image: Tensor::new([3, h, w], image).expect("sized by construction"),
        labels,
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SegSample>> {
    spec.validate()?;
    Ok((0..spec.num_samples).map(|i| generate_sample(spec, i)).collect())
}

/// Stacks the given samples into an `N×3×H×W` batch and its labels.
pub fn make_batch(samples: &[SegSample], indices: &[usize]) -> Result<(Tensor, LabelMap)> {
    let first = samples
        .get(*indices.first().ok_or_else(|| Error::invalid("make_batch", "empty batch"))?)
        .ok_or_else(|| Error::invalid("make_batch", "sample index out of range"))?;
    let shape = first.image.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let mut data = Vec::with_capacity(indices.len() * first.image.numel());
    let mut labels = Vec::with_capacity(indices.len() * h * w);
    for &i in indices {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::invalid("make_batch", "sample index out of range"))?;
        if s.image.shape() != shape.as_slice() {
            return Err(Error::shape("make_batch", s.image.shape(), &shape));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.labels);
    }
    let n = indices.len();
    Ok((Tensor::new([n, 3, h, w], data)?, LabelMap::new(n, h, w, labels)?))
}
