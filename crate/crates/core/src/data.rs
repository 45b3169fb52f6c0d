//! Synthetic segmentation data, augmentation and batching.
//!
//! Every sample is a pure function of `(spec, seed, index)`, so splits can be
//! regenerated or generated in parallel without coordination.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernels::bilinear_resize;
use crate::params::splitmix;
use crate::tensor::Tensor;

pub const IGNORE_INDEX: u8 = 255;

/// Sample counts of the three splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_a: usize,
    pub train_b: usize,
    pub val: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_a: 200, train_b: 100, val: 50 }
    }
}

impl SplitSpec {
    /// Splits `total` samples in the proportions 2000 : 975 : 500.
    pub fn proportional(total: usize) -> Self {
        let a = libm::round(total as f64 * 2000.0 / 3475.0) as usize;
        let b = libm::round(total as f64 * 975.0 / 3475.0) as usize;
        SplitSpec { train_a: a, train_b: b, val: total.saturating_sub(a + b) }
    }

    pub fn total(&self) -> usize {
        self.train_a + self.train_b + self.val
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_a == 0 || self.train_b == 0 || self.val == 0 {
            return Err(Error::Empty { what: "dataset split" });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub splits: SplitSpec,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { num_classes: 5, height: 64, width: 64, splits: SplitSpec::default(), seed: 0 }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(invalid("dataset", "num_classes must lie in [2, 255]"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(invalid("dataset", "images must be at least 8x8"));
        }
        self.splits.validate()
    }
}

/// One image with its label map. Pixel values are multiples of 1/255 so
/// that byte storage is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `H·W` class indices or [`IGNORE_INDEX`].
    pub label: Vec<u8>,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] * s[2] != self.label.len() {
            return Err(invalid("sample", "image and label shapes disagree"));
        }
        if let Some(&bad) = self.label.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= num_classes) {
            return Err(invalid("sample", format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train_a: Vec<SegSample>,
    pub train_b: Vec<SegSample>,
    pub val: Vec<SegSample>,
}

impl Dataset {
    /// trainA ∪ trainB, the training set of a stand-alone network.
    pub fn train_all(&self) -> Vec<&SegSample> {
        self.train_a.iter().chain(&self.train_b).collect()
    }
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let s = spec.splits;
    let gen = |range: core::ops::Range<usize>| range.map(|i| generate_sample(spec, i)).collect::<Vec<_>>();
    Ok(Dataset {
        spec: spec.clone(),
        train_a: gen(0..s.train_a),
        train_b: gen(s.train_a..s.train_a + s.train_b),
        val: gen(s.train_a + s.train_b..s.total()),
    })
}

/// Mean colour of a class; background (class 0) is a mid grey.
pub fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    const FIXED: [[f64; 3]; 5] = [
        [0.45, 0.45, 0.45],
        [0.85, 0.25, 0.2],
        [0.2, 0.7, 0.3],
        [0.25, 0.3, 0.85],
        [0.85, 0.8, 0.25],
    ];
    if class < FIXED.len() {
        return FIXED[class];
    }
    // Evenly spaced hues for larger label spaces.
    let h = (class - FIXED.len()) as f64 / (num_classes - FIXED.len()).max(1) as f64;
    let c = |off: f64| 0.5 + 0.35 * libm::cos(core::f64::consts::TAU * (h + off));
    [c(0.0), c(1.0 / 3.0), c(2.0 / 3.0)]
}

#[derive(Clone, Copy)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
    Stripe { cy: f64, cx: f64, ny: f64, nx: f64, half: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disk { cy, cx, r } => (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r,
            Shape::Stripe { cy, cx, ny, nx, half } => libm::fabs((y - cy) * ny + (x - cx) * nx) <= half,
        }
    }
}

fn quantize(v: f64) -> f64 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) / 255.0
}

/// Sample `index` of the dataset: a textured background with 3 to 6 shapes
/// painted in order, later shapes on top.
pub fn generate_sample(spec: &DatasetSpec, index: usize) -> SegSample {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(spec.seed ^ splitmix(index as u64 + 1)));
    let size = h.min(w) as f64;

    let mut label = vec![0u8; h * w];
    let n_shapes = rng.random_range(3..=6);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let class = rng.random_range(1..spec.num_classes);
        let shape = match rng.random_range(0..3) {
            0 => {
                let (sh, sw) = (rng.random_range(size / 6.0..size / 2.5), rng.random_range(size / 6.0..size / 2.5));
                let (y0, x0) = (rng.random_range(-sh / 2.0..h as f64 - sh / 2.0), rng.random_range(-sw / 2.0..w as f64 - sw / 2.0));
                Shape::Rect { y0, x0, y1: y0 + sh, x1: x0 + sw }
            }
            1 => Shape::Disk {
                cy: rng.random_range(0.0..h as f64),
                cx: rng.random_range(0.0..w as f64),
                r: rng.random_range(size / 10.0..size / 4.5),
            },
            _ => {
                let angle = rng.random_range(0.0..core::f64::consts::PI);
                Shape::Stripe {
                    cy: rng.random_range(0.0..h as f64),
                    cx: rng.random_range(0.0..w as f64),
                    ny: libm::cos(angle),
                    nx: libm::sin(angle),
                    half: rng.random_range(size / 16.0..size / 9.0),
                }
            }
        };
        let base = class_color(class, spec.num_classes);
        let color: [f64; 3] = core::array::from_fn(|c| base[c] + rng.random_range(-0.12..0.12));
        shapes.push((shape, class as u8, color));
    }

    let bg = class_color(0, spec.num_classes);
    let bg_jitter: [f64; 3] = core::array::from_fn(|_| rng.random_range(-0.08..0.08));
    let (fy, fx, phase) = (rng.random_range(0.1..0.5), rng.random_range(0.1..0.5), rng.random_range(0.0..6.3));
    let mut image = Tensor::zeros(&[3, h, w]);
    let data = image.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let texture = 0.1 * libm::sin(fy * py + phase) * libm::cos(fx * px);
            let mut rgb: [f64; 3] = core::array::from_fn(|c| bg[c] + bg_jitter[c] + texture);
            for (shape, class, color) in &shapes {
                if shape.contains(py, px) {
                    label[y * w + x] = *class;
                    rgb = *color;
                }
            }
            for c in 0..3 {
                let noise = rng.random_range(-0.08..0.08);
                data[(c * h + y) * w + x] = quantize(rgb[c] + noise);
            }
        }
    }
    SegSample { image, label }
}

/// Random choices of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    /// Top-left corner of the crop within the rescaled sample.
    pub crop_y: usize,
    pub crop_x: usize,
    pub flip: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams { scale: 1.0, crop_y: 0, crop_x: 0, flip: false }
    }

    /// Scale in `[0.5, 2]`, uniform crop offset, fair-coin flip.
    pub fn draw<R: Rng + ?Sized>(sample: &SegSample, crop: usize, rng: &mut R) -> Self {
        let scale = rng.random_range(0.5..=2.0);
        let (sh, sw) = scaled_size(sample.height(), sample.width(), scale);
        let crop_y = rng.random_range(0..=sh.saturating_sub(crop));
        let crop_x = rng.random_range(0..=sw.saturating_sub(crop));
        AugmentParams { scale, crop_y, crop_x, flip: rng.random_bool(0.5) }
    }
}

fn scaled_size(h: usize, w: usize, scale: f64) -> (usize, usize) {
    let r = |v: usize| (libm::round(v as f64 * scale) as usize).max(1);
    (r(h), r(w))
}

/// Nearest-neighbour source index under the half-pixel convention.
fn nearest(o: usize, in_len: usize, out_len: usize) -> usize {
    (((o as f64 + 0.5) * in_len as f64 / out_len as f64) as usize).min(in_len - 1)
}

/// Rescale (bilinear image, nearest label), crop `crop×crop` with zero /
/// ignore padding where the rescaled sample is too small, then flip.
pub fn augment(sample: &SegSample, params: &AugmentParams, crop: usize) -> SegSample {
    let (h, w) = (sample.height(), sample.width());
    let (sh, sw) = scaled_size(h, w, params.scale);
    let scaled = if (sh, sw) == (h, w) {
        sample.image.data().to_vec()
    } else {
        bilinear_resize(sample.image.data(), 3, h, w, sh, sw)
    };
    let mut image = vec![0.0; 3 * crop * crop];
    let mut label = vec![IGNORE_INDEX; crop * crop];
    for y in 0..crop {
        let sy = params.crop_y + y;
        if sy >= sh {
            break;
        }
        let ly = nearest(sy, h, sh);
        for x in 0..crop {
            let sx = params.crop_x + x;
            if sx >= sw {
                break;
            }
            let dx = if params.flip { crop - 1 - x } else { x };
            label[y * crop + dx] = sample.label[ly * w + nearest(sx, w, sw)];
            for c in 0..3 {
                image[(c * crop + y) * crop + dx] = scaled[(c * sh + sy) * sw + sx];
            }
        }
    }
    SegSample { image: Tensor::new(&[3, crop, crop], image).expect("consistent"), label }
}

/// Horizontal mirror of a sample.
pub fn flip(sample: &SegSample) -> SegSample {
    let (h, w) = (sample.height(), sample.width());
    let mut out = sample.clone();
    for y in 0..h {
        for x in 0..w {
            out.label[y * w + x] = sample.label[y * w + w - 1 - x];
            for c in 0..3 {
                out.image.data_mut()[(c * h + y) * w + x] = sample.image.data()[(c * h + y) * w + w - 1 - x];
            }
        }
    }
    out
}

/// A stacked `[N,3,H,W]` image batch with its flattened labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

/// Stacks same-sized samples into one batch.
pub fn collate(samples: &[SegSample]) -> Result<Batch> {
    let first = samples.first().ok_or(Error::Empty { what: "batch" })?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    let mut labels = Vec::with_capacity(samples.len() * first.label.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(invalid("collate", "samples in a batch must share a size"));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.label);
    }
    let images = Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], data)?;
    Ok(Batch { images, labels })
}

/// Seeded permutation of `0..len`.
pub fn shuffled(len: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Augments `samples[i]` for every `i` in `indices` (sample `j` of the batch
/// uses its own stream derived from `seed`) and stacks the results.
pub fn augmented_batch(samples: &[&SegSample], indices: &[usize], crop: usize, seed: u64) -> Result<Batch> {
    let out: Vec<SegSample> = indices
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(j as u64 + 1)));
            let params = AugmentParams::draw(samples[i], crop, &mut rng);
            augment(samples[i], &params, crop)
        })
        .collect();
    collate(&out)
}

/// Per-class pixel counts over non-ignored labels.
pub fn label_histogram<'a>(samples: impl IntoIterator<Item = &'a SegSample>, num_classes: usize) -> Vec<u64> {
    let mut hist = vec![0u64; num_classes];
    for s in samples {
        for &l in &s.label {
            if l != IGNORE_INDEX {
                hist[l as usize] += 1;
            }
        }
    }
    hist
}
