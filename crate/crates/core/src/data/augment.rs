//! Strong (contrastive-learning style) and weak (crop + flip) augmentation.
//!
//! Every random choice is drawn up front into a [`Draw`], so applying an
//! augmentation is a pure function of `(policy, image, draw)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Batch;
use crate::seed::{SeedStreams, StreamRng};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Strong,
    Weak,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongParams {
    pub crop_scale: (Real, Real),
    pub crop_ratio: (Real, Real),
    pub flip_p: Real,
    pub jitter_p: Real,
    pub brightness: Real,
    pub contrast: Real,
    pub saturation: Real,
    pub grayscale_p: Real,
    pub blur_p: Real,
    pub blur_sigma: (Real, Real),
    pub solarize_p: Real,
    pub solarize_threshold: Real,
}

impl Default for StrongParams {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            solarize_p: 0.1,
            solarize_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakParams {
    pub pad: usize,
    pub flip_p: Real,
}

impl Default for WeakParams {
    fn default() -> Self {
        Self { pad: 4, flip_p: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub kind: AugmentKind,
    #[serde(default)]
    pub strong: StrongParams,
    #[serde(default)]
    pub weak: WeakParams,
}

impl AugmentationPolicy {
    pub fn of(kind: AugmentKind) -> Self {
        Self {
            kind,
            strong: StrongParams::default(),
            weak: WeakParams::default(),
        }
    }

    pub fn strong() -> Self {
        Self::of(AugmentKind::Strong)
    }

    pub fn weak() -> Self {
        Self::of(AugmentKind::Weak)
    }

    pub fn none() -> Self {
        Self::of(AugmentKind::None)
    }

    /// Sample every random choice for one `h x w` image.
    pub fn draw(&self, rng: &mut StreamRng, h: usize, w: usize) -> Draw {
        match self.kind {
            AugmentKind::None => Draw::Identity,
            AugmentKind::Weak => {
                let p = self.weak.pad;
                Draw::Weak {
                    dy: rng.gen_range(0..=2 * p),
                    dx: rng.gen_range(0..=2 * p),
                    flip: rng.gen::<Real>() < self.weak.flip_p,
                }
            }
            AugmentKind::Strong => {
                let s = &self.strong;
                let crop = sample_crop(rng, h, w, s.crop_scale, s.crop_ratio);
                let flip = rng.gen::<Real>() < s.flip_p;
                let jitter = (rng.gen::<Real>() < s.jitter_p).then(|| {
                    (
                        rng.gen_range(1.0 - s.brightness..=1.0 + s.brightness),
                        rng.gen_range(1.0 - s.contrast..=1.0 + s.contrast),
                        rng.gen_range(1.0 - s.saturation..=1.0 + s.saturation),
                    )
                });
                let gray = rng.gen::<Real>() < s.grayscale_p;
                let blur = (rng.gen::<Real>() < s.blur_p).then(|| rng.gen_range(s.blur_sigma.0..=s.blur_sigma.1));
                let solarize = rng.gen::<Real>() < s.solarize_p;
                Draw::Strong {
                    crop,
                    flip,
                    jitter,
                    gray,
                    blur,
                    solarize,
                }
            }
        }
    }

    /// Apply a previously sampled draw to one `[C,H,W]` image.
    pub fn apply(&self, img: &[Real], shape: [usize; 3], draw: &Draw) -> Vec<Real> {
        let [c, h, w] = shape;
        let mut out = match *draw {
            Draw::Identity => return img.to_vec(),
            Draw::Weak { dy, dx, flip } => {
                let mut o = reflect_pad_crop(img, shape, self.weak.pad, dy, dx);
                if flip {
                    o = hflip(&o, shape);
                }
                o
            }
            Draw::Strong {
                crop,
                flip,
                jitter,
                gray,
                blur,
                solarize: sol,
            } => {
                let mut o = resized_crop(img, shape, crop);
                if flip {
                    o = hflip(&o, shape);
                }
                if let Some((b, ct, s)) = jitter {
                    o = color_jitter(&o, shape, b, ct, s);
                }
                if gray {
                    o = grayscale(&o, shape);
                }
                if let Some(sigma) = blur {
                    o = gaussian_blur(&o, shape, sigma);
                }
                if sol {
                    o = solarize(&o, self.strong.solarize_threshold);
                }
                o
            }
        };
        debug_assert_eq!(out.len(), c * h * w);
        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }
}

/// All random choices of one augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Draw {
    Identity,
    Weak {
        dy: usize,
        dx: usize,
        flip: bool,
    },
    Strong {
        /// `(top, left, height, width)` of the crop in source pixels.
        crop: (Real, Real, Real, Real),
        flip: bool,
        /// brightness, contrast, saturation factors
        jitter: Option<(Real, Real, Real)>,
        gray: bool,
        blur: Option<Real>,
        solarize: bool,
    },
}

impl Draw {
    pub fn flipped(&self) -> bool {
        matches!(self, Draw::Weak { flip: true, .. } | Draw::Strong { flip: true, .. })
    }
}

fn sample_crop(
    rng: &mut StreamRng,
    h: usize,
    w: usize,
    scale: (Real, Real),
    ratio: (Real, Real),
) -> (Real, Real, Real, Real) {
    let area = (h * w) as Real;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(scale.0..=scale.1);
        let r = rng.gen_range(lr0..=lr1).exp();
        let cw = (target * r).sqrt();
        let ch = (target / r).sqrt();
        if cw <= w as Real && ch <= h as Real {
            let top = rng.gen_range(0.0..=(h as Real - ch));
            let left = rng.gen_range(0.0..=(w as Real - cw));
            return (top, left, ch, cw);
        }
    }
    (0.0, 0.0, h as Real, w as Real)
}

/// Bilinear resample of the crop box back to the full image size.
pub fn resized_crop(img: &[Real], shape: [usize; 3], crop: (Real, Real, Real, Real)) -> Vec<Real> {
    let [c, h, w] = shape;
    let (top, left, ch, cw) = crop;
    let mut out = vec![0.0; c * h * w];
    let sample = |plane: &[Real], y: Real, x: Real| -> Real {
        let y = y.clamp(0.0, (h - 1) as Real);
        let x = x.clamp(0.0, (w - 1) as Real);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as Real, x - x0 as Real);
        let top_row = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
        let bot_row = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
        top_row * (1.0 - fy) + bot_row * fy
    };
    for k in 0..c {
        let plane = &img[k * h * w..(k + 1) * h * w];
        for i in 0..h {
            let sy = top + (i as Real + 0.5) * ch / h as Real - 0.5;
            for j in 0..w {
                let sx = left + (j as Real + 0.5) * cw / w as Real - 0.5;
                out[k * h * w + i * w + j] = sample(plane, sy, sx);
            }
        }
    }
    out
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Reflect-pad by `pad` and crop the original size at offset `(dy, dx)`.
fn reflect_pad_crop(img: &[Real], shape: [usize; 3], pad: usize, dy: usize, dx: usize) -> Vec<Real> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; c * h * w];
    for k in 0..c {
        for i in 0..h {
            let sy = reflect(i as isize + dy as isize - pad as isize, h);
            for j in 0..w {
                let sx = reflect(j as isize + dx as isize - pad as isize, w);
                out[k * h * w + i * w + j] = img[k * h * w + sy * w + sx];
            }
        }
    }
    out
}

pub fn hflip(img: &[Real], shape: [usize; 3]) -> Vec<Real> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; c * h * w];
    for r in 0..c * h {
        for j in 0..w {
            out[r * w + j] = img[r * w + (w - 1 - j)];
        }
    }
    out
}

fn luminance(img: &[Real], shape: [usize; 3]) -> Vec<Real> {
    let [c, h, w] = shape;
    let p = h * w;
    if c == 3 {
        (0..p)
            .map(|i| 0.299 * img[i] + 0.587 * img[p + i] + 0.114 * img[2 * p + i])
            .collect()
    } else {
        img[..p].to_vec()
    }
}

/// Brightness, contrast and saturation scaling, clamped after each step.
pub fn color_jitter(img: &[Real], shape: [usize; 3], brightness: Real, contrast: Real, saturation: Real) -> Vec<Real> {
    let [c, h, w] = shape;
    let p = h * w;
    let mut o: Vec<Real> = img.iter().map(|v| (v * brightness).clamp(0.0, 1.0)).collect();
    let mean = luminance(&o, shape).iter().sum::<Real>() / p as Real;
    o.iter_mut().for_each(|v| *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0));
    if c == 3 {
        let gray = luminance(&o, shape);
        for k in 0..c {
            for i in 0..p {
                let v = &mut o[k * p + i];
                *v = ((*v - gray[i]) * saturation + gray[i]).clamp(0.0, 1.0);
            }
        }
    }
    o
}

/// Replace every channel by the luminance (no-op for one channel).
pub fn grayscale(img: &[Real], shape: [usize; 3]) -> Vec<Real> {
    let [c, h, w] = shape;
    let g = luminance(img, shape);
    let mut out = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        out.extend_from_slice(&g);
    }
    out
}

/// Separable gaussian blur with edge clamping; radius `ceil(3 sigma)`.
pub fn gaussian_blur(img: &[Real], shape: [usize; 3], sigma: Real) -> Vec<Real> {
    let [c, h, w] = shape;
    let radius = ((3.0 * sigma).ceil() as usize).clamp(1, h.max(w));
    let mut kernel: Vec<Real> = (0..=2 * radius)
        .map(|i| {
            let d = i as Real - radius as Real;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: Real = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let r = radius as isize;
    let mut tmp = vec![0.0; c * h * w];
    let mut out = vec![0.0; c * h * w];
    for k in 0..c {
        let base = k * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let sx = (j as isize + t as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * img[base + i * w + sx];
                }
                tmp[base + i * w + j] = acc;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let sy = (i as isize + t as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[base + sy * w + j];
                }
                out[base + i * w + j] = acc;
            }
        }
    }
    out
}

/// Invert pixels strictly above `threshold`.
pub fn solarize(img: &[Real], threshold: Real) -> Vec<Real> {
    img.iter().map(|&v| if v > threshold { 1.0 - v } else { v }).collect()
}

/// Augment a single image with a fresh draw from `rng`.
pub fn augment(policy: &AugmentationPolicy, img: &[Real], shape: [usize; 3], rng: &mut StreamRng) -> Vec<Real> {
    let draw = policy.draw(rng, shape[1], shape[2]);
    policy.apply(img, shape, &draw)
}

/// Augment every image of a batch. Sample `id` in `epoch` uses the
/// substream `augment/<epoch>/<id>/<view>`, so draws do not depend on batch
/// composition or order.
pub fn augment_batch(
    policy: &AugmentationPolicy,
    batch: &Batch,
    streams: &SeedStreams,
    epoch: usize,
    view: u64,
) -> Tensor {
    if policy.kind == AugmentKind::None {
        return batch.images.clone();
    }
    let s = batch.images.shape();
    let shape = [s[1], s[2], s[3]];
    let mut data = Vec::with_capacity(batch.images.numel());
    for (r, &id) in batch.ids.iter().enumerate() {
        let mut rng = streams.keyed("augment", &[epoch as u64, id as u64, view]);
        data.extend(augment(policy, batch.images.row(r), shape, &mut rng));
    }
    Tensor::new(s.to_vec(), data).expect("shape preserved")
}

/// Two independent augmentations of each sample.
pub fn make_views(policy: &AugmentationPolicy, batch: &Batch, streams: &SeedStreams, epoch: usize) -> (Tensor, Tensor) {
    (
        augment_batch(policy, batch, streams, epoch, 0),
        augment_batch(policy, batch, streams, epoch, 1),
    )
}
