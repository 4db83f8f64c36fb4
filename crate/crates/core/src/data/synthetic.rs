//! Desk-scale shape benchmark: one geometric shape per class drawn at a
//! jittered position and size on a noisy background.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::seed::SeedStreams;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    HBar,
    VBar,
    Cross,
    Disc,
    Ring,
    Square,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::HBar,
        ShapeKind::VBar,
        ShapeKind::Cross,
        ShapeKind::Disc,
        ShapeKind::Ring,
        ShapeKind::Square,
    ];

    /// Whether pixel offset `(dx, dy)` from the center is inside a shape of
    /// half-extent `s`.
    fn covers(self, dx: Real, dy: Real, s: Real) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        let r = (dx * dx + dy * dy).sqrt();
        match self {
            ShapeKind::HBar => ay <= 1.0 && ax <= s + 1.0,
            ShapeKind::VBar => ax <= 1.0 && ay <= s + 1.0,
            ShapeKind::Cross => (ax <= 0.6 && ay <= s + 0.5) || (ay <= 0.6 && ax <= s + 0.5),
            ShapeKind::Disc => r <= s,
            ShapeKind::Ring => r <= s + 0.5 && r >= s - 0.9,
            ShapeKind::Square => {
                let m = ax.max(ay);
                m <= s + 0.5 && m >= s - 0.5
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_per_class: usize,
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub seed: u64,
    /// Standard deviation of per-pixel gaussian background noise.
    pub noise: Real,
    /// Range of shape-over-background intensity.
    pub contrast: (Real, Real),
    /// Maximum center offset in pixels.
    pub jitter: Real,
    pub split: Split,
}

impl SyntheticSpec {
    pub fn new(n_per_class: usize, classes: usize, seed: u64) -> Self {
        Self {
            n_per_class,
            classes,
            channels: 1,
            size: 16,
            seed,
            noise: 0.08,
            contrast: (0.2, 0.4),
            jitter: 3.0,
            split: Split::Train,
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.classes > ShapeKind::ALL.len() {
            return Err(Error::Data(format!(
                "{} classes requested but only {} shape kinds exist",
                self.classes,
                ShapeKind::ALL.len()
            )));
        }
        if self.classes < 2 {
            return Err(Error::Data("need at least two classes".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Data("synthetic images have 1 or 3 channels".into()));
        }
        if self.size < 8 {
            return Err(Error::Data("synthetic images need size >= 8".into()));
        }
        let streams = SeedStreams::new(self.seed);
        let mut rng = streams.stream(match self.split {
            Split::Train => "synthetic/train",
            Split::Test => "synthetic/test",
        });
        let noise = Normal::new(0.0, self.noise.max(0.0) as f64).expect("finite sigma");
        let (c, n) = (self.channels, self.size);
        let total = self.n_per_class * self.classes;
        let mut images = Vec::with_capacity(total * c * n * n);
        let mut labels = Vec::with_capacity(total);
        let scale = n as Real / 16.0;
        let mid = (n as Real - 1.0) / 2.0;
        // interleave classes so any prefix is roughly balanced
        for _ in 0..self.n_per_class {
            for (k, kind) in ShapeKind::ALL.iter().take(self.classes).enumerate() {
                let cx = mid + rng.gen_range(-self.jitter..=self.jitter) * scale;
                let cy = mid + rng.gen_range(-self.jitter..=self.jitter) * scale;
                let half = rng.gen_range(2.5..=4.0) * scale;
                let background: Real = rng.gen_range(0.2..0.5);
                let contrast: Real = rng.gen_range(self.contrast.0..=self.contrast.1);
                let tint: Vec<Real> = (0..c)
                    .map(|_| if c == 1 { 1.0 } else { rng.gen_range(0.5..=1.0) })
                    .collect();
                for ch in 0..c {
                    for y in 0..n {
                        for x in 0..n {
                            let mut v = background + noise.sample(&mut rng) as Real;
                            if kind.covers(x as Real - cx, y as Real - cy, half) {
                                v += contrast * tint[ch];
                            }
                            images.push(v.clamp(0.0, 1.0));
                        }
                    }
                }
                labels.push(k as u8);
            }
        }
        Dataset::new([c, n, n], self.classes, images, labels, self.split)
    }
}

/// `n_per_class` samples of each of `classes` shape kinds, 1x16x16.
pub fn gen_synthetic(n_per_class: usize, classes: usize, seed: u64) -> Result<Dataset> {
    SyntheticSpec::new(n_per_class, classes, seed).generate()
}
