//! Synthetic occlusions, sensor noise and triplet datasets built from them.

mod dataset;

pub use dataset::{
    build_triplet_dataset, default_background, face_bbox, load_dataset, load_sample, read_manifest,
    sample_ground_truth, write_dataset, DatasetConfig, Manifest, ManifestSample, TripletSample, MANIFEST_FILE,
    MANIFEST_VERSION,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::Image;

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionShape {
    Rectangle,
    Ellipse,
    Polygon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum OcclusionColor {
    Solid { rgb: [f64; 3] },
    /// Independent uniform colour per pixel.
    RandomPerPixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Placement {
    Random,
    /// Occluder centre as fractions of the box, `(0.5, 0.5)` is central.
    Explicit { u: f64, v: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionSpec {
    pub shape: OcclusionShape,
    pub color: OcclusionColor,
    /// Fraction of the box area to cover.
    pub coverage: f64,
    pub placement: Placement,
    pub seed: u64,
}

impl OcclusionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.coverage) {
            return Err(Error::invalid(format!(
                "occlusion coverage must lie in [0,1], got {}",
                self.coverage
            )));
        }
        if let OcclusionColor::Solid { rgb } = self.color {
            if rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::invalid("occluder colour must lie in [0,1]"));
            }
        }
        if let Placement::Explicit { u, v } = self.placement {
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid("explicit placement must lie in [0,1]^2"));
            }
        }
        Ok(())
    }
}

/// Unit-area outline in local coordinates, scaled and placed later.
enum Outline {
    Rectangle { aspect: f64 },
    Ellipse { aspect: f64 },
    /// Star-shaped polygon, vertices relative to the centre.
    Polygon { points: Vec<[f64; 2]> },
}

impl Outline {
    fn random(shape: OcclusionShape, rng: &mut ChaCha8Rng) -> Self {
        let aspect = rng.random_range(0.6..1.6);
        match shape {
            OcclusionShape::Rectangle => Outline::Rectangle { aspect },
            OcclusionShape::Ellipse => Outline::Ellipse { aspect },
            OcclusionShape::Polygon => {
                let k = rng.random_range(5..9);
                let mut pts: Vec<[f64; 2]> = (0..k)
                    .map(|i| {
                        let a = (i as f64 + rng.random_range(-0.3..0.3)) * std::f64::consts::TAU
                            / k as f64;
                        let r = rng.random_range(0.6..1.0);
                        [r * a.cos() * aspect.sqrt(), r * a.sin() / aspect.sqrt()]
                    })
                    .collect();
                let area = polygon_area(&pts).abs();
                let s = 1.0 / area.sqrt();
                pts.iter_mut().for_each(|p| {
                    p[0] *= s;
                    p[1] *= s;
                });
                Outline::Polygon { points: pts }
            }
        }
    }

    /// Half extents at scale 1 (unit area).
    fn half_extent(&self) -> (f64, f64) {
        match self {
            Outline::Rectangle { aspect } => (0.5 * aspect.sqrt(), 0.5 / aspect.sqrt()),
            Outline::Ellipse { aspect } => {
                let r = 1.0 / std::f64::consts::PI.sqrt();
                (r * aspect.sqrt(), r / aspect.sqrt())
            }
            Outline::Polygon { points } => (
                points.iter().map(|p| p[0].abs()).fold(0.0, f64::max),
                points.iter().map(|p| p[1].abs()).fold(0.0, f64::max),
            ),
        }
    }

    /// Whether local point `(x, y)` lies inside at `scale` (linear).
    fn contains(&self, x: f64, y: f64, scale: f64) -> bool {
        let (x, y) = (x / scale, y / scale);
        match self {
            Outline::Rectangle { .. } => {
                let (hx, hy) = self.half_extent();
                x.abs() <= hx && y.abs() <= hy
            }
            Outline::Ellipse { .. } => {
                let (a, b) = self.half_extent();
                (x / a).powi(2) + (y / b).powi(2) <= 1.0
            }
            Outline::Polygon { points } => point_in_polygon(points, x, y),
        }
    }
}

fn polygon_area(pts: &[[f64; 2]]) -> f64 {
    let n = pts.len();
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
}

fn point_in_polygon(pts: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = pts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (pts[i], pts[j]);
        if (a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn shape_mask(
    outline: &Outline,
    bbox: &BBox,
    (cu, cv): (f64, f64),
    scale: f64,
    width: usize,
) -> (Vec<usize>, usize) {
    let (hx, hy) = outline.half_extent();
    let (bw, bh) = (bbox.width() as f64, bbox.height() as f64);
    // Keep the occluder inside the box where it fits.
    let place = |lo: usize, extent: f64, half: f64, frac: f64| {
        let free = (extent - 2.0 * half).max(0.0);
        lo as f64 + (extent - free) / 2.0 + frac * free
    };
    let cx = place(bbox.x0, bw, hx * scale, cu);
    let cy = place(bbox.y0, bh, hy * scale, cv);
    let mut pixels = Vec::new();
    for y in bbox.y0..bbox.y1 {
        for x in bbox.x0..bbox.x1 {
            if outline.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, scale) {
                pixels.push(y * width + x);
            }
        }
    }
    let n = pixels.len();
    (pixels, n)
}

/// Pastes an occluder into `bbox`. Returns the occluded image and the
/// per-pixel mask; pixels outside the mask are untouched.
pub fn overlay_occlusion(image: &Image, bbox: BBox, spec: &OcclusionSpec) -> Result<(Image, Vec<bool>)> {
    spec.validate()?;
    if bbox.x1 > image.width() || bbox.y1 > image.height() || bbox.area() == 0 {
        return Err(Error::invalid(format!(
            "box {bbox:?} is empty or outside the {}x{} image",
            image.width(),
            image.height()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let outline = Outline::random(spec.shape, &mut rng);
    let centre = match spec.placement {
        Placement::Random => (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
        Placement::Explicit { u, v } => (u, v),
    };
    let mut mask = vec![false; image.pixel_count()];
    let target = spec.coverage * bbox.area() as f64;
    if target > 0.0 {
        // Coverage grows with scale; bisect for the closest pixel count.
        let (mut lo, mut hi) = (0.0, 4.0 * (bbox.area() as f64).sqrt());
        let mut best = shape_mask(&outline, &bbox, centre, target.sqrt(), image.width());
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            let cand = shape_mask(&outline, &bbox, centre, mid, image.width());
            if (cand.1 as f64 - target).abs() < (best.1 as f64 - target).abs() {
                best = cand.clone();
            }
            if (cand.1 as f64) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        for p in best.0 {
            mask[p] = true;
        }
    }
    let mut out = image.clone();
    let data = out.data_mut();
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let rgb = match spec.color {
            OcclusionColor::Solid { rgb } => rgb,
            OcclusionColor::RandomPerPixel => [
                rng.random_range(0.0..=1.0),
                rng.random_range(0.0..=1.0),
                rng.random_range(0.0..=1.0),
            ],
        };
        data[3 * p..3 * p + 3].copy_from_slice(&rgb);
    }
    Ok((out, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian { sigma: f64 },
    SaltPepper { p: f64 },
    Speckle { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            NoiseKind::Gaussian { sigma } | NoiseKind::Speckle { sigma } => {
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return Err(Error::invalid("noise sigma must be nonnegative"));
                }
            }
            NoiseKind::SaltPepper { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::invalid("salt-and-pepper probability must lie in [0,1]"));
                }
            }
        }
        Ok(())
    }
}

/// Applies seeded noise; results are clamped to `[0, 1]`.
pub fn add_noise(image: &Image, spec: &NoiseSpec) -> Result<Image> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = image.clone();
    let data = out.data_mut();
    match spec.kind {
        NoiseKind::Gaussian { sigma } => {
            let n = Normal::new(0.0, 1.0).expect("unit normal");
            for v in data.iter_mut() {
                let z: f64 = n.sample(&mut rng);
                *v = (*v + sigma * z).clamp(0.0, 1.0);
            }
        }
        NoiseKind::Speckle { sigma } => {
            let n = Normal::new(0.0, 1.0).expect("unit normal");
            for v in data.iter_mut() {
                let z: f64 = n.sample(&mut rng);
                *v = (*v * (1.0 + sigma * z)).clamp(0.0, 1.0);
            }
        }
        NoiseKind::SaltPepper { p } => {
            for px in data.chunks_exact_mut(3) {
                let u: f64 = rng.random_range(0.0..1.0);
                if u < p / 2.0 {
                    px.fill(0.0);
                } else if u < p {
                    px.fill(1.0);
                }
            }
        }
    }
    Ok(out)
}
