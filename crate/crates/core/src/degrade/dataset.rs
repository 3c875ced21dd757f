use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    add_noise, overlay_occlusion, BBox, NoiseKind, NoiseSpec, OcclusionColor, OcclusionShape,
    OcclusionSpec, Placement,
};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{CoefficientVector, MorphableBasis, Segment, ROTATION, TRANSLATION};
use crate::render::{project_landmarks, render_face, Camera, Image, LandmarkSet, RenderedFrame};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

/// One guiding / occluded / noisy triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSample {
    pub identity: usize,
    pub sample: usize,
    pub guiding: Image,
    pub occluded: Image,
    pub noisy: Image,
    pub guiding_truth: Option<CoefficientVector>,
    pub guiding_landmarks: Option<LandmarkSet>,
    /// Truth of the capture the degraded images were made from; equals
    /// `guiding_truth` for paired datasets.
    pub degraded_truth: Option<CoefficientVector>,
    pub mask: Vec<bool>,
    pub occlusion: OcclusionSpec,
    pub noise: NoiseSpec,
}

impl TripletSample {
    pub fn id(&self) -> String {
        format!("i{:03}s{:02}", self.identity, self.sample)
    }
}

/// Ground-truth distribution and degradation ranges of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub identities: usize,
    pub per_identity: usize,
    /// Paired: degradations of the guiding image itself. Unpaired: each
    /// degraded sample is a separate capture of the identity with its own
    /// expression, pose and lighting.
    pub paired: bool,
    /// Standard deviations of the leading shape, expression and texture
    /// coefficients ...
    pub shape_std: f64,
    pub expression_std: f64,
    pub texture_std: f64,
    /// ... and coefficient `j` is scaled by `1 / (1 + j / spectral_knee)`,
    /// the decaying spectrum of a PCA model.
    pub spectral_knee: f64,
    /// Band-0 lighting per channel.
    pub ambient: f64,
    /// Coefficient of the view-axis band, the same for every channel.
    pub directional: f64,
    pub illumination_jitter: f64,
    pub rotation_std: f64,
    pub translation_std: f64,
    pub depth: f64,
    pub depth_std: f64,
    pub coverage_min: f64,
    pub coverage_max: f64,
    /// Noise models, cycled through by sample index.
    pub noise: Vec<NoiseKind>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            identities: 50,
            per_identity: 10,
            paired: true,
            shape_std: 0.3,
            expression_std: 0.2,
            texture_std: 0.3,
            spectral_knee: 4.0,
            ambient: 2.6,
            directional: -0.6,
            illumination_jitter: 0.1,
            rotation_std: 0.08,
            translation_std: 0.05,
            depth: 5.0,
            depth_std: 0.1,
            coverage_min: 0.3,
            coverage_max: 0.5,
            noise: vec![
                NoiseKind::Gaussian { sigma: 0.15 },
                NoiseKind::SaltPepper { p: 0.1 },
                NoiseKind::Speckle { sigma: 0.3 },
            ],
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.per_identity == 0 {
            return Err(Error::invalid("identity and per-identity counts must be positive"));
        }
        let stds = [
            self.shape_std,
            self.expression_std,
            self.texture_std,
            self.illumination_jitter,
            self.rotation_std,
            self.translation_std,
            self.depth_std,
        ];
        if stds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("standard deviations must be finite and nonnegative"));
        }
        if !(self.spectral_knee.is_finite() && self.spectral_knee > 0.0) {
            return Err(Error::invalid("spectral_knee must be positive"));
        }
        if !(0.0..=1.0).contains(&self.coverage_min)
            || !(self.coverage_min..=1.0).contains(&self.coverage_max)
        {
            return Err(Error::invalid("coverage range must satisfy 0 <= min <= max <= 1"));
        }
        if !(self.depth.is_finite() && self.depth > 0.0) {
            return Err(Error::invalid("depth must be positive"));
        }
        if self.noise.is_empty() {
            return Err(Error::invalid("at least one noise model is required"));
        }
        for &kind in &self.noise {
            NoiseSpec { kind, seed: 0 }.validate()?;
        }
        Ok(())
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("validated std")
}

fn fill(values: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    let d = normal(std);
    values.iter_mut().for_each(|v| *v = d.sample(rng));
}

fn fill_spectrum(values: &mut [f64], std: f64, knee: f64, rng: &mut ChaCha8Rng) {
    fill(values, std, rng);
    for (j, v) in values.iter_mut().enumerate() {
        *v /= 1.0 + j as f64 / knee;
    }
}

/// Redraws expression, illumination and pose: a new capture of the same
/// identity.
fn sample_capture(c: &mut CoefficientVector, cfg: &DatasetConfig, rng: &mut ChaCha8Rng) {
    fill_spectrum(c.segment_mut(Segment::Expression), cfg.expression_std, cfg.spectral_knee, rng);
    let jitter = normal(cfg.illumination_jitter);
    let illum = c.segment_mut(Segment::Illumination);
    for (i, v) in illum.iter_mut().enumerate() {
        let base = match i % 9 {
            0 => cfg.ambient,
            2 => cfg.directional,
            _ => 0.0,
        };
        *v = base + jitter.sample(rng);
    }
    let s = c.as_mut_slice();
    fill(&mut s[ROTATION], cfg.rotation_std, rng);
    fill(&mut s[TRANSLATION.start..TRANSLATION.start + 2], cfg.translation_std, rng);
    s[TRANSLATION.end - 1] = cfg.depth + normal(cfg.depth_std).sample(rng);
}

/// Draws a full ground-truth coefficient vector.
pub fn sample_ground_truth(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> CoefficientVector {
    let mut c = CoefficientVector::zeros();
    fill_spectrum(c.segment_mut(Segment::Shape), cfg.shape_std, cfg.spectral_knee, rng);
    fill_spectrum(c.segment_mut(Segment::Texture), cfg.texture_std, cfg.spectral_knee, rng);
    sample_capture(&mut c, cfg, rng);
    c
}

/// Smooth colour gradient behind every synthetic face.
pub fn default_background(width: usize, height: usize) -> Image {
    let mut img = Image::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let u = x as f64 / width.max(1) as f64;
            let v = y as f64 / height.max(1) as f64;
            img.set_pixel(x, y, [0.25 + 0.2 * u, 0.3, 0.35 + 0.2 * v]);
        }
    }
    img
}

/// Tight box around the covered pixels of a render.
pub fn face_bbox(frame: &RenderedFrame) -> Result<BBox> {
    let mut b = BBox {
        x0: usize::MAX,
        y0: usize::MAX,
        x1: 0,
        y1: 0,
    };
    for (p, _) in frame.coverage.iter().enumerate().filter(|(_, &c)| c) {
        let (x, y) = (p % frame.width, p / frame.width);
        b.x0 = b.x0.min(x);
        b.y0 = b.y0.min(y);
        b.x1 = b.x1.max(x + 1);
        b.y1 = b.y1.max(y + 1);
    }
    if b.x1 == 0 {
        return Err(Error::DegenerateRender("the face covers no pixels".into()));
    }
    Ok(b)
}

fn stream_rng(seed: u64, identity: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((identity as u64) << 32) | sample as u64);
    rng
}

const CLEAN_STREAM: usize = u32::MAX as usize;

struct Capture {
    truth: CoefficientVector,
    image: Image,
    bbox: BBox,
}

fn capture(basis: &MorphableBasis, camera: &Camera, truth: CoefficientVector, bg: &Image) -> Result<Capture> {
    let frame = render_face(basis, &truth, camera, Some(bg))?;
    let bbox = face_bbox(&frame)?;
    Ok(Capture {
        truth,
        image: frame.to_image(),
        bbox,
    })
}

fn random_occlusion(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> OcclusionSpec {
    let shape = [OcclusionShape::Rectangle, OcclusionShape::Ellipse, OcclusionShape::Polygon]
        [rng.random_range(0..3)];
    let color = if rng.random_bool(0.5) {
        OcclusionColor::Solid {
            rgb: [rng.random(), rng.random(), rng.random()],
        }
    } else {
        OcclusionColor::RandomPerPixel
    };
    let coverage = if cfg.coverage_max > cfg.coverage_min {
        rng.random_range(cfg.coverage_min..cfg.coverage_max)
    } else {
        cfg.coverage_min
    };
    OcclusionSpec {
        shape,
        color,
        coverage,
        placement: Placement::Random,
        seed: rng.random::<u64>() >> 1,
    }
}

/// Renders `identities x per_identity` triplets. Every sample draws from
/// its own stream of `seed`, so the result does not depend on scheduling.
pub fn build_triplet_dataset(
    basis: &MorphableBasis,
    camera: &Camera,
    cfg: &DatasetConfig,
    seed: u64,
) -> Result<Vec<TripletSample>> {
    cfg.validate()?;
    camera.validate()?;
    let bg = default_background(camera.image_width, camera.image_height);
    let clean: Vec<(Capture, LandmarkSet)> = (0..cfg.identities)
        .into_par_iter()
        .map(|i| {
            let truth = sample_ground_truth(cfg, &mut stream_rng(seed, i, CLEAN_STREAM));
            let lmk = project_landmarks(basis, &truth, camera)?;
            Ok((capture(basis, camera, truth, &bg)?, lmk))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.identities)
        .flat_map(|i| (0..cfg.per_identity).map(move |j| (i, j)))
        .collect();
    jobs.into_par_iter()
        .map(|(i, j)| {
            let (guide, lmk) = &clean[i];
            let mut rng = stream_rng(seed, i, j);
            let source = if cfg.paired {
                None
            } else {
                let mut truth = guide.truth.clone();
                sample_capture(&mut truth, cfg, &mut rng);
                Some(capture(basis, camera, truth, &bg)?)
            };
            let src = source.as_ref().unwrap_or(guide);
            let occlusion = random_occlusion(cfg, &mut rng);
            let (occluded, mask) = overlay_occlusion(&src.image, src.bbox, &occlusion)?;
            let noise = NoiseSpec {
                kind: cfg.noise[j % cfg.noise.len()],
                seed: rng.random::<u64>() >> 1,
            };
            let noisy = add_noise(&src.image, &noise)?;
            Ok(TripletSample {
                identity: i,
                sample: j,
                guiding: guide.image.clone(),
                occluded,
                noisy,
                guiding_truth: Some(guide.truth.clone()),
                guiding_landmarks: Some(lmk.clone()),
                degraded_truth: Some(src.truth.clone()),
                mask,
                occlusion,
                noise,
            })
        })
        .collect()
}

/// Dataset index stored next to the images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub paired: bool,
    pub identities: usize,
    pub per_identity: usize,
    pub camera: Camera,
    pub samples: Vec<ManifestSample>,
}

/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub id: String,
    pub identity: usize,
    pub sample: usize,
    pub guiding: String,
    pub occluded: String,
    pub noisy: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guiding_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guiding_landmarks: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded_truth: Option<String>,
    pub occlusion: OcclusionSpec,
    pub noise: NoiseSpec,
}

impl Manifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise manifest: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Manifest =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid manifest: {e}")))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn sample(&self, id: &str) -> Option<&ManifestSample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

/// Writes images, masks, truths and `manifest.toml` under `dir`.
pub fn write_dataset(
    dir: &Path,
    samples: &[TripletSample],
    camera: &Camera,
    cfg: &DatasetConfig,
    seed: u64,
) -> Result<Manifest> {
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let ident = format!("identity_{:03}", s.identity);
        let sdir = format!("{ident}/sample_{:02}", s.sample);
        let guiding = format!("{ident}/clean.ppm");
        let truth = format!("{ident}/clean.rgcv");
        let lmk = format!("{ident}/clean.lmk");
        if s.sample == 0 || !dir.join(&guiding).exists() {
            io::write_image(&dir.join(&guiding), &s.guiding)?;
        }
        let guiding_truth = match &s.guiding_truth {
            Some(c) => {
                io::write_coefficients(&dir.join(&truth), c)?;
                Some(truth)
            }
            None => None,
        };
        let guiding_landmarks = match &s.guiding_landmarks {
            Some(l) => {
                io::write_landmarks(&dir.join(&lmk), l)?;
                Some(lmk)
            }
            None => None,
        };
        let degraded_truth = match &s.degraded_truth {
            Some(c) => {
                let p = format!("{sdir}/truth.rgcv");
                io::write_coefficients(&dir.join(&p), c)?;
                Some(p)
            }
            None => None,
        };
        let occluded = format!("{sdir}/occluded.ppm");
        let noisy = format!("{sdir}/noisy.ppm");
        let mask = format!("{sdir}/mask.pgm");
        io::write_image(&dir.join(&occluded), &s.occluded)?;
        io::write_image(&dir.join(&noisy), &s.noisy)?;
        io::write_mask(&dir.join(&mask), s.occluded.width(), s.occluded.height(), &s.mask)?;
        records.push(ManifestSample {
            id: s.id(),
            identity: s.identity,
            sample: s.sample,
            guiding,
            occluded,
            noisy,
            mask,
            guiding_truth,
            guiding_landmarks,
            degraded_truth,
            occlusion: s.occlusion,
            noise: s.noise,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        paired: cfg.paired,
        identities: cfg.identities,
        per_identity: cfg.per_identity,
        camera: *camera,
        samples: records,
    };
    io::write_text(&dir.join(MANIFEST_FILE), &manifest.to_toml()?)?;
    Ok(manifest)
}

/// Reads a manifest (a file, or a directory holding `manifest.toml`) and
/// returns it with its directory.
pub fn read_manifest(path: &Path) -> Result<(Manifest, PathBuf)> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let bytes = io::read_bytes(&file)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Config(format!("{} is not UTF-8", file.display())))?;
    let manifest = Manifest::from_toml(&text)?;
    let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, dir))
}

/// Loads one manifest record back into memory.
pub fn load_sample(dir: &Path, r: &ManifestSample) -> Result<TripletSample> {
    let (w, h, mask) = io::read_mask(&dir.join(&r.mask))?;
    let occluded = io::read_image(&dir.join(&r.occluded))?;
    if (w, h) != (occluded.width(), occluded.height()) {
        return Err(Error::invalid(format!("mask {} does not match its image", r.mask)));
    }
    let opt = |p: &Option<String>| p.as_ref().map(|p| dir.join(p));
    Ok(TripletSample {
        identity: r.identity,
        sample: r.sample,
        guiding: io::read_image(&dir.join(&r.guiding))?,
        occluded,
        noisy: io::read_image(&dir.join(&r.noisy))?,
        guiding_truth: opt(&r.guiding_truth).map(|p| io::read_coefficients(&p)).transpose()?,
        guiding_landmarks: opt(&r.guiding_landmarks).map(|p| io::read_landmarks(&p)).transpose()?,
        degraded_truth: opt(&r.degraded_truth).map(|p| io::read_coefficients(&p)).transpose()?,
        mask,
        occlusion: r.occlusion,
        noise: r.noise,
    })
}

/// Loads every sample of a manifest.
pub fn load_dataset(path: &Path) -> Result<(Manifest, Vec<TripletSample>)> {
    let (m, dir) = read_manifest(path)?;
    let samples = m
        .samples
        .iter()
        .map(|r| load_sample(&dir, r))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, samples))
}
