use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grad::Var;
use crate::render::Image;

pub const EMBEDDING_DIM: usize = 128;
/// Side of the grayscale thumbnail fed to the projection.
pub const EMBED_GRID: usize = 32;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Unit-norm feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Normalises `values`; zero vectors are rejected.
    pub fn from_unnormalized(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::invalid("cannot normalise a zero or non-finite embedding"));
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / n).collect(),
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn distance(&self, other: &Embedding) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Area-average grayscale thumbnail of an image.
pub fn grayscale_thumbnail(image: &Image) -> Vec<f64> {
    let bins = Bins::new(image.width(), image.height());
    let mut out = vec![0.0; EMBED_GRID * EMBED_GRID];
    for (p, &bin) in bins.of_pixel.iter().enumerate() {
        let px = &image.data()[3 * p..3 * p + 3];
        out[bin] += (LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]) * bins.inv_count[bin];
    }
    out
}

struct Bins {
    of_pixel: Vec<usize>,
    inv_count: Vec<f64>,
}

impl Bins {
    fn new(width: usize, height: usize) -> Self {
        let mut of_pixel = Vec::with_capacity(width * height);
        let mut count = vec![0usize; EMBED_GRID * EMBED_GRID];
        for y in 0..height {
            let by = y * EMBED_GRID / height;
            for x in 0..width {
                let b = by * EMBED_GRID + x * EMBED_GRID / width;
                of_pixel.push(b);
                count[b] += 1;
            }
        }
        let inv_count = count
            .into_iter()
            .map(|c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
            .collect();
        Self {
            of_pixel,
            inv_count,
        }
    }
}

/// Deterministic stand-in for a face-recognition network: a grayscale
/// thumbnail projected by a fixed Gaussian matrix and normalised.
#[derive(Debug, Clone)]
pub struct ReferenceEmbedder {
    seed: u64,
    /// `EMBEDDING_DIM x EMBED_GRID^2`, row-major.
    projection: Arc<Vec<f64>>,
}

impl ReferenceEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = EMBED_GRID * EMBED_GRID;
        let scale = 1.0 / (cols as f64).sqrt();
        let projection = (0..EMBEDDING_DIM * cols)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * scale
            })
            .collect();
        Self {
            seed,
            projection: Arc::new(projection),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn project(&self, thumb: &[f64]) -> Vec<f64> {
        self.projection
            .chunks_exact(thumb.len())
            .map(|row| row.iter().zip(thumb).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Features before normalisation.
    pub fn features(&self, image: &Image) -> Vec<f64> {
        self.project(&grayscale_thumbnail(image))
    }

    pub fn embed(&self, image: &Image) -> Result<Embedding> {
        Embedding::from_unnormalized(self.features(image))
    }

    /// Unnormalised features of a recorded `width x height` RGB image.
    pub fn features_var<'t>(&self, image: Var<'t>, width: usize, height: usize) -> Result<Var<'t>> {
        if image.len() != 3 * width * height {
            return Err(Error::invalid("image variable does not match its stated size"));
        }
        let img = Image::from_vec(width, height, image.value().to_vec())?;
        let out = self.features(&img);
        let projection = Arc::clone(&self.projection);
        let bins = Bins::new(width, height);
        Ok(image.tape().custom(&[image], out, move |g| {
            let cols = EMBED_GRID * EMBED_GRID;
            let mut g_thumb = vec![0.0; cols];
            for (row, gk) in projection.chunks_exact(cols).zip(g) {
                for (t, w) in g_thumb.iter_mut().zip(row) {
                    *t += gk * w;
                }
            }
            let mut gi = Vec::with_capacity(3 * bins.of_pixel.len());
            for &b in &bins.of_pixel {
                let v = g_thumb[b] * bins.inv_count[b];
                gi.extend(LUMA.iter().map(|l| l * v));
            }
            vec![gi]
        }))
    }
}
