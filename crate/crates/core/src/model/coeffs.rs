//! The 257-dimensional face parameter vector and the loss weights.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COEFF_DIM: usize = 257;
pub const SHAPE_DIM: usize = 80;
pub const EXPRESSION_DIM: usize = 64;
pub const TEXTURE_DIM: usize = 80;
pub const ILLUMINATION_DIM: usize = 27;
pub const POSE_DIM: usize = 6;

/// Named slices of a [`CoefficientVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Shape,
    Expression,
    Texture,
    Illumination,
    Pose,
}

impl Segment {
    pub const ALL: [Segment; 5] = [
        Segment::Shape,
        Segment::Expression,
        Segment::Texture,
        Segment::Illumination,
        Segment::Pose,
    ];

    pub const fn range(self) -> Range<usize> {
        match self {
            Segment::Shape => 0..80,
            Segment::Expression => 80..144,
            Segment::Texture => 144..224,
            Segment::Illumination => 224..251,
            Segment::Pose => 251..257,
        }
    }

    #[allow(clippy::len_without_is_empty)]
    pub const fn len(self) -> usize {
        let r = self.range();
        r.end - r.start
    }
}

/// Index of the first rotation angle inside the full vector.
pub const ROTATION: Range<usize> = 251..254;
/// Index range of the translation inside the full vector.
pub const TRANSLATION: Range<usize> = 254..257;

/// Face parameters: shape, expression, texture, spherical-harmonics
/// illumination (channel-major, 9 bands per channel) and pose
/// (Euler XYZ radians followed by translation).
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    values: Vec<f64>,
}

impl Default for CoefficientVector {
    fn default() -> Self {
        Self::zeros()
    }
}

impl CoefficientVector {
    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; COEFF_DIM],
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if values.len() != COEFF_DIM {
            return Err(Error::invalid(format!(
                "coefficient vector must have {COEFF_DIM} entries, got {}",
                values.len()
            )));
        }
        Ok(Self { values })
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::from_vec(values.to_vec())
    }

    /// Zero identity, ambient-only lighting of the given band-0 strength
    /// and the face pushed `depth` units down the optical axis.
    pub fn canonical(depth: f64, ambient: f64) -> Self {
        let mut c = Self::zeros();
        for channel in 0..3 {
            c.values[Segment::Illumination.range().start + channel * 9] = ambient;
        }
        c.values[TRANSLATION.start + 2] = depth;
        c
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn segment(&self, seg: Segment) -> &[f64] {
        &self.values[seg.range()]
    }

    pub fn segment_mut(&mut self, seg: Segment) -> &mut [f64] {
        &mut self.values[seg.range()]
    }

    pub fn shape(&self) -> &[f64] {
        self.segment(Segment::Shape)
    }

    pub fn expression(&self) -> &[f64] {
        self.segment(Segment::Expression)
    }

    pub fn texture(&self) -> &[f64] {
        self.segment(Segment::Texture)
    }

    pub fn illumination(&self) -> &[f64] {
        self.segment(Segment::Illumination)
    }

    pub fn pose(&self) -> &[f64] {
        self.segment(Segment::Pose)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn distance(&self, other: &Self) -> f64 {
        l2_distance(&self.values, &other.values)
    }

    pub fn segment_distance(&self, other: &Self, seg: Segment) -> f64 {
        l2_distance(self.segment(seg), other.segment(seg))
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Weights of the guidance objective, the robustification objective and
/// the coefficient prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_k: f64,
    pub alpha_gp: f64,
    pub alpha_p: f64,
    pub alpha_r: f64,
    pub beta_o: f64,
    pub beta_n: f64,
    pub beta_c: f64,
    pub w_s: f64,
    pub w_t: f64,
    pub w_e: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_k: 1.6e-3,
            alpha_gp: 1.92,
            alpha_p: 0.2,
            alpha_r: 3e-4,
            beta_o: 1.92,
            beta_n: 1.92,
            beta_c: 1e-3,
            w_s: 1.0,
            w_t: 1.7e-3,
            w_e: 0.8,
            huber_delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha_k", self.alpha_k),
            ("alpha_gp", self.alpha_gp),
            ("alpha_p", self.alpha_p),
            ("alpha_r", self.alpha_r),
            ("beta_o", self.beta_o),
            ("beta_n", self.beta_n),
            ("beta_c", self.beta_c),
            ("w_s", self.w_s),
            ("w_t", self.w_t),
            ("w_e", self.w_e),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "loss weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if !(self.huber_delta.is_finite() && self.huber_delta > 0.0) {
            return Err(Error::invalid("huber_delta must be positive"));
        }
        Ok(())
    }
}
