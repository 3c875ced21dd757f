//! Guidance and robustification objectives and the coefficient
//! discriminator.
//!
//! Each loss has a plain evaluation and a recorded version operating on
//! tape variables; the two share their arithmetic.

mod embed;
mod mlp;

pub use embed::{grayscale_thumbnail, Embedding, ReferenceEmbedder, EMBEDDING_DIM, EMBED_GRID};
pub use mlp::Mlp;

use crate::error::{Error, Result};
use crate::grad::Var;
use crate::model::{CoefficientVector, LossWeights, Segment, COEFF_DIM};
use crate::render::{Fragment, Image, LandmarkSet, RenderedFrame};

/// Discriminator targets: guiding coefficients vs. robust coefficients.
pub const LABEL_GUIDING: [f64; 2] = [1.0, 0.0];
pub const LABEL_OCCLUDED: [f64; 2] = [0.0, 1.0];
pub const LABEL_NOISY: [f64; 2] = [0.0, 1.0];

pub const DISCRIMINATOR_HIDDEN: usize = 124;
pub const DISCRIMINATOR_SLOPE: f64 = 0.2;

/// Mean Euclidean distance between corresponding landmarks.
pub fn landmark_loss(predicted: &LandmarkSet, target: &LandmarkSet) -> f64 {
    let n = predicted.points.len();
    predicted
        .points
        .iter()
        .zip(&target.points)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .sum::<f64>()
        / n as f64
}

/// Mean distance between 2-D points, `x0, y0, x1, y1, ...` layout.
pub fn landmark_loss_var<'t>(predicted: Var<'t>, target: &[f64]) -> Result<Var<'t>> {
    group_distance_mean(predicted, target, 2)
}

/// Mean over covered pixels of the RGB Euclidean distance.
pub fn photometric_loss(rendered: &RenderedFrame, target: &Image) -> Result<f64> {
    if rendered.width != target.width() || rendered.height != target.height() {
        return Err(Error::invalid("rendered frame and target differ in size"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, _) in rendered.coverage.iter().enumerate().filter(|(_, &c)| c) {
        let d: f64 = (0..3)
            .map(|c| (rendered.rgb[3 * p + c] - target.data()[3 * p + c]).powi(2))
            .sum();
        sum += d.sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateRender("no pixel is covered by the face".into()));
    }
    Ok(sum / count as f64)
}

/// Recorded photometric loss for fragment colours against `target`.
pub fn photometric_loss_var<'t>(
    colors: Var<'t>,
    fragments: &[Fragment],
    target: &Image,
) -> Result<Var<'t>> {
    if fragments.is_empty() {
        return Err(Error::DegenerateRender("no pixel is covered by the face".into()));
    }
    let t: Vec<f64> = fragments
        .iter()
        .flat_map(|f| {
            let p = 3 * f.pixel as usize;
            target.data()[p..p + 3].iter().copied()
        })
        .collect();
    group_distance_mean(colors, &t, 3)
}

/// Distances below this count as zero when choosing a (sub)gradient, so
/// round-off between two routes to the same render cannot produce a
/// gradient at an exact fit, which Adam would amplify to a full step.
pub const ZERO_DISTANCE: f64 = 1e-12;

/// `mean_k |x_k - t_k|` over consecutive groups of `width` values. The
/// subgradient at a zero distance is taken as zero.
fn group_distance_mean<'t>(x: Var<'t>, target: &[f64], width: usize) -> Result<Var<'t>> {
    if x.len() != target.len() || !x.len().is_multiple_of(width) || x.is_empty() {
        return Err(Error::invalid("distance operands differ in length"));
    }
    let xv = x.value();
    let n = xv.len() / width;
    let diff: Vec<f64> = xv.iter().zip(target).map(|(a, b)| a - b).collect();
    let dist: Vec<f64> = diff
        .chunks_exact(width)
        .map(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let value = dist.iter().sum::<f64>() / n as f64;
    Ok(x.tape().custom(&[x], vec![value], move |g| {
        let scale = g[0] / n as f64;
        let mut out = vec![0.0; diff.len()];
        for (k, &d) in dist.iter().enumerate() {
            if d > ZERO_DISTANCE {
                for j in 0..width {
                    out[k * width + j] = scale * diff[k * width + j] / d;
                }
            }
        }
        vec![out]
    }))
}

/// `1 - cos(theta, theta')`.
pub fn perceptual_loss(theta: &Embedding, theta_prime: &Embedding) -> Result<f64> {
    cosine_distance(theta.as_slice(), theta_prime.as_slice())
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("embeddings differ in length"));
    }
    let (na, nb) = (embed::norm(a), embed::norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("zero-norm embedding"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

/// Recorded `1 - cos(a, b)` for a constant `b`. Directions closer than
/// [`ZERO_DISTANCE`] are treated as equal: zero gradient.
pub fn cosine_distance_var<'t>(a: Var<'t>, b: &[f64]) -> Result<Var<'t>> {
    let av = a.value();
    let value = cosine_distance(&av, b)?;
    let b = b.to_vec();
    Ok(a.tape().custom(&[a], vec![value], move |g| {
        let (na, nb) = (embed::norm(&av), embed::norm(&b));
        let gap = av
            .iter()
            .zip(&b)
            .map(|(x, y)| (x / na - y / nb).powi(2))
            .sum::<f64>()
            .sqrt();
        if gap <= ZERO_DISTANCE {
            return vec![vec![0.0; av.len()]];
        }
        let dot: f64 = av.iter().zip(&b).map(|(x, y)| x * y).sum();
        let k = dot / (na * na * na * nb);
        vec![av
            .iter()
            .zip(&b)
            .map(|(x, y)| -g[0] * (y / (na * nb) - k * x))
            .collect()]
    }))
}

/// Standard Huber penalty.
pub fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

pub fn huber_derivative(r: f64, delta: f64) -> f64 {
    r.clamp(-delta, delta)
}

/// `sum_k huber(x_k - target_k)`.
pub fn huber_sum_var<'t>(x: Var<'t>, target: &[f64], delta: f64) -> Result<Var<'t>> {
    if x.len() != target.len() {
        return Err(Error::invalid("huber operands differ in length"));
    }
    let r: Vec<f64> = x.value().iter().zip(target).map(|(a, b)| a - b).collect();
    let value = r.iter().map(|&v| huber(v, delta)).sum();
    Ok(x.tape().custom(&[x], vec![value], move |g| {
        vec![r.iter().map(|&v| g[0] * huber_derivative(v, delta)).collect()]
    }))
}

/// Recorded prior `w_s|s|^2 + w_t|t|^2 + w_e|e|^2`.
pub fn regularization_var<'t>(coeffs: Var<'t>, weights: &LossWeights) -> Result<Var<'t>> {
    if coeffs.len() != COEFF_DIM {
        return Err(Error::invalid("regularisation needs a full coefficient vector"));
    }
    let mut w = vec![0.0; COEFF_DIM];
    for (seg, k) in [
        (Segment::Shape, weights.w_s),
        (Segment::Expression, weights.w_e),
        (Segment::Texture, weights.w_t),
    ] {
        w[seg.range()].iter_mut().for_each(|v| *v = k);
    }
    let c = coeffs.value();
    let value = c.iter().zip(&w).map(|(x, k)| k * x * x).sum();
    Ok(coeffs.tape().custom(&[coeffs], vec![value], move |g| {
        vec![c.iter().zip(&w).map(|(x, k)| 2.0 * g[0] * k * x).collect()]
    }))
}

/// Fully-connected 257-124-2 classifier over coefficient vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub net: Mlp,
}

impl Discriminator {
    pub fn new(seed: u64) -> Self {
        Self {
            net: Mlp::new(COEFF_DIM, DISCRIMINATOR_HIDDEN, 2, DISCRIMINATOR_SLOPE, seed),
        }
    }

    pub fn zeros() -> Self {
        Self {
            net: Mlp::zeros(COEFF_DIM, DISCRIMINATOR_HIDDEN, 2, DISCRIMINATOR_SLOPE),
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut Vec<f64> {
        &mut self.net.params
    }
}

/// The two logits for one coefficient vector.
pub fn discriminator_forward(disc: &Discriminator, coeffs: &CoefficientVector) -> [f64; 2] {
    let out = disc
        .net
        .forward(coeffs.as_slice())
        .expect("coefficient vectors always have the discriminator's input width");
    [out[0], out[1]]
}

/// Both halves of the consistency objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyTerms {
    pub l_co: f64,
    pub l_cn: f64,
}

impl ConsistencyTerms {
    pub fn total(&self) -> f64 {
        self.l_co + self.l_cn
    }
}

fn label_huber(logits: [f64; 2], label: [f64; 2], delta: f64) -> f64 {
    huber(logits[0] - label[0], delta) + huber(logits[1] - label[1], delta)
}

/// `L_CO` pairs the guiding vector with the occluded one, `L_CN` with the
/// noisy one; each term is a per-logit Huber penalty against its label.
pub fn consistency_loss(
    disc: &Discriminator,
    c_g: &CoefficientVector,
    c_o: &CoefficientVector,
    c_n: &CoefficientVector,
    labels: [[f64; 2]; 3],
    delta: f64,
) -> ConsistencyTerms {
    let g = label_huber(discriminator_forward(disc, c_g), labels[0], delta);
    ConsistencyTerms {
        l_co: g + label_huber(discriminator_forward(disc, c_o), labels[1], delta),
        l_cn: g + label_huber(discriminator_forward(disc, c_n), labels[2], delta),
    }
}

/// Recorded Huber penalty of the discriminator's logits for `coeffs`
/// against `label`.
pub fn discriminator_term_var<'t>(
    disc: &Discriminator,
    params: Var<'t>,
    coeffs: Var<'t>,
    label: [f64; 2],
    delta: f64,
) -> Result<Var<'t>> {
    let logits = disc.net.forward_var(params, coeffs)?;
    huber_sum_var(logits, &label, delta)
}

/// Guidance terms `L_K, L_GP, L_P, L_R`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GuideTerms {
    pub landmark: f64,
    pub photometric: f64,
    pub perceptual: f64,
    pub regularization: f64,
}

pub fn guide_total(terms: &GuideTerms, w: &LossWeights) -> f64 {
    w.alpha_k * terms.landmark
        + w.alpha_gp * terms.photometric
        + w.alpha_p * terms.perceptual
        + w.alpha_r * terms.regularization
}

/// Robust objective; the consistency term enters with a negative sign.
pub fn robust_total(l_o: f64, l_n: f64, l_c: f64, w: &LossWeights) -> f64 {
    w.beta_o * l_o + w.beta_n * l_n - w.beta_c * l_c
}
