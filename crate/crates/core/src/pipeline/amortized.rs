use std::sync::Arc;

use super::objective::{consistency_penalty, guidance_terms, GuidanceTargets};
use super::ConsistencyMode;
use crate::degrade::TripletSample;
use crate::error::{Error, Result};
use crate::grad::{AdamState, Tape, Var};
use crate::loss::{
    grayscale_thumbnail, photometric_loss_var, Discriminator, Mlp, ReferenceEmbedder,
    DISCRIMINATOR_SLOPE, EMBED_GRID,
};
use crate::model::{CoefficientVector, LossWeights, MorphableBasis, Segment, COEFF_DIM, ROTATION, TRANSLATION};
use crate::render::{render_on_tape, Camera, Image};

pub const AMORTIZED_HIDDEN: usize = 256;
/// Triplets per optimiser step (5 clean + 5 occluded + 5 noisy images).
pub const TRIPLETS_PER_BATCH: usize = 5;

/// Small network mapping a grayscale thumbnail to coefficients:
/// `base + scale * mlp(thumbnail)`.
#[derive(Debug, Clone)]
pub struct AmortizedRegressor {
    pub net: Mlp,
    pub base: CoefficientVector,
    pub output_scale: Vec<f64>,
    pub adam: AdamState,
    pub discriminator: Discriminator,
    pub discriminator_adam: AdamState,
}

impl AmortizedRegressor {
    pub fn new(base: CoefficientVector, seed: u64, lr: f64, discriminator_lr: f64) -> Self {
        let net = Mlp::new(
            EMBED_GRID * EMBED_GRID,
            AMORTIZED_HIDDEN,
            COEFF_DIM,
            DISCRIMINATOR_SLOPE,
            seed,
        );
        let mut output_scale = vec![0.0; COEFF_DIM];
        for (range, k) in [
            (Segment::Shape.range(), 0.3),
            (Segment::Expression.range(), 0.2),
            (Segment::Texture.range(), 0.3),
            (Segment::Illumination.range(), 0.3),
            (ROTATION, 0.05),
            (TRANSLATION, 0.1),
        ] {
            output_scale[range].iter_mut().for_each(|v| *v = k);
        }
        let discriminator = Discriminator::new(seed.wrapping_add(1));
        Self {
            adam: AdamState::new(net.param_count(), lr),
            discriminator_adam: AdamState::new(discriminator.params().len(), discriminator_lr),
            net,
            base,
            output_scale,
            discriminator,
        }
    }

    pub fn predict(&self, image: &Image) -> Result<CoefficientVector> {
        let out = self.net.forward(&grayscale_thumbnail(image))?;
        CoefficientVector::from_vec(
            out.iter()
                .zip(&self.output_scale)
                .zip(self.base.as_slice())
                .map(|((o, k), b)| b + k * o)
                .collect(),
        )
    }

    fn predict_var<'t>(&self, params: Var<'t>, image: &Image) -> Result<Var<'t>> {
        let tape = params.tape();
        let x = tape.input(grayscale_thumbnail(image));
        let out = self.net.forward_var(params, x)?;
        let scale = self.output_scale.clone();
        let value = out
            .value()
            .iter()
            .zip(&scale)
            .zip(self.base.as_slice())
            .map(|((o, k), b)| b + k * o)
            .collect();
        Ok(tape.custom(&[out], value, move |g| {
            vec![g.iter().zip(&scale).map(|(g, k)| g * k).collect()]
        }))
    }
}

/// What one training run did.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub steps: usize,
    /// Mean guidance objective over the dataset before any update.
    pub initial_guidance_loss: f64,
    /// Mean guidance objective over the dataset after each epoch.
    pub epoch_guidance_loss: Vec<f64>,
}

/// Shared, immutable pieces of a fitting problem.
#[derive(Debug, Clone)]
pub struct FitContext {
    pub basis: Arc<MorphableBasis>,
    pub camera: Camera,
    pub weights: LossWeights,
    pub embedder: ReferenceEmbedder,
    pub consistency: ConsistencyMode,
}

fn targets_for<'a>(ctx: &FitContext, sample: &'a TripletSample) -> GuidanceTargets<'a> {
    GuidanceTargets {
        image: &sample.guiding,
        landmarks: sample.guiding_landmarks.as_ref().map(|l| l.to_flat()),
        features: ctx.embedder.features(&sample.guiding),
    }
}

fn guidance_total<'t>(
    tape: &'t Tape,
    ctx: &FitContext,
    targets: &GuidanceTargets<'_>,
    c: Var<'t>,
) -> Result<Var<'t>> {
    let w = &ctx.weights;
    let (l_k, l_gp, l_p, l_r, _) = guidance_terms(
        tape,
        &ctx.basis,
        &ctx.camera,
        w,
        &ctx.embedder,
        targets,
        c,
        None,
    )?;
    let mut terms = vec![(w.alpha_gp, l_gp), (w.alpha_p, l_p), (w.alpha_r, l_r)];
    if let Some(l) = l_k {
        terms.push((w.alpha_k, l));
    }
    Ok(Var::weighted_sum(&terms))
}

/// Mean guidance objective of the regressor's clean-image predictions.
pub fn mean_guidance_loss(
    reg: &AmortizedRegressor,
    ctx: &FitContext,
    dataset: &[TripletSample],
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let mut sum = 0.0;
    for s in dataset {
        let tape = Tape::new();
        let c = tape.input(reg.predict(&s.guiding)?.into_vec());
        sum += guidance_total(&tape, ctx, &targets_for(ctx, s), c)?.item();
    }
    Ok(sum / dataset.len() as f64)
}

/// Mini-batch training: each step sees five triplets. Clean predictions
/// get the guidance objective; degraded predictions are regressed against
/// the clean image with the consistency term, treating the batch's clean
/// predictions as constants. One regressor step and one discriminator step
/// per batch.
pub fn train_amortized(
    reg: &mut AmortizedRegressor,
    ctx: &FitContext,
    dataset: &[TripletSample],
    epochs: usize,
) -> Result<TrainingLog> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let initial = mean_guidance_loss(reg, ctx, dataset)?;
    let mut log = TrainingLog {
        steps: 0,
        initial_guidance_loss: initial,
        epoch_guidance_loss: Vec::with_capacity(epochs),
    };
    let w = ctx.weights;
    for _ in 0..epochs {
        for batch in dataset.chunks(TRIPLETS_PER_BATCH) {
            let tape = Tape::new();
            let params = tape.input(reg.net.params.clone());
            let disc_params = tape.input(reg.discriminator.params().to_vec());
            let k = 1.0 / batch.len() as f64;
            let mut terms = Vec::new();
            let mut disc_terms = Vec::new();
            for s in batch {
                let c_g = reg.predict_var(params, &s.guiding)?;
                terms.push((k, guidance_total(&tape, ctx, &targets_for(ctx, s), c_g)?));
                let c_g_const = CoefficientVector::from_vec(c_g.value().to_vec())?;
                let c_o = reg.predict_var(params, &s.occluded)?;
                let c_n = reg.predict_var(params, &s.noisy)?;
                for (c, beta) in [(c_o, w.beta_o), (c_n, w.beta_n)] {
                    let r = render_on_tape(&tape, &ctx.basis, c, &ctx.camera, None)?;
                    terms.push((k * beta, photometric_loss_var(r.colors, &r.fragments, &s.guiding)?));
                }
                if let Some(l_c) = consistency_penalty(
                    ctx.consistency,
                    Some((&reg.discriminator, disc_params)),
                    &c_g_const,
                    Some(c_o),
                    Some(c_n),
                    w.huber_delta,
                )? {
                    terms.push((-k * w.beta_c, l_c));
                    disc_terms.push((k, l_c));
                }
            }
            let total = Var::weighted_sum(&terms);
            let g = tape.backward(&total)?.wrt(&params);
            if !disc_terms.is_empty() && ctx.consistency == ConsistencyMode::Adversarial {
                let l_c = Var::weighted_sum(&disc_terms);
                let gd = tape.backward(&l_c)?.wrt(&disc_params);
                let dp = reg.discriminator.params_mut();
                reg.discriminator_adam.step(dp, &gd)?;
            }
            reg.adam.step(&mut reg.net.params, &g)?;
            log.steps += 1;
        }
        log.epoch_guidance_loss.push(mean_guidance_loss(reg, ctx, dataset)?);
    }
    Ok(log)
}
