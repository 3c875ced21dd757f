//! Guidance and robustification fitting.
//!
//! Coefficients are estimated per image by gradient descent through the
//! differentiable renderer. The guidance fit produces `C_G` from the clean
//! image; the robust fit then estimates `C_O` and `C_N` by regressing their
//! renders against the clean image while an adversarial discriminator
//! pushes them towards being indistinguishable from `C_G`. `C_G` is never
//! updated by the robust fit.

mod amortized;
mod objective;

use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use amortized::{
    mean_guidance_loss, train_amortized, AmortizedRegressor, FitContext, TrainingLog,
    AMORTIZED_HIDDEN, TRIPLETS_PER_BATCH,
};
pub use objective::{
    consistency_penalty, guidance_objective, robust_objective, GuidanceTargets, Objective,
    RobustObjective,
};

use crate::error::{Error, Result};
use crate::grad::{AdamState, Tape};
use crate::loss::{
    discriminator_forward, discriminator_term_var, Discriminator, ReferenceEmbedder,
    LABEL_GUIDING, LABEL_NOISY, LABEL_OCCLUDED,
};
use crate::model::{CoefficientVector, LossWeights, MorphableBasis, Segment, ROTATION, TRANSLATION};
use crate::render::{Camera, Image, LandmarkSet};

/// Per-segment Adam step sizes for coefficient fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub shape: f64,
    pub expression: f64,
    pub texture: f64,
    pub illumination: f64,
    pub rotation: f64,
    pub translation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            shape: 0.02,
            expression: 0.02,
            texture: 0.02,
            illumination: 0.02,
            rotation: 0.018,
            translation: 0.036,
        }
    }
}

impl LearningRates {
    fn groups(&self) -> [(Range<usize>, f64); 6] {
        [
            (Segment::Shape.range(), self.shape),
            (Segment::Expression.range(), self.expression),
            (Segment::Texture.range(), self.texture),
            (Segment::Illumination.range(), self.illumination),
            (ROTATION, self.rotation),
            (TRANSLATION, self.translation),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.groups().iter().any(|(_, r)| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::invalid("learning rates must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// How `C_O`/`C_N` are tied to `C_G` during the robust fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    /// Huber-on-logits discriminator objective, trained adversarially.
    Adversarial,
    /// `|C_G - C_O|^2 + |C_G - C_N|^2` in place of the discriminator term.
    L2,
    /// No consistency term and no discriminator.
    Disabled,
}

/// Starting point of the robust coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustInit {
    /// Start from the fitted `C_G`.
    Guiding,
    /// Start from the canonical vector, like the guidance fit.
    Canonical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub guidance_iterations: usize,
    pub robust_iterations: usize,
    pub rates: LearningRates,
    /// Learning rates decay along a half cosine to this fraction.
    pub final_lr_fraction: f64,
    pub discriminator_lr: f64,
    pub consistency: ConsistencyMode,
    pub robust_init: RobustInit,
    /// Canonical start: translation along the optical axis ...
    pub init_depth: f64,
    /// ... and band-0 illumination per channel.
    pub init_ambient: f64,
    /// Seeds the discriminator initialisation.
    pub seed: u64,
    pub embedder_seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            guidance_iterations: 600,
            robust_iterations: 600,
            rates: LearningRates::default(),
            final_lr_fraction: 0.05,
            discriminator_lr: 1e-8,
            consistency: ConsistencyMode::Adversarial,
            robust_init: RobustInit::Guiding,
            init_depth: 5.0,
            init_ambient: 3.0,
            seed: 0,
            embedder_seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.rates.validate()?;
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::invalid("final_lr_fraction must lie in [0,1]"));
        }
        if !(self.discriminator_lr.is_finite() && self.discriminator_lr >= 0.0) {
            return Err(Error::invalid("discriminator_lr must be finite and nonnegative"));
        }
        if !(self.init_depth.is_finite() && self.init_depth > 0.0) {
            return Err(Error::invalid("init_depth must be positive"));
        }
        Ok(())
    }

    pub fn initial_coefficients(&self) -> CoefficientVector {
        CoefficientVector::canonical(self.init_depth, self.init_ambient)
    }
}

/// Half-cosine decay from 1 to `floor` over `total` steps.
pub fn cosine_schedule(step: usize, total: usize, floor: f64) -> f64 {
    if total <= 1 {
        return 1.0;
    }
    let t = step as f64 / (total - 1) as f64;
    floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with a separate state and step size per coefficient group.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedAdam {
    groups: Vec<(Range<usize>, AdamState)>,
}

impl SegmentedAdam {
    pub fn new(rates: &LearningRates) -> Self {
        Self {
            groups: rates
                .groups()
                .into_iter()
                .map(|(r, lr)| {
                    let n = r.len();
                    (r, AdamState::new(n, lr))
                })
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr_scale: f64) -> Result<()> {
        for (r, state) in &mut self.groups {
            let lr = state.lr * lr_scale;
            state.step_with_lr(&mut params[r.clone()], &grads[r.clone()], lr)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Guidance,
    Robust,
    Naive,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Guidance => "guidance",
            Phase::Robust => "robust",
            Phase::Naive => "naive",
        }
    }
}

/// Loss components of one iteration, evaluated before that iteration's
/// update. Terms that do not apply to the phase are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub phase: Phase,
    pub l_k: f64,
    pub l_gp: f64,
    pub l_p: f64,
    pub l_r: f64,
    pub l_o: f64,
    pub l_n: f64,
    pub l_c: f64,
    pub total: f64,
}

impl HistoryRow {
    pub(crate) fn empty(iteration: usize, phase: Phase) -> Self {
        Self {
            iteration,
            phase,
            l_k: 0.0,
            l_gp: 0.0,
            l_p: 0.0,
            l_r: 0.0,
            l_o: 0.0,
            l_n: 0.0,
            l_c: 0.0,
            total: 0.0,
        }
    }
}

/// State of one triplet's fit.
#[derive(Debug, Clone)]
pub struct FitSession {
    pub basis: Arc<MorphableBasis>,
    pub camera: Camera,
    pub weights: LossWeights,
    pub config: FitConfig,
    pub embedder: ReferenceEmbedder,
    pub guiding: Image,
    pub guiding_landmarks: Option<LandmarkSet>,
    pub occluded: Option<Image>,
    pub noisy: Option<Image>,
    pub c_g: CoefficientVector,
    pub c_o: CoefficientVector,
    pub c_n: CoefficientVector,
    pub history: Vec<HistoryRow>,
    guidance_done: bool,
    robust_adam: Option<(SegmentedAdam, SegmentedAdam)>,
}

impl FitSession {
    pub fn new(
        basis: Arc<MorphableBasis>,
        camera: Camera,
        weights: LossWeights,
        config: FitConfig,
        guiding: Image,
    ) -> Result<Self> {
        weights.validate()?;
        config.validate()?;
        camera.validate()?;
        if guiding.width() != camera.image_width || guiding.height() != camera.image_height {
            return Err(Error::invalid("guiding image does not match the camera size"));
        }
        let init = config.initial_coefficients();
        Ok(Self {
            basis,
            camera,
            weights,
            embedder: ReferenceEmbedder::new(config.embedder_seed),
            config,
            guiding,
            guiding_landmarks: None,
            occluded: None,
            noisy: None,
            c_g: init.clone(),
            c_o: init.clone(),
            c_n: init,
            history: Vec::new(),
            guidance_done: false,
            robust_adam: None,
        })
    }

    pub fn with_landmarks(mut self, landmarks: LandmarkSet) -> Self {
        self.guiding_landmarks = Some(landmarks);
        self
    }

    pub fn with_degraded(mut self, occluded: Option<Image>, noisy: Option<Image>) -> Self {
        self.occluded = occluded;
        self.noisy = noisy;
        self
    }

    /// Replaces the starting point of the guidance fit.
    pub fn with_initial_guiding(mut self, c: CoefficientVector) -> Self {
        self.c_g = c;
        self
    }

    /// Marks `c` as an already fitted `C_G`.
    pub fn with_fitted_guiding(mut self, c: CoefficientVector) -> Self {
        self.c_g = c;
        self.guidance_done = true;
        self
    }

    pub fn guidance_done(&self) -> bool {
        self.guidance_done
    }

    fn guidance_targets(&self) -> Result<GuidanceTargets<'_>> {
        Ok(GuidanceTargets {
            image: &self.guiding,
            landmarks: self.guiding_landmarks.as_ref().map(|l| l.to_flat()),
            features: self.embedder.features(&self.guiding),
        })
    }

    /// Fits `C_G` to the guiding image.
    pub fn fit_guidance(&mut self) -> Result<CoefficientVector> {
        let targets = self.guidance_targets()?;
        let mut adam = SegmentedAdam::new(&self.config.rates);
        let mut c = self.c_g.clone();
        let n = self.config.guidance_iterations;
        let mut rows = Vec::with_capacity(n);
        for it in 0..n {
            let obj = guidance_objective(
                &self.basis,
                &self.camera,
                &self.weights,
                &self.embedder,
                &targets,
                &c,
                None,
            )
            .map_err(|e| annotate(e, Phase::Guidance, it))?;
            let mut row = obj.row;
            row.iteration = it;
            rows.push(row);
            let scale = cosine_schedule(it, n, self.config.final_lr_fraction);
            adam.step(c.as_mut_slice(), &obj.gradient, scale)?;
            if !c.is_finite() {
                return Err(Error::DegenerateRender(format!(
                    "guidance coefficients became non-finite at iteration {it}"
                )));
            }
        }
        self.history.extend(rows);
        self.c_g = c.clone();
        self.guidance_done = true;
        Ok(c)
    }

    /// Fits `C_O` and `C_N` with a discriminator owned by this call.
    pub fn fit_robust(&mut self) -> Result<(CoefficientVector, CoefficientVector)> {
        let mut disc = Discriminator::new(self.config.seed);
        fit_robust_batch(std::slice::from_mut(self), &mut disc)?;
        Ok((self.c_o.clone(), self.c_n.clone()))
    }

    fn start_robust(&mut self) -> Result<()> {
        if !self.guidance_done {
            return Err(Error::invalid("fit_guidance must run before fit_robust"));
        }
        if self.occluded.is_none() && self.noisy.is_none() {
            return Err(Error::invalid("robust fitting needs an occluded or noisy image"));
        }
        let init = match self.config.robust_init {
            RobustInit::Guiding => self.c_g.clone(),
            RobustInit::Canonical => self.config.initial_coefficients(),
        };
        self.c_o = init.clone();
        self.c_n = init;
        self.robust_adam = Some((
            SegmentedAdam::new(&self.config.rates),
            SegmentedAdam::new(&self.config.rates),
        ));
        Ok(())
    }

    fn robust_step(&mut self, it: usize, total: usize, disc: Option<&Discriminator>) -> Result<()> {
        let obj = robust_objective(self, disc).map_err(|e| annotate(e, Phase::Robust, it))?;
        let scale = cosine_schedule(it, total, self.config.final_lr_fraction);
        let (adam_o, adam_n) = self.robust_adam.as_mut().expect("robust fit started");
        adam_o.step(self.c_o.as_mut_slice(), &obj.grad_o, scale)?;
        adam_n.step(self.c_n.as_mut_slice(), &obj.grad_n, scale)?;
        if !(self.c_o.is_finite() && self.c_n.is_finite()) {
            return Err(Error::DegenerateRender(format!(
                "robust coefficients became non-finite at iteration {it}"
            )));
        }
        let mut row = obj.row;
        row.iteration = it;
        self.history.push(row);
        Ok(())
    }
}

fn annotate(e: Error, phase: Phase, it: usize) -> Error {
    match e {
        Error::DegenerateRender(m) => {
            Error::DegenerateRender(format!("{} iteration {it}: {m}", phase.as_str()))
        }
        other => other,
    }
}

/// Robust fit of several sessions sharing one discriminator. Each
/// iteration updates every session's `C_O`/`C_N` (in parallel), then takes
/// one discriminator step on the batch-mean consistency loss.
pub fn fit_robust_batch(sessions: &mut [FitSession], disc: &mut Discriminator) -> Result<()> {
    if sessions.is_empty() {
        return Err(Error::invalid("no sessions to fit"));
    }
    for s in sessions.iter_mut() {
        s.start_robust()?;
    }
    let cfg = sessions[0].config;
    if sessions.iter().any(|s| s.config.consistency != cfg.consistency) {
        return Err(Error::invalid("sessions in one batch must share a consistency mode"));
    }
    let adversarial = cfg.consistency == ConsistencyMode::Adversarial;
    let mut disc_adam = AdamState::new(disc.params().len(), cfg.discriminator_lr);
    let n = cfg.robust_iterations;
    for it in 0..n {
        let d: &Discriminator = disc;
        sessions
            .par_iter_mut()
            .map(|s| s.robust_step(it, n, adversarial.then_some(d)))
            .collect::<Result<Vec<()>>>()?;
        if adversarial {
            discriminator_step(disc, &mut disc_adam, sessions, cfg.discriminator_lr)?;
        }
    }
    Ok(())
}

/// One descent step of the discriminator on the batch-mean `L_C`.
fn discriminator_step(
    disc: &mut Discriminator,
    adam: &mut AdamState,
    sessions: &[FitSession],
    lr: f64,
) -> Result<()> {
    let tape = Tape::new();
    let params = tape.input(disc.params().to_vec());
    let mut terms = Vec::new();
    let k = 1.0 / sessions.len() as f64;
    for s in sessions {
        let delta = s.weights.huber_delta;
        let g = tape.input(s.c_g.as_slice().to_vec());
        let g_term = discriminator_term_var(disc, params, g, LABEL_GUIDING, delta)?;
        if s.occluded.is_some() {
            let o = tape.input(s.c_o.as_slice().to_vec());
            terms.push((k, g_term));
            terms.push((k, discriminator_term_var(disc, params, o, LABEL_OCCLUDED, delta)?));
        }
        if s.noisy.is_some() {
            let nv = tape.input(s.c_n.as_slice().to_vec());
            terms.push((k, g_term));
            terms.push((k, discriminator_term_var(disc, params, nv, LABEL_NOISY, delta)?));
        }
    }
    let loss = crate::grad::Var::weighted_sum(&terms);
    let g = tape.backward(&loss)?.wrt(&params);
    adam.step_with_lr(disc.params_mut(), &g, lr)
}

/// Guidance-style fit directly on a (possibly degraded) image: photometric,
/// perceptual and prior terms, no landmarks, from the canonical start.
pub fn fit_naive(
    basis: Arc<MorphableBasis>,
    camera: Camera,
    weights: LossWeights,
    config: FitConfig,
    image: Image,
) -> Result<(CoefficientVector, Vec<HistoryRow>)> {
    let mut s = FitSession::new(basis, camera, weights, config, image)?;
    s.fit_guidance()?;
    let history = s
        .history
        .into_iter()
        .map(|mut r| {
            r.phase = Phase::Naive;
            r
        })
        .collect();
    Ok((s.c_g, history))
}

fn argmax(logits: [f64; 2]) -> usize {
    usize::from(logits[1] > logits[0])
}

/// Fraction of vectors classified as their label; guiding vectors are
/// class 0, robust ones class 1, ties go to class 0.
pub fn discriminator_accuracy(
    disc: &Discriminator,
    guiding: &[CoefficientVector],
    robust: &[CoefficientVector],
) -> Result<f64> {
    if guiding.is_empty() || robust.is_empty() {
        return Err(Error::invalid("both coefficient sets must be nonempty"));
    }
    let correct = guiding
        .iter()
        .filter(|c| argmax(discriminator_forward(disc, c)) == 0)
        .count()
        + robust
            .iter()
            .filter(|c| argmax(discriminator_forward(disc, c)) == 1)
            .count();
    Ok(correct as f64 / (guiding.len() + robust.len()) as f64)
}

/// Full-batch training of a discriminator alone on fixed coefficient sets.
/// Returns the final mean consistency loss.
pub fn train_discriminator(
    disc: &mut Discriminator,
    guiding: &[CoefficientVector],
    robust: &[CoefficientVector],
    steps: usize,
    lr: f64,
    delta: f64,
) -> Result<f64> {
    if guiding.is_empty() || robust.is_empty() {
        return Err(Error::invalid("both coefficient sets must be nonempty"));
    }
    let mut adam = AdamState::new(disc.params().len(), lr);
    let k = 1.0 / (guiding.len() + robust.len()) as f64;
    let mut last = f64::NAN;
    for _ in 0..steps {
        let tape = Tape::new();
        let params = tape.input(disc.params().to_vec());
        let mut terms = Vec::new();
        for (set, label) in [(guiding, LABEL_GUIDING), (robust, LABEL_OCCLUDED)] {
            for c in set {
                let x = tape.input(c.as_slice().to_vec());
                terms.push((k, discriminator_term_var(disc, params, x, label, delta)?));
            }
        }
        let loss = crate::grad::Var::weighted_sum(&terms);
        last = loss.item();
        let g = tape.backward(&loss)?.wrt(&params);
        adam.step(disc.params_mut(), &g)?;
    }
    Ok(last)
}
