use std::sync::Arc;

use super::{ConsistencyMode, FitSession, HistoryRow, Phase};
use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::loss::{
    cosine_distance_var, discriminator_term_var, landmark_loss_var, photometric_loss_var,
    regularization_var, Discriminator, ReferenceEmbedder, LABEL_GUIDING, LABEL_NOISY,
    LABEL_OCCLUDED,
};
use crate::model::{CoefficientVector, LossWeights, MorphableBasis};
use crate::render::{render_on_tape, Camera, Fragment, Image};

/// What the guidance objective compares a render against.
#[derive(Debug, Clone)]
pub struct GuidanceTargets<'a> {
    pub image: &'a Image,
    /// Flat `x, y` target landmarks; the landmark term is skipped without.
    pub landmarks: Option<Vec<f64>>,
    /// Unnormalised reference features of `image`.
    pub features: Vec<f64>,
}

/// Value, components and gradient of an objective at one point.
#[derive(Debug, Clone)]
pub struct Objective {
    pub row: HistoryRow,
    pub gradient: Vec<f64>,
    pub fragments: Vec<Fragment>,
}

/// `(L_K, L_GP, L_P, L_R, fragments)`; `L_K` is absent without landmarks.
type GuidanceTerms<'t> = (Option<Var<'t>>, Var<'t>, Var<'t>, Var<'t>, Vec<Fragment>);

/// Records the guidance terms for a coefficient variable.
#[allow(clippy::too_many_arguments)]
pub(crate) fn guidance_terms<'t>(
    tape: &'t Tape,
    basis: &Arc<MorphableBasis>,
    camera: &Camera,
    weights: &LossWeights,
    embedder: &ReferenceEmbedder,
    targets: &GuidanceTargets<'_>,
    x: Var<'t>,
    frozen: Option<&[Fragment]>,
) -> Result<GuidanceTerms<'t>> {
    let r = render_on_tape(tape, basis, x, camera, frozen)?;
    let l_k = match &targets.landmarks {
        Some(t) => Some(landmark_loss_var(r.landmarks()?, t)?),
        None => None,
    };
    let l_gp = photometric_loss_var(r.colors, &r.fragments, targets.image)?;
    let composite = r.composite(targets.image)?;
    let feats = embedder.features_var(composite, r.width, r.height)?;
    let l_p = cosine_distance_var(feats, &targets.features)?;
    let l_r = regularization_var(x, weights)?;
    Ok((l_k, l_gp, l_p, l_r, r.fragments.as_ref().clone()))
}

/// `alpha_K L_K + alpha_GP L_GP + alpha_P L_P + alpha_R L_R` and its
/// gradient. Pixel coverage is taken from the current render unless
/// `frozen` is given.
pub fn guidance_objective(
    basis: &Arc<MorphableBasis>,
    camera: &Camera,
    weights: &LossWeights,
    embedder: &ReferenceEmbedder,
    targets: &GuidanceTargets<'_>,
    coeffs: &CoefficientVector,
    frozen: Option<&[Fragment]>,
) -> Result<Objective> {
    let tape = Tape::new();
    let x = tape.input(coeffs.as_slice().to_vec());
    let (l_k, l_gp, l_p, l_r, fragments) =
        guidance_terms(&tape, basis, camera, weights, embedder, targets, x, frozen)?;
    let mut terms = vec![
        (weights.alpha_gp, l_gp),
        (weights.alpha_p, l_p),
        (weights.alpha_r, l_r),
    ];
    if let Some(l) = l_k {
        terms.push((weights.alpha_k, l));
    }
    let total = Var::weighted_sum(&terms);
    let gradient = tape.backward(&total)?.wrt(&x);
    let mut row = HistoryRow::empty(0, Phase::Guidance);
    row.l_k = l_k.map_or(0.0, |v| v.item());
    row.l_gp = l_gp.item();
    row.l_p = l_p.item();
    row.l_r = l_r.item();
    row.total = total.item();
    Ok(Objective {
        row,
        gradient,
        fragments,
    })
}

/// Consistency term `L_C` for the robust coefficient variables present.
/// `C_G` enters as a constant. `params` must be the discriminator's
/// parameters recorded on the same tape in adversarial mode.
pub fn consistency_penalty<'t>(
    mode: ConsistencyMode,
    disc: Option<(&Discriminator, Var<'t>)>,
    c_g: &CoefficientVector,
    c_o: Option<Var<'t>>,
    c_n: Option<Var<'t>>,
    delta: f64,
) -> Result<Option<Var<'t>>> {
    let Some(any) = c_o.or(c_n) else {
        return Ok(None);
    };
    let tape = any.tape();
    match mode {
        ConsistencyMode::Disabled => Ok(None),
        ConsistencyMode::L2 => {
            let g = tape.input(c_g.as_slice().to_vec());
            let parts: Vec<(f64, Var<'t>)> = [c_o, c_n]
                .into_iter()
                .flatten()
                .map(|x| (1.0, g.sub(&x).sum_squares()))
                .collect();
            Ok(Some(Var::weighted_sum(&parts)))
        }
        ConsistencyMode::Adversarial => {
            let (disc, params) =
                disc.ok_or_else(|| Error::invalid("adversarial consistency needs a discriminator"))?;
            let g = tape.input(c_g.as_slice().to_vec());
            let g_term = discriminator_term_var(disc, params, g, LABEL_GUIDING, delta)?;
            let mut parts = Vec::new();
            for (x, label) in [(c_o, LABEL_OCCLUDED), (c_n, LABEL_NOISY)] {
                if let Some(x) = x {
                    parts.push((1.0, g_term));
                    parts.push((1.0, discriminator_term_var(disc, params, x, label, delta)?));
                }
            }
            Ok(Some(Var::weighted_sum(&parts)))
        }
    }
}

/// Robust objective of a session and its gradients for `C_O` and `C_N`.
#[derive(Debug, Clone)]
pub struct RobustObjective {
    pub row: HistoryRow,
    pub grad_o: Vec<f64>,
    pub grad_n: Vec<f64>,
}

/// `beta_O L_O + beta_N L_N - beta_C L_C` at the session's current
/// `C_O`/`C_N`. Both photometric terms compare against the guiding image.
pub fn robust_objective(s: &FitSession, disc: Option<&Discriminator>) -> Result<RobustObjective> {
    let tape = Tape::new();
    let w = &s.weights;
    let xo = s
        .occluded
        .as_ref()
        .map(|_| tape.input(s.c_o.as_slice().to_vec()));
    let xn = s.noisy.as_ref().map(|_| tape.input(s.c_n.as_slice().to_vec()));
    let mut row = HistoryRow::empty(0, Phase::Robust);
    let mut terms = Vec::new();
    for (x, beta, slot) in [(xo, w.beta_o, &mut row.l_o), (xn, w.beta_n, &mut row.l_n)] {
        if let Some(x) = x {
            let r = render_on_tape(&tape, &s.basis, x, &s.camera, None)?;
            let l = photometric_loss_var(r.colors, &r.fragments, &s.guiding)?;
            *slot = l.item();
            terms.push((beta, l));
        }
    }
    let params = disc.map(|d| (d, tape.input(d.params().to_vec())));
    if let Some(l_c) =
        consistency_penalty(s.config.consistency, params, &s.c_g, xo, xn, w.huber_delta)?
    {
        row.l_c = l_c.item();
        terms.push((-w.beta_c, l_c));
    }
    let total = Var::weighted_sum(&terms);
    row.total = total.item();
    let grads = tape.backward(&total)?;
    Ok(RobustObjective {
        row,
        grad_o: xo.map_or_else(|| vec![0.0; s.c_o.as_slice().len()], |x| grads.wrt(&x)),
        grad_n: xn.map_or_else(|| vec![0.0; s.c_n.as_slice().len()], |x| grads.wrt(&x)),
    })
}
