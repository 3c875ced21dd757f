//! Fixtures and experiment runners shared by the integration and
//! acceptance tests.

#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use facefit_core::degrade::{default_background, sample_ground_truth, DatasetConfig};
use facefit_core::grad::{relative_error, Tape};
use facefit_core::loss::{
    consistency_loss, cosine_distance, cosine_distance_var, landmark_loss, landmark_loss_var,
    photometric_loss, photometric_loss_var, regularization_var, Discriminator, ReferenceEmbedder,
    LABEL_GUIDING, LABEL_NOISY, LABEL_OCCLUDED,
};
use facefit_core::model::{
    generate_synthetic_basis, regularization_loss, CoefficientVector, LossWeights, MorphableBasis,
    COEFF_DIM,
};
use facefit_core::pipeline::{
    consistency_penalty, robust_objective, ConsistencyMode, FitConfig, FitSession,
};
use facefit_core::render::{
    project_landmarks, rasterize, render_face, render_on_tape, Camera, Image, ProjectedVertex,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIZE: usize = 64;
pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn basis() -> Arc<MorphableBasis> {
    static BASIS: OnceLock<Arc<MorphableBasis>> = OnceLock::new();
    BASIS
        .get_or_init(|| Arc::new(generate_synthetic_basis(500, 7).unwrap()))
        .clone()
}

pub fn camera() -> Camera {
    Camera::for_size(SIZE, SIZE)
}

pub fn background() -> Image {
    default_background(SIZE, SIZE)
}

/// A face drawn from the default synthetic distribution.
pub fn random_face(seed: u64) -> CoefficientVector {
    sample_ground_truth(&DatasetConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn render(c: &CoefficientVector) -> Image {
    render_face(&basis(), c, &camera(), Some(&background()))
        .unwrap()
        .to_image()
}

/// Root-mean-square channel error over the pixels the fit covers.
pub fn covered_rmse(fit: &CoefficientVector, target: &Image) -> f64 {
    let frame = render_face(&basis(), fit, &camera(), None).unwrap();
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..frame.coverage.len() {
        if frame.coverage[p] {
            for k in 0..3 {
                sum += (frame.rgb[3 * p + k] - target.data()[3 * p + k]).powi(2);
                n += 1;
            }
        }
    }
    (sum / n as f64).sqrt()
}

/// Render `C*`, fit the guidance pipeline from the canonical start with
/// default settings and return `(covered RMSE, landmark loss)`.
pub fn self_reconstruction(seed: u64) -> (f64, f64) {
    let truth = random_face(seed);
    let target = render(&truth);
    let landmarks = project_landmarks(&basis(), &truth, &camera()).unwrap();
    let mut s = FitSession::new(
        basis(),
        camera(),
        LossWeights::default(),
        FitConfig::default(),
        target.clone(),
    )
    .unwrap()
    .with_landmarks(landmarks.clone());
    let fit = s.fit_guidance().unwrap();
    let fitted = project_landmarks(&basis(), &fit, &camera()).unwrap();
    (covered_rmse(&fit, &target), landmark_loss(&fitted, &landmarks))
}

/// Worst relative error of one loss over the seeds checked.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub loss: &'static str,
    pub seeds: usize,
    pub worst: f64,
    /// Coordinates compared, summed over seeds.
    pub coordinates: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.seeds >= 10 && self.worst < FD_TOLERANCE
    }
}

/// Reverse-mode gradient vs. central differences of the plain loss,
/// restricted to coordinates whose `±h` renders own exactly the same
/// pixels (same triangle per pixel). Base points with too few stable
/// coordinates are redrawn.
fn rendered_check<G, F>(analytic: G, value: F, c: &CoefficientVector) -> Option<(f64, usize)>
where
    G: Fn(&CoefficientVector) -> Vec<f64>,
    F: Fn(&CoefficientVector) -> f64,
{
    let b = basis();
    let cam = camera();
    let grad = analytic(c);
    let mut a = Vec::new();
    let mut fd = Vec::new();
    let mut probe = c.clone();
    for (i, &g) in grad.iter().enumerate() {
        let x = c.as_slice()[i];
        probe.as_mut_slice()[i] = x + FD_STEP;
        let plus = render_face(&b, &probe, &cam, None).unwrap().triangle;
        let fp = value(&probe);
        probe.as_mut_slice()[i] = x - FD_STEP;
        let minus = render_face(&b, &probe, &cam, None).unwrap().triangle;
        let fm = value(&probe);
        probe.as_mut_slice()[i] = x;
        if plus != minus {
            continue;
        }
        a.push(g);
        fd.push((fp - fm) / (2.0 * FD_STEP));
    }
    (a.len() >= COEFF_DIM / 2).then(|| (relative_error(&a, &fd), a.len()))
}

fn plain_check<G, F>(analytic: G, value: F, c: &CoefficientVector) -> (f64, usize)
where
    G: Fn(&CoefficientVector) -> Vec<f64>,
    F: Fn(&CoefficientVector) -> f64,
{
    let grad = analytic(c);
    let mut probe = c.clone();
    let fd: Vec<f64> = (0..COEFF_DIM)
        .map(|i| {
            let x = c.as_slice()[i];
            probe.as_mut_slice()[i] = x + FD_STEP;
            let fp = value(&probe);
            probe.as_mut_slice()[i] = x - FD_STEP;
            let fm = value(&probe);
            probe.as_mut_slice()[i] = x;
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect();
    (relative_error(&grad, &fd), COEFF_DIM)
}

/// One seed's worth of fixtures: a point, a different target face and a
/// discriminator.
struct Case {
    c: CoefficientVector,
    other: CoefficientVector,
    target: Image,
    disc: Discriminator,
}

fn case(seed: u64) -> Case {
    let c = random_face(1000 + seed);
    let other = random_face(2000 + seed);
    Case {
        target: render(&other),
        c,
        other,
        disc: Discriminator::new(seed),
    }
}

/// Runs the finite-difference suite for every loss over `seeds` seeds.
pub fn gradient_suite(seeds: usize) -> Vec<GradCheck> {
    let b = basis();
    let cam = camera();
    let w = LossWeights::default();
    let embedder = ReferenceEmbedder::new(0);
    let mut checks: Vec<GradCheck> = [
        "landmark",
        "photometric",
        "perceptual",
        "regularization",
        "robust photometric",
        "adversarial consistency",
    ]
    .into_iter()
    .map(|loss| GradCheck {
        loss,
        seeds: 0,
        worst: 0.0,
        coordinates: 0,
    })
    .collect();
    fn record(checks: &mut [GradCheck], k: usize, r: Option<(f64, usize)>) {
        if let Some((err, n)) = r {
            let c = &mut checks[k];
            c.seeds += 1;
            c.worst = c.worst.max(err);
            c.coordinates += n;
        }
    }

    let mut seed = 0u64;
    while seed < 4 * seeds as u64 {
        let Case {
            c,
            other,
            target,
            disc,
        } = case(seed);
        seed += 1;

        let target_lmk = project_landmarks(&b, &other, &cam).unwrap();
        let flat = target_lmk.to_flat();
        record(
            &mut checks,
            0,
            Some(plain_check(
                |c| {
                    let t = Tape::new();
                    let x = t.input(c.as_slice().to_vec());
                    let r = render_on_tape(&t, &b, x, &cam, None).unwrap();
                    let l = landmark_loss_var(r.landmarks().unwrap(), &flat).unwrap();
                    t.backward(&l).unwrap().wrt(&x)
                },
                |c| landmark_loss(&project_landmarks(&b, c, &cam).unwrap(), &target_lmk),
                &c,
            )),
        );

        record(
            &mut checks,
            1,
            rendered_check(
                |c| {
                    let t = Tape::new();
                    let x = t.input(c.as_slice().to_vec());
                    let r = render_on_tape(&t, &b, x, &cam, None).unwrap();
                    let l = photometric_loss_var(r.colors, &r.fragments, &target).unwrap();
                    t.backward(&l).unwrap().wrt(&x)
                },
                |c| photometric_loss(&render_face(&b, c, &cam, None).unwrap(), &target).unwrap(),
                &c,
            ),
        );

        let target_feats = embedder.features(&target);
        record(
            &mut checks,
            2,
            rendered_check(
                |c| {
                    let t = Tape::new();
                    let x = t.input(c.as_slice().to_vec());
                    let r = render_on_tape(&t, &b, x, &cam, None).unwrap();
                    let img = r.composite(&target).unwrap();
                    let f = embedder.features_var(img, SIZE, SIZE).unwrap();
                    let l = cosine_distance_var(f, &target_feats).unwrap();
                    t.backward(&l).unwrap().wrt(&x)
                },
                |c| {
                    let img = render_face(&b, c, &cam, Some(&target)).unwrap().to_image();
                    cosine_distance(&embedder.features(&img), &target_feats).unwrap()
                },
                &c,
            ),
        );

        record(
            &mut checks,
            3,
            Some(plain_check(
                |c| {
                    let t = Tape::new();
                    let x = t.input(c.as_slice().to_vec());
                    let l = regularization_var(x, &w).unwrap();
                    t.backward(&l).unwrap().wrt(&x)
                },
                |c| regularization_loss(c, &w),
                &c,
            )),
        );

        // Occlusion-resistive term through the pipeline's own objective:
        // render of C_O against the guiding image.
        let fit = FitConfig {
            consistency: ConsistencyMode::Disabled,
            ..FitConfig::default()
        };
        let session = |c_o: &CoefficientVector| {
            let mut s = FitSession::new(b.clone(), cam, w, fit, target.clone())
                .unwrap()
                .with_degraded(Some(target.clone()), None)
                .with_fitted_guiding(other.clone());
            s.c_o = c_o.clone();
            s
        };
        record(
            &mut checks,
            4,
            rendered_check(
                |c| robust_objective(&session(c), None).unwrap().grad_o,
                |c| w.beta_o * photometric_loss(&render_face(&b, c, &cam, None).unwrap(), &target).unwrap(),
                &c,
            ),
        );

        let c_n = random_face(3000 + seed);
        record(
            &mut checks,
            5,
            Some(plain_check(
                |c| {
                    let t = Tape::new();
                    let x = t.input(c.as_slice().to_vec());
                    let xn = t.input(c_n.as_slice().to_vec());
                    let params = t.input(disc.params().to_vec());
                    let l = consistency_penalty(
                        ConsistencyMode::Adversarial,
                        Some((&disc, params)),
                        &other,
                        Some(x),
                        Some(xn),
                        w.huber_delta,
                    )
                    .unwrap()
                    .unwrap();
                    t.backward(&l).unwrap().wrt(&x)
                },
                |c| {
                    consistency_loss(
                        &disc,
                        &other,
                        c,
                        &c_n,
                        [LABEL_GUIDING, LABEL_OCCLUDED, LABEL_NOISY],
                        w.huber_delta,
                    )
                    .total()
                },
                &c,
            )),
        );

        if checks.iter().all(|c| c.seeds >= seeds) {
            break;
        }
    }
    checks
}

/// Barycentric coordinates of `p` by Cramer's rule.
fn barycentric(t: [[f64; 2]; 3], p: [f64; 2]) -> [f64; 3] {
    let (a, b, c) = (t[0], t[1], t[2]);
    let m = [[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]];
    let r = [p[0] - a[0], p[1] - a[1]];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let l1 = (r[0] * m[1][1] - m[0][1] * r[1]) / det;
    let l2 = (m[0][0] * r[1] - r[0] * m[1][0]) / det;
    [1.0 - l1 - l2, l1, l2]
}

/// Rasterizer coverage against brute-force point-in-triangle tests.
#[derive(Debug, Clone, Default)]
pub struct RasterCheck {
    pub triangles: usize,
    pub mismatches: usize,
    /// Pixel centres that fall on an edge, where the oracle is ambiguous.
    pub edge_samples: usize,
    pub covered: usize,
}

impl RasterCheck {
    pub fn passed(&self) -> bool {
        self.mismatches == 0 && self.edge_samples == 0
    }
}

/// Random triangles straddling the frame border, checked at every pixel.
pub fn rasterizer_oracle(triangles: usize) -> RasterCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (w, h) = (SIZE, SIZE);
    let mut check = RasterCheck {
        triangles,
        ..RasterCheck::default()
    };
    for _ in 0..triangles {
        let t: [[f64; 2]; 3] = std::array::from_fn(|_| {
            [rng.random_range(-8.0..72.0), rng.random_range(-8.0..72.0)]
        });
        let verts: Vec<ProjectedVertex> = t
            .iter()
            .map(|p| ProjectedVertex {
                x: p[0],
                y: p[1],
                depth: rng.random_range(1.0..5.0),
                clipped: false,
            })
            .collect();
        let frame = rasterize(&verts, &[[0, 1, 2]], &[0.5; 9], w, h);
        for y in 0..h {
            for x in 0..w {
                let l = barycentric(t, [x as f64 + 0.5, y as f64 + 0.5]);
                if l.iter().any(|v| v.abs() <= 1e-12) {
                    check.edge_samples += 1;
                }
                let inside = l.iter().all(|&v| v > 0.0);
                check.mismatches += usize::from(frame.coverage[y * w + x] != inside);
                check.covered += usize::from(inside);
            }
        }
    }
    check
}
