//! Coefficients to pixels: shading, projection, rasterisation, and the
//! differentiable version of the same chain recorded on a [`Tape`].

mod camera;
mod image;
mod raster;
mod shading;

use std::rc::Rc;
use std::sync::Arc;

pub use camera::{project_vertices, rotation_matrix, Camera, ProjectedVertex, NEAR_PLANE};
pub use image::Image;
pub use raster::{rasterize, Fragment, RenderedFrame, NO_TRIANGLE};
pub use shading::{sh_basis, sh_shade, vertex_normals, SH_C0, SH_C1, SH_C2, SH_C3, SH_C4};

use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::model::{
    morph_geometry_raw, morph_texture_raw, CoefficientVector, MorphableBasis, Segment, COEFF_DIM,
    LANDMARK_COUNT,
};

/// 68 projected landmark positions in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::invalid(format!(
                "expected {LANDMARK_COUNT} landmarks, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("landmark coordinates must be finite"));
        }
        Ok(Self { points })
    }

    pub fn from_flat(xy: &[f64]) -> Result<Self> {
        Self::new(xy.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
    }

    /// `x0, y0, x1, y1, ...`
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }
}

fn clamp01(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.clamp(0.0, 1.0)).collect()
}

fn flatten_projected(p: &[ProjectedVertex]) -> Vec<f64> {
    p.iter().flat_map(|v| [v.x, v.y, v.depth]).collect()
}

/// Posed geometry and shaded per-vertex colours.
fn shaded_mesh(basis: &MorphableBasis, coeffs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let geometry = morph_geometry_raw(basis, coeffs)?;
    let albedo = clamp01(&morph_texture_raw(basis, coeffs)?);
    let normals = vertex_normals(&geometry, &basis.triangles);
    let colors = shading::shade_vertices(&normals, &albedo, &coeffs[Segment::Illumination.range()]);
    Ok((geometry, colors))
}

/// Renders a face. Uncovered pixels take `background`, or black.
pub fn render_face(
    basis: &MorphableBasis,
    coeffs: &CoefficientVector,
    camera: &Camera,
    background: Option<&Image>,
) -> Result<RenderedFrame> {
    camera.validate()?;
    let (w, h) = (camera.image_width, camera.image_height);
    if let Some(bg) = background {
        if bg.width() != w || bg.height() != h {
            return Err(Error::invalid(format!(
                "background is {}x{}, camera renders {w}x{h}",
                bg.width(),
                bg.height()
            )));
        }
    }
    let (geometry, colors) = shaded_mesh(basis, coeffs.as_slice())?;
    let projected = project_vertices(&geometry, coeffs.pose(), camera);
    let mut frame = rasterize(&projected, &basis.triangles, &colors, w, h);
    if let Some(bg) = background {
        for (p, &covered) in frame.coverage.iter().enumerate() {
            if !covered {
                frame.rgb[3 * p..3 * p + 3].copy_from_slice(&bg.data()[3 * p..3 * p + 3]);
            }
        }
    }
    Ok(frame)
}

/// Projected positions of the landmark vertices.
pub fn project_landmarks(
    basis: &MorphableBasis,
    coeffs: &CoefficientVector,
    camera: &Camera,
) -> Result<LandmarkSet> {
    let geometry = morph_geometry_raw(basis, coeffs.as_slice())?;
    let projected = project_vertices(&geometry, coeffs.pose(), camera);
    let mut points = Vec::with_capacity(LANDMARK_COUNT);
    for (index, &v) in basis.landmark_indices.iter().enumerate() {
        let p = projected[v as usize];
        if p.clipped {
            return Err(Error::ClippedLandmark {
                index,
                vertex: v as usize,
            });
        }
        points.push([p.x, p.y]);
    }
    LandmarkSet::new(points)
}

/// A render recorded on a tape.
pub struct TapedRender<'t> {
    pub width: usize,
    pub height: usize,
    /// Covered pixels in row-major order, frozen for this evaluation.
    pub fragments: Rc<Vec<Fragment>>,
    /// Three colour values per fragment.
    pub colors: Var<'t>,
    landmarks: Var<'t>,
    clipped_landmark: Option<(usize, usize)>,
}

impl<'t> TapedRender<'t> {
    /// Landmark coordinates as `x0, y0, x1, y1, ...`.
    pub fn landmarks(&self) -> Result<Var<'t>> {
        match self.clipped_landmark {
            Some((index, vertex)) => Err(Error::ClippedLandmark { index, vertex }),
            None => Ok(self.landmarks),
        }
    }

    /// Full image with the face composited over `background`.
    pub fn composite(&self, background: &Image) -> Result<Var<'t>> {
        if background.width() != self.width || background.height() != self.height {
            return Err(Error::invalid("background size does not match the render"));
        }
        let mut out = background.data().to_vec();
        let colors = self.colors.value();
        for (i, f) in self.fragments.iter().enumerate() {
            let p = 3 * f.pixel as usize;
            out[p..p + 3].copy_from_slice(&colors[3 * i..3 * i + 3]);
        }
        let frags = Rc::clone(&self.fragments);
        Ok(self.colors.tape().custom(&[self.colors], out, move |g| {
            let mut gc = Vec::with_capacity(3 * frags.len());
            for f in frags.iter() {
                let p = 3 * f.pixel as usize;
                gc.extend_from_slice(&g[p..p + 3]);
            }
            vec![gc]
        }))
    }
}

fn coeff_grad(seg: Segment, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; COEFF_DIM];
    out[seg.range()].copy_from_slice(g);
    out
}

/// Differentiable render of `coeffs` (a 257-long variable). Pixel coverage
/// comes from a plain rasterisation at the current value unless `frozen`
/// fragments are supplied; gradients never flow through coverage changes.
pub fn render_on_tape<'t>(
    tape: &'t Tape,
    basis: &Arc<MorphableBasis>,
    coeffs: Var<'t>,
    camera: &Camera,
    frozen: Option<&[Fragment]>,
) -> Result<TapedRender<'t>> {
    camera.validate()?;
    let c = coeffs.value();
    if c.len() != COEFF_DIM {
        return Err(Error::invalid(format!(
            "expected {COEFF_DIM} coefficients, got {}",
            c.len()
        )));
    }

    let b = Arc::clone(basis);
    let geometry = tape.custom(&[coeffs], morph_geometry_raw(basis, &c)?, move |g| {
        let mut gc = vec![0.0; COEFF_DIM];
        gc[Segment::Shape.range()].copy_from_slice(&b.shape_basis.transpose_mul(g));
        gc[Segment::Expression.range()].copy_from_slice(&b.expression_basis.transpose_mul(g));
        vec![gc]
    });

    let raw_tex = Rc::new(morph_texture_raw(basis, &c)?);
    let b = Arc::clone(basis);
    let tex = Rc::clone(&raw_tex);
    let albedo = tape.custom(&[coeffs], clamp01(&raw_tex), move |g| {
        let masked: Vec<f64> = g
            .iter()
            .zip(tex.iter())
            .map(|(g, t)| if (0.0..=1.0).contains(t) { *g } else { 0.0 })
            .collect();
        vec![coeff_grad(Segment::Texture, &b.texture_basis.transpose_mul(&masked))]
    });

    let geo_val = geometry.value();
    let b = Arc::clone(basis);
    let geo = Rc::clone(&geo_val);
    let normals = tape.custom(
        &[geometry],
        vertex_normals(&geo_val, &basis.triangles),
        move |g| vec![shading::vertex_normals_backward(&geo, &b.triangles, g)],
    );

    let (n_val, a_val) = (normals.value(), albedo.value());
    let gamma: Vec<f64> = c[Segment::Illumination.range()].to_vec();
    let shaded = shading::shade_vertices(&n_val, &a_val, &gamma);
    let colors = tape.custom(&[normals, albedo, coeffs], shaded, move |g| {
        let (gn, ga, gg) = shading::shade_vertices_backward(&n_val, &a_val, &gamma, g);
        vec![gn, ga, coeff_grad(Segment::Illumination, &gg)]
    });

    let pose: Vec<f64> = c[Segment::Pose.range()].to_vec();
    let verts = project_vertices(&geo_val, &pose, camera);
    let cam = *camera;
    let geo = Rc::clone(&geo_val);
    let projected = tape.custom(&[geometry, coeffs], flatten_projected(&verts), move |g| {
        let (gg, gp) = camera::project_backward(&geo, &pose, &cam, g);
        vec![gg, coeff_grad(Segment::Pose, &gp)]
    });

    let (w, h) = (camera.image_width, camera.image_height);
    let fragments = Rc::new(match frozen {
        Some(f) => f.to_vec(),
        None => rasterize(&verts, &basis.triangles, &colors.value(), w, h).fragments(),
    });

    let (p_val, c_val) = (projected.value(), colors.value());
    let b = Arc::clone(basis);
    let frags = Rc::clone(&fragments);
    let interp = raster::interpolate_fragments(&p_val, &c_val, &basis.triangles, &fragments, w);
    let pixel_colors = tape.custom(&[projected, colors], interp, move |g| {
        let (gp, gc) =
            raster::interpolate_fragments_backward(&p_val, &c_val, &b.triangles, &frags, w, g);
        vec![gp, gc]
    });

    let clipped_landmark = basis
        .landmark_indices
        .iter()
        .enumerate()
        .find(|(_, &v)| verts[v as usize].clipped)
        .map(|(i, &v)| (i, v as usize));
    let landmarks = projected.gather(
        basis
            .landmark_indices
            .iter()
            .flat_map(|&v| [3 * v as usize, 3 * v as usize + 1])
            .collect(),
    );

    Ok(TapedRender {
        width: w,
        height: h,
        fragments,
        colors: pixel_colors,
        landmarks,
        clipped_landmark,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{finite_difference, relative_error};
    use crate::model::generate_synthetic_basis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Arc<MorphableBasis>, Camera) {
        (
            Arc::new(generate_synthetic_basis(300, 5).unwrap()),
            Camera::for_size(48, 48),
        )
    }

    fn random_coeffs(seed: u64) -> CoefficientVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = CoefficientVector::canonical(5.0, 3.0);
        for v in c.segment_mut(Segment::Shape) {
            *v = rng.random_range(-0.3..0.3);
        }
        for v in c.segment_mut(Segment::Texture) {
            *v = rng.random_range(-0.3..0.3);
        }
        for v in c.segment_mut(Segment::Illumination).iter_mut().skip(1) {
            *v += rng.random_range(-0.2..0.2);
        }
        c.as_mut_slice()[251] = rng.random_range(-0.2..0.2);
        c.as_mut_slice()[252] = rng.random_range(-0.2..0.2);
        c
    }

    #[test]
    fn black_background_by_default() {
        let (b, cam) = setup();
        let f = render_face(&b, &random_coeffs(1), &cam, None).unwrap();
        assert!(f.covered_count() > 0);
        for p in 0..f.coverage.len() {
            if !f.coverage[p] {
                assert_eq!(&f.rgb[3 * p..3 * p + 3], &[0.0; 3]);
            }
        }
    }

    #[test]
    fn background_fills_uncovered_and_size_is_checked() {
        let (b, cam) = setup();
        let bg = Image::filled(48, 48, [0.1, 0.2, 0.3]);
        let f = render_face(&b, &random_coeffs(2), &cam, Some(&bg)).unwrap();
        let p = 0;
        assert!(!f.coverage[p]);
        assert_eq!(&f.rgb[0..3], &[0.1, 0.2, 0.3]);
        let small = Image::new(10, 10);
        assert!(render_face(&b, &random_coeffs(2), &cam, Some(&small)).is_err());
    }

    #[test]
    fn texture_does_not_move_landmarks() {
        let (b, cam) = setup();
        let c1 = random_coeffs(3);
        let mut c2 = c1.clone();
        c2.segment_mut(Segment::Texture).iter_mut().for_each(|v| *v += 0.5);
        assert_eq!(
            project_landmarks(&b, &c1, &cam).unwrap(),
            project_landmarks(&b, &c2, &cam).unwrap()
        );
    }

    #[test]
    fn landmarks_are_a_subselection_of_projection() {
        let (b, cam) = setup();
        let c = random_coeffs(4);
        let lm = project_landmarks(&b, &c, &cam).unwrap();
        let geo = morph_geometry_raw(&b, c.as_slice()).unwrap();
        let all = project_vertices(&geo, c.pose(), &cam);
        for (k, &v) in b.landmark_indices.iter().enumerate() {
            assert_eq!(lm.points[k], [all[v as usize].x, all[v as usize].y]);
        }
    }

    #[test]
    fn clipped_landmark_is_reported() {
        let (b, cam) = setup();
        let mut c = random_coeffs(5);
        c.as_mut_slice()[256] = -10.0;
        match project_landmarks(&b, &c, &cam) {
            Err(Error::ClippedLandmark { index, .. }) => assert_eq!(index, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn taped_colors_match_plain_render() {
        let (b, cam) = setup();
        let c = random_coeffs(6);
        let frame = render_face(&b, &c, &cam, None).unwrap();
        let tape = Tape::new();
        let x = tape.input(c.as_slice().to_vec());
        let r = render_on_tape(&tape, &b, x, &cam, None).unwrap();
        assert_eq!(r.fragments.len(), frame.covered_count());
        let colors = r.colors.value();
        for (i, f) in r.fragments.iter().enumerate() {
            for ch in 0..3 {
                let p = 3 * f.pixel as usize + ch;
                assert!((colors[3 * i + ch] - frame.rgb[p]).abs() < 1e-12);
            }
        }
        let lm = project_landmarks(&b, &c, &cam).unwrap().to_flat();
        assert_eq!(*r.landmarks().unwrap().value(), lm);
    }

    #[test]
    fn taped_render_gradient_matches_frozen_fd() {
        let (b, cam) = setup();
        let c = random_coeffs(7);
        let tape = Tape::new();
        let x = tape.input(c.as_slice().to_vec());
        let r = render_on_tape(&tape, &b, x, &cam, None).unwrap();
        let n = r.colors.len();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wv = tape.input(w.clone());
        let loss = r.colors.dot(&wv);
        let g = tape.backward(&loss).unwrap().wrt(&x);
        let frags = r.fragments.as_ref().clone();
        let fd = finite_difference(
            |p| {
                let t = Tape::new();
                let xv = t.input(p.to_vec());
                let rr = render_on_tape(&t, &b, xv, &cam, Some(&frags)).unwrap();
                rr.colors.value().iter().zip(&w).map(|(a, b)| a * b).sum()
            },
            c.as_slice(),
            1e-5,
        );
        assert!(relative_error(&g, &fd) < 1e-5, "{}", relative_error(&g, &fd));
    }
}
