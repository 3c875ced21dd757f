//! Z-buffered triangle rasterisation with perspective-correct colour
//! interpolation.
//!
//! Pixels are sampled at their centres `(i + 0.5, j + 0.5)`. A sample on an
//! edge belongs to the triangle for which that edge is a top or left edge,
//! so a pixel on an edge shared by two triangles is drawn exactly once.

use super::camera::ProjectedVertex;

pub const NO_TRIANGLE: u32 = u32::MAX;

/// Output of one render pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub rgb: Vec<f64>,
    pub coverage: Vec<bool>,
    /// `+inf` where nothing is covered.
    pub depth: Vec<f64>,
    /// Winning triangle per pixel, [`NO_TRIANGLE`] where uncovered.
    pub triangle: Vec<u32>,
}

impl RenderedFrame {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0.0; 3 * width * height],
            coverage: vec![false; width * height],
            depth: vec![f64::INFINITY; width * height],
            triangle: vec![NO_TRIANGLE; width * height],
        }
    }

    pub fn covered_count(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }

    /// Covered pixels in row-major order with their triangles.
    pub fn fragments(&self) -> Vec<Fragment> {
        self.triangle
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != NO_TRIANGLE)
            .map(|(p, &t)| Fragment {
                pixel: p as u32,
                triangle: t,
            })
            .collect()
    }

    pub fn to_image(&self) -> super::Image {
        super::Image::from_vec(self.width, self.height, self.rgb.clone())
            .expect("frame buffers are sized consistently")
    }
}

/// A covered pixel and the triangle that owns it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fragment {
    pub pixel: u32,
    pub triangle: u32,
}

/// `(b - a) x (p - a)`; positive when `p` is on the interior side of a
/// positively oriented edge.
#[inline]
pub(crate) fn edge(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> f64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

/// Ownership of samples lying exactly on an edge `a -> b` of a positively
/// oriented triangle.
#[inline]
pub(crate) fn owns_edge(ax: f64, ay: f64, bx: f64, by: f64) -> bool {
    let (dx, dy) = (bx - ax, by - ay);
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

#[inline]
fn inside(w: f64, owned: bool) -> bool {
    w > 0.0 || (w == 0.0 && owned)
}

/// Perspective-correct interpolation weights `w_i / z_i` for one sample.
#[inline]
fn sample_weights(v: [&ProjectedVertex; 3], px: f64, py: f64) -> [f64; 3] {
    let [a, b, c] = v;
    [
        edge(b.x, b.y, c.x, c.y, px, py) / a.depth,
        edge(c.x, c.y, a.x, a.y, px, py) / b.depth,
        edge(a.x, a.y, b.x, b.y, px, py) / c.depth,
    ]
}

/// Rasterises `triangles` over `projected` vertices with per-vertex RGB
/// `colors` (flat, 3 per vertex). Triangles touching a clipped vertex and
/// zero-area triangles produce no pixels.
pub fn rasterize(
    projected: &[ProjectedVertex],
    triangles: &[[u32; 3]],
    colors: &[f64],
    width: usize,
    height: usize,
) -> RenderedFrame {
    let mut frame = RenderedFrame::empty(width, height);
    for (ti, tri) in triangles.iter().enumerate() {
        let [mut a, mut b, c] = tri.map(|i| &projected[i as usize]);
        if a.clipped || b.clipped || c.clipped {
            continue;
        }
        let area = edge(a.x, a.y, b.x, b.y, c.x, c.y);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        let mut order = *tri;
        if area < 0.0 {
            std::mem::swap(&mut a, &mut b);
            order.swap(0, 1);
        }
        let own_bc = owns_edge(b.x, b.y, c.x, c.y);
        let own_ca = owns_edge(c.x, c.y, a.x, a.y);
        let own_ab = owns_edge(a.x, a.y, b.x, b.y);

        let min_x = a.x.min(b.x).min(c.x);
        let max_x = a.x.max(b.x).max(c.x);
        let min_y = a.y.min(b.y).min(c.y);
        let max_y = a.y.max(b.y).max(c.y);
        let x0 = ((min_x - 0.5).ceil().max(0.0)) as usize;
        let y0 = ((min_y - 0.5).ceil().max(0.0)) as usize;
        if max_x < 0.5 || max_y < 0.5 {
            continue;
        }
        let x1 = (((max_x - 0.5).floor()) as usize).min(width.saturating_sub(1));
        let y1 = (((max_y - 0.5).floor()) as usize).min(height.saturating_sub(1));
        for py in y0..=y1 {
            let sy = py as f64 + 0.5;
            for px in x0..=x1 {
                let sx = px as f64 + 0.5;
                let wa = edge(b.x, b.y, c.x, c.y, sx, sy);
                let wb = edge(c.x, c.y, a.x, a.y, sx, sy);
                let wc = edge(a.x, a.y, b.x, b.y, sx, sy);
                if !(inside(wa, own_bc) && inside(wb, own_ca) && inside(wc, own_ab)) {
                    continue;
                }
                let q = [wa / a.depth, wb / b.depth, wc / c.depth];
                let qs = q[0] + q[1] + q[2];
                let depth = area.abs() / qs;
                let pix = py * width + px;
                if depth < frame.depth[pix] {
                    frame.depth[pix] = depth;
                    frame.coverage[pix] = true;
                    frame.triangle[pix] = ti as u32;
                    for ch in 0..3 {
                        frame.rgb[3 * pix + ch] = (0..3)
                            .map(|k| q[k] * colors[3 * order[k] as usize + ch])
                            .sum::<f64>()
                            / qs;
                    }
                }
            }
        }
    }
    frame
}

/// Interpolated colours of `fragments` (3 values each) with the pixel to
/// triangle assignment held fixed.
pub(crate) fn interpolate_fragments(
    projected: &[f64],
    colors: &[f64],
    triangles: &[[u32; 3]],
    fragments: &[Fragment],
    width: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * fragments.len());
    for f in fragments {
        let tri = triangles[f.triangle as usize];
        let (px, py) = pixel_center(f.pixel, width);
        let v = tri.map(|i| vertex(projected, i));
        let q = sample_weights([&v[0], &v[1], &v[2]], px, py);
        let qs = q[0] + q[1] + q[2];
        for ch in 0..3 {
            out.push(
                (0..3)
                    .map(|k| q[k] * colors[3 * tri[k] as usize + ch])
                    .sum::<f64>()
                    / qs,
            );
        }
    }
    out
}

/// Gradients of [`interpolate_fragments`] for projected `(x, y, depth)`
/// and vertex colours.
pub(crate) fn interpolate_fragments_backward(
    projected: &[f64],
    colors: &[f64],
    triangles: &[[u32; 3]],
    fragments: &[Fragment],
    width: usize,
    g_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut g_proj = vec![0.0; projected.len()];
    let mut g_col = vec![0.0; colors.len()];
    for (fi, f) in fragments.iter().enumerate() {
        let g = &g_out[3 * fi..3 * fi + 3];
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let tri = triangles[f.triangle as usize];
        let (px, py) = pixel_center(f.pixel, width);
        let v = tri.map(|i| vertex(projected, i));
        let w = [
            edge(v[1].x, v[1].y, v[2].x, v[2].y, px, py),
            edge(v[2].x, v[2].y, v[0].x, v[0].y, px, py),
            edge(v[0].x, v[0].y, v[1].x, v[1].y, px, py),
        ];
        let q = [w[0] / v[0].depth, w[1] / v[1].depth, w[2] / v[2].depth];
        let qs = q[0] + q[1] + q[2];
        let col = |k: usize, ch: usize| colors[3 * tri[k] as usize + ch];
        let out: [f64; 3] =
            std::array::from_fn(|ch| (0..3).map(|k| q[k] * col(k, ch)).sum::<f64>() / qs);
        let mut g_w = [0.0; 3];
        for k in 0..3 {
            let mut gq = 0.0;
            for ch in 0..3 {
                gq += g[ch] * (col(k, ch) - out[ch]) / qs;
                g_col[3 * tri[k] as usize + ch] += g[ch] * q[k] / qs;
            }
            g_w[k] = gq / v[k].depth;
            g_proj[3 * tri[k] as usize + 2] += -gq * w[k] / (v[k].depth * v[k].depth);
        }
        // w_k = edge(u, v, p) over the two vertices opposite k.
        let pairs = [(1, 2), (2, 0), (0, 1)];
        for (k, &(ui, vi)) in pairs.iter().enumerate() {
            let (u, vv) = (&v[ui], &v[vi]);
            let gu = [vv.y - py, px - vv.x];
            let gv = [py - u.y, -(px - u.x)];
            let (iu, iv) = (tri[ui] as usize, tri[vi] as usize);
            g_proj[3 * iu] += g_w[k] * gu[0];
            g_proj[3 * iu + 1] += g_w[k] * gu[1];
            g_proj[3 * iv] += g_w[k] * gv[0];
            g_proj[3 * iv + 1] += g_w[k] * gv[1];
        }
    }
    (g_proj, g_col)
}

#[inline]
pub(crate) fn pixel_center(pixel: u32, width: usize) -> (f64, f64) {
    let p = pixel as usize;
    ((p % width) as f64 + 0.5, (p / width) as f64 + 0.5)
}

#[inline]
fn vertex(projected: &[f64], i: u32) -> ProjectedVertex {
    let i = 3 * i as usize;
    ProjectedVertex {
        x: projected[i],
        y: projected[i + 1],
        depth: projected[i + 2],
        clipped: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{finite_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(x: f64, y: f64, depth: f64) -> ProjectedVertex {
        ProjectedVertex {
            x,
            y,
            depth,
            clipped: false,
        }
    }

    #[test]
    fn nearer_triangle_wins() {
        let verts = vec![
            pv(2.0, 2.0, 1.0),
            pv(30.0, 2.0, 1.0),
            pv(2.0, 30.0, 1.0),
            pv(1.0, 1.0, 2.0),
            pv(31.0, 1.0, 2.0),
            pv(1.0, 31.0, 2.0),
        ];
        let mut colors = [1.0, 0.0, 0.0].repeat(3);
        colors.extend([0.0, 0.0, 1.0].repeat(3));
        // Far triangle drawn last must still lose.
        let frame = rasterize(&verts, &[[0, 1, 2], [3, 4, 5]], &colors, 32, 32);
        let p = 5 * 32 + 5;
        assert_eq!(&frame.rgb[3 * p..3 * p + 3], &[1.0, 0.0, 0.0]);
        assert!((frame.depth[p] - 1.0).abs() < 1e-12);
        let frame = rasterize(&verts, &[[3, 4, 5], [0, 1, 2]], &colors, 32, 32);
        assert_eq!(&frame.rgb[3 * p..3 * p + 3], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn degenerate_triangle_is_empty() {
        let verts = vec![pv(1.0, 1.0, 1.0), pv(10.0, 10.0, 1.0), pv(20.0, 20.0, 1.0)];
        let frame = rasterize(&verts, &[[0, 1, 2]], &[0.5; 9], 32, 32);
        assert_eq!(frame.covered_count(), 0);
    }

    #[test]
    fn clipped_triangle_is_dropped() {
        let mut verts = vec![pv(1.0, 1.0, 1.0), pv(30.0, 1.0, 1.0), pv(1.0, 30.0, 1.0)];
        verts[2].clipped = true;
        let frame = rasterize(&verts, &[[0, 1, 2]], &[0.5; 9], 32, 32);
        assert_eq!(frame.covered_count(), 0);
    }

    #[test]
    fn shared_edge_pixels_drawn_once() {
        // Square split along its diagonal; the diagonal passes through
        // pixel centres.
        let verts = vec![
            pv(0.0, 0.0, 1.0),
            pv(8.0, 0.0, 1.0),
            pv(8.0, 8.0, 1.0),
            pv(0.0, 8.0, 1.0),
        ];
        let mut counts = vec![0; 64];
        for tri in [[0u32, 1, 2], [0, 2, 3]] {
            let f = rasterize(&verts, &[tri], &[0.0; 12], 8, 8);
            for (i, &c) in f.coverage.iter().enumerate() {
                counts[i] += usize::from(c);
            }
        }
        assert!(counts.iter().all(|&c| c == 1), "{counts:?}");
    }

    #[test]
    fn constant_color_is_reproduced() {
        let verts = vec![pv(3.0, 3.0, 2.0), pv(40.0, 5.0, 3.0), pv(10.0, 50.0, 5.0)];
        let colors = [0.2, 0.4, 0.6].repeat(3);
        let f = rasterize(&verts, &[[0, 1, 2]], &colors, 64, 64);
        assert!(f.covered_count() > 100);
        for p in 0..64 * 64 {
            if f.coverage[p] {
                for (ch, c) in colors[..3].iter().enumerate() {
                    assert!((f.rgb[3 * p + ch] - c).abs() < 1e-12);
                }
                assert!(f.depth[p].is_finite());
            } else {
                assert!(f.depth[p].is_infinite());
            }
        }
    }

    #[test]
    fn interpolation_matches_rasterizer_and_its_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let projected = vec![
            5.3, 4.1, 2.0, 27.7, 8.2, 3.1, 12.4, 29.9, 4.4, 29.0, 28.0, 2.5,
        ];
        let tris = vec![[0u32, 1, 2], [1, 3, 2]];
        let colors: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
        let verts: Vec<ProjectedVertex> = projected
            .chunks(3)
            .map(|c| pv(c[0], c[1], c[2]))
            .collect();
        let frame = rasterize(&verts, &tris, &colors, 32, 32);
        let frags = frame.fragments();
        let interp = interpolate_fragments(&projected, &colors, &tris, &frags, 32);
        for (i, f) in frags.iter().enumerate() {
            for ch in 0..3 {
                let a = interp[3 * i + ch];
                let b = frame.rgb[3 * f.pixel as usize + ch];
                assert!((a - b).abs() < 1e-12);
            }
        }
        let w: Vec<f64> = (0..interp.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &[f64], c: &[f64]| -> f64 {
            interpolate_fragments(p, c, &tris, &frags, 32)
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum()
        };
        let (gp, gc) = interpolate_fragments_backward(&projected, &colors, &tris, &frags, 32, &w);
        let fdp = finite_difference(|p| loss(p, &colors), &projected, 1e-6);
        let fdc = finite_difference(|c| loss(&projected, c), &colors, 1e-6);
        assert!(relative_error(&gp, &fdp) < 1e-6);
        assert!(relative_error(&gc, &fdc) < 1e-6);
    }
}
