//! Procedural stand-in for a scanned face model.
//!
//! The mean face is an ellipsoidal cap with a nose bump, tessellated as
//! rows of vertices zipped into triangles. Basis columns are smooth random
//! displacement fields, ordered from low to high spatial frequency and
//! orthonormalised with two passes of modified Gram-Schmidt. Shape and
//! expression columns are orthonormalised jointly so the geometry map is
//! injective.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ColMatrix, MorphableBasis, EXPRESSION_DIM, LANDMARK_COUNT, SHAPE_DIM, TEXTURE_DIM};
use crate::error::{Error, Result};

/// One vertex per landmark is the smallest usable mesh.
pub const MIN_VERTICES: usize = LANDMARK_COUNT;

const FREQS: usize = 8;

pub fn generate_synthetic_basis(vertex_count: usize, seed: u64) -> Result<MorphableBasis> {
    if vertex_count < MIN_VERTICES {
        return Err(Error::invalid(format!(
            "vertex_count must be at least {MIN_VERTICES} (one distinct vertex per landmark), got {vertex_count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = layout(vertex_count);

    let mut mean_geometry = Vec::with_capacity(3 * vertex_count);
    let mut mean_texture = Vec::with_capacity(3 * vertex_count);
    for &(u, v) in &grid.uv {
        mean_geometry.extend_from_slice(&surface_point(u, v));
        mean_texture.extend_from_slice(&albedo(u, v));
    }

    let mut triangles = grid.triangles.clone();
    orient_towards_camera(&mut triangles, &mean_geometry);

    let rows = 3 * vertex_count;
    let geometry_cols = orthonormal_fields(&grid.uv, SHAPE_DIM + EXPRESSION_DIM, 0.35, &mut rng)?;
    let texture_cols = orthonormal_fields(&grid.uv, TEXTURE_DIM, 0.5, &mut rng)?;
    let shape_basis = ColMatrix::from_columns(rows, &geometry_cols[..SHAPE_DIM])?;
    let expression_basis = ColMatrix::from_columns(rows, &geometry_cols[SHAPE_DIM..])?;
    let texture_basis = ColMatrix::from_columns(rows, &texture_cols)?;

    let basis = MorphableBasis {
        vertex_count,
        mean_geometry,
        mean_texture,
        shape_basis,
        expression_basis,
        texture_basis,
        triangles,
        landmark_indices: pick_landmarks(&grid.uv),
        basis_seed: seed,
    };
    basis.validate()?;
    Ok(basis)
}

struct Grid {
    uv: Vec<(f64, f64)>,
    triangles: Vec<[u32; 3]>,
}

/// Rows whose lengths differ by at most one, zipped pairwise.
fn layout(n: usize) -> Grid {
    let rows = ((n as f64).sqrt().round() as usize).max(2);
    let base = n / rows;
    let extra = n % rows;
    let mut uv = Vec::with_capacity(n);
    let mut starts = Vec::with_capacity(rows);
    for r in 0..rows {
        let len = base + usize::from(r < extra);
        starts.push((uv.len(), len));
        let v = -1.0 + 2.0 * r as f64 / (rows - 1) as f64;
        for i in 0..len {
            let u = -1.0 + 2.0 * i as f64 / (len - 1) as f64;
            uv.push((u, v));
        }
    }
    let mut triangles = Vec::new();
    for w in starts.windows(2) {
        let (a0, alen) = w[0];
        let (b0, blen) = w[1];
        let (mut i, mut j) = (0, 0);
        while i + 1 < alen || j + 1 < blen {
            let advance_a = if i + 1 >= alen {
                false
            } else if j + 1 >= blen {
                true
            } else {
                uv[a0 + i + 1].0 <= uv[b0 + j + 1].0
            };
            if advance_a {
                triangles.push([(a0 + i) as u32, (a0 + i + 1) as u32, (b0 + j) as u32]);
                i += 1;
            } else {
                triangles.push([(a0 + i) as u32, (b0 + j + 1) as u32, (b0 + j) as u32]);
                j += 1;
            }
        }
    }
    Grid { uv, triangles }
}

fn surface_point(u: f64, v: f64) -> [f64; 3] {
    let theta = 1.1 * u;
    let phi = 1.0 * v;
    let nose = 0.22 * (-(u * u + (v - 0.05) * (v - 0.05)) / 0.03).exp();
    [
        0.8 * theta.sin() * phi.cos(),
        0.95 * phi.sin(),
        -0.7 * theta.cos() * phi.cos() - nose,
    ]
}

fn blob(u: f64, v: f64, cu: f64, cv: f64, su: f64, sv: f64) -> f64 {
    (-((u - cu) * (u - cu) / (2.0 * su * su) + (v - cv) * (v - cv) / (2.0 * sv * sv))).exp()
}

fn albedo(u: f64, v: f64) -> [f64; 3] {
    let mut c = [0.78, 0.58, 0.48];
    let shade = 0.05 * (2.3 * u + 0.7).sin() * (1.9 * v - 0.4).cos();
    let eyes = blob(u, v, -0.38, -0.3, 0.12, 0.07) + blob(u, v, 0.38, -0.3, 0.12, 0.07);
    let brows = blob(u, v, -0.38, -0.5, 0.18, 0.04) + blob(u, v, 0.38, -0.5, 0.18, 0.04);
    let mouth = blob(u, v, 0.0, 0.5, 0.25, 0.07);
    for (k, ch) in c.iter_mut().enumerate() {
        *ch += shade - 0.45 * eyes - 0.35 * brows;
        *ch += match k {
            0 => 0.08 * mouth,
            _ => -0.2 * mouth,
        };
        *ch = ch.clamp(0.05, 0.95);
    }
    c
}

/// Flips any triangle whose face normal points away from the viewer (-z).
fn orient_towards_camera(triangles: &mut [[u32; 3]], geometry: &[f64]) {
    let p = |i: u32| {
        let i = i as usize * 3;
        [geometry[i], geometry[i + 1], geometry[i + 2]]
    };
    for t in triangles.iter_mut() {
        let (a, b, c) = (p(t[0]), p(t[1]), p(t[2]));
        let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let nz = e1[0] * e2[1] - e1[1] * e2[0];
        if nz > 0.0 {
            t.swap(1, 2);
        }
    }
}

/// Smooth random fields over the (u, v) chart, one value per vertex and
/// channel. Column `k` draws cosine-product coefficients with a Gaussian
/// frequency envelope whose width grows with `k`.
fn orthonormal_fields(
    uv: &[(f64, f64)],
    count: usize,
    base_width: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let n = uv.len();
    let cos_u: Vec<[f64; FREQS]> = uv
        .iter()
        .map(|&(u, _)| std::array::from_fn(|m| (m as f64 * PI * (u + 1.0) / 2.0).cos()))
        .collect();
    let cos_v: Vec<[f64; FREQS]> = uv
        .iter()
        .map(|&(_, v)| std::array::from_fn(|m| (m as f64 * PI * (v + 1.0) / 2.0).cos()))
        .collect();

    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(count);
    for k in 0..count {
        let width = base_width * FREQS as f64 * (0.25 + k as f64 / count as f64);
        let mut jitter = 1e-3;
        let col = loop {
            let mut field = vec![0.0; 3 * n];
            for ch in 0..3 {
                let mut amp = [[0.0; FREQS]; FREQS];
                for (m, row) in amp.iter_mut().enumerate() {
                    for (l, a) in row.iter_mut().enumerate() {
                        let env = (-((m * m + l * l) as f64) / (2.0 * width * width)).exp();
                        let g: f64 = rng.sample(StandardNormal);
                        *a = g * env;
                    }
                }
                for vtx in 0..n {
                    let mut s = 0.0;
                    for (m, row) in amp.iter().enumerate() {
                        for (l, a) in row.iter().enumerate() {
                            s += a * cos_u[vtx][m] * cos_v[vtx][l];
                        }
                    }
                    let g: f64 = rng.sample(StandardNormal);
                    field[3 * vtx + ch] = s + jitter * g;
                }
            }
            let initial = norm(&field);
            for _ in 0..2 {
                for q in &columns {
                    let d = dot(q, &field);
                    for (f, qv) in field.iter_mut().zip(q) {
                        *f -= d * qv;
                    }
                }
            }
            let remaining = norm(&field);
            if remaining > 1e-6 * initial && remaining > 0.0 {
                for f in field.iter_mut() {
                    *f /= remaining;
                }
                break field;
            }
            jitter *= 10.0;
            if jitter > 1e3 {
                return Err(Error::invalid(format!(
                    "could not orthogonalise basis column {k}; mesh too small"
                )));
            }
        };
        columns.push(col);
    }
    Ok(columns)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// 68 template positions laid out like the usual jaw / brow / nose / eye /
/// mouth scheme, each snapped to the nearest unused vertex.
fn landmark_template() -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(LANDMARK_COUNT);
    for i in 0..17 {
        let t = -PI / 2.0 + PI * i as f64 / 16.0;
        // The jaw contour follows the chart boundary, i.e. the silhouette.
        let (du, dv) = (t.sin(), 1.1 * t.cos());
        let k = (1.0 / du.abs().max(1e-9)).min(1.1 / dv.abs().max(1e-9));
        pts.push((du * k, -0.1 + dv * k));
    }
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let du = 0.1 + 0.07 * i as f64;
            pts.push((side * (0.72 - du + 0.1), -0.52 - 0.03 * (2.0 - i as f64).abs()));
        }
    }
    for i in 0..4 {
        pts.push((0.0, -0.25 + 0.12 * i as f64));
    }
    for i in 0..5 {
        pts.push((-0.16 + 0.08 * i as f64, 0.25));
    }
    for side in [-1.0, 1.0] {
        for i in 0..6 {
            let a = 2.0 * PI * i as f64 / 6.0;
            pts.push((side * 0.38 + 0.12 * a.cos(), -0.3 + 0.05 * a.sin()));
        }
    }
    for i in 0..12 {
        let a = 2.0 * PI * i as f64 / 12.0;
        pts.push((0.25 * a.cos(), 0.5 + 0.09 * a.sin()));
    }
    for i in 0..8 {
        let a = 2.0 * PI * i as f64 / 8.0;
        pts.push((0.15 * a.cos(), 0.5 + 0.04 * a.sin()));
    }
    debug_assert_eq!(pts.len(), LANDMARK_COUNT);
    pts
}

fn pick_landmarks(uv: &[(f64, f64)]) -> Vec<u32> {
    let mut used = vec![false; uv.len()];
    landmark_template()
        .into_iter()
        .map(|(tu, tv)| {
            let (best, _) = uv
                .iter()
                .enumerate()
                .filter(|(i, _)| !used[*i])
                .map(|(i, &(u, v))| (i, (u - tu).powi(2) + (v - tv).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("at least as many vertices as landmarks");
            used[best] = true;
            best as u32
        })
        .collect()
}
