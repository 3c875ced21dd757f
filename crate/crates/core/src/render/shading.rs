//! Nine-term spherical-harmonics Lambertian shading and vertex normals.

use crate::error::{Error, Result};

pub const SH_C0: f64 = 0.282095;
pub const SH_C1: f64 = 0.488603;
pub const SH_C2: f64 = 1.092548;
pub const SH_C3: f64 = 0.315392;
pub const SH_C4: f64 = 0.546274;

/// Real SH basis, bands 0..2, evaluated at a unit normal.
pub fn sh_basis(n: [f64; 3]) -> [f64; 9] {
    let [x, y, z] = n;
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ]
}

/// Partial derivatives of each basis function with respect to (x, y, z).
fn sh_basis_grad(n: [f64; 3]) -> [[f64; 3]; 9] {
    let [x, y, z] = n;
    [
        [0.0, 0.0, 0.0],
        [0.0, SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [SH_C1, 0.0, 0.0],
        [SH_C2 * y, SH_C2 * x, 0.0],
        [0.0, SH_C2 * z, SH_C2 * y],
        [0.0, 0.0, 6.0 * SH_C3 * z],
        [SH_C2 * z, 0.0, SH_C2 * x],
        [2.0 * SH_C4 * x, -2.0 * SH_C4 * y, 0.0],
    ]
}

/// Shades one surface point. `gamma` is channel-major: 9 bands for red,
/// then green, then blue.
pub fn sh_shade(normal: [f64; 3], albedo: [f64; 3], gamma: &[f64]) -> Result<[f64; 3]> {
    let len = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (len - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("normal must be unit length, got |n| = {len}")));
    }
    if gamma.len() != 27 {
        return Err(Error::invalid(format!("expected 27 SH coefficients, got {}", gamma.len())));
    }
    let h = sh_basis(normal);
    Ok(std::array::from_fn(|c| {
        let irradiance: f64 = (0..9).map(|b| gamma[9 * c + b] * h[b]).sum();
        (albedo[c] * irradiance).clamp(0.0, 1.0)
    }))
}

/// Vectorised shading over all vertices; no unit-length check.
pub(crate) fn shade_vertices(normals: &[f64], albedo: &[f64], gamma: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; normals.len()];
    for (k, n) in normals.chunks_exact(3).enumerate() {
        let h = sh_basis([n[0], n[1], n[2]]);
        for c in 0..3 {
            let irr: f64 = (0..9).map(|b| gamma[9 * c + b] * h[b]).sum();
            out[3 * k + c] = (albedo[3 * k + c] * irr).clamp(0.0, 1.0);
        }
    }
    out
}

/// Gradients of [`shade_vertices`] for normals, albedo and gamma.
pub(crate) fn shade_vertices_backward(
    normals: &[f64],
    albedo: &[f64],
    gamma: &[f64],
    g_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut g_n = vec![0.0; normals.len()];
    let mut g_a = vec![0.0; albedo.len()];
    let mut g_gamma = vec![0.0; 27];
    for (k, n) in normals.chunks_exact(3).enumerate() {
        let nv = [n[0], n[1], n[2]];
        let h = sh_basis(nv);
        let dh = sh_basis_grad(nv);
        for c in 0..3 {
            let g = g_out[3 * k + c];
            if g == 0.0 {
                continue;
            }
            let a = albedo[3 * k + c];
            let irr: f64 = (0..9).map(|b| gamma[9 * c + b] * h[b]).sum();
            let raw = a * irr;
            if !(0.0..=1.0).contains(&raw) {
                continue;
            }
            g_a[3 * k + c] += g * irr;
            for b in 0..9 {
                g_gamma[9 * c + b] += g * a * h[b];
                for j in 0..3 {
                    g_n[3 * k + j] += g * a * gamma[9 * c + b] * dh[b][j];
                }
            }
        }
    }
    (g_n, g_a, g_gamma)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn vertex(g: &[f64], i: u32) -> [f64; 3] {
    let i = 3 * i as usize;
    [g[i], g[i + 1], g[i + 2]]
}

/// Unnormalised area-weighted accumulation of face normals per vertex.
fn accumulate_normals(geometry: &[f64], triangles: &[[u32; 3]]) -> Vec<f64> {
    let mut acc = vec![0.0; geometry.len()];
    for t in triangles {
        let a = vertex(geometry, t[0]);
        let n = cross(sub(vertex(geometry, t[1]), a), sub(vertex(geometry, t[2]), a));
        for &i in t {
            for j in 0..3 {
                acc[3 * i as usize + j] += n[j];
            }
        }
    }
    acc
}

/// Normalised area-weighted vertex normals. Vertices without any incident
/// area get `(0, 0, -1)` (facing the camera).
pub fn vertex_normals(geometry: &[f64], triangles: &[[u32; 3]]) -> Vec<f64> {
    let mut acc = accumulate_normals(geometry, triangles);
    for n in acc.chunks_exact_mut(3) {
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len > 1e-300 {
            n.iter_mut().for_each(|v| *v /= len);
        } else {
            n.copy_from_slice(&[0.0, 0.0, -1.0]);
        }
    }
    acc
}

pub(crate) fn vertex_normals_backward(
    geometry: &[f64],
    triangles: &[[u32; 3]],
    g_normals: &[f64],
) -> Vec<f64> {
    let acc = accumulate_normals(geometry, triangles);
    let mut g_acc = vec![0.0; acc.len()];
    for k in 0..acc.len() / 3 {
        let m = [acc[3 * k], acc[3 * k + 1], acc[3 * k + 2]];
        let len = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
        if len <= 1e-300 {
            continue;
        }
        let n = [m[0] / len, m[1] / len, m[2] / len];
        let g = [g_normals[3 * k], g_normals[3 * k + 1], g_normals[3 * k + 2]];
        let dot = n[0] * g[0] + n[1] * g[1] + n[2] * g[2];
        for j in 0..3 {
            g_acc[3 * k + j] = (g[j] - n[j] * dot) / len;
        }
    }
    let mut g_geo = vec![0.0; geometry.len()];
    for t in triangles {
        let a = vertex(geometry, t[0]);
        let e1 = sub(vertex(geometry, t[1]), a);
        let e2 = sub(vertex(geometry, t[2]), a);
        let mut gn = [0.0; 3];
        for &i in t {
            for j in 0..3 {
                gn[j] += g_acc[3 * i as usize + j];
            }
        }
        let ge1 = cross(e2, gn);
        let ge2 = cross(gn, e1);
        for j in 0..3 {
            g_geo[3 * t[1] as usize + j] += ge1[j];
            g_geo[3 * t[2] as usize + j] += ge2[j];
            g_geo[3 * t[0] as usize + j] -= ge1[j] + ge2[j];
        }
    }
    g_geo
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::finite_difference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / l, v[1] / l, v[2] / l]
    }

    #[test]
    fn band_zero_only_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut gamma = [0.0; 27];
        gamma[0] = 1.5;
        gamma[9] = 2.0;
        gamma[18] = 0.5;
        let albedo = [0.4, 0.3, 0.9];
        for _ in 0..10 {
            let n = random_unit(&mut rng);
            let out = sh_shade(n, albedo, &gamma).unwrap();
            for c in 0..3 {
                let expected = albedo[c] * gamma[9 * c] * 0.282095;
                assert!((out[c] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn black_albedo_is_black() {
        let gamma = [3.0; 27];
        assert_eq!(sh_shade([0.0, 0.0, 1.0], [0.0; 3], &gamma).unwrap(), [0.0; 3]);
    }

    #[test]
    fn non_unit_normal_is_rejected() {
        assert!(sh_shade([0.0, 0.0, 1.1], [0.5; 3], &[0.0; 27]).is_err());
    }

    // Each SH polynomial written out on its own.
    fn scalar_oracle(n: [f64; 3], albedo: [f64; 3], gamma: &[f64]) -> [f64; 3] {
        let (x, y, z) = (n[0], n[1], n[2]);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let g = &gamma[9 * c..9 * c + 9];
            let mut s = 0.0;
            s += g[0] * 0.282095;
            s += g[1] * 0.488603 * y;
            s += g[2] * 0.488603 * z;
            s += g[3] * 0.488603 * x;
            s += g[4] * 1.092548 * x * y;
            s += g[5] * 1.092548 * y * z;
            s += g[6] * 0.315392 * (3.0 * z * z - 1.0);
            s += g[7] * 1.092548 * x * z;
            s += g[8] * 0.546274 * (x * x - y * y);
            out[c] = (albedo[c] * s).clamp(0.0, 1.0);
        }
        out
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = random_unit(&mut rng);
            let albedo: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let gamma: Vec<f64> = (0..27).map(|_| rng.random_range(-0.6..0.6)).collect();
            let got = sh_shade(n, albedo, &gamma).unwrap();
            let want = scalar_oracle(n, albedo, &gamma);
            for c in 0..3 {
                assert!((got[c] - want[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_in_gamma_away_from_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = random_unit(&mut rng);
        let albedo = [0.5, 0.4, 0.3];
        let mut g1 = vec![0.0; 27];
        let mut g2 = vec![0.0; 27];
        for c in 0..3 {
            g1[9 * c] = 2.0;
            g2[9 * c] = 1.0;
            for b in 1..9 {
                g1[9 * c + b] = rng.random_range(-0.1..0.1);
                g2[9 * c + b] = rng.random_range(-0.1..0.1);
            }
        }
        let (a, b) = (0.6, 0.3);
        let mix: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| a * x + b * y).collect();
        let s1 = sh_shade(n, albedo, &g1).unwrap();
        let s2 = sh_shade(n, albedo, &g2).unwrap();
        let sm = sh_shade(n, albedo, &mix).unwrap();
        for c in 0..3 {
            assert!((sm[c] - (a * s1[c] + b * s2[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn shading_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n_vert = 5;
        let normals: Vec<f64> = (0..n_vert).flat_map(|_| random_unit(&mut rng)).collect();
        let albedo: Vec<f64> = (0..3 * n_vert).map(|_| rng.random_range(0.2..0.8)).collect();
        let mut gamma: Vec<f64> = (0..27).map(|_| rng.random_range(-0.2..0.2)).collect();
        for c in 0..3 {
            gamma[9 * c] = 2.0;
        }
        let w: Vec<f64> = (0..3 * n_vert).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |nn: &[f64], aa: &[f64], gg: &[f64]| -> f64 {
            shade_vertices(nn, aa, gg).iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (gn, ga, gg) = shade_vertices_backward(&normals, &albedo, &gamma, &w);
        let fd_n = finite_difference(|x| f(x, &albedo, &gamma), &normals, 1e-6);
        let fd_a = finite_difference(|x| f(&normals, x, &gamma), &albedo, 1e-6);
        let fd_g = finite_difference(|x| f(&normals, &albedo, x), &gamma, 1e-6);
        for (a, b) in [(gn, fd_n), (ga, fd_a), (gg, fd_g)] {
            assert!(crate::grad::relative_error(&a, &b) < 1e-7);
        }
    }

    #[test]
    fn normals_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let geometry: Vec<f64> = (0..3 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tris = vec![[0, 1, 2], [1, 3, 2], [2, 3, 4], [3, 5, 4]];
        let w: Vec<f64> = (0..geometry.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |g: &[f64]| -> f64 {
            vertex_normals(g, &tris).iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let got = vertex_normals_backward(&geometry, &tris, &w);
        let fd = finite_difference(f, &geometry, 1e-6);
        assert!(crate::grad::relative_error(&got, &fd) < 1e-7);
    }
}
