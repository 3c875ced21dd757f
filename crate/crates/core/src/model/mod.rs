//! Linear morphable face model: mean geometry/albedo, PCA-style bases,
//! mesh topology and landmark vertices.

mod coeffs;
mod synth;

pub use coeffs::{
    CoefficientVector, LossWeights, Segment, COEFF_DIM, EXPRESSION_DIM, ILLUMINATION_DIM,
    POSE_DIM, ROTATION, SHAPE_DIM, TEXTURE_DIM, TRANSLATION,
};
pub use synth::{generate_synthetic_basis, MIN_VERTICES};

use crate::error::{Error, Result};

pub const LANDMARK_COUNT: usize = 68;

/// Dense column-major matrix. Columns are basis vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ColMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ColMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * columns.len());
        for (j, col) in columns.iter().enumerate() {
            if col.len() != rows {
                return Err(Error::invalid(format!(
                    "column {j} has {} rows, expected {rows}",
                    col.len()
                )));
            }
            data.extend_from_slice(col);
        }
        Ok(Self {
            rows,
            cols: columns.len(),
            data,
        })
    }

    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn as_col_major(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.rows + row]
    }

    /// `out += self * x`
    pub fn mul_add_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for (o, b) in out.iter_mut().zip(self.column(j)) {
                *o += b * xj;
            }
        }
    }

    /// `self^T * y`
    pub fn transpose_mul(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        (0..self.cols)
            .map(|j| self.column(j).iter().zip(y).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Mean face, bases, topology and landmark vertices.
///
/// Immutable once built; share it behind an `Arc` between fitting sessions.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphableBasis {
    pub vertex_count: usize,
    pub mean_geometry: Vec<f64>,
    pub mean_texture: Vec<f64>,
    pub shape_basis: ColMatrix,
    pub expression_basis: ColMatrix,
    pub texture_basis: ColMatrix,
    pub triangles: Vec<[u32; 3]>,
    pub landmark_indices: Vec<u32>,
    pub basis_seed: u64,
}

impl MorphableBasis {
    /// Checks every structural invariant of the model.
    pub fn validate(&self) -> Result<()> {
        let n3 = 3 * self.vertex_count;
        if self.vertex_count == 0 {
            return Err(Error::invalid("vertex_count must be positive"));
        }
        if self.mean_geometry.len() != n3 || self.mean_texture.len() != n3 {
            return Err(Error::invalid("mean vectors must have length 3*vertex_count"));
        }
        for (name, m, cols) in [
            ("shape", &self.shape_basis, SHAPE_DIM),
            ("expression", &self.expression_basis, EXPRESSION_DIM),
            ("texture", &self.texture_basis, TEXTURE_DIM),
        ] {
            if m.rows() != n3 || m.cols() != cols {
                return Err(Error::invalid(format!(
                    "{name} basis is {}x{}, expected {n3}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        let n = self.vertex_count as u32;
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::invalid(format!("triangle {t:?} references a missing vertex")));
        }
        if self.landmark_indices.len() != LANDMARK_COUNT {
            return Err(Error::invalid(format!(
                "expected {LANDMARK_COUNT} landmark indices, got {}",
                self.landmark_indices.len()
            )));
        }
        if let Some(&i) = self.landmark_indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("landmark index {i} out of range")));
        }
        if self
            .mean_texture
            .iter()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::invalid("mean texture must lie in [0,1]"));
        }
        Ok(())
    }

    fn check_coeffs(&self, coeffs: &[f64]) -> Result<()> {
        if coeffs.len() != COEFF_DIM {
            return Err(Error::invalid(format!(
                "expected {COEFF_DIM} coefficients, got {}",
                coeffs.len()
            )));
        }
        Ok(())
    }
}

/// `mean_geometry + B_s s + B_e e`.
pub fn morph_geometry(basis: &MorphableBasis, coeffs: &CoefficientVector) -> Result<Vec<f64>> {
    morph_geometry_raw(basis, coeffs.as_slice())
}

pub(crate) fn morph_geometry_raw(basis: &MorphableBasis, coeffs: &[f64]) -> Result<Vec<f64>> {
    basis.check_coeffs(coeffs)?;
    if basis.shape_basis.rows() != basis.mean_geometry.len() {
        return Err(Error::invalid("basis rows do not match mean geometry"));
    }
    let mut out = basis.mean_geometry.clone();
    basis
        .shape_basis
        .mul_add_into(&coeffs[Segment::Shape.range()], &mut out);
    basis
        .expression_basis
        .mul_add_into(&coeffs[Segment::Expression.range()], &mut out);
    Ok(out)
}

/// `mean_texture + B_t t`, unclamped.
pub fn morph_texture(basis: &MorphableBasis, coeffs: &CoefficientVector) -> Result<Vec<f64>> {
    morph_texture_raw(basis, coeffs.as_slice())
}

pub(crate) fn morph_texture_raw(basis: &MorphableBasis, coeffs: &[f64]) -> Result<Vec<f64>> {
    basis.check_coeffs(coeffs)?;
    if basis.texture_basis.rows() != basis.mean_texture.len() {
        return Err(Error::invalid("basis rows do not match mean texture"));
    }
    let mut out = basis.mean_texture.clone();
    basis
        .texture_basis
        .mul_add_into(&coeffs[Segment::Texture.range()], &mut out);
    Ok(out)
}

/// Gaussian prior on identity and expression: `w_s|s|^2 + w_t|t|^2 + w_e|e|^2`.
pub fn regularization_loss(coeffs: &CoefficientVector, weights: &LossWeights) -> f64 {
    let sq = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>();
    weights.w_s * sq(coeffs.shape())
        + weights.w_t * sq(coeffs.texture())
        + weights.w_e * sq(coeffs.expression())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_coeffs(seed: u64) -> CoefficientVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..COEFF_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        CoefficientVector::from_vec(v).unwrap()
    }

    // Row-by-row product, independent of the column-major axpy path.
    fn dense_matvec(m: &ColMatrix, x: &[f64]) -> Vec<f64> {
        (0..m.rows())
            .map(|r| (0..m.cols()).map(|c| m.get(r, c) * x[c]).sum())
            .collect()
    }

    #[test]
    fn zero_coefficients_give_the_mean() {
        let basis = generate_synthetic_basis(120, 3).unwrap();
        let c = CoefficientVector::zeros();
        assert_eq!(morph_geometry(&basis, &c).unwrap(), basis.mean_geometry);
        assert_eq!(morph_texture(&basis, &c).unwrap(), basis.mean_texture);
    }

    #[test]
    fn unit_coefficient_adds_one_column() {
        let basis = generate_synthetic_basis(120, 3).unwrap();
        let j = 17;
        let mut c = CoefficientVector::zeros();
        c.segment_mut(Segment::Shape)[j] = 1.0;
        c.segment_mut(Segment::Texture)[j] = 1.0;
        let g = morph_geometry(&basis, &c).unwrap();
        for (k, v) in g.iter().enumerate() {
            assert_eq!(*v, basis.mean_geometry[k] + basis.shape_basis.column(j)[k]);
        }
        let t = morph_texture(&basis, &c).unwrap();
        for (k, v) in t.iter().enumerate() {
            assert_eq!(*v, basis.mean_texture[k] + basis.texture_basis.column(j)[k]);
        }
    }

    #[test]
    fn morphing_matches_dense_matvec() {
        let basis = generate_synthetic_basis(150, 11).unwrap();
        let c = random_coeffs(5);
        let g = morph_geometry(&basis, &c).unwrap();
        let s = dense_matvec(&basis.shape_basis, c.shape());
        let e = dense_matvec(&basis.expression_basis, c.expression());
        for k in 0..g.len() {
            let expected = basis.mean_geometry[k] + s[k] + e[k];
            assert!((g[k] - expected).abs() < 1e-10);
        }
        let t = morph_texture(&basis, &c).unwrap();
        let tb = dense_matvec(&basis.texture_basis, c.texture());
        for k in 0..t.len() {
            assert!((t[k] - (basis.mean_texture[k] + tb[k])).abs() < 1e-10);
        }
    }

    #[test]
    fn mismatched_basis_is_rejected() {
        let mut basis = generate_synthetic_basis(100, 1).unwrap();
        basis.mean_geometry.pop();
        assert!(morph_geometry(&basis, &CoefficientVector::zeros()).is_err());
        assert!(basis.validate().is_err());
    }

    #[test]
    fn regularization_cases() {
        let w = LossWeights::default();
        assert_eq!(regularization_loss(&CoefficientVector::zeros(), &w), 0.0);
        let mut c = CoefficientVector::zeros();
        c.segment_mut(Segment::Shape)[4] = 1.0;
        let only_s = LossWeights {
            w_s: 1.0,
            w_t: 0.0,
            w_e: 0.0,
            ..w
        };
        assert_eq!(regularization_loss(&c, &only_s), 1.0);

        let c = random_coeffs(9);
        let mut oracle = 0.0;
        for i in 0..COEFF_DIM {
            let weight = match i {
                0..=79 => w.w_s,
                80..=143 => w.w_e,
                144..=223 => w.w_t,
                _ => 0.0,
            };
            oracle += weight * c.as_slice()[i] * c.as_slice()[i];
        }
        assert!((regularization_loss(&c, &w) - oracle).abs() < 1e-12);
    }
}
