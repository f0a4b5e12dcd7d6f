//! Packed lower-triangular Cholesky factors.
//!
//! Covariances never exist as explicit inverses: densities are evaluated by
//! forward substitution against `L` where `Σ = L Lᵀ`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{dot, ln, sqrt};
use crate::{Error, Result};

/// Rows solved together by the batched substitution.
const ROW_BLOCK: usize = 4;
/// Vectors per register block of the batched substitution.
const LANES: usize = 16;

#[inline]
fn tri(i: usize) -> usize {
    i * (i + 1) / 2
}

/// Lower-triangular `L` stored row by row: row `i` holds `L[i][0..=i]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "PackedFactor"))]
pub struct CholeskyFactor {
    dim: usize,
    packed: Vec<f64>,
    #[cfg_attr(feature = "serde", serde(skip))]
    log_det: f64,
}

#[cfg(feature = "serde")]
#[derive(serde::Deserialize)]
struct PackedFactor {
    dim: usize,
    packed: Vec<f64>,
}

#[cfg(feature = "serde")]
impl TryFrom<PackedFactor> for CholeskyFactor {
    type Error = Error;

    fn try_from(raw: PackedFactor) -> Result<Self> {
        Self::from_packed(raw.dim, raw.packed)
    }
}

impl CholeskyFactor {
    fn with_log_det(dim: usize, packed: Vec<f64>) -> Self {
        let log_det = 2.0 * (0..dim).map(|i| ln(packed[tri(i) + i])).sum::<f64>();
        Self { dim, packed, log_det }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    /// Factor of `variance · I`.
    pub fn scaled_identity(dim: usize, variance: f64) -> Self {
        let mut packed = vec![0.0; tri(dim)];
        let s = sqrt(variance);
        for i in 0..dim {
            packed[tri(i) + i] = s;
        }
        Self::with_log_det(dim, packed)
    }

    /// Factorizes a symmetric matrix given in full row-major form; only the
    /// lower triangle is read.
    pub fn from_covariance(cov: &[f64], dim: usize) -> Result<Self> {
        if cov.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                actual: cov.len(),
            });
        }
        let mut packed = vec![0.0; tri(dim)];
        for i in 0..dim {
            for j in 0..=i {
                let (ri, rj) = (tri(i), tri(j));
                let s = dot(&packed[ri..ri + j], &packed[rj..rj + j]);
                let v = cov[i * dim + j] - s;
                if i == j {
                    if !(v > 0.0) || !v.is_finite() {
                        return Err(Error::Numerical(format!(
                            "matrix not positive definite at pivot {i} ({v:e})"
                        )));
                    }
                    packed[ri + i] = sqrt(v);
                } else {
                    packed[ri + j] = v / packed[rj + j];
                }
            }
        }
        Ok(Self::with_log_det(dim, packed))
    }

    pub fn from_packed(dim: usize, packed: Vec<f64>) -> Result<Self> {
        if packed.len() != tri(dim) {
            return Err(Error::DimensionMismatch {
                expected: tri(dim),
                actual: packed.len(),
            });
        }
        if packed.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite Cholesky entry"));
        }
        for i in 0..dim {
            if !(packed[tri(i) + i] > 0.0) {
                return Err(Error::invalid(format!(
                    "Cholesky diagonal entry {i} is not strictly positive"
                )));
            }
        }
        Ok(Self::with_log_det(dim, packed))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn packed(&self) -> &[f64] {
        &self.packed
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.packed[tri(i)..tri(i) + i + 1]
    }

    pub fn diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.dim).map(move |i| self.packed[tri(i) + i])
    }

    /// `ln det Σ = 2 Σ ln L_ii`.
    #[inline]
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Solves `L z = b` in place.
    pub fn solve_lower(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.dim);
        for i in 0..self.dim {
            let row = self.row(i);
            let s = dot(&row[..i], &b[..i]);
            b[i] = (b[i] - s) / row[i];
        }
    }

    /// `dᵀ Σ⁻¹ d`; `diff` is overwritten with `L⁻¹ d`.
    pub fn mahalanobis_sq(&self, diff: &mut [f64]) -> f64 {
        self.solve_lower(diff);
        dot(diff, diff)
    }

    /// `dᵀ Σ⁻¹ d` for `out.len()` vectors at once.
    ///
    /// `diffs` is column-major, entry `j` of vector `s` at `j * out.len() + s`,
    /// and is overwritten with `L⁻¹ d`. Each vector goes through plain
    /// sequential forward substitution, so a result does not depend on the
    /// batch it was computed in.
    pub fn mahalanobis_sq_batch(&self, diffs: &mut [f64], out: &mut [f64]) {
        assert_eq!(diffs.len(), self.dim * out.len(), "batch shape");
        #[cfg(all(feature = "std", target_arch = "x86_64"))]
        {
            if std::is_x86_feature_detected!("avx512f") {
                // SAFETY: the CPU supports AVX-512F.
                return unsafe { self.batch_avx512(diffs, out) };
            }
            if std::is_x86_feature_detected!("avx2") {
                // SAFETY: the CPU supports AVX2.
                return unsafe { self.batch_avx2(diffs, out) };
            }
        }
        self.batch_portable(diffs, out)
    }

    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    #[target_feature(enable = "avx2")]
    unsafe fn batch_avx2(&self, diffs: &mut [f64], out: &mut [f64]) {
        self.batch_portable(diffs, out)
    }

    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    #[target_feature(enable = "avx512f")]
    unsafe fn batch_avx512(&self, diffs: &mut [f64], out: &mut [f64]) {
        self.batch_portable(diffs, out)
    }

    #[inline(always)]
    fn batch_portable(&self, diffs: &mut [f64], out: &mut [f64]) {
        let m = out.len();
        let mut r0 = 0;
        while r0 < self.dim {
            match self.dim - r0 {
                1 => self.row_block::<1>(diffs, m, r0),
                2 => self.row_block::<2>(diffs, m, r0),
                3 => self.row_block::<3>(diffs, m, r0),
                _ => self.row_block::<ROW_BLOCK>(diffs, m, r0),
            }
            r0 += ROW_BLOCK;
        }
        out.fill(0.0);
        for z in diffs.chunks_exact(m) {
            for (o, &v) in out.iter_mut().zip(z) {
                *o += v * v;
            }
        }
    }

    /// Solves rows `r0..r0 + R` for every vector of the batch.
    #[inline(always)]
    fn row_block<const R: usize>(&self, diffs: &mut [f64], m: usize, r0: usize) {
        let rows: [&[f64]; R] = core::array::from_fn(|r| self.row(r0 + r));
        let (done, rest) = diffs.split_at_mut(r0 * m);
        let mut s0 = 0;
        while s0 + LANES <= m {
            let mut acc = [[0.0f64; LANES]; R];
            for (r, a) in acc.iter_mut().enumerate() {
                a.copy_from_slice(&rest[r * m + s0..][..LANES]);
            }
            for j in 0..r0 {
                let z: &[f64; LANES] = done[j * m + s0..][..LANES].try_into().expect("lane block");
                for r in 0..R {
                    let l = rows[r][j];
                    for k in 0..LANES {
                        acc[r][k] -= l * z[k];
                    }
                }
            }
            for r in 0..R {
                for j in 0..r {
                    let l = rows[r][r0 + j];
                    let z: [f64; LANES] = acc[j];
                    for k in 0..LANES {
                        acc[r][k] -= l * z[k];
                    }
                }
                let diag = rows[r][r0 + r];
                acc[r].iter_mut().for_each(|v| *v /= diag);
            }
            for (r, a) in acc.iter().enumerate() {
                rest[r * m + s0..][..LANES].copy_from_slice(a);
            }
            s0 += LANES;
        }
        for s in s0..m {
            for r in 0..R {
                let mut acc = rest[r * m + s];
                for j in 0..r0 {
                    acc -= rows[r][j] * done[j * m + s];
                }
                for j in 0..r {
                    acc -= rows[r][r0 + j] * rest[j * m + s];
                }
                rest[r * m + s] = acc / rows[r][r0 + r];
            }
        }
    }

    /// Squared ratio of the extreme diagonal entries of `L`, a lower bound on
    /// the spectral condition number of `Σ`.
    pub fn condition_estimate(&self) -> f64 {
        let (lo, hi) = self
            .diagonal()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
        let r = hi / lo;
        r * r
    }

    /// Reconstructs `Σ = L Lᵀ` in full row-major form.
    pub fn to_covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let v = dot(&self.row(i)[..=j], &self.row(j)[..=j]);
                out[i * d + j] = v;
                out[j * d + i] = v;
            }
        }
        out
    }
}
