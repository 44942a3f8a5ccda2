use crate::error::{check_dim, Result, TideError};
use crate::linalg::{axpy, dot, norm, Real};

/// Encoder/decoder weights.
///
/// `w_enc` is `n x f` row-major (row `j` is latent `j`'s encoder vector).
/// The decoder is mathematically `f x n`; it is stored column-major so that
/// column `j` (latent `j`'s dictionary atom) is the contiguous slice
/// `w_dec[j*f .. (j+1)*f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams<T: Real> {
    pub f: usize,
    pub n: usize,
    pub w_enc: Vec<T>,
    pub b_enc: Vec<T>,
    pub w_dec: Vec<T>,
}

impl<T: Real> SaeParams<T> {
    pub fn zeros(f: usize, n: usize) -> Self {
        Self {
            f,
            n,
            w_enc: vec![T::zero(); n * f],
            b_enc: vec![T::zero(); n],
            w_dec: vec![T::zero(); n * f],
        }
    }

    pub fn check_shapes(&self) -> Result<()> {
        check_dim("W_enc (n x f)", self.n * self.f, self.w_enc.len())?;
        check_dim("b_enc (n)", self.n, self.b_enc.len())?;
        check_dim("W_dec (f x n)", self.n * self.f, self.w_dec.len())?;
        if self.f == 0 || self.n == 0 {
            return Err(TideError::config("SAE dimensions must be positive"));
        }
        Ok(())
    }

    #[inline]
    pub fn enc_row(&self, j: usize) -> &[T] {
        &self.w_enc[j * self.f..(j + 1) * self.f]
    }

    #[inline]
    pub fn dec_col(&self, j: usize) -> &[T] {
        &self.w_dec[j * self.f..(j + 1) * self.f]
    }

    #[inline]
    pub fn dec_col_mut(&mut self, j: usize) -> &mut [T] {
        let f = self.f;
        &mut self.w_dec[j * f..(j + 1) * f]
    }

    /// `W_dec[row, col]` in the mathematical `f x n` layout.
    pub fn dec_at(&self, row: usize, col: usize) -> T {
        self.w_dec[col * self.f + row]
    }

    /// Rescale every decoder column to unit norm (zero columns stay zero).
    pub fn normalize_decoder(&mut self) {
        for j in 0..self.n {
            let col = self.dec_col_mut(j);
            let nr = norm(col);
            if nr > T::zero() {
                let inv = T::one() / nr;
                col.iter_mut().for_each(|v| *v *= inv);
            }
        }
    }

    /// Pre-activations `W_enc x + b_enc` (before ReLU).
    pub fn pre_activations(&self, x: &[T], out: &mut [T]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(self.enc_row(j), x) + self.b_enc[j];
        }
    }

    /// Sparse decode over `(index, value)` pairs.
    pub fn decode_sparse(&self, active: &[(u32, T)], out: &mut [T]) {
        out.iter_mut().for_each(|v| *v = T::zero());
        for &(j, v) in active {
            axpy(v, self.dec_col(j as usize), out);
        }
    }

    pub fn cast<U: Real>(&self) -> SaeParams<U> {
        let c = |v: &[T]| {
            v.iter()
                .map(|x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect()
        };
        SaeParams {
            f: self.f,
            n: self.n,
            w_enc: c(&self.w_enc),
            b_enc: c(&self.b_enc),
            w_dec: c(&self.w_dec),
        }
    }

    /// Decoder as `f x n` row-major.
    pub fn w_dec_row_major(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.f * self.n];
        for j in 0..self.n {
            for i in 0..self.f {
                out[i * self.n + j] = self.w_dec[j * self.f + i];
            }
        }
        out
    }

    pub fn set_w_dec_row_major(&mut self, rm: &[T]) {
        for j in 0..self.n {
            for i in 0..self.f {
                self.w_dec[j * self.f + i] = rm[i * self.n + j];
            }
        }
    }
}
