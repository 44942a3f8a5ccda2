use crate::error::{Result, TideError};
use crate::linalg::Real;

const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal timestep embedding: `[sin(t w_0..), cos(t w_0..)]` with
/// `w_i = MAX_PERIOD^(-i / (dim/2))`.
pub fn timestep_embedding<T: Real>(t: usize, dim: usize, steps: usize) -> Result<Vec<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(TideError::config(format!(
            "timestep embedding width must be even and positive, got {dim}"
        )));
    }
    if t >= steps {
        return Err(TideError::config(format!(
            "timestep {t} out of range for T = {steps}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = T::from_f64_lossy(arg.sin());
        out[half + i] = T::from_f64_lossy(arg.cos());
    }
    Ok(out)
}
