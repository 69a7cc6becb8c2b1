use crate::error::{Error, Result};

/// Highest embedding frequency is `2^MAX_OCTAVE` radians per unit.
const MAX_OCTAVE: f64 = 10.0;

/// Interleaved `[sin(f₀v), cos(f₀v), sin(f₁v), …]` with frequencies spaced
/// geometrically from 1 to 2¹⁰.
pub fn positional_embed(value: f64, dims: usize) -> Result<Vec<f64>> {
    if dims == 0 || !dims.is_multiple_of(2) {
        return Err(Error::InvalidDimensions(format!("embedding size must be even and positive, got {dims}")));
    }
    let n = dims / 2;
    let mut out = Vec::with_capacity(dims);
    for k in 0..n {
        let octave = if n > 1 { MAX_OCTAVE * k as f64 / (n - 1) as f64 } else { 0.0 };
        let f = octave.exp2();
        out.push((f * value).sin());
        out.push((f * value).cos());
    }
    Ok(out)
}
