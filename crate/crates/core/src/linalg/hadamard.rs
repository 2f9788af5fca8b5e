use crate::error::{Error, Result};

/// Normalized Walsh–Hadamard transform (scaled by `1/√n`), in place.
///
/// The normalized transform is symmetric and orthogonal, so it is its own
/// inverse. Lengths must be powers of two; callers zero-pad.
pub fn hadamard_in_place(x: &mut [f64]) -> Result<()> {
    let n = x.len();
    if !n.is_power_of_two() {
        return Err(Error::Shape(format!(
            "hadamard length {n} is not a power of two"
        )));
    }
    let mut h = 1;
    while h < n {
        for start in (0..n).step_by(2 * h) {
            for i in start..start + h {
                let a = x[i];
                let b = x[i + h];
                x[i] = a + b;
                x[i + h] = a - b;
            }
        }
        h *= 2;
    }
    let s = 1.0 / (n as f64).sqrt();
    for v in x.iter_mut() {
        *v *= s;
    }
    Ok(())
}

pub fn hadamard(x: &[f64]) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    hadamard_in_place(&mut out)?;
    Ok(out)
}

/// Zero-pads `x` to the next power of two.
pub fn pad_pow2(x: &[f64]) -> Vec<f64> {
    let n = x.len().max(1).next_power_of_two();
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(x);
    out.resize(n, 0.0);
    out
}
