//! Rotary position embedding with position interpolation.
//!
//! Rotations are applied to queries and keys at ORIGINAL absolute
//! positions, before any KV shift or gather: shifting is an
//! attention-computation device, not a positional relabeling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rotation angle for one dimension pair:
/// `(position / pi_scale) * base^(-2k / D)`.
///
/// `pi_scale = 1` is plain rotary embedding; `pi_scale = target / train`
/// is position interpolation. For even positions, scaling by 2 yields
/// bit-identical angles to the unscaled angle at half the position.
pub fn rope_angle(position: usize, pair: usize, head_dim: usize, base: f64, pi_scale: f64) -> f64 {
    let freq = base.powf(-2.0 * pair as f64 / head_dim as f64);
    (position as f64 / pi_scale) * freq
}

fn rotate(
    x: &Tensor<f64>,
    positions: &[usize],
    base: f64,
    pi_scale: f64,
    flip: bool,
) -> Result<Tensor<f64>> {
    if x.ndim() != 4 {
        return Err(Error::ShapeMismatch {
            op: "rope_apply",
            lhs: x.shape().to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    let (b, h, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if d % 2 != 0 {
        return Err(Error::config(format!(
            "rotary embedding needs an even head dim, got {d}"
        )));
    }
    if positions.len() != n {
        return Err(Error::config(format!(
            "{} positions for seq_len {n}",
            positions.len()
        )));
    }
    if !(base > 0.0) || !(pi_scale > 0.0) {
        return Err(Error::config(format!(
            "rope base {base} and pi_scale {pi_scale} must be positive"
        )));
    }
    let mut out = x.clone();
    let pairs = d / 2;
    for bh in 0..b * h {
        let block = &mut out.data_mut()[bh * n * d..(bh + 1) * n * d];
        for (p, &pos) in positions.iter().enumerate() {
            for k in 0..pairs {
                let mut angle = rope_angle(pos, k, d, base, pi_scale);
                if flip {
                    angle = -angle;
                }
                let (sin, cos) = angle.sin_cos();
                let x0 = block[p * d + 2 * k];
                let x1 = block[p * d + 2 * k + 1];
                block[p * d + 2 * k] = x0 * cos - x1 * sin;
                block[p * d + 2 * k + 1] = x0 * sin + x1 * cos;
            }
        }
    }
    Ok(out)
}

/// Rotate each dimension pair of a `[B,H,N,D]` tensor by its positional
/// angle. Pairwise norms are preserved.
pub fn rope_apply(
    x: &Tensor<f64>,
    positions: &[usize],
    base: f64,
    pi_scale: f64,
) -> Result<Tensor<f64>> {
    rotate(x, positions, base, pi_scale, false)
}

/// Transpose of [`rope_apply`]: rotates by the negated angles. Used to
/// pull gradients back through the embedding.
pub fn rope_backward(
    dy: &Tensor<f64>,
    positions: &[usize],
    base: f64,
    pi_scale: f64,
) -> Result<Tensor<f64>> {
    rotate(dy, positions, base, pi_scale, true)
}
