//! Mask-driven dense attention, the ground truth every sparse kernel is
//! checked against.

use crate::error::{Error, Result};
use crate::pattern::AttentionMask;
use crate::tensor::{Element, Tensor, MASK_SENTINEL, MASK_THRESHOLD};

/// Dense `N x N` attention where disallowed logits are replaced by the
/// masking sentinel. Fully masked query rows yield zero.
///
/// Written as plain scalar loops with its own softmax so it shares no
/// code path with the kernels it validates. Any causal constraint must
/// already be folded into the mask.
pub fn masked_full_oracle<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &AttentionMask,
) -> Result<Tensor<T>> {
    if q.ndim() != 4 || k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::ShapeMismatch {
            op: "masked_full_oracle",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let (b_sz, h, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    if mask.heads() != h || mask.seq_len() != n {
        return Err(Error::ShapeMismatch {
            op: "masked_full_oracle",
            lhs: vec![h, n, n],
            rhs: vec![mask.heads(), mask.seq_len(), mask.seq_len()],
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Tensor::zeros(q.shape());
    let mut logits = vec![0.0_f64; n];
    for b in 0..b_sz {
        for head in 0..h {
            let base = (b * h + head) * n * d;
            for qpos in 0..n {
                let q_row = &q.data()[base + qpos * d..base + (qpos + 1) * d];
                for kpos in 0..n {
                    if mask.get(head, qpos, kpos) {
                        let k_row = &k.data()[base + kpos * d..base + (kpos + 1) * d];
                        let mut acc = 0.0;
                        for dd in 0..d {
                            acc += q_row[dd].as_f64() * k_row[dd].as_f64();
                        }
                        logits[kpos] = acc;
                    } else {
                        logits[kpos] = MASK_SENTINEL;
                    }
                }
                let mut max = f64::NEG_INFINITY;
                for &x in logits.iter() {
                    if x > MASK_THRESHOLD {
                        max = max.max(scale * x);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue; // fully masked row stays zero
                }
                let mut total = 0.0;
                let mut weights = vec![0.0_f64; n];
                for kpos in 0..n {
                    if logits[kpos] > MASK_THRESHOLD {
                        let e = (scale * logits[kpos] - max).exp();
                        weights[kpos] = e;
                        total += e;
                    }
                }
                let out_row =
                    &mut out.data_mut()[base + qpos * d..base + (qpos + 1) * d];
                for kpos in 0..n {
                    if weights[kpos] == 0.0 {
                        continue;
                    }
                    let p = weights[kpos] / total;
                    let v_row = &v.data()[base + kpos * d..base + (kpos + 1) * d];
                    for dd in 0..d {
                        out_row[dd] = out_row[dd] + T::from_f64(p * v_row[dd].as_f64());
                    }
                }
            }
        }
    }
    Ok(out)
}
