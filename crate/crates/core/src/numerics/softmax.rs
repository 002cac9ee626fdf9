use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};

/// Returns an error naming the first non-finite element, if any.
pub fn ensure_finite(t: &Tensor) -> Result<()> {
    let total = t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if total.is_finite() {
        return Ok(());
    }
    let dims = t.dims().to_vec();
    let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some((pos, &value)) = flat.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        let mut index = vec![0; dims.len()];
        let mut rem = pos;
        for (slot, &d) in index.iter_mut().zip(dims.iter()).rev() {
            *slot = rem % d;
            rem /= d;
        }
        return Err(Error::NonFinite { index, value });
    }
    // Every element finite but the sum overflowed.
    Ok(())
}

/// Max-shifted softmax over the last axis. The shift is detached: it cancels
/// analytically, so it carries no gradient.
pub fn softmax_last_dim(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let e = logits.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Softmax over key positions: each row of a `(.., rows, H*W)` logit matrix
/// becomes a probability distribution.
pub fn position_softmax(logits: &Tensor) -> Result<Tensor> {
    ensure_finite(logits)?;
    softmax_last_dim(logits)
}

/// Softmax over the channel axis of an `(n, c, h, w)` tensor.
pub fn channel_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let e = logits.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    #[test]
    fn zero_logits_are_uniform() {
        let t = Tensor::zeros((1, 4), DType::F64, &Device::Cpu).unwrap();
        let p = position_softmax(&t).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(p[0], vec![0.25; 4]);
    }

    #[test]
    fn analytic_two_way() {
        let t = Tensor::new(&[[1f64.ln(), 3f64.ln()]], &Device::Cpu).unwrap();
        let p = position_softmax(&t).unwrap().to_vec2::<f64>().unwrap();
        assert!((p[0][0] - 0.25).abs() < 1e-15);
        assert!((p[0][1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn matches_unshifted_direct_summation() {
        let logits: [[f64; 3]; 3] = [[0.3, -1.2, 2.0], [1.5, 1.5, -0.7], [-2.2, 0.1, 0.9]];
        let t = Tensor::new(&logits, &Device::Cpu).unwrap();
        let p = position_softmax(&t).unwrap().to_vec2::<f64>().unwrap();
        for (row, prow) in logits.iter().zip(&p) {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            for (x, q) in row.iter().zip(prow) {
                assert!((x.exp() / z - q).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn non_finite_input_names_index() {
        let t = Tensor::new(&[[0f32, 1.0], [f32::NAN, 2.0]], &Device::Cpu).unwrap();
        match position_softmax(&t) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, vec![1, 0]),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn rows_sum_to_one(rows in 1usize..6, cols in 1usize..40, seed in any::<u64>(), scale in 0.1f32..30.0) {
            let mut s = seed;
            let vals: Vec<f32> = (0..rows * cols).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f32 / (1u64 << 31) as f32 - 0.5) * 2.0 * scale
            }).collect();
            let t = Tensor::from_vec(vals, (rows, cols), &Device::Cpu).unwrap();
            let sums = position_softmax(&t).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
            for s in sums {
                prop_assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}
