use candle_core::Tensor;

use crate::error::{shape_err, Result};

/// Row-major `(out_len, in_len)` weights of 1-D linear interpolation with the
/// half-pixel (align-corners = false) convention.
pub fn interpolation_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - frac;
        m[o * in_len + i1] += frac;
    }
    m
}

/// Bilinear resize of an `(n, c, h, w)` tensor, differentiable.
///
/// Implemented as two separable matrix products, so gradients come for free.
/// An axis whose size does not change is passed through untouched.
pub fn bilinear_resize(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("bilinear_resize target must be non-empty, got {out_h}x{out_w}"));
    }
    let (n, c, h, w) = t.dims4()?;
    let mut x = t.clone();
    if w != out_w {
        let m = interpolation_matrix(w, out_w);
        let rw = Tensor::from_vec(m, (out_w, w), t.device())?
            .to_dtype(t.dtype())?
            .t()?;
        x = x
            .reshape((n * c * h, w))?
            .matmul(&rw)?
            .reshape((n, c, h, out_w))?;
    }
    if h != out_h {
        let m = interpolation_matrix(h, out_h);
        let rh = Tensor::from_vec(m, (out_h, h), t.device())?
            .to_dtype(t.dtype())?
            .t()?;
        x = x
            .transpose(2, 3)?
            .contiguous()?
            .reshape((n * c * out_w, h))?
            .matmul(&rh)?
            .reshape((n, c, out_w, out_h))?
            .transpose(2, 3)?
            .contiguous()?;
    }
    Ok(x)
}
