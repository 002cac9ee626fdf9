//! 2-D convolution as patch extraction followed by one batched matmul.
//!
//! Patch extraction (`im2col`) and its adjoint (`col2im`) are small custom
//! ops; all arithmetic, forward and backward, goes through matmul.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Output indices `o` with `0 <= o * stride + k - pad < len`.
    fn valid(&self, k: usize, len: usize, out: usize) -> std::ops::Range<usize> {
        let lo = if self.pad > k { (self.pad - k).div_ceil(self.stride) } else { 0 };
        let hi = if len + self.pad > k { ((len + self.pad - k - 1) / self.stride + 1).min(out) } else { 0 };
        lo..hi.max(lo)
    }

    /// Calls `f(image row offset, column row offset, valid ox, j)` for every
    /// in-bounds `(b, c, i, j, oy)`.
    fn for_each_row(&self, n: usize, mut f: impl FnMut(usize, usize, std::ops::Range<usize>, usize)) {
        let (ho, wo) = self.out_hw();
        let p = ho * wo;
        let rows = self.rows();
        for b in 0..n {
            for ci in 0..self.c {
                let plane = (b * self.c + ci) * self.h * self.w;
                for i in 0..self.kh {
                    let ys = self.valid(i, self.h, ho);
                    for j in 0..self.kw {
                        let xs = self.valid(j, self.w, wo);
                        let col = (b * rows + (ci * self.kh + i) * self.kw + j) * p;
                        for oy in ys.clone() {
                            let y = oy * self.stride + i - self.pad;
                            f(plane + y * self.w, col + oy * wo, xs.clone(), j);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Copy + Default>(&self, src: &[T], n: usize) -> Vec<T> {
        let (ho, wo) = self.out_hw();
        let mut out = vec![T::default(); n * self.rows() * ho * wo];
        let (s, pad) = (self.stride, self.pad);
        self.for_each_row(n, |src_row, dst_row, xs, j| {
            for ox in xs {
                out[dst_row + ox] = src[src_row + ox * s + j - pad];
            }
        });
        out
    }

    fn col2im<T: Copy + Default + AddAssign>(&self, src: &[T], n: usize) -> Vec<T> {
        let mut out = vec![T::default(); n * self.c * self.h * self.w];
        let (s, pad) = (self.stride, self.pad);
        self.for_each_row(n, |img_row, col_row, xs, j| {
            for ox in xs {
                out[img_row + ox * s + j - pad] += src[col_row + ox];
            }
        });
        out
    }
}

fn contiguous<'a, T>(v: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => Err(candle_core::Error::Msg(format!("{op}: input must be contiguous"))),
    }
}

/// `(n, c, h, w) -> (n, c*kh*kw, ho*wo)`, rows ordered `(c, i, j)` to match a
/// flattened `(co, c, kh, kw)` kernel.
struct Im2Col {
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl Im2Col {
    fn geometry(&self, dims: &[usize]) -> Geometry {
        Geometry {
            c: dims[1],
            h: dims[2],
            w: dims[3],
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims();
        let g = self.geometry(dims);
        let n = dims[0];
        let (ho, wo) = g.out_hw();
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.im2col(contiguous(v, layout, "im2col")?, n)),
            CpuStorage::F64(v) => CpuStorage::F64(g.im2col(contiguous(v, layout, "im2col")?, n)),
            _ => return Err(candle_core::Error::Msg("im2col: only f32 and f64 are supported".into())),
        };
        Ok((out, Shape::from((n, g.rows(), ho * wo))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = self.geometry(arg.dims());
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(g))?))
    }
}

struct Col2Im(Geometry);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let n = layout.shape().dims()[0];
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.col2im(contiguous(v, layout, "col2im")?, n)),
            CpuStorage::F64(v) => CpuStorage::F64(g.col2im(contiguous(v, layout, "col2im")?, n)),
            _ => return Err(candle_core::Error::Msg("col2im: only f32 and f64 are supported".into())),
        };
        Ok((out, Shape::from((n, g.c, g.h, g.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = self.0;
        let op = Im2Col {
            kh: g.kh,
            kw: g.kw,
            stride: g.stride,
            pad: g.pad,
        };
        Ok(Some(grad.contiguous()?.apply_op1(op)?))
    }
}

/// Cross-correlation of `x: (n, c, h, w)` with `kernel: (co, c, kh, kw)`,
/// zero padding on all sides. Same contract as `Tensor::conv2d` with unit
/// dilation and one group.
pub fn conv2d(x: &Tensor, kernel: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (co, ci, kh, kw) = kernel.dims4()?;
    if ci != c {
        return Err(crate::error::Error::Channels { expected: ci, actual: c });
    }
    if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(shape_err!(
            "conv2d: {kh}x{kw} kernel, stride {stride}, padding {padding} on a {h}x{w} input"
        ));
    }
    let g = Geometry {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
    };
    let (ho, wo) = g.out_hw();
    let cols = if kh == 1 && kw == 1 && stride == 1 && padding == 0 {
        x.reshape((n, c, h * w))?
    } else {
        x.contiguous()?.apply_op1(Im2Col {
            kh,
            kw,
            stride,
            pad: padding,
        })?
    };
    let km = kernel.reshape((co, g.rows()))?;
    Ok(km.broadcast_matmul(&cols)?.reshape((n, co, ho, wo))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    const CASES: [(usize, usize, usize, usize, usize, usize); 6] = [
        // c, co, h/w, k, stride, pad
        (3, 4, 7, 3, 1, 1),
        (2, 3, 8, 4, 2, 1),
        (2, 2, 9, 4, 2, 1),
        (4, 2, 5, 1, 1, 0),
        (1, 2, 6, 3, 2, 0),
        (2, 1, 3, 3, 1, 2),
    ];

    #[test]
    fn forward_matches_candle_conv() {
        let dev = Device::Cpu;
        for (c, co, hw, k, s, p) in CASES {
            let x = Tensor::randn(0f64, 1., (2, c, hw, hw + 1), &dev).unwrap();
            let w = Tensor::randn(0f64, 1., (co, c, k, k), &dev).unwrap();
            let ours = conv2d(&x, &w, p, s).unwrap();
            let theirs = x.conv2d(&w, p, s, 1, 1).unwrap();
            assert_eq!(ours.dims(), theirs.dims());
            assert!(max_diff(&ours, &theirs) < 1e-12, "case {:?}", (c, co, hw, k, s, p));
        }
    }

    #[test]
    fn gradients_match_candle_conv() {
        let dev = Device::Cpu;
        for (c, co, hw, k, s, p) in CASES {
            let x = Var::from_tensor(&Tensor::randn(0f64, 1., (2, c, hw, hw), &dev).unwrap()).unwrap();
            let w = Var::from_tensor(&Tensor::randn(0f64, 1., (co, c, k, k), &dev).unwrap()).unwrap();
            let probe = Tensor::randn(0f64, 1., conv2d(x.as_tensor(), w.as_tensor(), p, s).unwrap().dims(), &dev).unwrap();
            let ours = conv2d(x.as_tensor(), w.as_tensor(), p, s).unwrap().mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
            let theirs = x.as_tensor().conv2d(w.as_tensor(), p, s, 1, 1).unwrap().mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w] {
                let d = max_diff(ours.get(v.as_tensor()).unwrap(), theirs.get(v.as_tensor()).unwrap());
                assert!(d < 1e-10, "case {:?}: {d}", (c, co, hw, k, s, p));
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1., (2, 3, 6, 5), &dev).unwrap();
        let op = Im2Col { kh: 3, kw: 2, stride: 2, pad: 1 };
        let g = op.geometry(x.dims());
        let cols = x.apply_op1_no_bwd(&op).unwrap();
        let y = Tensor::randn(0f64, 1., cols.dims(), &dev).unwrap();
        let back = y.apply_op1_no_bwd(&Col2Im(g)).unwrap();
        let lhs = (cols * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let rhs = (x * back).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn too_small_input_is_an_error() {
        let x = Tensor::zeros((1, 1, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let w = Tensor::zeros((1, 1, 5, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(conv2d(&x, &w, 1, 1).is_err());
    }
}
