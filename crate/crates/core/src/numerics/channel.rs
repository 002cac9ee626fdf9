//! Per-channel kernels on `(n, c, h, w)` maps: bias add and training-mode
//! batch norm, with their backward passes. Each walks the contiguous
//! `h * w` planes directly; sums accumulate in f64.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

use crate::error::{shape_err, Result};

fn data<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let v = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => Err(candle_core::Error::Msg("per-channel kernel: input must be contiguous".into())),
    }
}

/// `(n, c, plane)` for a rank-4 layout.
fn planes(l: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let (n, c, h, w) = l.shape().dims4()?;
    Ok((n, c, h * w))
}

macro_rules! by_dtype {
    ($s:expr, $f:ident ( $($arg:expr),* )) => {
        match $s {
            CpuStorage::F32(_) => $f::<f32>($($arg),*),
            CpuStorage::F64(_) => $f::<f64>($($arg),*),
            _ => Err(candle_core::Error::Msg("per-channel kernel: only f32 and f64 are supported".into())),
        }
    };
}

fn channel_sum<T: WithDType>(x: &[T], (n, c, p): (usize, usize, usize)) -> Vec<f64> {
    let mut acc = vec![0f64; c];
    for b in 0..n {
        for (ch, a) in acc.iter_mut().enumerate() {
            *a += x[(b * c + ch) * p..][..p].iter().map(|v| v.to_f64()).sum::<f64>();
        }
    }
    acc
}

/// Per-channel mean and biased variance, two-pass.
fn moments<T: WithDType>(x: &[T], dims: (usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let (n, c, p) = dims;
    let m = (n * p) as f64;
    let mean: Vec<f64> = channel_sum(x, dims).into_iter().map(|s| s / m).collect();
    let mut var = vec![0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let mu = mean[ch];
            var[ch] += x[(b * c + ch) * p..][..p]
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
    }
    (mean, var.into_iter().map(|v| v / m).collect())
}

fn out<T: WithDType>(v: Vec<f64>) -> CpuStorage {
    T::to_cpu_storage_owned(v.into_iter().map(T::from_f64).collect())
}

struct ChannelSum;

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: WithDType>(s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
            let dims = planes(l)?;
            Ok((out::<T>(channel_sum(data::<T>(s, l)?, dims)), Shape::from(dims.1)))
        }
        by_dtype!(s, run(s, l))
    }
}

/// Mean and biased variance per channel, stacked as `(2, c)`. No gradient.
pub fn channel_moments(x: &Tensor) -> Result<Tensor> {
    struct Moments;
    impl CustomOp1 for Moments {
        fn name(&self) -> &'static str {
            "channel-moments"
        }

        fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
            fn run<T: WithDType>(s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
                let dims = planes(l)?;
                let (mut mean, var) = moments(data::<T>(s, l)?, dims);
                mean.extend(var);
                Ok((out::<T>(mean), Shape::from((2, dims.1))))
            }
            by_dtype!(s, run(s, l))
        }
    }
    x.dims4()?;
    Ok(x.contiguous()?.apply_op1_no_bwd(&Moments)?)
}

struct ChannelBias;

impl CustomOp2 for ChannelBias {
    fn name(&self) -> &'static str {
        "channel-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: WithDType>(
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
        ) -> candle_core::Result<(CpuStorage, Shape)> {
            let (n, c, p) = planes(l1)?;
            let (x, b) = (data::<T>(s1, l1)?, data::<T>(s2, l2)?);
            let mut y = x.to_vec();
            for i in 0..n * c {
                let bias = b[i % c];
                y[i * p..][..p].iter_mut().for_each(|v| *v += bias);
            }
            Ok((T::to_cpu_storage_owned(y), l1.shape().clone()))
        }
        by_dtype!(s1, run(s1, l1, s2, l2))
    }

    fn bwd(&self, _x: &Tensor, _b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let db = grad.contiguous()?.apply_op1_no_bwd(&ChannelSum)?;
        Ok((Some(grad.clone()), Some(db)))
    }
}

/// `x + b[c]` for `x: (n, c, h, w)` and `b: (c)`.
pub fn bias_add(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if b.dims() != [c] {
        return Err(shape_err!("bias {:?} for {c} channels", b.dims()));
    }
    Ok(x.contiguous()?.apply_op2(&b.contiguous()?, ChannelBias)?)
}

struct BatchNormTrain {
    eps: f64,
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        #[allow(clippy::too_many_arguments)]
        fn run<T: WithDType>(
            eps: f64,
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
            s3: &CpuStorage,
            l3: &Layout,
        ) -> candle_core::Result<(CpuStorage, Shape)> {
            let dims @ (n, c, p) = planes(l1)?;
            let (x, gamma, beta) = (data::<T>(s1, l1)?, data::<T>(s2, l2)?, data::<T>(s3, l3)?);
            let (mean, var) = moments(x, dims);
            let mut y = Vec::with_capacity(x.len());
            for i in 0..n * c {
                let ch = i % c;
                let scale = gamma[ch].to_f64() / (var[ch] + eps).sqrt();
                let shift = beta[ch].to_f64() - mean[ch] * scale;
                y.extend(x[i * p..][..p].iter().map(|v| T::from_f64(v.to_f64() * scale + shift)));
            }
            Ok((T::to_cpu_storage_owned(y), l1.shape().clone()))
        }
        by_dtype!(s1, run(self.eps, s1, l1, s2, l2, s3, l3))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let c = gamma.dim(0)?;
        let numel = x.elem_count();
        let packed = x.apply_op3_no_bwd(gamma, &grad.contiguous()?, &BatchNormBackward { eps: self.eps })?;
        Ok((
            Some(packed.narrow(0, 0, numel)?.reshape(x.dims())?),
            Some(packed.narrow(0, numel, c)?),
            Some(packed.narrow(0, numel + c, c)?),
        ))
    }
}

/// Packs `[dx (flattened), dgamma, dbeta]` into one vector.
struct BatchNormBackward {
    eps: f64,
}

impl CustomOp3 for BatchNormBackward {
    fn name(&self) -> &'static str {
        "batch-norm-train-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        #[allow(clippy::too_many_arguments)]
        fn run<T: WithDType>(
            eps: f64,
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
            s3: &CpuStorage,
            l3: &Layout,
        ) -> candle_core::Result<(CpuStorage, Shape)> {
            let dims @ (n, c, p) = planes(l1)?;
            let (x, gamma, g) = (data::<T>(s1, l1)?, data::<T>(s2, l2)?, data::<T>(s3, l3)?);
            let (mean, var) = moments(x, dims);
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let (mut dgamma, mut dbeta) = (vec![0f64; c], vec![0f64; c]);
            for i in 0..n * c {
                let ch = i % c;
                for (xv, gv) in x[i * p..][..p].iter().zip(&g[i * p..][..p]) {
                    let gv = gv.to_f64();
                    dbeta[ch] += gv;
                    dgamma[ch] += gv * (xv.to_f64() - mean[ch]) * inv[ch];
                }
            }
            let m = (n * p) as f64;
            let mut packed = Vec::with_capacity(x.len() + 2 * c);
            for i in 0..n * c {
                let ch = i % c;
                let k = gamma[ch].to_f64() * inv[ch];
                let (db, dg) = (dbeta[ch] / m, dgamma[ch] / m);
                for (xv, gv) in x[i * p..][..p].iter().zip(&g[i * p..][..p]) {
                    let xhat = (xv.to_f64() - mean[ch]) * inv[ch];
                    packed.push(k * (gv.to_f64() - db - xhat * dg));
                }
            }
            packed.extend(dgamma);
            packed.extend(dbeta);
            let len = packed.len();
            Ok((out::<T>(packed), Shape::from(len)))
        }
        by_dtype!(s1, run(self.eps, s1, l1, s2, l2, s3, l3))
    }
}

/// Batch norm with batch statistics (biased variance) over `(n, h, w)`.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(shape_err!("batch-norm affine {:?}/{:?} for {c} channels", gamma.dims(), beta.dims()));
    }
    Ok(x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, BatchNormTrain { eps })?)
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

    fn reference_bn(x: &Tensor, g: &Tensor, b: &Tensor, eps: f64) -> Tensor {
        let c = g.dim(0).unwrap();
        let mean = x.mean_keepdim((0, 2, 3)).unwrap();
        let xc = x.broadcast_sub(&mean).unwrap();
        let var = xc.sqr().unwrap().mean_keepdim((0, 2, 3)).unwrap();
        xc.broadcast_div(&var.affine(1.0, eps).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&g.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
    }

    #[test]
    fn batch_norm_matches_broadcast_reference() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&(Tensor::randn(0f64, 2., (3, 4, 5, 6), &dev).unwrap() + 1.5).unwrap()).unwrap();
        let g = Var::from_tensor(&Tensor::randn(1f64, 0.3, 4, &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 0.3, 4, &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f64, 1., (3, 4, 5, 6), &dev).unwrap();
        let ours = batch_norm_train(x.as_tensor(), g.as_tensor(), b.as_tensor(), 1e-5).unwrap();
        let theirs = reference_bn(x.as_tensor(), g.as_tensor(), b.as_tensor(), 1e-5);
        assert!(max_diff(&ours, &theirs) < 1e-12);
        let go = ours.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gt = theirs.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &g, &b] {
            let d = max_diff(go.get(v.as_tensor()).unwrap(), gt.get(v.as_tensor()).unwrap());
            assert!(d < 1e-10, "{d}");
        }
    }

    #[test]
    fn bias_add_matches_broadcast_reference() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f32, 1., (2, 3, 4, 5), &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f32, 1., 3, &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f32, 1., (2, 3, 4, 5), &dev).unwrap();
        let ours = bias_add(x.as_tensor(), b.as_tensor()).unwrap();
        let theirs = x.as_tensor().broadcast_add(&b.as_tensor().reshape((1, 3, 1, 1)).unwrap()).unwrap();
        assert_eq!(max_diff(&ours, &theirs), 0.0);
        let go = ours.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gt = theirs.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &b] {
            assert!(max_diff(go.get(v.as_tensor()).unwrap(), gt.get(v.as_tensor()).unwrap()) < 1e-5);
        }
    }

    #[test]
    fn moments_of_known_channels() {
        let x = Tensor::new(&[[[[1f64, 3.]], [[2., 2.]]]], &Device::Cpu).unwrap();
        let m = channel_moments(&x).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(m, vec![vec![2.0, 2.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros((1, 2, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap();
        assert!(bias_add(&x, &b).is_err());
        assert!(batch_norm_train(&x, &b, &b, 1e-5).is_err());
    }
}
