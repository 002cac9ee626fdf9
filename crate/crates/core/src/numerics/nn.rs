//! Layer building blocks shared by the generator, discriminator and the two
//! attention modules.

use candle_core::{Tensor, Var};

use super::spectral::{spectral_normalize, SpectralState};
use crate::error::{shape_err, Result};
use crate::params::{Init, Param, Scope};

/// Minimum power iterations run on a fresh spectral-norm kernel.
pub const SPECTRAL_WARMUP: usize = 20;

/// Per-call forward options.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ctx {
    /// Batch statistics for batch-norm, power iteration for spectral norm.
    pub train: bool,
    /// Parameters enter the graph detached and persistent state (running
    /// statistics, power-iteration vectors) is left untouched.
    pub frozen: bool,
}

impl Ctx {
    pub fn updates_state(self) -> bool {
        self.train && !self.frozen
    }

    pub const TRAIN: Ctx = Ctx {
        train: true,
        frozen: false,
    };
    pub const EVAL: Ctx = Ctx {
        train: false,
        frozen: false,
    };

    pub fn frozen(self) -> Ctx {
        Ctx {
            frozen: true,
            ..self
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Param,
    bias: Option<Param>,
    spectral: Option<SpectralState>,
    stride: usize,
    padding: usize,
    in_channels: usize,
    out_channels: usize,
}

impl Conv2d {
    pub fn new(
        scope: &Scope,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = scope.param(
            "weight",
            (out_channels, in_channels, kernel, kernel),
            Init::Uniform { fan_in },
        )?;
        let bias = scope.param("bias", out_channels, Init::Uniform { fan_in })?;
        Ok(Self {
            weight,
            bias: Some(bias),
            spectral: None,
            stride,
            padding,
            in_channels,
            out_channels,
        })
    }

    pub fn new_1x1(scope: &Scope, in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(scope, in_channels, out_channels, 1, 1, 0)
    }

    /// Same layer with its kernel divided by a running top-singular-value
    /// estimate on every forward.
    pub fn spectral(
        scope: &Scope,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let mut conv = Self::new(scope, in_channels, out_channels, kernel, stride, padding)?;
        let state = SpectralState::new(scope, out_channels, in_channels * kernel * kernel)?;
        state.warm_up(&conv.weight.get(true), SPECTRAL_WARMUP)?;
        conv.spectral = Some(state);
        Ok(conv)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weight(&self) -> &Param {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Param> {
        self.bias.as_ref()
    }

    pub fn spectral_state(&self) -> Option<&SpectralState> {
        self.spectral.as_ref()
    }

    /// The kernel actually applied by the next forward (normalized when
    /// spectral norm is on). Does not advance the power iteration.
    pub fn effective_weight(&self) -> Result<Tensor> {
        let w = self.weight.get(true);
        match &self.spectral {
            Some(st) => spectral_normalize(&w, st, false),
            None => Ok(w),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels {
            return Err(crate::error::Error::Channels {
                expected: self.in_channels,
                actual: c,
            });
        }
        let mut w = self.weight.get(ctx.frozen);
        if let Some(st) = &self.spectral {
            w = spectral_normalize(&w, st, ctx.updates_state())?;
        }
        let y = super::conv2d(x, &w, self.padding, self.stride)?;
        match &self.bias {
            Some(b) => super::bias_add(&y, &b.get(ctx.frozen)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Param,
    beta: Param,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.param("gamma", channels, Init::Const(1.0))?,
            beta: scope.param("beta", channels, Init::Const(0.0))?,
            running_mean: scope.buffer("running_mean", channels, Init::Const(0.0))?,
            running_var: scope.buffer("running_var", channels, Init::Const(1.0))?,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(crate::error::Error::Channels {
                expected: self.channels,
                actual: c,
            });
        }
        if ctx.train {
            if ctx.updates_state() {
                let stats = super::channel_moments(x)?;
                let count = (n * h * w) as f64;
                let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                self.update_running(&stats.get(0)?, &stats.get(1)?, unbiased)?;
            }
            return super::batch_norm_train(x, &self.gamma.get(ctx.frozen), &self.beta.get(ctx.frozen), self.eps);
        }
        let shape = (1, c, 1, 1);
        let mean = self.running_mean.as_tensor().reshape(shape)?;
        let var = self.running_var.as_tensor().reshape(shape)?;
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&var.affine(1.0, self.eps)?.sqrt()?)?;
        let g = self.gamma.get(ctx.frozen).reshape(shape)?;
        let b = self.beta.get(ctx.frozen).reshape(shape)?;
        Ok(xhat.broadcast_mul(&g)?.broadcast_add(&b)?)
    }

    fn update_running(&self, mean: &Tensor, var: &Tensor, unbiased: f64) -> Result<()> {
        let m = self.momentum;
        let new_mean = self
            .running_mean
            .as_tensor()
            .affine(1.0 - m, 0.0)?
            .add(&mean.detach().flatten_all()?.affine(m, 0.0)?)?;
        let new_var = self
            .running_var
            .as_tensor()
            .affine(1.0 - m, 0.0)?
            .add(&var.detach().flatten_all()?.affine(m * unbiased, 0.0)?)?;
        self.running_mean.set(&new_mean)?;
        self.running_var.set(&new_var)?;
        Ok(())
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// Mean over all elements of `-log(max(p_true, 1e-12))` where `p_true` is the
/// probability the `(n, k, h, w)` simplex map assigns to the one-hot target.
pub fn nll_from_probs(probs: &Tensor, one_hot: &Tensor) -> Result<Tensor> {
    if probs.dims() != one_hot.dims() {
        return Err(shape_err!(
            "probabilities {:?} vs one-hot targets {:?}",
            probs.dims(),
            one_hot.dims()
        ));
    }
    let p_true = probs.mul(one_hot)?.sum_keepdim(1)?;
    Ok(p_true.maximum(1e-12)?.log()?.neg()?.mean_all()?)
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok(x.relu()?.add(&tail)?)
}

/// Mean binary cross-entropy of logits against a constant target.
pub fn bce_with_logits(logits: &Tensor, target: f64) -> Result<Tensor> {
    let per = softplus(logits)?.sub(&logits.affine(target, 0.0)?)?;
    Ok(per.mean_all()?)
}

/// Zero-pads bottom/right by one row/column where the size is odd, so a
/// 4x4 stride-2 convolution with padding 1 yields `ceil(size / 2)`.
pub fn pad_to_even(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mut y = x.clone();
    if h % 2 == 1 {
        y = y.pad_with_zeros(2, 0, 1)?;
    }
    if w % 2 == 1 {
        y = y.pad_with_zeros(3, 0, 1)?;
    }
    Ok(y)
}

pub fn scalar_value(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn bce_analytic_points() {
        let z = Tensor::zeros((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let l = scalar_value(&bce_with_logits(&z, 1.0).unwrap()).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let big = Tensor::full(20f64, (1, 1, 2, 2), &Device::Cpu).unwrap();
        assert!(scalar_value(&bce_with_logits(&big, 1.0).unwrap()).unwrap() < 1e-8);
        let l0 = scalar_value(&bce_with_logits(&big, 0.0).unwrap()).unwrap();
        assert!((l0 - 20.0).abs() < 1e-8);
    }

    #[test]
    fn bce_matches_scalar_formula() {
        let xs = [-3.0f64, -0.2, 0.0, 0.7, 5.5, 41.0];
        let t = Tensor::new(&xs, &Device::Cpu).unwrap();
        for target in [0.0, 1.0] {
            let got = scalar_value(&bce_with_logits(&t, target).unwrap()).unwrap();
            let want: f64 = xs
                .iter()
                .map(|x| {
                    // ln p = -ln(1 + e^-x), ln(1 - p) = -ln(1 + e^x)
                    let ln_p = -(-x).exp().ln_1p();
                    let ln_q = -x.exp().ln_1p();
                    -(target * ln_p + (1.0 - target) * ln_q)
                })
                .sum::<f64>()
                / xs.len() as f64;
            assert!((got - want).abs() < 1e-6, "{target}: {got} vs {want}");
        }
    }

    #[test]
    fn leaky_relu_slope() {
        let t = Tensor::new(&[-2f64, 0.0, 3.0], &Device::Cpu).unwrap();
        assert_eq!(leaky_relu(&t, 0.2).unwrap().to_vec1::<f64>().unwrap(), vec![-0.4, 0.0, 3.0]);
    }

    #[test]
    fn batchnorm_train_normalizes_and_tracks() {
        let store = ParamStore::new(DType::F64, 0);
        let bn = BatchNorm2d::new(&store.root().pp("bn"), 2).unwrap();
        let x = Tensor::new(&[[[[1f64, 3.]], [[10., 20.]]]], &Device::Cpu).unwrap();
        let y = bn.forward(&x, Ctx::TRAIN).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4);
        let rm = store.get("bn.running_mean").unwrap().var.as_tensor().to_vec1::<f64>().unwrap();
        assert!((rm[0] - 0.2).abs() < 1e-12 && (rm[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn odd_padding_gives_ceil_half() {
        let store = ParamStore::new(DType::F32, 0);
        let conv = Conv2d::new(&store.root(), 1, 1, 4, 2, 1).unwrap();
        for size in [5usize, 6, 7, 20, 33] {
            let x = Tensor::zeros((1, 1, size, size + 1), DType::F32, &Device::Cpu).unwrap();
            let y = conv.forward(&pad_to_even(&x).unwrap(), Ctx::EVAL).unwrap();
            assert_eq!(y.dims(), &[1, 1, size.div_ceil(2), (size + 1).div_ceil(2)]);
        }
    }

    #[test]
    fn frozen_forward_routes_no_gradient() {
        let store = ParamStore::new(DType::F64, 0);
        let conv = Conv2d::new_1x1(&store.root(), 2, 1).unwrap();
        let x = Tensor::ones((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let y = conv.forward(&x, Ctx::TRAIN.frozen()).unwrap().sum_all().unwrap();
        let grads = y.backward().unwrap();
        assert!(grads.get(conv.weight().var().as_tensor()).is_none());
    }
}
