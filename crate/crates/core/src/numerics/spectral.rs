use candle_core::{Tensor, Var};

use crate::error::Result;
use crate::params::{Init, Scope};

/// Lower bound applied to the singular-value estimate.
pub const SIGMA_FLOOR: f64 = 1e-12;

const WARMUP_RTOL: f64 = 1e-6;
const WARMUP_MAX_ITERS: usize = 2000;

/// Persistent left/right power-iteration vectors for one weight matrix.
///
/// Both vectors live in the owning network's store as buffers, so they are
/// checkpointed with the weights.
#[derive(Debug, Clone)]
pub struct SpectralState {
    u: Var,
    v: Var,
}

impl SpectralState {
    /// `rows` is the output-channel count, `cols` the flattened fan-in.
    pub fn new(scope: &Scope, rows: usize, cols: usize) -> Result<Self> {
        let u = scope.buffer("sn_u", rows, Init::Normal { std: 1.0 })?;
        let v = scope.buffer("sn_v", cols, Init::Normal { std: 1.0 })?;
        u.set(&l2_normalize(u.as_tensor())?)?;
        v.set(&l2_normalize(v.as_tensor())?)?;
        Ok(Self { u, v })
    }

    /// Runs at least `min_iters` power-iteration steps against `weight`, then
    /// continues until the estimate settles (relative change below
    /// `WARMUP_RTOL`) or `WARMUP_MAX_ITERS` is reached. A small gap between
    /// the top two singular values slows convergence well past any fixed
    /// count.
    pub fn warm_up(&self, weight: &Tensor, min_iters: usize) -> Result<()> {
        let rows = weight.dims()[0];
        let matrix = weight.reshape((rows, weight.elem_count() / rows))?.detach();
        let estimate = |s: &Self| -> Result<f64> {
            Ok(s.sigma(&matrix)?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
        };
        let mut last = f64::NAN;
        for i in 0..WARMUP_MAX_ITERS {
            spectral_normalize(&matrix, self, true)?;
            let sigma = estimate(self)?;
            if i + 1 >= min_iters && (sigma - last).abs() <= WARMUP_RTOL * sigma.abs().max(SIGMA_FLOOR) {
                break;
            }
            last = sigma;
        }
        Ok(())
    }

    pub fn u(&self) -> &Tensor {
        self.u.as_tensor()
    }

    pub fn v(&self) -> &Tensor {
        self.v.as_tensor()
    }

    /// Current estimate `u^T W v` for the given `(rows, cols)` matrix.
    pub fn sigma(&self, matrix: &Tensor) -> Result<Tensor> {
        let u = self.u.as_tensor().unsqueeze(0)?;
        let v = self.v.as_tensor().unsqueeze(1)?;
        Ok(u.matmul(&matrix.matmul(&v)?)?.reshape(())?)
    }
}

fn norm(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(candle_core::DType::F64)?.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>()?)
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_all()?.sqrt()?.maximum(SIGMA_FLOOR)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Divides `weight` by the power-iteration estimate of its top singular value.
///
/// The weight is viewed as `(dims[0], rest)`. When `iterate` is set, one
/// power-iteration step runs first (on a detached copy of the weight) and the
/// refreshed vectors are stored back into `state`. The returned tensor is
/// differentiable with respect to `weight` through both the numerator and the
/// estimate.
pub fn spectral_normalize(weight: &Tensor, state: &SpectralState, iterate: bool) -> Result<Tensor> {
    let dims = weight.dims();
    let rows = dims[0];
    let cols = weight.elem_count() / rows;
    let matrix = weight.reshape((rows, cols))?;
    if iterate {
        let w = matrix.detach();
        let v = w.t()?.matmul(&state.u().unsqueeze(1)?)?.squeeze(1)?;
        let u = w.matmul(&v.unsqueeze(1)?)?.squeeze(1)?;
        // A zero weight collapses both vectors; keep the old ones so the
        // iteration can recover once the weight moves again.
        if norm(&u)? > SIGMA_FLOOR {
            state.v.set(&l2_normalize(&v)?)?;
            state.u.set(&l2_normalize(&u)?)?;
        }
    }
    let sigma = state.sigma(&matrix)?.maximum(SIGMA_FLOOR)?;
    Ok(weight.broadcast_div(&sigma)?)
}
