//! Tensor substrate: the few numerically delicate primitives the networks
//! depend on, plus layer building blocks and a finite-difference gradient
//! checker. Dense tensors and reverse-mode autodiff come from `candle-core`.

mod channel;
mod conv;
mod gradcheck;
pub mod nn;
mod resize;
mod softmax;
mod spectral;

pub use channel::{batch_norm_train, bias_add, channel_moments};
pub use conv::conv2d;
pub use gradcheck::{check_gradients, GradCheckReport};
pub use resize::{bilinear_resize, interpolation_matrix};
pub use softmax::{channel_softmax, ensure_finite, position_softmax, softmax_last_dim};
pub use spectral::{spectral_normalize, SpectralState, SIGMA_FLOOR};

pub use candle_core::{DType, Device, Tensor, Var};
