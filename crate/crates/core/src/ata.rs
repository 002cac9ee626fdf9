//! Discriminator-to-generator leakage.
//!
//! [`AtaParams`] turns a discriminator feature map into a position-similarity
//! attention matrix (Query/Key at `C/8` channels) and adds the
//! attention-aggregated Value (`C/2` channels, projected back to `C`) to a
//! generator feature map, scaled by a learned `alpha` that starts at zero.
//! [`Connector`] wraps it together with the simpler connection variants used
//! for ablations.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::nn::{Conv2d, Ctx};
use crate::numerics::{bilinear_resize, position_softmax};
use crate::params::{Init, Param, Scope};

/// Largest `H*W` at which a dense attention matrix is built.
pub const MAX_ATTENTION_POSITIONS: usize = 4096;

#[derive(Debug, Clone)]
pub struct AtaParams {
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    out: Conv2d,
    alpha: Param,
    channels: usize,
}

#[derive(Debug, Clone)]
pub struct AtaOutput {
    pub fused: Tensor,
    /// `(n, H*W, H*W)` row-stochastic weights, when requested.
    pub attention: Option<Tensor>,
}

impl AtaParams {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        if channels < 8 || channels % 8 != 0 {
            return Err(Error::Config(format!(
                "attention channel count must be a positive multiple of 8, got {channels}"
            )));
        }
        Ok(Self {
            query: Conv2d::new_1x1(&scope.pp("query"), channels, channels / 8)?,
            key: Conv2d::new_1x1(&scope.pp("key"), channels, channels / 8)?,
            value: Conv2d::new_1x1(&scope.pp("value"), channels, channels / 2)?,
            out: Conv2d::new_1x1(&scope.pp("out"), channels / 2, channels)?,
            alpha: scope.param("alpha", 1, Init::Const(0.0))?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn alpha(&self) -> &Param {
        &self.alpha
    }

    pub fn query(&self) -> &Conv2d {
        &self.query
    }

    pub fn key(&self) -> &Conv2d {
        &self.key
    }

    pub fn value(&self) -> &Conv2d {
        &self.value
    }

    pub fn out(&self) -> &Conv2d {
        &self.out
    }

    fn check_channels(&self, t: &Tensor) -> Result<()> {
        let c = t.dim(1)?;
        if c != self.channels {
            return Err(Error::Channels {
                expected: self.channels,
                actual: c,
            });
        }
        Ok(())
    }

    /// Softmax over `j` of `Query_i . Key_j`, with Query taken from
    /// `query_src` and Key from `key_src` (both `(n, C, H, W)`).
    fn weights_from(&self, query_src: &Tensor, key_src: &Tensor, ctx: Ctx) -> Result<Tensor> {
        self.check_channels(query_src)?;
        self.check_channels(key_src)?;
        let (n, _, h, w) = key_src.dims4()?;
        if h * w > MAX_ATTENTION_POSITIONS {
            return Err(shape_err!(
                "attention over {h}x{w} positions exceeds the {MAX_ATTENTION_POSITIONS} cap"
            ));
        }
        let q = self.query.forward(query_src, ctx)?.reshape((n, self.channels / 8, h * w))?;
        let k = self.key.forward(key_src, ctx)?.reshape((n, self.channels / 8, h * w))?;
        let logits = q.transpose(1, 2)?.contiguous()?.matmul(&k)?;
        position_softmax(&logits)
    }

    fn aggregate(&self, weights: &Tensor, value_src: &Tensor, g_feat: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (n, _, h, w) = value_src.dims4()?;
        let v = self.value.forward(value_src, ctx)?.reshape((n, self.channels / 2, h * w))?;
        // out[c, i] = sum_j w[i, j] * v[c, j]
        let agg = v
            .matmul(&weights.transpose(1, 2)?.contiguous()?)?
            .reshape((n, self.channels / 2, h, w))?;
        let projected = self.out.forward(&agg, ctx)?;
        let alpha = self.alpha.get(ctx.frozen).reshape((1, 1, 1, 1))?;
        Ok(projected.broadcast_mul(&alpha)?.add(g_feat)?)
    }
}

fn check_spatial(d_feat: &Tensor, g_feat: &Tensor) -> Result<()> {
    let (nd, _, hd, wd) = d_feat.dims4()?;
    let (ng, _, hg, wg) = g_feat.dims4()?;
    if (nd, hd, wd) != (ng, hg, wg) {
        return Err(shape_err!(
            "discriminator feature {:?} and generator feature {:?} differ in batch or spatial size",
            d_feat.dims(),
            g_feat.dims()
        ));
    }
    Ok(())
}

/// `(n, H*W, H*W)` attention weights built from a discriminator feature map.
pub fn attention_weights(d_feat: &Tensor, params: &AtaParams, ctx: Ctx) -> Result<Tensor> {
    params.weights_from(d_feat, d_feat, ctx)
}

/// `S = alpha * out(Value . W^T) + F`.
pub fn ata_forward(
    d_feat: &Tensor,
    g_feat: &Tensor,
    params: &AtaParams,
    ctx: Ctx,
    keep_attention: bool,
) -> Result<AtaOutput> {
    check_spatial(d_feat, g_feat)?;
    params.check_channels(g_feat)?;
    let weights = attention_weights(d_feat, params, ctx)?;
    let fused = params.aggregate(&weights, d_feat, g_feat, ctx)?;
    Ok(AtaOutput {
        fused,
        attention: keep_attention.then_some(weights),
    })
}

/// How discriminator features are merged into the generator encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionMode {
    Ata,
    Add,
    Concat,
    Conv1x1,
    SeGate,
    SourceTarget,
    None,
}

impl ConnectionMode {
    pub fn name(self) -> &'static str {
        match self {
            ConnectionMode::Ata => "ata",
            ConnectionMode::Add => "add",
            ConnectionMode::Concat => "concat",
            ConnectionMode::Conv1x1 => "conv1x1",
            ConnectionMode::SeGate => "se_gate",
            ConnectionMode::SourceTarget => "source_target",
            ConnectionMode::None => "none",
        }
    }
}

#[derive(Debug, Clone)]
enum Link {
    Ata(AtaParams),
    SourceTarget(AtaParams),
    Add,
    Concat(Conv2d),
    Conv1x1(Conv2d),
    SeGate { squeeze: Conv2d, excite: Conv2d },
    None,
}

/// One leakage site: optional channel adapter for the discriminator map,
/// then the selected connection.
#[derive(Debug, Clone)]
pub struct Connector {
    adapt: Option<Conv2d>,
    link: Link,
    channels: usize,
}

impl Connector {
    pub fn new(scope: &Scope, mode: ConnectionMode, gen_channels: usize, disc_channels: usize) -> Result<Self> {
        let c = gen_channels;
        let adapt = if disc_channels != c && !matches!(mode, ConnectionMode::None | ConnectionMode::Concat) {
            Some(Conv2d::new_1x1(&scope.pp("adapt"), disc_channels, c)?)
        } else {
            None
        };
        let link = match mode {
            ConnectionMode::Ata => Link::Ata(AtaParams::new(scope, c)?),
            ConnectionMode::SourceTarget => Link::SourceTarget(AtaParams::new(scope, c)?),
            ConnectionMode::Add => Link::Add,
            ConnectionMode::Concat => Link::Concat(Conv2d::new_1x1(&scope.pp("fuse"), c + disc_channels, c)?),
            ConnectionMode::Conv1x1 => Link::Conv1x1(Conv2d::new_1x1(&scope.pp("proj"), c, c)?),
            ConnectionMode::SeGate => {
                let hidden = (c / 4).max(1);
                Link::SeGate {
                    squeeze: Conv2d::new_1x1(&scope.pp("squeeze"), c, hidden)?,
                    excite: Conv2d::new_1x1(&scope.pp("excite"), hidden, c)?,
                }
            }
            ConnectionMode::None => Link::None,
        };
        Ok(Self {
            adapt,
            link,
            channels: c,
        })
    }

    pub fn ata_params(&self) -> Option<&AtaParams> {
        match &self.link {
            Link::Ata(p) | Link::SourceTarget(p) => Some(p),
            _ => None,
        }
    }

    /// Resizes `d_feat` to the generator grid when they differ (odd sizes
    /// after strided convolutions), adapts channels, then connects.
    pub fn forward(&self, d_feat: &Tensor, g_feat: &Tensor, ctx: Ctx, keep_attention: bool) -> Result<AtaOutput> {
        let (_, c, h, w) = g_feat.dims4()?;
        if c != self.channels {
            return Err(Error::Channels {
                expected: self.channels,
                actual: c,
            });
        }
        let (_, _, hd, wd) = d_feat.dims4()?;
        let mut d = if (hd, wd) != (h, w) {
            bilinear_resize(d_feat, h, w)?
        } else {
            d_feat.clone()
        };
        if let Some(adapt) = &self.adapt {
            d = adapt.forward(&d, ctx)?;
        }
        let plain = |fused: Tensor| AtaOutput {
            fused,
            attention: None,
        };
        match &self.link {
            Link::Ata(p) => ata_forward(&d, g_feat, p, ctx, keep_attention),
            Link::SourceTarget(p) => {
                check_spatial(&d, g_feat)?;
                let weights = p.weights_from(g_feat, &d, ctx)?;
                let fused = p.aggregate(&weights, &d, g_feat, ctx)?;
                Ok(AtaOutput {
                    fused,
                    attention: keep_attention.then_some(weights),
                })
            }
            Link::Add => Ok(plain(g_feat.add(&d)?)),
            Link::Concat(fuse) => Ok(plain(fuse.forward(&Tensor::cat(&[g_feat, &d], 1)?, ctx)?)),
            Link::Conv1x1(proj) => Ok(plain(g_feat.add(&proj.forward(&d, ctx)?)?)),
            Link::SeGate { squeeze, excite } => {
                let pooled = d.mean_keepdim((2, 3))?;
                let z = excite.forward(&squeeze.forward(&pooled, ctx)?.relu()?, ctx)?;
                let gate = z.neg()?.exp()?.affine(1.0, 1.0)?.recip()?;
                Ok(plain(g_feat.broadcast_mul(&gate)?))
            }
            Link::None => Ok(plain(g_feat.clone())),
        }
    }
}
