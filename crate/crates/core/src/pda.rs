//! Generator-to-discriminator leakage through pixel-wise difficulty.
//!
//! A small head on a decoder feature predicts class probabilities at input
//! resolution. The probability of the ground-truth class at each pixel is
//! the model's confidence; `1 - p_true`, brought back to the feature grid,
//! is the difficulty map. The map reweights decoder features
//! (`feat * attn + feat`) and is handed to the discriminator. It needs ground
//! truth, so it only exists during training.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::labels::LabelMap;
use crate::numerics::nn::{nll_from_probs, BatchNorm2d, Conv2d, Ctx};
use crate::numerics::{bilinear_resize, channel_softmax};
use crate::params::Scope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyMode {
    /// `1 - p(true class)`; uses ground truth.
    TopDown,
    /// `1 - max_k p(k)`; confidence only.
    BottomUp,
}

/// Single-channel `(n, 1, h, w)` map in `[0, 1]`, tagged with its
/// downsampling factor relative to the network input.
#[derive(Debug, Clone)]
pub struct AttnMap {
    pub map: Tensor,
    pub factor: usize,
}

impl AttnMap {
    pub fn detach(&self) -> AttnMap {
        AttnMap {
            map: self.map.detach(),
            factor: self.factor,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PdaOutput {
    pub attn: AttnMap,
    /// `(n, K, H_in, W_in)` softmax probabilities.
    pub probs_full: Tensor,
    /// Decoder feature after [`apply_attention`], when the attention is
    /// applied inside the generator.
    pub enhanced: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct PdaHead {
    reduce: Conv2d,
    norm: BatchNorm2d,
    classify: Conv2d,
    channels: usize,
}

impl PdaHead {
    pub fn new(scope: &Scope, channels: usize, num_classes: usize) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::Config(format!("difficulty head needs an even channel count, got {channels}")));
        }
        Ok(Self {
            reduce: Conv2d::new_1x1(&scope.pp("reduce"), channels, channels / 2)?,
            norm: BatchNorm2d::new(&scope.pp("reduce_bn"), channels / 2)?,
            classify: Conv2d::new_1x1(&scope.pp("classify"), channels / 2, num_classes)?,
            channels,
        })
    }

    pub fn classify(&self) -> &Conv2d {
        &self.classify
    }

    pub fn reduce(&self) -> &Conv2d {
        &self.reduce
    }

    /// Softmax class probabilities upsampled to `input_size`.
    pub fn class_probs(&self, feat: &Tensor, input_size: (usize, usize), ctx: Ctx) -> Result<Tensor> {
        let c = feat.dim(1)?;
        if c != self.channels {
            return Err(Error::Channels {
                expected: self.channels,
                actual: c,
            });
        }
        let b = self.norm.forward(&self.reduce.forward(feat, ctx)?, ctx)?.relu()?;
        let logits = self.classify.forward(&b, ctx)?;
        let logits = bilinear_resize(&logits, input_size.0, input_size.1)?;
        channel_softmax(&logits)
    }
}

fn downsample_difficulty(confidence: &Tensor, feat: &Tensor, input_h: usize) -> Result<AttnMap> {
    let (_, _, h, w) = feat.dims4()?;
    let difficulty = confidence.affine(-1.0, 1.0)?;
    let map = bilinear_resize(&difficulty, h, w)?.clamp(0.0, 1.0)?;
    Ok(AttnMap {
        map,
        factor: (input_h / h).max(1),
    })
}

/// Top-down difficulty: `resize(1 - p_true)` on the feature grid.
pub fn difficulty_map(
    decoder_feat: &Tensor,
    gt: &LabelMap,
    head: &PdaHead,
    input_size: (usize, usize),
    ctx: Ctx,
) -> Result<PdaOutput> {
    let (n, h, w) = gt.dims();
    if (h, w) != input_size || n != decoder_feat.dim(0)? {
        return Err(shape_err!(
            "ground truth {n}x{h}x{w} does not match batch {} at input size {:?}",
            decoder_feat.dim(0)?,
            input_size
        ));
    }
    let probs_full = head.class_probs(decoder_feat, input_size, ctx)?;
    if probs_full.dim(1)? != gt.num_classes() {
        return Err(Error::Channels {
            expected: gt.num_classes(),
            actual: probs_full.dim(1)?,
        });
    }
    let p_true = probs_full.mul(gt.one_hot())?.sum_keepdim(1)?;
    let attn = downsample_difficulty(&p_true, decoder_feat, input_size.0)?;
    Ok(PdaOutput {
        attn,
        probs_full,
        enhanced: None,
    })
}

/// Confidence-only difficulty: `resize(1 - max_k p_k)`.
pub fn bottom_up_difficulty(
    decoder_feat: &Tensor,
    head: &PdaHead,
    input_size: (usize, usize),
    ctx: Ctx,
) -> Result<PdaOutput> {
    let probs_full = head.class_probs(decoder_feat, input_size, ctx)?;
    let confidence = probs_full.max_keepdim(1)?;
    let attn = downsample_difficulty(&confidence, decoder_feat, input_size.0)?;
    Ok(PdaOutput {
        attn,
        probs_full,
        enhanced: None,
    })
}

/// `feat * attn + feat`, with the single-channel map broadcast over channels.
pub fn apply_attention(feat: &Tensor, attn: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = feat.dims4()?;
    let (na, ca, ha, wa) = attn.dims4()?;
    if ca != 1 || (na, ha, wa) != (n, h, w) {
        return Err(shape_err!(
            "attention map {:?} does not fit feature {:?}",
            attn.dims(),
            feat.dims()
        ));
    }
    Ok(feat.broadcast_mul(attn)?.add(feat)?)
}

/// Mean over pixels of `-log(max(p_true, 1e-12))`.
pub fn pda_aux_loss(probs_full: &Tensor, gt: &LabelMap) -> Result<Tensor> {
    nll_from_probs(probs_full, gt.one_hot())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nn::scalar_value;
    use crate::params::{Init, ParamStore};
    use candle_core::{DType, Device};

    fn zero_classifier(head: &PdaHead) {
        let c = head.classify();
        c.weight().set(&c.weight().get(true).zeros_like().unwrap()).unwrap();
        c.bias().unwrap().set(&c.bias().unwrap().get(true).zeros_like().unwrap()).unwrap();
    }

    #[test]
    fn uniform_logits_give_one_minus_one_over_k() {
        let store = ParamStore::new(DType::F64, 0);
        let head = PdaHead::new(&store.root().pp("pda"), 4, 3).unwrap();
        zero_classifier(&head);
        let feat = store.root().param("f", (2, 4, 2, 2), Init::Normal { std: 1.0 }).unwrap().get(true);
        let gt = LabelMap::new((0..32).map(|i| (i % 3) as u8).collect(), 2, 4, 4, 3, DType::F64).unwrap();
        let out = difficulty_map(&feat, &gt, &head, (4, 4), Ctx::TRAIN).unwrap();
        for v in out.attn.map.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 2.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(out.attn.factor, 2);
        let loss = scalar_value(&pda_aux_loss(&out.probs_full, &gt).unwrap()).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bottom_up_uniform_and_confident() {
        let store = ParamStore::new(DType::F64, 0);
        let head = PdaHead::new(&store.root().pp("pda"), 4, 4).unwrap();
        zero_classifier(&head);
        let feat = store.root().param("f", (1, 4, 2, 2), Init::Normal { std: 1.0 }).unwrap().get(true);
        let out = bottom_up_difficulty(&feat, &head, (4, 4), Ctx::TRAIN).unwrap();
        for v in out.attn.map.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 0.75).abs() < 1e-12);
        }
        // A huge bias on one class makes every pixel one-hot confident.
        let c = head.classify();
        c.bias().unwrap().set(&Tensor::new(&[800f64, 0., 0., 0.], &Device::Cpu).unwrap()).unwrap();
        let out = bottom_up_difficulty(&feat, &head, (4, 4), Ctx::TRAIN).unwrap();
        assert!(out.attn.map.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| *v == 0.0));
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    /// Half-pixel bilinear weights along one axis: `(i0, i1, frac)` per output.
    fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                (i0, (i0 + 1).min(n_in - 1), src - i0 as f64)
            })
            .collect()
    }

    fn resize_plane(x: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let (ty, tx) = (taps(h, oh), taps(w, ow));
        let mut out = vec![0.0; oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let at = |y: usize, xx: usize| x[y * w + xx];
                out[oy * ow + ox] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
            }
        }
        out
    }

    #[test]
    fn head_pipeline_matches_scalar_oracle() {
        let (c, k, h, w, ih, iw) = (4usize, 2usize, 2usize, 2usize, 4usize, 4usize);
        let store = ParamStore::new(DType::F64, 8);
        let head = PdaHead::new(&store.root().pp("pda"), c, k).unwrap();
        let feat = store.root().param("f", (1, c, h, w), Init::Normal { std: 1.0 }).unwrap().get(true);
        let labels: Vec<u8> = (0..ih * iw).map(|i| ((i * 5 + 1) % 7 % k) as u8).collect();
        let gt = LabelMap::new(labels.clone(), 1, ih, iw, k, DType::F64).unwrap();
        let top = difficulty_map(&feat, &gt, &head, (ih, iw), Ctx::TRAIN).unwrap();
        let bottom = bottom_up_difficulty(&feat, &head, (ih, iw), Ctx::TRAIN).unwrap();

        let f = values(&feat);
        let (rw, rb) = (values(&head.reduce.weight().get(true)), values(&head.reduce.bias().unwrap().get(true)));
        let (cw, cb) = (values(&head.classify.weight().get(true)), values(&head.classify.bias().unwrap().get(true)));
        let hw = h * w;
        let ch = c / 2;
        // 1x1 reduce, batch-norm on batch statistics (unit gamma, zero beta), ReLU.
        let mut hidden = vec![0.0; ch * hw];
        for o in 0..ch {
            let pre: Vec<f64> = (0..hw).map(|p| rb[o] + (0..c).map(|i| rw[o * c + i] * f[i * hw + p]).sum::<f64>()).collect();
            let mean = pre.iter().sum::<f64>() / hw as f64;
            let var = pre.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / hw as f64;
            for p in 0..hw {
                hidden[o * hw + p] = ((pre[p] - mean) / (var + 1e-5).sqrt()).max(0.0);
            }
        }
        let mut probs = vec![vec![0.0; ih * iw]; k];
        let logits: Vec<Vec<f64>> = (0..k)
            .map(|o| {
                let plane: Vec<f64> = (0..hw).map(|p| cb[o] + (0..ch).map(|i| cw[o * ch + i] * hidden[i * hw + p]).sum::<f64>()).collect();
                resize_plane(&plane, h, w, ih, iw)
            })
            .collect();
        for p in 0..ih * iw {
            let z: f64 = (0..k).map(|o| logits[o][p].exp()).sum();
            for o in 0..k {
                probs[o][p] = logits[o][p].exp() / z;
            }
        }
        let hard: Vec<f64> = (0..ih * iw).map(|p| 1.0 - probs[labels[p] as usize][p]).collect();
        let unsure: Vec<f64> = (0..ih * iw).map(|p| 1.0 - (0..k).map(|o| probs[o][p]).fold(0.0, f64::max)).collect();
        for (got, want) in [(&top.attn.map, &hard), (&bottom.attn.map, &unsure)] {
            let want = resize_plane(want, ih, iw, h, w);
            for (a, b) in values(got).iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
        let p_flat: Vec<f64> = probs.concat();
        for (a, b) in values(&top.probs_full).iter().zip(&p_flat) {
            assert!((a - b).abs() < 1e-10);
        }
        let nll = -(0..ih * iw).map(|p| probs[labels[p] as usize][p].ln()).sum::<f64>() / (ih * iw) as f64;
        let loss = scalar_value(&pda_aux_loss(&top.probs_full, &gt).unwrap()).unwrap();
        assert!((loss - nll).abs() < 1e-10, "{loss} vs {nll}");
    }

    #[test]
    fn confident_and_correct_gives_zero_difficulty() {
        let store = ParamStore::new(DType::F64, 9);
        let head = PdaHead::new(&store.root().pp("pda"), 4, 3).unwrap();
        zero_classifier(&head);
        head.classify().bias().unwrap().set(&Tensor::new(&[0f64, 800., 0.], &Device::Cpu).unwrap()).unwrap();
        let feat = store.root().param("f", (2, 4, 2, 2), Init::Normal { std: 1.0 }).unwrap().get(true);
        let gt = LabelMap::new(vec![1; 32], 2, 4, 4, 3, DType::F64).unwrap();
        let out = difficulty_map(&feat, &gt, &head, (4, 4), Ctx::TRAIN).unwrap();
        assert!(values(&out.attn.map).iter().all(|v| *v == 0.0));
        let loss = scalar_value(&pda_aux_loss(&out.probs_full, &gt).unwrap()).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn head_alone_overfits_a_fixed_batch() {
        let store = ParamStore::new(DType::F32, 10);
        let head = PdaHead::new(&store.root().pp("pda"), 16, 3).unwrap();
        let feat = store.root().pp("x").param("f", (1, 16, 4, 4), Init::Normal { std: 1.0 }).unwrap().get(true);
        // Labels constant on each 2x2 block of the 8x8 input.
        let cells: Vec<u8> = (0..16).map(|i| ((i * 7 + i / 3) % 3) as u8).collect();
        let labels: Vec<u8> = (0..64).map(|p| cells[(p / 16) * 4 + p % 8 / 2]).collect();
        let gt = LabelMap::new(labels, 1, 8, 8, 3, DType::F32).unwrap();
        let params: Vec<_> = store.trainable().into_iter().filter(|(n, _)| n.starts_with("pda")).collect();
        let cfg = crate::optim::AdamConfig {
            lr: 1e-2,
            ..crate::optim::AdamConfig::default()
        };
        let mut opt = crate::optim::Adam::new(params, cfg).unwrap();
        let mut loss = f64::INFINITY;
        for _ in 0..200 {
            let out = difficulty_map(&feat, &gt, &head, (8, 8), Ctx::TRAIN).unwrap();
            let l = pda_aux_loss(&out.probs_full, &gt).unwrap();
            loss = scalar_value(&l).unwrap();
            opt.step(&l.backward().unwrap()).unwrap();
        }
        assert!(loss < 0.05, "aux loss {loss} after 200 steps");
    }

    #[test]
    fn apply_identities() {
        let store = ParamStore::new(DType::F32, 5);
        let feat = store.root().param("f", (1, 2, 3, 3), Init::Normal { std: 1.0 }).unwrap().get(true);
        let zeros = Tensor::zeros((1, 1, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let ones = Tensor::ones((1, 1, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let a = apply_attention(&feat, &zeros).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            feat.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let b = apply_attention(&feat, &ones).unwrap();
        let twice = feat.affine(2.0, 0.0).unwrap();
        let d = b.sub(&twice).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d <= 1e-6);
    }

    #[test]
    fn apply_elementwise_oracle() {
        let store = ParamStore::new(DType::F64, 6);
        let feat = store.root().param("f", (1, 2, 3, 3), Init::Normal { std: 1.0 }).unwrap().get(true);
        let attn = store.root().param("a", (1, 1, 3, 3), Init::Uniform { fan_in: 1 }).unwrap().get(true).abs().unwrap();
        let out = apply_attention(&feat, &attn).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let f = feat.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let a = attn.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for c in 0..2 {
            for p in 0..9 {
                let want = f[c * 9 + p] * a[p] + f[c * 9 + p];
                assert_eq!(out[c * 9 + p], want);
            }
        }
    }

    #[test]
    fn apply_rejects_mismatch() {
        let feat = Tensor::zeros((1, 2, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let attn = Tensor::zeros((1, 1, 3, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(apply_attention(&feat, &attn).is_err());
    }

    #[test]
    fn odd_channel_head_rejected() {
        let store = ParamStore::new(DType::F32, 0);
        assert!(PdaHead::new(&store.root(), 5, 3).is_err());
    }
}
