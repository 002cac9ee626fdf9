//! Conditional PatchGAN discriminator.
//!
//! Six convolutions: a 3x3 stride-1 stem over `(image, segmentation)`, four
//! spectral-normalized 4x4 stride-2 layers (output stride 16), and a 1x1
//! projection to one logit per patch. Leaky ReLU (0.2) follows every layer
//! but the last. Difficulty maps leaked from the generator reweight the
//! strided features at the matching resolution.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::numerics::nn::{leaky_relu, pad_to_even, Conv2d, Ctx};
use crate::numerics::{bilinear_resize, channel_softmax};
use crate::params::Scope;
use crate::pda::{apply_attention, AttnMap};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const STRIDED_LAYERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscConfig {
    /// Output channels of layers 0..=4. Empty: `[b, 2b, 4b, 8b, 8b]` from
    /// the generator's base width, so taps line up with encoder stages.
    pub widths: Vec<usize>,
    /// Strided layers (1..=4) whose outputs are exported as features.
    pub taps: Vec<usize>,
    pub patch_output_stride: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            widths: Vec::new(),
            taps: vec![1, 2, 3],
            patch_output_stride: 16,
        }
    }
}

impl DiscConfig {
    pub fn resolved_widths(&self, gen_base: usize) -> Vec<usize> {
        if self.widths.is_empty() {
            vec![gen_base, 2 * gen_base, 4 * gen_base, 8 * gen_base, 8 * gen_base]
        } else {
            self.widths.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.widths.is_empty() && (self.widths.len() != 5 || self.widths.contains(&0)) {
            return Err(Error::Config(format!(
                "discriminator.widths needs 5 positive entries (layers 0-4), got {:?}",
                self.widths
            )));
        }
        if self.taps.iter().any(|&t| t == 0 || t > STRIDED_LAYERS) {
            return Err(Error::Config(format!(
                "discriminator.taps must name strided layers 1-4, got {:?}",
                self.taps
            )));
        }
        if self.patch_output_stride != 1 << STRIDED_LAYERS {
            return Err(Error::Config(format!(
                "discriminator.patch_output_stride is fixed at 16 by the layer plan, got {}",
                self.patch_output_stride
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DiscTrace {
    /// `(n, 1, ceil(H/16), ceil(W/16))`.
    pub patch_logits: Tensor,
    /// Features of the tapped layers, in ascending layer order.
    pub taps: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    stem: Conv2d,
    strided: Vec<Conv2d>,
    classifier: Conv2d,
    taps: Vec<usize>,
    image_channels: usize,
    num_classes: usize,
}

impl Discriminator {
    pub fn new(scope: &Scope, cfg: &DiscConfig, image_channels: usize, num_classes: usize, gen_base: usize) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.resolved_widths(gen_base);
        let stem = Conv2d::new(&scope.pp("l0"), image_channels + num_classes, widths[0], 3, 1, 1)?;
        let strided = (1..=STRIDED_LAYERS)
            .map(|k| Conv2d::spectral(&scope.pp(format!("l{k}")), widths[k - 1], widths[k], 4, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let classifier = Conv2d::new_1x1(&scope.pp("l5"), widths[4], 1)?;
        let mut taps = cfg.taps.clone();
        taps.sort_unstable();
        taps.dedup();
        Ok(Self {
            stem,
            strided,
            classifier,
            taps,
            image_channels,
            num_classes,
        })
    }

    /// Channel count of each tapped layer, keyed by layer index (which is
    /// also the encoder stage at the same resolution).
    pub fn tap_channels(&self) -> std::collections::BTreeMap<usize, usize> {
        self.taps
            .iter()
            .map(|&k| (k, self.strided[k - 1].out_channels()))
            .collect()
    }

    pub fn spectral_layers(&self) -> &[Conv2d] {
        &self.strided
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn forward(&self, img: &Tensor, seg: &Tensor, leaked: Option<&[AttnMap]>, ctx: Ctx) -> Result<DiscTrace> {
        let (n, c, h, w) = img.dims4()?;
        if c != self.image_channels {
            return Err(Error::Channels {
                expected: self.image_channels,
                actual: c,
            });
        }
        let (ns, k, hs, ws) = seg.dims4()?;
        if k != self.num_classes {
            return Err(Error::Channels {
                expected: self.num_classes,
                actual: k,
            });
        }
        if (ns, hs, ws) != (n, h, w) {
            return Err(Error::Shape(format!(
                "segmentation {:?} does not pair with image {:?}",
                seg.dims(),
                img.dims()
            )));
        }
        let mut x = leaky_relu(&self.stem.forward(&Tensor::cat(&[img, seg], 1)?, ctx)?, LEAKY_SLOPE)?;
        let mut taps = Vec::with_capacity(self.taps.len());
        for (i, conv) in self.strided.iter().enumerate() {
            let layer = i + 1;
            x = leaky_relu(&conv.forward(&pad_to_even(&x)?, ctx)?, LEAKY_SLOPE)?;
            if let Some(map) = leaked.and_then(|ms| ms.iter().find(|m| m.factor == 1 << layer)) {
                let (_, _, hh, ww) = x.dims4()?;
                x = apply_attention(&x, &bilinear_resize(&map.map, hh, ww)?)?;
            }
            if self.taps.contains(&layer) {
                taps.push(x.clone());
            }
        }
        let patch_logits = self.classifier.forward(&x, ctx)?;
        Ok(DiscTrace { patch_logits, taps })
    }
}

/// Segmentation source for the discriminator's conditioning input.
#[derive(Debug, Clone, Copy)]
pub enum SegSource<'a> {
    Logits(&'a Tensor),
    Mask(&'a LabelMap),
}

/// Per-pixel simplex vectors: softmax of generator logits, or one-hot ground
/// truth.
pub fn seg_to_disc_input(src: SegSource<'_>) -> Result<Tensor> {
    match src {
        SegSource::Logits(l) => channel_softmax(l),
        SegSource::Mask(m) => Ok(m.one_hot().clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamStore};
    use candle_core::{DType, Device};

    fn disc(store: &ParamStore) -> Discriminator {
        Discriminator::new(&store.root().pp("d"), &DiscConfig::default(), 3, 3, 8).unwrap()
    }

    #[test]
    fn output_stride_is_sixteen() {
        let store = ParamStore::new(DType::F32, 0);
        let d = disc(&store);
        for (h, w) in [(64, 64), (16, 16), (20, 36), (33, 17), (48, 80)] {
            let img = Tensor::zeros((1, 3, h, w), DType::F32, &Device::Cpu).unwrap();
            let seg = Tensor::zeros((1, 3, h, w), DType::F32, &Device::Cpu).unwrap();
            let t = d.forward(&img, &seg, None, Ctx::EVAL).unwrap();
            assert_eq!(t.patch_logits.dims(), &[1, 1, h.div_ceil(16), w.div_ceil(16)], "{h}x{w}");
            assert_eq!(t.taps.len(), 3);
            assert_eq!(t.taps[0].dims()[1], 16);
        }
    }

    #[test]
    fn zero_leak_is_identity() {
        let store = ParamStore::new(DType::F32, 1);
        let d = disc(&store);
        let img = store.root().param("img", (2, 3, 32, 32), Init::Uniform { fan_in: 1 }).unwrap().get(true);
        let seg = store.root().param("seg", (2, 3, 32, 32), Init::Uniform { fan_in: 1 }).unwrap().get(true);
        let maps: Vec<AttnMap> = [2usize, 4, 8]
            .iter()
            .map(|&f| AttnMap {
                map: Tensor::zeros((2, 1, 32 / f, 32 / f), DType::F32, &Device::Cpu).unwrap(),
                factor: f,
            })
            .collect();
        let a = d.forward(&img, &seg, None, Ctx::EVAL).unwrap();
        let b = d.forward(&img, &seg, Some(&maps), Ctx::EVAL).unwrap();
        assert_eq!(
            a.patch_logits.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.patch_logits.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let store = ParamStore::new(DType::F32, 0);
        let d = disc(&store);
        let img = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let seg = Tensor::zeros((1, 4, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(d.forward(&img, &seg, None, Ctx::EVAL), Err(Error::Channels { expected: 3, actual: 4 })));
    }

    #[test]
    fn seg_inputs_are_simplex() {
        let logits = Tensor::zeros((1, 3, 1, 1), DType::F64, &Device::Cpu).unwrap();
        let p = seg_to_disc_input(SegSource::Logits(&logits)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let mask = LabelMap::new(vec![2], 1, 1, 1, 3, DType::F64).unwrap();
        let p = seg_to_disc_input(SegSource::Mask(&mask)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(p, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn random_logits_match_softmax_oracle() {
        let store = ParamStore::new(DType::F64, 9);
        let logits = store.root().param("l", (2, 4, 3, 3), Init::Normal { std: 2.0 }).unwrap().get(true);
        let p = seg_to_disc_input(SegSource::Logits(&logits)).unwrap();
        let lv = logits.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let pv = p.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for b in 0..2 {
            for px in 0..9 {
                let z: f64 = (0..4).map(|k| lv[(b * 4 + k) * 9 + px].exp()).sum();
                for k in 0..4 {
                    let i = (b * 4 + k) * 9 + px;
                    assert!((lv[i].exp() / z - pv[i]).abs() < 1e-12);
                }
            }
        }
    }
}
