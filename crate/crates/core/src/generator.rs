//! U-Net segmentation generator with leakage sites.
//!
//! Encoder stage `i` runs at `1/2^i` of the input resolution with
//! `base * 2^i` channels; decoder stage `j` mirrors encoder stage
//! `depth - 1 - j`. Discriminator features enter after the second
//! convolution of configured encoder stages (second pass only), and
//! difficulty heads sit on configured decoder stages.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::ata::{ConnectionMode, Connector};
use crate::error::{shape_err, Error, Result};
use crate::labels::LabelMap;
use crate::numerics::nn::{nll_from_probs, BatchNorm2d, Conv2d, Ctx};
use crate::numerics::{bilinear_resize, channel_softmax};
use crate::params::Scope;
use crate::pda::{apply_attention, bottom_up_difficulty, difficulty_map, DifficultyMode, PdaHead, PdaOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub image_channels: usize,
    pub num_classes: usize,
    /// Encoder stages receiving discriminator features.
    pub ata_sites: Vec<usize>,
    /// Decoder stages carrying difficulty heads (exactly three).
    pub pda_stages: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 64,
            image_channels: 3,
            num_classes: 3,
            ata_sites: vec![1, 2, 3],
            pda_stages: vec![0, 1, 2],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth < 2 {
            return fail(format!("generator.depth must be >= 2, got {}", self.depth));
        }
        if self.base_channels == 0 || self.base_channels % 8 != 0 {
            return fail(format!(
                "generator.base_channels must be a positive multiple of 8, got {}",
                self.base_channels
            ));
        }
        if self.num_classes < 2 {
            return fail("generator.num_classes must be >= 2".into());
        }
        if self.image_channels == 0 {
            return fail("generator.image_channels must be >= 1".into());
        }
        if self.pda_stages.len() != 3 {
            return fail(format!(
                "generator.pda_stages needs exactly 3 entries, got {:?}",
                self.pda_stages
            ));
        }
        for (name, list) in [("pda_stages", &self.pda_stages), ("ata_sites", &self.ata_sites)] {
            let mut seen = list.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != list.len() || list.iter().any(|&s| s >= self.depth) {
                return fail(format!(
                    "generator.{name} must be distinct stages below depth {}, got {list:?}",
                    self.depth
                ));
            }
        }
        Ok(())
    }

    pub fn encoder_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn decoder_channels(&self, stage: usize) -> usize {
        self.base_channels << (self.depth - 1 - stage)
    }
}

/// Which leakage machinery a generator instance carries.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakageLayout {
    pub connection: Option<ConnectionMode>,
    /// Discriminator channel count at each ATA site, keyed by site.
    pub disc_channels: BTreeMap<usize, usize>,
    pub difficulty: Option<DifficultyMode>,
    /// Multiply-and-residual inside the generator (off: maps only leak to D).
    pub pda_in_generator: bool,
}

impl LeakageLayout {
    pub fn none() -> Self {
        Self {
            connection: None,
            disc_channels: BTreeMap::new(),
            difficulty: None,
            pda_in_generator: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// Plain U-Net; no leakage.
    First,
    /// Discriminator features injected at ATA sites; difficulty heads active.
    Second,
    /// Plain U-Net; ground truth is never consulted.
    Inference,
    /// Discriminator features injected, difficulty heads skipped. Used to
    /// inspect attention without ground truth.
    Probe,
}

#[derive(Debug, Clone)]
struct DoubleConv {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl DoubleConv {
    fn new(scope: &Scope, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&scope.pp("conv1"), cin, cout, 3, 1, 1)?,
            bn1: BatchNorm2d::new(&scope.pp("bn1"), cout)?,
            conv2: Conv2d::new(&scope.pp("conv2"), cout, cout, 3, 1, 1)?,
            bn2: BatchNorm2d::new(&scope.pp("bn2"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let x = self.bn1.forward(&self.conv1.forward(x, ctx)?, ctx)?.relu()?;
        Ok(self.bn2.forward(&self.conv2.forward(&x, ctx)?, ctx)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorTrace {
    /// `(n, K, H, W)` class logits.
    pub logits: Tensor,
    /// Decoder stage outputs (after difficulty reweighting, if any).
    pub decoder_feats: Vec<Tensor>,
    /// Difficulty outputs keyed by decoder stage, in stage order.
    pub pda: Vec<(usize, PdaOutput)>,
    /// Attention matrices keyed by encoder site, when requested.
    pub attention: Vec<(usize, Tensor)>,
}

impl GeneratorTrace {
    pub fn attn_maps(&self) -> Vec<crate::pda::AttnMap> {
        self.pda.iter().map(|(_, o)| o.attn.clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    encoder: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    up: Vec<Conv2d>,
    decoder: Vec<DoubleConv>,
    head: Conv2d,
    connectors: BTreeMap<usize, Connector>,
    heads: BTreeMap<usize, PdaHead>,
    difficulty: Option<DifficultyMode>,
    pda_in_generator: bool,
}

impl Generator {
    pub fn new(scope: &Scope, cfg: &GeneratorConfig, layout: &LeakageLayout) -> Result<Self> {
        cfg.validate()?;
        let depth = cfg.depth;
        let mut encoder = Vec::with_capacity(depth);
        let mut cin = cfg.image_channels;
        for i in 0..depth {
            let c = cfg.encoder_channels(i);
            encoder.push(DoubleConv::new(&scope.pp(format!("enc{i}")), cin, c)?);
            cin = c;
        }
        let bottleneck = DoubleConv::new(&scope.pp("bottleneck"), cin, cfg.base_channels << depth)?;
        let mut up = Vec::with_capacity(depth);
        let mut decoder = Vec::with_capacity(depth);
        let mut cin = cfg.base_channels << depth;
        for j in 0..depth {
            let c = cfg.decoder_channels(j);
            up.push(Conv2d::new(&scope.pp(format!("up{j}")), cin, c, 3, 1, 1)?);
            decoder.push(DoubleConv::new(&scope.pp(format!("dec{j}")), 2 * c, c)?);
            cin = c;
        }
        let head = Conv2d::new_1x1(&scope.pp("head"), cfg.base_channels, cfg.num_classes)?;

        let mut connectors = BTreeMap::new();
        if let Some(mode) = layout.connection {
            for &site in &cfg.ata_sites {
                let dc = *layout.disc_channels.get(&site).ok_or_else(|| {
                    Error::Config(format!("no discriminator tap feeds encoder stage {site}"))
                })?;
                let conn = Connector::new(&scope.pp(format!("ata{site}")), mode, cfg.encoder_channels(site), dc)?;
                connectors.insert(site, conn);
            }
        }
        let mut heads = BTreeMap::new();
        if layout.difficulty.is_some() {
            for &stage in &cfg.pda_stages {
                let head = PdaHead::new(&scope.pp(format!("pda{stage}")), cfg.decoder_channels(stage), cfg.num_classes)?;
                heads.insert(stage, head);
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            bottleneck,
            up,
            decoder,
            head,
            connectors,
            heads,
            difficulty: layout.difficulty,
            pda_in_generator: layout.pda_in_generator,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn has_ata(&self) -> bool {
        !self.connectors.is_empty()
    }

    pub fn has_pda(&self) -> bool {
        !self.heads.is_empty()
    }

    pub fn connectors(&self) -> &BTreeMap<usize, Connector> {
        &self.connectors
    }

    pub fn pda_heads(&self) -> &BTreeMap<usize, PdaHead> {
        &self.heads
    }

    /// Encoder sites, in the order `ata_inputs` must be supplied.
    pub fn ata_sites(&self) -> Vec<usize> {
        self.connectors.keys().copied().collect()
    }

    pub fn forward(
        &self,
        img: &Tensor,
        pass: Pass,
        ata_inputs: Option<&[Tensor]>,
        gt: Option<&LabelMap>,
        ctx: Ctx,
        keep_attention: bool,
    ) -> Result<GeneratorTrace> {
        let (_, c, h, w) = img.dims4()?;
        if c != self.cfg.image_channels {
            return Err(Error::Channels {
                expected: self.cfg.image_channels,
                actual: c,
            });
        }
        let unit = 1usize << self.cfg.depth;
        if h % unit != 0 || w % unit != 0 {
            return Err(shape_err!("input {h}x{w} must be divisible by {unit} for depth {}", self.cfg.depth));
        }
        let use_ata = matches!(pass, Pass::Second | Pass::Probe) && self.has_ata();
        let use_pda = pass == Pass::Second && self.has_pda();
        if use_ata {
            match ata_inputs {
                None => return Err(Error::MissingInput("discriminator features for the second pass")),
                Some(xs) if xs.len() != self.connectors.len() => {
                    return Err(shape_err!(
                        "{} discriminator feature maps supplied for {} sites",
                        xs.len(),
                        self.connectors.len()
                    ))
                }
                _ => {}
            }
        }
        if use_pda && gt.is_none() && self.difficulty == Some(DifficultyMode::TopDown) {
            return Err(Error::MissingInput("ground truth for difficulty attention"));
        }

        let mut attention = Vec::new();
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut x = img.clone();
        let mut site_idx = 0;
        for (i, block) in self.encoder.iter().enumerate() {
            let mut f = block.forward(&x, ctx)?;
            if use_ata {
                if let Some(conn) = self.connectors.get(&i) {
                    let d = &ata_inputs.expect("checked above")[site_idx];
                    site_idx += 1;
                    let out = conn.forward(d, &f, ctx, keep_attention)?;
                    if let Some(a) = out.attention {
                        attention.push((i, a));
                    }
                    f = out.fused;
                }
            }
            x = f.max_pool2d(2)?;
            skips.push(f);
        }
        x = self.bottleneck.forward(&x, ctx)?;

        let mut decoder_feats = Vec::with_capacity(self.cfg.depth);
        let mut pda = Vec::new();
        for (j, (up, block)) in self.up.iter().zip(&self.decoder).enumerate() {
            let (_, _, hh, ww) = x.dims4()?;
            let upsampled = up.forward(&bilinear_resize(&x, 2 * hh, 2 * ww)?, ctx)?;
            let skip = &skips[self.cfg.depth - 1 - j];
            let mut f = block.forward(&Tensor::cat(&[&upsampled, skip], 1)?, ctx)?;
            if use_pda {
                if let Some(head) = self.heads.get(&j) {
                    let mut out = match (self.difficulty, gt) {
                        (Some(DifficultyMode::TopDown), Some(gt)) => difficulty_map(&f, gt, head, (h, w), ctx)?,
                        _ => bottom_up_difficulty(&f, head, (h, w), ctx)?,
                    };
                    if self.pda_in_generator {
                        f = apply_attention(&f, &out.attn.map)?;
                        out.enhanced = Some(f.clone());
                    }
                    pda.push((j, out));
                }
            }
            decoder_feats.push(f.clone());
            x = f;
        }
        let logits = self.head.forward(&x, ctx)?;
        Ok(GeneratorTrace {
            logits,
            decoder_feats,
            pda,
            attention,
        })
    }
}

/// Softmax cross-entropy of `(n, K, H, W)` logits against integer labels.
pub fn ce_loss(logits: &Tensor, gt: &LabelMap) -> Result<Tensor> {
    nll_from_probs(&channel_softmax(logits)?, gt.one_hot())
}

/// Per-pixel argmax labels, row-major `(n, H, W)`.
pub fn predict_labels(logits: &Tensor) -> Result<Vec<u8>> {
    let idx = logits.argmax(1)?.flatten_all()?.to_vec1::<u32>()?;
    Ok(idx.into_iter().map(|v| v as u8).collect())
}
