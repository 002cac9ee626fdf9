//! Two-pass mutual-leakage training step and its losses.
//!
//! Generator update:
//! 1. first pass of G (plain U-Net);
//! 2. D on `(image, softmax(first logits))`, parameters frozen, to obtain
//!    feature taps;
//! 3. second pass of G with the taps injected at the encoder sites and
//!    difficulty heads active;
//! 4. D, frozen, on `(image, softmax(second logits))` with the difficulty
//!    maps leaked into it;
//! 5. `total = l_ce + l_pda1 + l_pda2 + l_pda3 + lambda_adv * l_adv_g`.
//!
//! Discriminator update: ground truth against detached second-pass output,
//! both with the detached difficulty maps. G is frozen throughout.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::ata::ConnectionMode;
use crate::data::SegBatch;
use crate::discriminator::{DiscConfig, DiscTrace, Discriminator};
use crate::error::{Error, Result};
use crate::generator::{ce_loss, Generator, GeneratorConfig, GeneratorTrace, LeakageLayout, Pass};
use crate::numerics::channel_softmax;
use crate::numerics::nn::{bce_with_logits, scalar_value, softplus, Ctx};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::pda::{pda_aux_loss, AttnMap, DifficultyMode};

/// Seed offset separating discriminator initialization from the generator's.
const DISC_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmlMode {
    /// Both leakage directions.
    Aml,
    /// Discriminator features into the generator only.
    AtaOnly,
    /// Difficulty maps only.
    PdaOnly,
    /// U-Net with cross-entropy; no discriminator.
    BaselineUnet,
    /// Conditional GAN without leakage.
    Pix2pix,
}

impl AmlMode {
    pub fn uses_ata(self) -> bool {
        matches!(self, AmlMode::Aml | AmlMode::AtaOnly)
    }

    pub fn uses_pda(self) -> bool {
        matches!(self, AmlMode::Aml | AmlMode::PdaOnly)
    }

    pub fn uses_discriminator(self) -> bool {
        self != AmlMode::BaselineUnet
    }

    pub fn name(self) -> &'static str {
        match self {
            AmlMode::Aml => "aml",
            AmlMode::AtaOnly => "ata_only",
            AmlMode::PdaOnly => "pda_only",
            AmlMode::BaselineUnet => "baseline_unet",
            AmlMode::Pix2pix => "pix2pix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmlConfig {
    pub lambda_adv: f64,
    pub mode: AmlMode,
    /// How discriminator features enter the generator.
    pub connection: ConnectionMode,
    pub difficulty: DifficultyMode,
    /// Reweight decoder features with the difficulty map.
    pub pda_in_generator: bool,
    /// Leak the difficulty maps into the discriminator.
    pub pda_to_discriminator: bool,
    /// Minimize `log(1 - D)` instead of the non-saturating `-log D`.
    pub literal_adv_loss: bool,
}

impl Default for AmlConfig {
    fn default() -> Self {
        Self {
            lambda_adv: 0.01,
            mode: AmlMode::Aml,
            connection: ConnectionMode::Ata,
            difficulty: DifficultyMode::TopDown,
            pda_in_generator: true,
            pda_to_discriminator: true,
            literal_adv_loss: false,
        }
    }
}

impl AmlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::Config(format!("aml.lambda_adv must be finite and >= 0, got {}", self.lambda_adv)));
        }
        Ok(())
    }
}

/// Scalar loss values of one step. `total` is read back from the graph;
/// the others are the individual terms it was built from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBundle {
    pub l_ce: f64,
    pub l_pda1: f64,
    pub l_pda2: f64,
    pub l_pda3: f64,
    pub l_adv_g: f64,
    pub total: f64,
    pub l_disc: f64,
}

impl LossBundle {
    pub fn pda(&self) -> [f64; 3] {
        [self.l_pda1, self.l_pda2, self.l_pda3]
    }
}

/// Graph handles for the generator objective.
pub struct GenObjective {
    pub total: Tensor,
    /// `[l_ce, l_pda1, l_pda2, l_pda3, l_adv_g]` as graph scalars.
    pub terms: [Tensor; 5],
    pub losses: LossBundle,
    pub trace: GeneratorTrace,
    pub first_pass: Option<GeneratorTrace>,
}

/// Graph handles for the discriminator objective.
pub struct DiscObjective {
    pub l_disc: Tensor,
    pub real: DiscTrace,
    pub fake: DiscTrace,
}

/// Generator-side adversarial term from the discriminator's patch logits on
/// generated pairs. Default: mean BCE toward "real". Literal: mean of
/// `log(1 - sigmoid(z)) = -softplus(z)`.
pub fn adversarial_g_loss(patch_logits: &Tensor, literal: bool) -> Result<Tensor> {
    if literal {
        Ok(softplus(patch_logits)?.neg()?.mean_all()?)
    } else {
        bce_with_logits(patch_logits, 1.0)
    }
}

/// Discriminator loss from logits on real and generated pairs.
pub fn discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    Ok(bce_with_logits(real_logits, 1.0)?.add(&bce_with_logits(fake_logits, 0.0)?)?)
}

/// Generator, discriminator and their parameter stores for one run.
pub struct AmlNet {
    cfg: AmlConfig,
    generator: Generator,
    discriminator: Option<Discriminator>,
    gen_store: ParamStore,
    disc_store: ParamStore,
}

impl AmlNet {
    pub fn new(cfg: &AmlConfig, gen_cfg: &GeneratorConfig, disc_cfg: &DiscConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        gen_cfg.validate()?;
        let gen_store = ParamStore::new(dtype, seed);
        let disc_store = ParamStore::new(dtype, seed ^ DISC_SEED_SALT);
        let discriminator = if cfg.mode.uses_discriminator() {
            Some(Discriminator::new(
                &disc_store.root().pp("d"),
                disc_cfg,
                gen_cfg.image_channels,
                gen_cfg.num_classes,
                gen_cfg.base_channels,
            )?)
        } else {
            None
        };
        let mut layout = LeakageLayout::none();
        if cfg.mode.uses_ata() && cfg.connection != ConnectionMode::None {
            let taps = discriminator.as_ref().expect("ATA modes have a discriminator").tap_channels();
            for &site in &gen_cfg.ata_sites {
                let c = *taps.get(&site).ok_or_else(|| {
                    Error::Config(format!(
                        "ATA site {site} needs discriminator tap {site}; taps are {:?}",
                        taps.keys().collect::<Vec<_>>()
                    ))
                })?;
                layout.disc_channels.insert(site, c);
            }
            layout.connection = Some(cfg.connection);
        }
        if cfg.mode.uses_pda() {
            layout.difficulty = Some(cfg.difficulty);
            layout.pda_in_generator = cfg.pda_in_generator;
        }
        let generator = Generator::new(&gen_store.root().pp("g"), gen_cfg, &layout)?;
        Ok(Self {
            cfg: cfg.clone(),
            generator,
            discriminator,
            gen_store,
            disc_store,
        })
    }

    pub fn config(&self) -> &AmlConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> Option<&Discriminator> {
        self.discriminator.as_ref()
    }

    pub fn gen_store(&self) -> &ParamStore {
        &self.gen_store
    }

    pub fn disc_store(&self) -> &ParamStore {
        &self.disc_store
    }

    pub fn dtype(&self) -> DType {
        self.gen_store.dtype()
    }

    pub fn gen_optimizer(&self, cfg: crate::optim::AdamConfig) -> Result<Adam> {
        Adam::new(self.gen_store.trainable(), cfg)
    }

    pub fn disc_optimizer(&self, cfg: crate::optim::AdamConfig) -> Result<Adam> {
        Adam::new(self.disc_store.trainable(), cfg)
    }

    fn disc(&self) -> Result<&Discriminator> {
        self.discriminator
            .as_ref()
            .ok_or_else(|| Error::Config(format!("mode `{}` has no discriminator", self.cfg.mode.name())))
    }

    /// Discriminator taps at the generator's ATA sites, in site order.
    fn ata_inputs(&self, trace: &DiscTrace) -> Result<Vec<Tensor>> {
        let taps: Vec<usize> = self.disc()?.tap_channels().keys().copied().collect();
        self.generator
            .ata_sites()
            .iter()
            .map(|site| {
                let i = taps.iter().position(|t| t == site).expect("checked at construction");
                Ok(trace.taps[i].clone())
            })
            .collect()
    }

    /// Generator forward used by both updates. With ATA: first pass, frozen
    /// D, second pass. Without: a single pass (second-pass semantics when
    /// difficulty heads exist so they see ground truth).
    fn generator_passes(&self, batch: &SegBatch, ctx: Ctx) -> Result<(GeneratorTrace, Option<GeneratorTrace>)> {
        let img = &batch.images;
        let gt = Some(&batch.labels);
        if self.generator.has_ata() {
            let first = self.generator.forward(img, Pass::First, None, None, ctx, false)?;
            let d_ctx = Ctx { train: ctx.train, frozen: true };
            let d1 = self.disc()?.forward(img, &channel_softmax(&first.logits)?, None, d_ctx)?;
            let inputs = self.ata_inputs(&d1)?;
            let second = self.generator.forward(img, Pass::Second, Some(&inputs), gt, ctx, false)?;
            Ok((second, Some(first)))
        } else if self.generator.has_pda() {
            Ok((self.generator.forward(img, Pass::Second, None, gt, ctx, false)?, None))
        } else {
            Ok((self.generator.forward(img, Pass::First, None, None, ctx, false)?, None))
        }
    }

    fn leaked_maps(&self, trace: &GeneratorTrace) -> Option<Vec<AttnMap>> {
        (self.cfg.pda_to_discriminator && !trace.pda.is_empty()).then(|| trace.attn_maps())
    }

    /// Builds the generator loss graph without updating anything but
    /// batch-norm running statistics.
    pub fn generator_objective(&self, batch: &SegBatch) -> Result<GenObjective> {
        let (trace, first_pass) = self.generator_passes(batch, Ctx::TRAIN)?;
        let gt = &batch.labels;
        let zero = Tensor::zeros((), self.dtype(), &candle_core::Device::Cpu)?;
        let l_ce = ce_loss(&trace.logits, gt)?;
        let mut pda = [zero.clone(), zero.clone(), zero.clone()];
        for (slot, (_, out)) in pda.iter_mut().zip(&trace.pda) {
            *slot = pda_aux_loss(&out.probs_full, gt)?;
        }
        let l_adv = match &self.discriminator {
            Some(d) => {
                let leaked = self.leaked_maps(&trace);
                let d2 = d.forward(
                    &batch.images,
                    &channel_softmax(&trace.logits)?,
                    leaked.as_deref(),
                    Ctx::TRAIN.frozen(),
                )?;
                adversarial_g_loss(&d2.patch_logits, self.cfg.literal_adv_loss)?
            }
            None => zero.clone(),
        };
        let [p1, p2, p3] = pda;
        let total = l_ce
            .add(&p1)?
            .add(&p2)?
            .add(&p3)?
            .add(&l_adv.affine(self.cfg.lambda_adv, 0.0)?)?;
        let losses = LossBundle {
            l_ce: scalar_value(&l_ce)?,
            l_pda1: scalar_value(&p1)?,
            l_pda2: scalar_value(&p2)?,
            l_pda3: scalar_value(&p3)?,
            l_adv_g: scalar_value(&l_adv)?,
            total: scalar_value(&total)?,
            l_disc: 0.0,
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFinite {
                index: vec![],
                value: losses.total,
            });
        }
        Ok(GenObjective {
            total,
            terms: [l_ce, p1, p2, p3, l_adv],
            losses,
            trace,
            first_pass,
        })
    }

    /// One Adam step on generator (and leakage module) parameters.
    pub fn generator_step(&self, batch: &SegBatch, opt: &mut Adam) -> Result<(LossBundle, GeneratorTrace)> {
        let obj = self.generator_objective(batch)?;
        let grads = obj.total.backward()?;
        opt.step(&grads)?;
        Ok((obj.losses, obj.trace))
    }

    /// Builds the discriminator loss graph. The generator runs frozen, so
    /// its parameters and statistics are untouched.
    pub fn discriminator_objective(&self, batch: &SegBatch) -> Result<DiscObjective> {
        let d = self.disc()?;
        let (trace, _) = self.generator_passes(batch, Ctx::TRAIN.frozen())?;
        let leaked: Option<Vec<AttnMap>> = self
            .leaked_maps(&trace)
            .map(|ms| ms.iter().map(AttnMap::detach).collect());
        let real = d.forward(&batch.images, batch.labels.one_hot(), leaked.as_deref(), Ctx::TRAIN)?;
        let fake_seg = channel_softmax(&trace.logits)?.detach();
        let fake = d.forward(&batch.images, &fake_seg, leaked.as_deref(), Ctx::TRAIN)?;
        let l_disc = discriminator_loss(&real.patch_logits, &fake.patch_logits)?;
        Ok(DiscObjective { l_disc, real, fake })
    }

    pub fn discriminator_step(&self, batch: &SegBatch, opt: &mut Adam) -> Result<f64> {
        let obj = self.discriminator_objective(batch)?;
        let value = scalar_value(&obj.l_disc)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { index: vec![], value });
        }
        opt.step(&obj.l_disc.backward()?)?;
        Ok(value)
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&self, batch: &SegBatch, opt_g: &mut Adam, opt_d: Option<&mut Adam>) -> Result<LossBundle> {
        let l_disc = match (opt_d, self.discriminator.is_some()) {
            (Some(opt), true) => self.discriminator_step(batch, opt)?,
            (None, true) => return Err(Error::MissingInput("discriminator optimizer")),
            _ => 0.0,
        };
        let (mut losses, _) = self.generator_step(batch, opt_g)?;
        losses.l_disc = l_disc;
        Ok(losses)
    }

    /// Inference logits: plain U-Net pass, running batch-norm statistics.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self
            .generator
            .forward(images, Pass::Inference, None, None, Ctx::EVAL.frozen(), false)?
            .logits)
    }

    /// Difficulty maps of the second pass in evaluation mode, keyed by
    /// decoder stage. Empty without difficulty heads.
    pub fn difficulty_maps(&self, batch: &SegBatch) -> Result<Vec<(usize, AttnMap)>> {
        let (trace, _) = self.generator_passes(batch, Ctx::EVAL.frozen())?;
        Ok(trace.pda.into_iter().map(|(s, o)| (s, o.attn)).collect())
    }

    /// Attention matrices `(n, HW, HW)` per ATA site, computed from the
    /// discriminator's view of the generator's own inference output.
    pub fn probe_attention(&self, images: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        if !self.generator.has_ata() {
            return Ok(Vec::new());
        }
        let ctx = Ctx::EVAL.frozen();
        let first = self.generator.forward(images, Pass::Inference, None, None, ctx, false)?;
        let d1 = self.disc()?.forward(images, &channel_softmax(&first.logits)?, None, ctx)?;
        let inputs = self.ata_inputs(&d1)?;
        Ok(self
            .generator
            .forward(images, Pass::Probe, Some(&inputs), None, ctx, true)?
            .attention)
    }
}
