//! Optimization loop, validation-based model selection and k-fold
//! cross-validation.

use std::collections::BTreeMap;
use std::io::Write;

use candle_core::DType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aml::{AmlConfig, AmlNet, LossBundle};
use crate::data::Dataset;
use crate::discriminator::DiscConfig;
use crate::error::{Error, Result};
use crate::generator::{predict_labels, GeneratorConfig};
use crate::metrics::{mean_std, summarize, ClassSummary, ConfusionMatrix};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::params::Snapshot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    /// `train` runs the full folds x repeats protocol instead of one fit.
    pub cross_validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            epochs: 30,
            batch_size: 8,
            folds: 5,
            repeats: 3,
            seed: 0,
            cross_validate: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.folds < 2 {
            return Err(Error::Config(format!("train.folds must be >= 2, got {}", self.folds)));
        }
        if self.repeats == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.repeats, train.epochs and train.batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to instantiate a fresh network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub aml: AmlConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscConfig,
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<AmlNet> {
        AmlNet::new(&self.aml, &self.generator, &self.discriminator, DType::F32, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Batch means of each loss term.
    pub losses: LossBundle,
    pub val_miou: f64,
}

pub enum TrainEvent<'a> {
    Step {
        step: u64,
        losses: &'a LossBundle,
    },
    Epoch {
        record: &'a EpochRecord,
        net: &'a AmlNet,
    },
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_miou: f64,
}

/// Optimizer state worth checkpointing.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimState {
    fn of(opt: &Adam) -> Self {
        Self {
            step: opt.step_count(),
            moments: opt.moments().clone(),
        }
    }
}

pub struct FitOutcome {
    pub report: FitReport,
    pub gen_optim: OptimState,
    pub disc_optim: Option<OptimState>,
}

/// Index of the highest value; ties go to the earliest.
pub fn select_best(mious: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &m) in mious.iter().enumerate() {
        if best.is_none_or(|b| m > mious[b]) {
            best = Some(i);
        }
    }
    best
}

/// Deterministic per-epoch sample order.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Confusion matrix of inference predictions over a dataset.
pub fn evaluate(net: &AmlNet, ds: &Dataset, batch_size: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(ds.num_classes);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = ds.batch(chunk, net.dtype())?;
        let pred = predict_labels(&net.predict(&batch.images)?)?;
        cm.accumulate(&pred, batch.labels.labels())?;
    }
    Ok(cm)
}

fn mean_losses(xs: &[LossBundle]) -> LossBundle {
    let n = xs.len().max(1) as f64;
    let sum = |f: fn(&LossBundle) -> f64| xs.iter().map(f).sum::<f64>() / n;
    LossBundle {
        l_ce: sum(|l| l.l_ce),
        l_pda1: sum(|l| l.l_pda1),
        l_pda2: sum(|l| l.l_pda2),
        l_pda3: sum(|l| l.l_pda3),
        l_adv_g: sum(|l| l.l_adv_g),
        total: sum(|l| l.total),
        l_disc: sum(|l| l.l_disc),
    }
}

/// Trains for `cfg.epochs`, validating after each epoch. On return the
/// network holds the parameters of the best validation epoch.
pub fn fit(
    net: &AmlNet,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut opt_g = net.gen_optimizer(cfg.adam())?;
    let mut opt_d = match net.discriminator() {
        Some(_) => Some(net.disc_optimizer(cfg.adam())?),
        None => None,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Snapshot, Snapshot, OptimState, Option<OptimState>)> = None;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train.len(), seed, epoch);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.batch(chunk, net.dtype())?;
            let l = net.train_step(&batch, &mut opt_g, opt_d.as_mut())?;
            step += 1;
            on_event(TrainEvent::Step { step, losses: &l })?;
            losses.push(l);
        }
        let val_miou = evaluate(net, val, cfg.batch_size)?.mean_iou();
        let record = EpochRecord {
            epoch,
            losses: mean_losses(&losses),
            val_miou,
        };
        on_event(TrainEvent::Epoch { record: &record, net })?;
        log::info!(
            "epoch {epoch}: total {:.4} ce {:.4} disc {:.4} val mIoU {:.4}",
            record.losses.total,
            record.losses.l_ce,
            record.losses.l_disc,
            val_miou
        );
        if best.as_ref().is_none_or(|b| val_miou > b.1) {
            best = Some((
                epoch,
                val_miou,
                net.gen_store().snapshot()?,
                net.disc_store().snapshot()?,
                OptimState::of(&opt_g),
                opt_d.as_ref().map(OptimState::of),
            ));
        }
        history.push(record);
    }
    let (best_epoch, best_val_miou, gen_snap, disc_snap, gen_optim, disc_optim) =
        best.expect("at least one epoch ran");
    net.gen_store().restore(&gen_snap)?;
    net.disc_store().restore(&disc_snap)?;
    Ok(FitOutcome {
        report: FitReport {
            history,
            best_epoch,
            best_val_miou,
        },
        gen_optim,
        disc_optim,
    })
}

/// Disjoint, exhaustive folds of `0..n` drawn from `seed`; sizes differ by at
/// most one. Each fold is sorted.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    if n < folds {
        return Err(Error::Data(format!("{n} items cannot fill {folds} folds without an empty fold")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut out = vec![Vec::new(); folds];
    for (i, item) in perm.into_iter().enumerate() {
        out[i % folds].push(item);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// Initialization seed of a repeat; folds stay fixed across repeats.
pub fn repeat_seed(seed: u64, repeat: usize) -> u64 {
    seed.wrapping_add((repeat as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[derive(Debug, Clone)]
pub struct CvRow {
    pub repeat: usize,
    pub fold: usize,
    pub best_epoch: usize,
    pub val_miou: f64,
    /// Confusion matrix of the selected model on the test set (or on the
    /// fold's validation split when there is no test set).
    pub eval: ConfusionMatrix,
}

#[derive(Debug, Clone)]
pub struct CvTable {
    pub rows: Vec<CvRow>,
}

impl CvTable {
    pub fn summary(&self, class_names: &[String]) -> Vec<ClassSummary> {
        let cms: Vec<ConfusionMatrix> = self.rows.iter().map(|r| r.eval.clone()).collect();
        summarize(&cms, class_names)
    }

    pub fn miou_mean_std(&self) -> (f64, f64) {
        let xs: Vec<f64> = self.rows.iter().map(|r| r.eval.mean_iou()).collect();
        mean_std(&xs)
    }

    pub fn write_csv(&self, mut out: impl Write, digest: &str) -> Result<()> {
        let io = |e: std::io::Error| Error::Data(e.to_string());
        writeln!(out, "# config_digest {digest}").map_err(io)?;
        writeln!(out, "repeat,fold,best_epoch,val_miou,eval_miou").map_err(io)?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6}",
                r.repeat,
                r.fold,
                r.best_epoch,
                r.val_miou,
                r.eval.mean_iou()
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

/// `folds x repeats` fits over `pool`; each row is scored on `test` when
/// given. Fold membership is drawn once from `cfg.seed`; repeats reseed only
/// the network initialization and batch order.
pub fn run_cross_validation(
    pool: &Dataset,
    test: Option<&Dataset>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    on_row: &mut dyn FnMut(&CvRow) -> Result<()>,
) -> Result<CvTable> {
    cfg.validate()?;
    let folds = fold_assignment(pool.len(), cfg.folds, cfg.seed)?;
    let mut rows = Vec::with_capacity(cfg.folds * cfg.repeats);
    for repeat in 0..cfg.repeats {
        let seed = repeat_seed(cfg.seed, repeat);
        for (fold, val_idx) in folds.iter().enumerate() {
            let train_idx: Vec<usize> = (0..pool.len()).filter(|i| val_idx.binary_search(i).is_err()).collect();
            let (train, val) = (pool.subset(&train_idx), pool.subset(val_idx));
            let net = spec.build(seed)?;
            let outcome = fit(&net, &train, &val, cfg, seed, &mut |_| Ok(()))?;
            let eval = evaluate(&net, test.filter(|t| !t.is_empty()).unwrap_or(&val), cfg.batch_size)?;
            let row = CvRow {
                repeat,
                fold,
                best_epoch: outcome.report.best_epoch,
                val_miou: outcome.report.best_val_miou,
                eval,
            };
            log::info!(
                "repeat {repeat} fold {fold}: best epoch {} val mIoU {:.4}",
                row.best_epoch,
                row.val_miou
            );
            on_row(&row)?;
            rows.push(row);
        }
    }
    Ok(CvTable { rows })
}
