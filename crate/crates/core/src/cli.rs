//! Command-line entry points. Each subcommand is also callable as a library
//! function (`cmd_*`), which is what the integration tests use.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use candle_core::{Device, Tensor};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aml::AmlNet;
use crate::ata::ConnectionMode;
use crate::checkpoint::{self, CheckpointMeta};
use crate::config::RunConfig;
use crate::data::{ensure_dir, load_dataset, read_png_rgb, save_dataset, synth_generate, write_png, Dataset, SynthSpec};
use crate::generator::predict_labels;
use crate::metrics::{summarize, write_summary_csv, ClassSummary, ConfusionMatrix};
use crate::numerics::bilinear_resize;
use crate::pda::DifficultyMode;
use crate::trainer::{evaluate, fit, run_cross_validation, TrainEvent};

#[derive(Parser, Debug)]
#[command(name = "amlnet", version, about = "Adversarial mutual-leakage segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic cell dataset.
    Synth {
        /// TOML synthetic spec; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or cross-validate) and write checkpoint, metrics and logs.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key.path=value` override; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Score a checkpoint and write predicted masks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Must match the checkpoint's configuration digest; defaults to the
        /// configuration embedded in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root to score instead of the configured held-out split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per grid point and tabulate the results.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Export attention heatmaps for one image.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth mask; enables difficulty-map export.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Reference pixel as `row,col` in image coordinates; repeatable.
        #[arg(long = "ref", value_parser = parse_pixel)]
        refs: Vec<(usize, usize)>,
        #[arg(long, value_enum, default_value_t = HeatPalette::Gray)]
        palette: HeatPalette,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration.
    PrintConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeatPalette {
    Gray,
    Diverging,
}

fn parse_pixel(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected row,col")?;
    Ok((
        r.trim().parse().map_err(|e| format!("row: {e}"))?,
        c.trim().parse().map_err(|e| format!("col: {e}"))?,
    ))
}

pub fn run(args: impl IntoIterator<Item = std::ffi::OsString>) -> anyhow::Result<()> {
    let cli = Cli::parse_from(args);
    match cli.command {
        Command::Synth { spec, out } => {
            let spec = match spec {
                Some(p) => load_synth_spec(&p)?,
                None => SynthSpec::default(),
            };
            let n = cmd_synth(&spec, &out)?;
            println!("wrote {n} images to {}", out.display());
        }
        Command::Train { config, set } => {
            let cfg = load_config(config.as_deref(), &set)?;
            let s = cmd_train(&cfg)?;
            println!(
                "best epoch {} val mIoU {:.4}; outputs in {}",
                s.best_epoch,
                s.best_val_miou,
                s.out_dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            config,
            data,
            out,
        } => {
            let cfg = match config {
                Some(p) => Some(RunConfig::load(&p)?),
                None => None,
            };
            let miou = cmd_eval(&checkpoint, cfg.as_ref(), data.as_deref(), out.as_deref())?;
            println!("mIoU {miou:.4}");
        }
        Command::Ablate { config, sweep, set } => {
            let cfg = load_config(config.as_deref(), &set)?;
            let sweep = SweepSpec::load(&sweep)?;
            let rows = cmd_ablate(&cfg, &sweep)?;
            println!("{} grid points written to {}", rows.len(), cfg.resolved_output_dir().join(ABLATION_CSV).display());
        }
        Command::Visualize {
            checkpoint,
            image,
            mask,
            refs,
            palette,
            out,
        } => {
            let files = cmd_visualize(&checkpoint, &image, mask.as_deref(), &refs, palette, out.as_deref())?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::PrintConfig => print!("{}", RunConfig::default().to_toml()?),
    }
    Ok(())
}

fn load_config(path: Option<&Path>, set: &[String]) -> anyhow::Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(base.with_overrides(set)?)
}

pub fn load_synth_spec(path: &Path) -> anyhow::Result<SynthSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec: SynthSpec = toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {}", path.display(), e.message()))?;
    spec.validate()?;
    Ok(spec)
}

fn synth_digest(spec: &SynthSpec) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(spec).expect("spec serializes")))
}

pub fn cmd_synth(spec: &SynthSpec, out: &Path) -> anyhow::Result<usize> {
    let ds = synth_generate(spec)?;
    save_dataset(out, &ds, &crate::data::Palette::default(), Some(&synth_digest(spec)))?;
    Ok(ds.len())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_CSV: &str = "metrics.csv";
pub const LOSS_LOG: &str = "loss_log.csv";
pub const HISTORY_CSV: &str = "history.csv";
pub const CV_CSV: &str = "cv.csv";
pub const ABLATION_CSV: &str = "ablation.csv";

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub digest: String,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    /// Mean IoU on the test split (validation split when there is none).
    pub eval_miou: f64,
    pub metrics: Vec<ClassSummary>,
}

fn write_config(out: &Path, cfg: &RunConfig, digest: &str) -> anyhow::Result<()> {
    let mut f = create(&out.join("config.toml"))?;
    writeln!(f, "# config_digest {digest}")?;
    f.write_all(cfg.to_toml()?.as_bytes())?;
    Ok(())
}

/// Grayscale export of a `(1, 1, h, w)` map with values in `[0, 1]`.
fn write_map_png(path: &Path, map: &Tensor, digest: &str, palette: HeatPalette) -> anyhow::Result<()> {
    let (_, _, h, w) = map.dims4()?;
    let v = map.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    let (channels, data) = colorize(&v, palette);
    write_png(path, w, h, channels, &data, &[("config_digest", digest)])?;
    Ok(())
}

/// Linear gray, or a blue-white-red diverging ramp centred at 0.5.
pub fn colorize(values: &[f64], palette: HeatPalette) -> (usize, Vec<u8>) {
    let q = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    match palette {
        HeatPalette::Gray => (1, values.iter().map(|&v| q(v)).collect()),
        HeatPalette::Diverging => {
            let (lo, mid, hi) = ([59.0, 76.0, 192.0], [221.0, 221.0, 221.0], [180.0, 4.0, 38.0]);
            let mut out = Vec::with_capacity(values.len() * 3);
            for &v in values {
                let v = v.clamp(0.0, 1.0);
                let (a, b, t): (&[f64; 3], &[f64; 3], f64) =
                    if v < 0.5 { (&lo, &mid, v * 2.0) } else { (&mid, &hi, (v - 0.5) * 2.0) };
                for c in 0..3 {
                    out.push((a[c] + (b[c] - a[c]) * t).round() as u8);
                }
            }
            (3, out)
        }
    }
}

pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<TrainSummary> {
    cfg.validate()?;
    let digest = cfg.digest();
    let out = ensure_dir(&cfg.resolved_output_dir())?;
    write_config(&out, cfg, &digest)?;
    let ds = cfg.data.load(cfg.generator.num_classes)?;
    let splits = cfg.data.split(&ds)?;
    let spec = cfg.model_spec();

    if cfg.train.cross_validate {
        let test = (!splits.test.is_empty()).then_some(&splits.test);
        let table = run_cross_validation(&splits.pool(), test, &spec, &cfg.train, &mut |_| Ok(()))?;
        table.write_csv(create(&out.join(CV_CSV))?, &digest)?;
        let metrics = table.summary(&cfg.data.class_names);
        write_summary_csv(create(&out.join(METRICS_CSV))?, &metrics, &digest)?;
        let best = table
            .rows
            .iter()
            .max_by(|a, b| a.val_miou.total_cmp(&b.val_miou))
            .expect("at least one fold");
        return Ok(TrainSummary {
            out_dir: out,
            digest,
            best_epoch: best.best_epoch,
            best_val_miou: best.val_miou,
            eval_miou: table.miou_mean_std().0,
            metrics,
        });
    }

    let net = spec.build(cfg.train.seed)?;
    let mut log = create(&out.join(LOSS_LOG))?;
    writeln!(log, "# config_digest {digest}")?;
    writeln!(log, "step,l_ce,l_pda1,l_pda2,l_pda3,l_adv_g,l_disc,total")?;
    let mut history = create(&out.join(HISTORY_CSV))?;
    writeln!(history, "# config_digest {digest}")?;
    writeln!(history, "epoch,total,l_ce,l_adv_g,l_disc,val_miou")?;
    let maps_dir = out.join("pda_maps");
    let probe = splits.val.batch(&[0], net.dtype())?;
    let mut on_event = |ev: TrainEvent<'_>| -> crate::Result<()> {
        let io = |e: std::io::Error| crate::Error::io(&out, e);
        match ev {
            TrainEvent::Step { step, losses: l } => writeln!(
                log,
                "{step},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}",
                l.l_ce, l.l_pda1, l.l_pda2, l.l_pda3, l.l_adv_g, l.l_disc, l.total
            )
            .map_err(io)?,
            TrainEvent::Epoch { record: r, net } => {
                writeln!(
                    history,
                    "{},{:.8},{:.8},{:.8},{:.8},{:.6}",
                    r.epoch, r.losses.total, r.losses.l_ce, r.losses.l_adv_g, r.losses.l_disc, r.val_miou
                )
                .map_err(io)?;
                let maps = net.difficulty_maps(&probe)?;
                if !maps.is_empty() {
                    ensure_dir(&maps_dir)?;
                }
                for (stage, m) in maps {
                    let p = maps_dir.join(format!("epoch_{:03}_stage{stage}.png", r.epoch));
                    write_map_png(&p, &m.map, &digest, HeatPalette::Gray)
                        .map_err(|e| crate::Error::Image { path: p.clone(), message: e.to_string() })?;
                }
            }
        }
        Ok(())
    };
    let outcome = fit(&net, &splits.train, &splits.val, &cfg.train, cfg.train.seed, &mut on_event)?;
    log.flush()?;
    history.flush()?;

    checkpoint::save(
        &out.join(CHECKPOINT_FILE),
        &net,
        &CheckpointMeta {
            config_digest: digest.clone(),
            config_toml: cfg.to_toml()?,
            epoch: outcome.report.best_epoch,
            best_val_miou: outcome.report.best_val_miou,
        },
        Some(&outcome.gen_optim),
        outcome.disc_optim.as_ref(),
    )?;
    let eval_set = if splits.test.is_empty() { &splits.val } else { &splits.test };
    let cm = evaluate(&net, eval_set, cfg.train.batch_size)?;
    let metrics = summarize(std::slice::from_ref(&cm), &cfg.data.class_names);
    write_summary_csv(create(&out.join(METRICS_CSV))?, &metrics, &digest)?;
    Ok(TrainSummary {
        out_dir: out,
        digest,
        best_epoch: outcome.report.best_epoch,
        best_val_miou: outcome.report.best_val_miou,
        eval_miou: cm.mean_iou(),
        metrics,
    })
}

/// Loads a checkpoint into a freshly built network. With `cfg` given, its
/// digest must match the one recorded in the checkpoint.
pub fn load_model(ckpt_path: &Path, cfg: Option<&RunConfig>) -> anyhow::Result<(RunConfig, AmlNet)> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let cfg = match cfg {
        Some(c) => {
            let d = c.digest();
            if d != ckpt.manifest.config_digest {
                bail!(
                    "configuration digest {d} does not match checkpoint digest {}; \
                     the checkpoint was trained with a different configuration",
                    ckpt.manifest.config_digest
                );
            }
            c.clone()
        }
        None => RunConfig::from_toml_str(&ckpt.manifest.config_toml)?,
    };
    let net = cfg.model_spec().build(cfg.train.seed)?;
    ckpt.restore_net(&net)?;
    Ok((cfg, net))
}

pub fn cmd_eval(ckpt_path: &Path, cfg: Option<&RunConfig>, data: Option<&Path>, out: Option<&Path>) -> anyhow::Result<f64> {
    let (cfg, net) = load_model(ckpt_path, cfg)?;
    let digest = cfg.digest();
    let ds: Dataset = match data {
        Some(root) => {
            let mut dc = cfg.data.clone();
            dc.source = crate::config::DataSource::Dir;
            dc.root = Some(root.to_path_buf());
            dc.load(cfg.generator.num_classes)?
        }
        None => {
            let s = cfg.data.split(&cfg.data.load(cfg.generator.num_classes)?)?;
            if s.test.is_empty() {
                s.val
            } else {
                s.test
            }
        }
    };
    let out = ensure_dir(&out.map(Path::to_path_buf).unwrap_or_else(|| cfg.resolved_output_dir().join("eval")))?;
    let mut cm = ConfusionMatrix::new(ds.num_classes);
    let pred_dir = ensure_dir(&out.join("predictions"))?;
    for (i, s) in ds.samples.iter().enumerate() {
        let batch = ds.batch(&[i], net.dtype())?;
        let pred = predict_labels(&net.predict(&batch.images)?)?;
        cm.accumulate(&pred, &s.mask)?;
        let mut rgb = Vec::with_capacity(pred.len() * 3);
        for &l in &pred {
            rgb.extend_from_slice(&cfg.data.palette.color_of(l).unwrap_or([255, 0, 255]));
        }
        write_png(
            &pred_dir.join(format!("{}.png", s.stem)),
            s.width,
            s.height,
            3,
            &rgb,
            &[("config_digest", &digest)],
        )?;
    }
    let metrics = summarize(std::slice::from_ref(&cm), &cfg.data.class_names);
    write_summary_csv(create(&out.join(METRICS_CSV))?, &metrics, &digest)?;
    Ok(cm.mean_iou())
}

/// Grid for `ablate`. Each list is one axis, varied on its own with every
/// other setting taken from the base configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub connections: Vec<ConnectionMode>,
    pub lambdas: Vec<f64>,
    pub difficulties: Vec<DifficultyMode>,
}

impl SweepSpec {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {}", path.display(), e.message()))
    }

    /// `(axis, value label, configuration)` per grid point, in file order.
    pub fn grid(&self, base: &RunConfig) -> Vec<(&'static str, String, RunConfig)> {
        let mut out = Vec::new();
        for &c in &self.connections {
            let mut cfg = base.clone();
            cfg.aml.connection = c;
            out.push(("connection", c.name().to_string(), cfg));
        }
        for &l in &self.lambdas {
            let mut cfg = base.clone();
            cfg.aml.lambda_adv = l;
            out.push(("lambda_adv", format!("{l}"), cfg));
        }
        for &d in &self.difficulties {
            let mut cfg = base.clone();
            cfg.aml.difficulty = d;
            let label = match d {
                DifficultyMode::TopDown => "top_down",
                DifficultyMode::BottomUp => "bottom_up",
            };
            out.push(("difficulty", label.to_string(), cfg));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: &'static str,
    pub value: String,
    pub digest: String,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub class_iou: Vec<f64>,
}

pub fn cmd_ablate(base: &RunConfig, sweep: &SweepSpec) -> anyhow::Result<Vec<AblationRow>> {
    base.validate()?;
    let grid = sweep.grid(base);
    if grid.is_empty() {
        bail!("sweep file names no grid points");
    }
    let out = ensure_dir(&base.resolved_output_dir())?;
    let ds = base.data.load(base.generator.num_classes)?;
    let splits = base.data.split(&ds)?;
    let mut rows = Vec::with_capacity(grid.len());
    for (axis, value, cfg) in grid {
        cfg.validate()?;
        let spec = cfg.model_spec();
        let runs: Vec<ConfusionMatrix> = if cfg.train.cross_validate {
            let test = (!splits.test.is_empty()).then_some(&splits.test);
            run_cross_validation(&splits.pool(), test, &spec, &cfg.train, &mut |_| Ok(()))?
                .rows
                .into_iter()
                .map(|r| r.eval)
                .collect()
        } else {
            let net = spec.build(cfg.train.seed)?;
            fit(&net, &splits.train, &splits.val, &cfg.train, cfg.train.seed, &mut |_| Ok(()))?;
            let eval_set = if splits.test.is_empty() { &splits.val } else { &splits.test };
            vec![evaluate(&net, eval_set, cfg.train.batch_size)?]
        };
        let summary = summarize(&runs, &cfg.data.class_names);
        let m = summary.last().expect("summary has a miou row");
        log::info!("{axis}={value}: mIoU {:.4}", m.iou_mean);
        rows.push(AblationRow {
            axis,
            value,
            digest: cfg.digest(),
            miou_mean: m.iou_mean,
            miou_std: m.iou_std,
            class_iou: summary[..summary.len() - 1].iter().map(|r| r.iou_mean).collect(),
        });
    }
    let mut f = create(&out.join(ABLATION_CSV))?;
    writeln!(f, "# config_digest {}", base.digest())?;
    let class_cols: Vec<String> = base.data.class_names.iter().map(|c| format!("iou_{c}")).collect();
    writeln!(f, "axis,value,config_digest,miou_mean,miou_std,{}", class_cols.join(","))?;
    for r in &rows {
        let cls: Vec<String> = r.class_iou.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(
            f,
            "{},{},{},{:.6},{:.6},{}",
            r.axis,
            r.value,
            r.digest,
            r.miou_mean,
            r.miou_std,
            cls.join(",")
        )?;
    }
    f.flush()?;
    Ok(rows)
}

/// One ATA attention row reshaped onto its site grid and divided by its
/// maximum, so values lie in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub site: usize,
    pub reference: (usize, usize),
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Attention heatmaps for each `(site, reference pixel)` pair of a
/// `(1, 3, H, W)` image.
pub fn attention_heatmaps(net: &AmlNet, image: &Tensor, refs: &[(usize, usize)]) -> anyhow::Result<Vec<Heatmap>> {
    let (_, _, h, w) = image.dims4()?;
    let mut out = Vec::new();
    for (site, attn) in net.probe_attention(image)? {
        let (sh, sw) = (h >> site, w >> site);
        let attn = attn.get(0)?.to_dtype(candle_core::DType::F64)?;
        for &(r, c) in refs {
            if r >= h || c >= w {
                bail!("reference pixel ({r}, {c}) lies outside the {h}x{w} image");
            }
            let idx = (r * sh / h) * sw + c * sw / w;
            let row = attn.get(idx)?.to_vec1::<f64>()?;
            let max = row.iter().cloned().fold(0.0, f64::max);
            let values = row.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect();
            out.push(Heatmap {
                site,
                reference: (r, c),
                height: sh,
                width: sw,
                values,
            });
        }
    }
    Ok(out)
}

fn image_tensor(path: &Path, cfg: &RunConfig, dtype: candle_core::DType) -> anyhow::Result<Tensor> {
    let img = read_png_rgb(path)?;
    let (h, w) = (img.height, img.width);
    let mut chw = vec![0f32; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            chw[c * h * w + p] = img.data[p * 3 + c] as f32 / 255.0;
        }
    }
    let mut t = Tensor::from_vec(chw, (1, 3, h, w), &Device::Cpu)?;
    if let Some([rh, rw]) = cfg.data.resize {
        t = bilinear_resize(&t, rh, rw)?;
    }
    Ok(t.to_dtype(dtype)?)
}

pub fn cmd_visualize(
    ckpt_path: &Path,
    image: &Path,
    mask: Option<&Path>,
    refs: &[(usize, usize)],
    palette: HeatPalette,
    out: Option<&Path>,
) -> anyhow::Result<Vec<PathBuf>> {
    let (cfg, net) = load_model(ckpt_path, None)?;
    if !net.generator().has_ata() && mask.is_none() {
        bail!("mode `{}` has no attention sites; pass --mask to export difficulty maps", cfg.aml.mode.name());
    }
    let digest = cfg.digest();
    let out = ensure_dir(&out.map(Path::to_path_buf).unwrap_or_else(|| cfg.resolved_output_dir().join("visualize")))?;
    let img = image_tensor(image, &cfg, net.dtype())?;
    let (_, _, h, w) = img.dims4()?;
    let refs = if refs.is_empty() { vec![(h / 2, w / 2)] } else { refs.to_vec() };
    let mut files = Vec::new();
    for hm in attention_heatmaps(&net, &img, &refs)? {
        let (channels, data) = colorize(&hm.values, palette);
        let p = out.join(format!("ata_site{}_r{}_c{}.png", hm.site, hm.reference.0, hm.reference.1));
        write_png(&p, hm.width, hm.height, channels, &data, &[("config_digest", &digest)])?;
        files.push(p);
    }
    if let Some(mask_path) = mask {
        // Pair the mask with the image through the regular loader.
        let tmp = tempdir_pair(image, mask_path)?;
        let mut ds = load_dataset(tmp.path(), &cfg.data.palette, cfg.generator.num_classes)?;
        if let Some([rh, rw]) = cfg.data.resize {
            ds = crate::data::resize_dataset(&ds, rh, rw)?;
        }
        let batch = ds.batch(&[0], net.dtype())?;
        for (stage, m) in net.difficulty_maps(&batch)? {
            let p = out.join(format!("pda_stage{stage}.png"));
            write_map_png(&p, &m.map, &digest, palette)?;
            files.push(p);
        }
    }
    Ok(files)
}

fn tempdir_pair(image: &Path, mask: &Path) -> anyhow::Result<TempPair> {
    let root = std::env::temp_dir().join(format!("amlnet-vis-{}", std::process::id()));
    for sub in ["images", "masks"] {
        fs::create_dir_all(root.join(sub))?;
    }
    fs::copy(image, root.join("images/x.png"))?;
    fs::copy(mask, root.join("masks/x.png"))?;
    Ok(TempPair(root))
}

struct TempPair(PathBuf);

impl TempPair {
    fn path(&self) -> &Path {
        &self.0
    }
}

impl Drop for TempPair {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}
