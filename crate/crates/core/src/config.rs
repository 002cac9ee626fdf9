//! Run configuration: one TOML document with `[train]`, `[aml]`,
//! `[generator]`, `[discriminator]` and `[data]` tables.
//!
//! Every key has a default (see `amlnet print-config`). Unknown keys are
//! rejected by name. The digest covers everything except `output_dir`, so
//! moving outputs does not invalidate checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aml::AmlConfig;
use crate::data::{load_dataset, resize_dataset, synth_generate, tile_dataset, Dataset, Palette, SynthSpec};
use crate::discriminator::DiscConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::trainer::{ModelSpec, TrainConfig};

/// Overrides the parent directory of relative `output_dir` paths.
pub const OUTPUT_ROOT_ENV: &str = "AML_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    Dir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset root for `source = "dir"` (`images/`, `masks/`, optional
    /// `index.txt`).
    pub root: Option<PathBuf>,
    pub synth: SynthSpec,
    pub palette: Palette,
    pub class_names: Vec<String>,
    /// `[height, width]` bilinear resize applied before tiling.
    pub resize: Option<[usize; 2]>,
    pub tile: Option<usize>,
    /// Images are stored as `value / 255`; recorded so the digest covers it.
    pub normalization: String,
    /// Trailing images reserved for validation, then for testing. Training
    /// uses the leading remainder.
    pub val_count: usize,
    pub test_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            root: None,
            synth: SynthSpec::default(),
            palette: Palette::default(),
            class_names: vec!["background".into(), "cytoplasm".into(), "nucleus".into()],
            resize: None,
            tile: None,
            normalization: "unit_range".into(),
            val_count: 16,
            test_count: 0,
        }
    }
}

/// Train / validation / test partition of a loaded dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Training and validation items together, for cross-validation.
    pub fn pool(&self) -> Dataset {
        let mut samples = self.train.samples.clone();
        samples.extend(self.val.samples.iter().cloned());
        Dataset {
            num_classes: self.train.num_classes,
            samples,
        }
    }
}

impl DataConfig {
    pub fn load(&self, num_classes: usize) -> Result<Dataset> {
        let mut ds = match self.source {
            DataSource::Synth => {
                if num_classes != 3 {
                    return Err(Error::Config(format!(
                        "synthetic data has 3 classes but generator.num_classes is {num_classes}"
                    )));
                }
                synth_generate(&self.synth)?
            }
            DataSource::Dir => {
                let root = self
                    .root
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.root is required when data.source = \"dir\"".into()))?;
                load_dataset(root, &self.palette, num_classes)?
            }
        };
        if let Some([h, w]) = self.resize {
            ds = resize_dataset(&ds, h, w)?;
        }
        if let Some(t) = self.tile {
            ds = tile_dataset(&ds, t)?;
        }
        Ok(ds)
    }

    pub fn split(&self, ds: &Dataset) -> Result<Splits> {
        let n = ds.len();
        if self.val_count + self.test_count >= n {
            return Err(Error::Config(format!(
                "{n} images leave nothing to train on after {} validation and {} test images",
                self.val_count, self.test_count
            )));
        }
        let n_train = n - self.val_count - self.test_count;
        let range = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
        Ok(Splits {
            train: ds.subset(&range(0, n_train)),
            val: ds.subset(&range(n_train, n_train + self.val_count)),
            test: ds.subset(&range(n_train + self.val_count, n)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub aml: AmlConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            train: TrainConfig::default(),
            aml: AmlConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.aml.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.data.source == DataSource::Synth {
            self.data.synth.validate()?;
        }
        self.data.palette.validate(self.generator.num_classes)?;
        if self.generator.image_channels != 3 {
            return Err(Error::Config(format!(
                "generator.image_channels must be 3 for RGB data, got {}",
                self.generator.image_channels
            )));
        }
        if self.data.class_names.len() != self.generator.num_classes {
            return Err(Error::Config(format!(
                "data.class_names has {} entries for {} classes",
                self.data.class_names.len(),
                self.generator.num_classes
            )));
        }
        Ok(())
    }

    /// Applies `key.path=value` overrides; values are TOML literals, and bare
    /// words are taken as strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            let key = key.trim();
            let value = parse_literal(raw.trim());
            let mut parts: Vec<&str> = key.split('.').collect();
            let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{ov}`")))?;
            let mut table = &mut doc;
            for p in &parts {
                table = table
                    .get_mut(*p)
                    .and_then(toml::Value::as_table_mut)
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            table.insert(last.to_string(), value);
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml_str(&text)
    }

    /// SHA-256 over the canonical JSON form, with `output_dir` blanked.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// `output_dir`, placed under `$AML_OUTPUT_ROOT` when that is set and the
    /// path is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            aml: self.aml.clone(),
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
