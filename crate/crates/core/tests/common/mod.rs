//! Small configurations shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use amlnet::aml::{AmlConfig, AmlMode, AmlNet};
use amlnet::config::RunConfig;
use amlnet::data::{synth_generate, SegBatch, SynthSpec};
use amlnet::discriminator::DiscConfig;
use amlnet::generator::GeneratorConfig;
use amlnet::numerics::DType;

/// 32x32 cells, small enough that a fit takes about a second.
pub fn tiny_synth(num_images: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        image_size: 32,
        num_images,
        seed,
        cytoplasm_radius: [8, 12],
        nucleus_radius: [3, 4],
        nucleus_offset: 2,
        distractor_radius: [3, 5],
        ..SynthSpec::default()
    }
}

pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        depth: 4,
        base_channels: 8,
        ..GeneratorConfig::default()
    }
}

pub fn tiny_net(mode: AmlMode, lambda_adv: f64, dtype: DType, seed: u64) -> AmlNet {
    let cfg = AmlConfig {
        mode,
        lambda_adv,
        ..AmlConfig::default()
    };
    AmlNet::new(&cfg, &tiny_generator(), &DiscConfig::default(), dtype, seed).unwrap()
}

pub fn tiny_batch(n: usize, dtype: DType) -> SegBatch {
    let ds = synth_generate(&tiny_synth(n, 5)).unwrap();
    ds.batch(&(0..n).collect::<Vec<_>>(), dtype).unwrap()
}

/// One-epoch run on twelve 32x32 images (8 train / 4 val).
pub fn tiny_run(mode: AmlMode, out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        output_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.train.epochs = 1;
    cfg.train.batch_size = 4;
    cfg.aml.mode = mode;
    cfg.generator = tiny_generator();
    cfg.data.synth = tiny_synth(12, 0);
    cfg.data.val_count = 4;
    cfg
}
