//! Checkpoint persistence and the optimization loop on tiny data.

mod common;

use amlnet::aml::AmlMode;
use amlnet::checkpoint::{self, CheckpointMeta};
use amlnet::data::synth_generate;
use amlnet::generator::predict_labels;
use amlnet::metrics::ConfusionMatrix;
use amlnet::numerics::DType;
use amlnet::optim::AdamConfig;
use amlnet::trainer::OptimState;
use common::{tiny_batch, tiny_net, tiny_synth};

#[test]
fn checkpoint_restores_bitwise_identical_network() {
    let net = tiny_net(AmlMode::Aml, 0.01, DType::F32, 1);
    let batch = tiny_batch(2, DType::F32);
    let mut opt_g = net.gen_optimizer(AdamConfig::default()).unwrap();
    let mut opt_d = net.disc_optimizer(AdamConfig::default()).unwrap();
    for _ in 0..3 {
        net.train_step(&batch, &mut opt_g, Some(&mut opt_d)).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let meta = CheckpointMeta {
        config_digest: "d".into(),
        config_toml: String::new(),
        epoch: 3,
        best_val_miou: 0.5,
    };
    let state = |opt: &amlnet::optim::Adam| OptimState {
        step: opt.step_count(),
        moments: opt.moments().clone(),
    };
    checkpoint::save(&path, &net, &meta, Some(&state(&opt_g)), Some(&state(&opt_d))).unwrap();

    let fresh = tiny_net(AmlMode::Aml, 0.01, DType::F32, 99);
    assert_ne!(fresh.gen_store().digest().unwrap(), net.gen_store().digest().unwrap());
    let ck = checkpoint::load(&path).unwrap();
    ck.restore_net(&fresh).unwrap();
    assert_eq!(fresh.gen_store().digest().unwrap(), net.gen_store().digest().unwrap());
    assert_eq!(fresh.disc_store().digest().unwrap(), net.disc_store().digest().unwrap());

    let a = net.predict(&batch.images).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let b = fresh.predict(&batch.images).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    let la = net.generator_objective(&batch).unwrap().losses;
    let lb = fresh.generator_objective(&batch).unwrap().losses;
    assert_eq!(la, lb);

    let g = ck.gen_optim(DType::F32).unwrap().unwrap();
    assert_eq!(g.step, 3);
    assert_eq!(g.moments.len(), opt_g.moments().len());
    for (name, m) in opt_g.moments() {
        let r = &g.moments[name];
        let diff = m.m.sub(&r.m).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0, "{name}");
    }
    assert_eq!(ck.manifest.epoch, 3);
}

#[test]
fn plain_unet_overfits_one_image() {
    let net = tiny_net(AmlMode::BaselineUnet, 0.0, DType::F32, 7);
    let ds = synth_generate(&tiny_synth(1, 3)).unwrap();
    let batch = ds.batch(&[0], DType::F32).unwrap();
    // At the default 1e-3 the distractor blobs (background, cytoplasm-colored)
    // are still being memorized at step 500.
    let cfg = AdamConfig {
        lr: 3e-3,
        ..AdamConfig::default()
    };
    let mut opt = net.gen_optimizer(cfg).unwrap();
    let mut acc = 0.0;
    for step in 1..=500 {
        net.train_step(&batch, &mut opt, None).unwrap();
        if step % 50 == 0 {
            let mut cm = ConfusionMatrix::new(3);
            cm.accumulate(&predict_labels(&net.predict(&batch.images).unwrap()).unwrap(), &ds.samples[0].mask)
                .unwrap();
            acc = cm.pixel_accuracy();
            if acc > 0.99 {
                break;
            }
        }
    }
    assert!(acc > 0.99, "pixel accuracy {acc} after 500 steps");
}
