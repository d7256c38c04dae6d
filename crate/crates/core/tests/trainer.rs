//! End-to-end trainer behavior: determinism, resume, export, reduction to
//! the baseline objective, and the divergence guard.

use ndarray::Array4;
use sembound::config::RunConfig;
use sembound::fusion::FusionMode;
use sembound::model::SegModel;
use sembound::nn::Mode;
use sembound::trainer::{evaluate, predict_logits, train, train_with, Checkpoint, TrainOptions};
use sembound::Error;

fn tiny_cfg(out: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.output_dir = out.to_path_buf();
    cfg.seed = 42;
    cfg.dataset.num_samples = 16;
    cfg.dataset.val_samples = 4;
    cfg.dataset.size = 16;
    cfg.dataset.num_categories = 3;
    cfg.backbone.channels = vec![4, 6, 8, 8, 8];
    cfg.head.seg_channels = 8;
    cfg.head.aux_channels = 8;
    cfg.augment.crop = [16, 16];
    cfg.augment.scale_range = [0.8, 1.2];
    cfg.train.batch_size = 2;
    cfg.train.eval_interval = 1000;
    cfg.schedule.max_iter = 20;
    cfg.boundary.radius = 1;
    cfg.eval.trimap_widths = vec![3];
    cfg.eval.ods = false;
    cfg
}

fn trained_params(cfg: &RunConfig, prefix_filter: Option<&str>) -> Vec<(String, Vec<f64>)> {
    let outcome = train(cfg).expect("training failed");
    let mut model = SegModel::from_config(cfg).unwrap();
    outcome.checkpoint.restore(&mut model).unwrap();
    model
        .store
        .iter()
        .filter(|p| prefix_filter.map_or(true, |f| p.name.starts_with(f) || f.is_empty()))
        .map(|p| (p.name.clone(), p.value.iter().copied().collect()))
        .collect()
}

#[test]
fn identical_configs_train_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_a = tiny_cfg(&dir.path().join("a"));
    let mut cfg_b = tiny_cfg(&dir.path().join("b"));
    cfg_b.output_dir = dir.path().join("b");
    let a = trained_params(&cfg_a, None);
    let b = trained_params(&cfg_b, None);
    assert_eq!(a.len(), b.len());
    for ((na, va), (nb, vb)) in a.iter().zip(b.iter()) {
        assert_eq!(na, nb);
        assert!(va.iter().zip(vb).all(|(x, y)| x == y), "{na} differs");
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg(&dir.path().join("full"));
    cfg.train.eval_interval = 10; // checkpoint_latest.ckpt at iter 10
    let full = train(&cfg).unwrap();

    let mut cfg_resume = cfg.clone();
    cfg_resume.output_dir = dir.path().join("resumed");
    // Replay the first half in its own directory, then resume from its
    // mid-run checkpoint.
    let half = train(&cfg_resume).map(|_| ()).and_then(|_| {
        Checkpoint::load(&cfg_resume.output_dir.join("checkpoint_latest.ckpt"))
    });
    let half = half.unwrap();
    assert_eq!(half.iter, 10);
    let resumed = train_with(
        &cfg_resume,
        TrainOptions {
            resume: Some(&half),
            progress: None,
        },
    )
    .unwrap();

    for (a, b) in full
        .checkpoint
        .params
        .iter()
        .zip(resumed.checkpoint.params.iter())
    {
        assert_eq!(a.name, b.name);
        assert!(
            a.values.iter().zip(&b.values).all(|(x, y)| x == y),
            "{} diverged after resume",
            a.name
        );
        if let (Some(ma), Some(mb)) = (&a.momentum, &b.momentum) {
            assert!(ma.iter().zip(mb).all(|(x, y)| x == y), "{} momentum", a.name);
        }
    }
}

#[test]
fn resume_refuses_mismatched_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(dir.path());
    let model = SegModel::from_config(&cfg).unwrap();
    let ckpt = Checkpoint::capture(&model, &cfg, 5);
    let mut other = cfg.clone();
    other.loss.alpha = 1.25;
    let err = train_with(
        &other,
        TrainOptions {
            resume: Some(&ckpt),
            progress: None,
        },
    );
    assert!(matches!(err, Err(Error::Checkpoint(_))));
}

#[test]
fn zero_weights_reproduce_baseline_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let mut baseline = tiny_cfg(&dir.path().join("base"));
    baseline.head.variant = "none".into();
    let mut zeroed = tiny_cfg(&dir.path().join("zero"));
    zeroed.head.variant = "casenet".into();
    zeroed.loss.alpha = 0.0;
    zeroed.loss.beta = 0.0;

    let base = trained_params(&baseline, Some(""));
    let zero = trained_params(&zeroed, Some(""));
    let base: Vec<_> = base
        .into_iter()
        .filter(|(n, _)| SegModel::is_inference_param(n))
        .collect();
    let zero: Vec<_> = zero
        .into_iter()
        .filter(|(n, _)| SegModel::is_inference_param(n))
        .collect();
    assert_eq!(base.len(), zero.len());
    for ((na, va), (nb, vb)) in base.iter().zip(zero.iter()) {
        assert_eq!(na, nb);
        assert!(
            va.iter().zip(vb).all(|(x, y)| x == y),
            "{na}: auxiliary loss with zero weights changed the trajectory"
        );
    }
}

#[test]
fn short_run_reduces_loss_and_checkpoint_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg(dir.path());
    cfg.schedule.max_iter = 200;
    cfg.dataset.num_samples = 32;
    let outcome = train(&cfg).unwrap();
    let first = outcome.history.first().unwrap().total;
    let last = outcome.history.last().unwrap().total;
    assert!(
        last < first,
        "200-iteration run did not descend: {first} -> {last}"
    );
    assert!(outcome.checkpoint_path.is_file());
    let loaded = Checkpoint::load(&outcome.checkpoint_path).unwrap();
    assert_eq!(loaded.iter, 200);
    for (a, b) in loaded.params.iter().zip(outcome.checkpoint.params.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x == y));
    }
    // Per-step records were written.
    let log = std::fs::read_to_string(cfg.output_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 200);
}

#[test]
fn export_discards_head_and_preserves_segmentation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg(dir.path());
    cfg.schedule.max_iter = 5;
    let outcome = train(&cfg).unwrap();
    let exported = outcome.checkpoint.export_inference().unwrap();
    assert!(exported.manifest.head_discarded);
    assert!(exported.params.iter().all(|p| !p.name.starts_with("sbd.")));

    // Parameter count equals the baseline model's.
    let mut base_cfg = cfg.clone();
    base_cfg.head.variant = "none".into();
    let baseline = SegModel::from_config(&base_cfg).unwrap();
    assert_eq!(exported.trainable_scalars(), baseline.trainable_scalars());

    // Logit agreement between exported and full model on random inputs.
    let mut full = outcome.checkpoint.instantiate().unwrap();
    let mut stripped = exported.instantiate().unwrap();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
    for _ in 0..4 {
        let input = Array4::from_shape_fn((1, 3, 16, 16), |_| {
            rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
        });
        let (tf, of) = full.infer(input.clone()).unwrap();
        let (ts, os) = stripped.infer(input).unwrap();
        let max = tf
            .value(of.seg_logits)
            .iter()
            .zip(ts.value(os.seg_logits).iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max <= 1e-6, "exported logits differ by {max}");
    }

    // Artifact file roundtrip.
    let path = dir.path().join("inference.ckpt");
    exported.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert!(back.manifest.head_discarded);
    assert_eq!(back.manifest.config_digest, cfg.digest());
    assert_eq!(back.trainable_scalars(), exported.trainable_scalars());
}

#[test]
fn export_refused_with_fusion_enabled() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg(dir.path());
    cfg.fusion.mode = FusionMode::TwoStream;
    let model = SegModel::from_config(&cfg).unwrap();
    let ckpt = Checkpoint::capture(&model, &cfg, 0);
    match ckpt.export_inference() {
        Err(Error::ExportRefused(msg)) => assert!(msg.contains("fusion")),
        other => panic!("expected refusal, got {other:?}"),
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(dir.path());
    let mut model = SegModel::from_config(&cfg).unwrap();
    // Poison one weight; the first forward pass goes non-finite.
    let pid = model.store.find("backbone.stem.conv.weight").unwrap();
    model.store.get_mut(pid).value[(0, 0, 0, 0)] = f64::NAN;
    let poisoned = Checkpoint::capture(&model, &cfg, 0);
    let err = train_with(
        &cfg,
        TrainOptions {
            resume: Some(&poisoned),
            progress: None,
        },
    )
    .map(|_| ())
    .unwrap_err();
    match err {
        Error::NonFiniteLoss { iter, dump } => {
            assert_eq!(iter, 0);
            let dump = dump.unwrap();
            assert!(dump.is_file());
            let text = std::fs::read_to_string(dump).unwrap();
            assert!(text.contains("batch_indices"));
        }
        other => panic!("expected divergence abort, got {other}"),
    }
}

#[test]
fn whole_and_slide_inference_agree_for_small_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(dir.path());
    let mut model = SegModel::from_config(&cfg).unwrap();
    let image = ndarray::Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
        ((c + y * x) % 7) as f64 / 7.0
    });
    let whole = predict_logits(&mut model, &image, &cfg.eval).unwrap();
    let mut slide = cfg.eval.clone();
    slide.slide_window = Some([32, 32]);
    let slid = predict_logits(&mut model, &image, &slide).unwrap();
    assert_eq!(whole, slid);

    // A window smaller than the image exercises real tiling.
    let mut tiled = cfg.eval.clone();
    tiled.slide_window = Some([8, 8]);
    let t = predict_logits(&mut model, &image, &tiled).unwrap();
    assert_eq!(t.dim(), whole.dim());
    assert!(t.iter().all(|v| v.is_finite()));
}

#[test]
fn evaluation_runs_end_to_end_with_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg(dir.path());
    cfg.schedule.max_iter = 5;
    cfg.eval.ods = true;
    cfg.eval.ods_thresholds = 5;
    cfg.eval.error_maps = true;
    let outcome = train(&cfg).unwrap();
    let model = outcome.checkpoint.instantiate().unwrap();
    let (_, val) = sembound::trainer::build_datasets(&cfg).unwrap();
    let out = dir.path().join("eval");
    let report = evaluate(&model, &val, &cfg, &cfg.eval, Some(&out)).unwrap();
    assert_eq!(report.num_images, 4);
    assert!(report.miou >= 0.0 && report.miou <= 1.0);
    assert_eq!(report.boundary_f.len(), 1);
    assert!(report.max_f_ods.is_some());
    assert!(out.join("metrics.jsonl").is_file());
    assert!(out.join("summary.txt").is_file());
    assert!(out.join("err_000000.png").is_file());
}

#[test]
fn tta_averages_scales_and_flips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(dir.path());
    let mut model = SegModel::from_config(&cfg).unwrap();
    let image = ndarray::Array3::from_shape_fn((3, 16, 16), |(c, _, x)| {
        (c as f64 * 0.1 + x as f64 / 16.0).min(1.0)
    });
    let mut eval = cfg.eval.clone();
    eval.tta = true;
    let logits = predict_logits(&mut model, &image, &eval).unwrap();
    assert_eq!(logits.dim(), (3, 16, 16));
    assert!(logits.iter().all(|v| v.is_finite()));
}

#[test]
fn init_weights_hook_loads_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let mut donor_cfg = tiny_cfg(&dir.path().join("donor"));
    donor_cfg.schedule.max_iter = 3;
    let donor = train(&donor_cfg).unwrap();

    let mut cfg = tiny_cfg(&dir.path().join("recv"));
    cfg.backbone.init_weights = Some(donor.checkpoint_path.clone());
    cfg.schedule.max_iter = 1;
    // Loading must not fail; the donor weights land before step 0.
    let outcome = train(&cfg).unwrap();
    assert_eq!(outcome.history.len(), 1);

    let mut model = SegModel::from_config(&cfg).unwrap();
    let ckpt = Checkpoint::load(&donor.checkpoint_path).unwrap();
    let loaded = model.load_weights(&ckpt.named_values()).unwrap();
    assert!(loaded > 0);
    let pid = model.store.find("backbone.stem.conv.weight").unwrap();
    let donor_model = ckpt.instantiate().unwrap();
    let did = donor_model.store.find("backbone.stem.conv.weight").unwrap();
    assert_eq!(model.store.get(pid).value, donor_model.store.get(did).value);
}

#[test]
fn fixed_batch_supervision_descends_in_every_component() {
    use sembound::losses::{total_loss, LossOptions, LossWeights};
    use sembound::trainer::{assemble_batch, poly_lr, Sgd};

    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(dir.path());
    let (data, _) = sembound::trainer::build_datasets(&cfg).unwrap();
    let batch = assemble_batch(&data, &[0, 1], &cfg, 0, Some(3), false).unwrap();
    let mut model = SegModel::from_config(&cfg).unwrap();
    let sgd = Sgd {
        momentum: 0.9,
        weight_decay: 5e-4,
    };
    let weights = LossWeights::default();
    let opts = LossOptions::default();

    let mut first: Option<sembound::losses::LossReport> = None;
    let mut last = None;
    for step in 0..200 {
        let mut tape = sembound::autograd::Tape::new();
        let x = tape.input(batch.images.clone());
        let out = model.forward(&mut tape, x, Mode::Train).unwrap();
        let (total, report) = total_loss(
            &mut tape,
            out.seg_logits,
            out.head.as_ref(),
            out.aux_logits,
            &batch.labels,
            &batch.targets,
            &weights,
            &opts,
        )
        .unwrap();
        model.store.zero_grads();
        tape.backward(total, &mut model.store);
        sgd.step(&mut model.store, poly_lr(step, 200, 0.01, 0.9));
        if first.is_none() {
            first = Some(report.clone());
        }
        last = Some(report);
    }
    let (first, last) = (first.unwrap(), last.unwrap());
    assert!(last.seg_ce < first.seg_ce, "seg CE did not descend");
    for (i, (l, f)) in last.sbd_bce.iter().zip(&first.sbd_bce).enumerate() {
        assert!(l < f, "boundary term {i} did not descend: {f} -> {l}");
    }
}
