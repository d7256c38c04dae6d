//! Scratch probe for trend-config calibration (temporary).

use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0);
    let dir = tempfile::tempdir().unwrap();
    for variant in ["none", "casenet"] {
        let started = Instant::now();
        let mut cfg = sembound::config::RunConfig::default();
        cfg.seed = seed;
        cfg.output_dir = dir.path().join(format!("{variant}{seed}"));
        cfg.dataset.num_samples = 500;
        cfg.dataset.val_samples = 100;
        cfg.dataset.size = 64;
        cfg.dataset.num_categories = 5;
        cfg.backbone.channels = vec![8, 16, 24, 32, 32];
        cfg.head.variant = variant.into();
        cfg.head.seg_channels = 32;
        cfg.augment.crop = [64, 64];
        cfg.train.batch_size = 4;
        cfg.train.eval_interval = 100_000;
        cfg.schedule.max_iter = iters;
        cfg.boundary.radius = 2;
        cfg.eval.trimap_widths = vec![3];
        cfg.eval.ods = false;
        let outcome = sembound::trainer::train(&cfg).unwrap();
        let train_secs = started.elapsed().as_secs_f64();
        let model = outcome.checkpoint.instantiate().unwrap();
        let (_, val) = sembound::trainer::build_datasets(&cfg).unwrap();
        let report =
            sembound::trainer::evaluate(&model, &val, &cfg, &cfg.eval, None).unwrap();
        println!(
            "{variant:8} seed {seed} iters {iters}: mIoU {:.4} F3 {:.4} | loss {:.3} -> {:.3} | train {:.1}s eval {:.1}s",
            report.miou,
            report.boundary_f[0].mean,
            outcome.history.first().unwrap().total,
            outcome.history.last().unwrap().total,
            train_secs,
            started.elapsed().as_secs_f64() - train_secs,
        );
    }
}
