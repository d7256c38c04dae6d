//! The training loop: SGD with poly learning-rate decay, deterministic
//! batch assembly, per-step loss logging, periodic evaluation on a weight
//! snapshot, and checkpointing.
//!
//! Every source of randomness is a pure function of the run seed and a
//! counter (epoch for the shuffle, global draw index for augmentation), so
//! resuming from a checkpoint continues the exact run and parallel sample
//! materialization cannot reorder outcomes.

mod checkpoint;
mod evaluate;

pub use checkpoint::{ArtifactKind, Checkpoint, Manifest, SavedParam};
pub use evaluate::{evaluate, predict_logits, write_report, BoundaryFSummary, EvalReport};

use std::io::Write;
use std::path::PathBuf;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autograd::{ParamStore, Tape};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{total_loss, BoundaryTargets, LossReport};
use crate::model::SegModel;
use crate::nn::Mode;
use crate::pipeline::{augment, sample_rng, synth_shapes, DataSource, DirDataset, Sample};

/// `lr0 * (1 - iter/max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, lr0: f64, power: f64) -> f64 {
    debug_assert!(iter <= max_iter);
    lr0 * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

/// SGD with momentum and decoupled-from-nothing classic weight decay
/// (decay added to the gradient before the momentum update).
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step(&self, store: &mut ParamStore, lr: f64) {
        for p in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            ndarray::Zip::from(&mut p.momentum)
                .and(&p.grad)
                .and(&p.value)
                .for_each(|m, &g, &v| {
                    *m = self.momentum * *m + g + self.weight_decay * v;
                });
            p.value.scaled_add(-lr, &p.momentum);
        }
    }
}

/// Builds (train, val) data sources from the configuration. Synthetic
/// datasets derive the validation split from a distinct seed stream; a
/// directory dataset without `val_root` validates on its training images.
pub fn build_datasets(cfg: &RunConfig) -> Result<(DataSource, DataSource)> {
    match cfg.dataset.kind.as_str() {
        "synthetic" => {
            let d = &cfg.dataset;
            let train = synth_shapes(d.num_samples, d.size, d.num_categories, cfg.seed)?;
            let val = synth_shapes(
                d.val_samples,
                d.size,
                d.num_categories,
                cfg.seed ^ 0x7661_6c21,
            )?;
            Ok((DataSource::Memory(train), DataSource::Memory(val)))
        }
        "directory" => {
            let root = cfg.dataset.root.as_ref().unwrap();
            let train = DirDataset::open(root)?;
            let val = match &cfg.dataset.val_root {
                Some(v) => DirDataset::open(v)?,
                None => train.clone(),
            };
            if cfg.boundary.instance_sensitive && !train.has_instances() {
                return Err(Error::Config(
                    "instance_sensitive boundaries requested but the dataset has no instances/ \
                     directory"
                        .into(),
                ));
            }
            Ok((DataSource::Directory(train), DataSource::Directory(val)))
        }
        other => Err(Error::Config(format!("unknown dataset kind '{other}'"))),
    }
}

/// Deterministic epoch shuffle; partial trailing batches are dropped by the
/// iteration arithmetic.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    use rand::SeedableRng as _;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ 0x5348_5546);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Materializes one batch: augmented samples with boundary targets, as
/// tape-ready arrays.
pub struct Batch {
    pub images: Array4<f64>,
    pub labels: Array3<i64>,
    pub targets: BoundaryTargets,
    pub indices: Vec<usize>,
}

pub fn assemble_batch(
    data: &DataSource,
    indices: &[usize],
    cfg: &RunConfig,
    draw_base: u64,
    head_categories: Option<usize>,
    needs_binary: bool,
) -> Result<Batch> {
    let boundary_cfg = cfg.boundary_config();
    let ncat = cfg.dataset.num_categories;
    let samples: Vec<Sample> = indices
        .par_iter()
        .enumerate()
        .map(|(slot, &idx)| {
            let raw = data.get(idx)?;
            let mut rng = sample_rng(cfg.seed, draw_base + slot as u64);
            augment(&raw, &cfg.augment, &boundary_cfg, ncat, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = samples.len();
    let [h, w] = cfg.augment.crop;
    let mut images = Array4::<f64>::zeros((n, 3, h, w));
    let mut labels = Array3::<i64>::zeros((n, h, w));
    for (i, s) in samples.iter().enumerate() {
        images
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&s.image);
        for y in 0..h {
            for x in 0..w {
                labels[(i, y, x)] = s.labels.data()[(y, x)] as i64;
            }
        }
    }
    let semantic = head_categories.map(|hc| {
        if hc == 1 {
            Array4::from_shape_fn((n, 1, h, w), |(i, _, y, x)| {
                samples[i].binary_boundary[(y, x)] as f64
            })
        } else {
            Array4::from_shape_fn((n, hc, h, w), |(i, c, y, x)| {
                samples[i].boundaries.channel(c)[(y, x)] as f64
            })
        }
    });
    let binary = needs_binary.then(|| {
        Array4::from_shape_fn((n, 1, h, w), |(i, _, y, x)| {
            samples[i].binary_boundary[(y, x)] as f64
        })
    });
    Ok(Batch {
        images,
        labels,
        targets: BoundaryTargets { semantic, binary },
        indices: indices.to_vec(),
    })
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub history: Vec<LossReport>,
    pub eval_reports: Vec<(usize, EvalReport)>,
}

pub type ProgressFn<'a> = Box<dyn FnMut(usize, f64, &LossReport) + 'a>;

pub struct TrainOptions<'a> {
    pub resume: Option<&'a Checkpoint>,
    pub progress: Option<ProgressFn<'a>>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            resume: None,
            progress: None,
        }
    }
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with(cfg, TrainOptions::default())
}

pub fn train_with(cfg: &RunConfig, mut opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_data, val_data) = build_datasets(cfg)?;
    let bs = cfg.train.batch_size;
    let batches_per_epoch = train_data.len() / bs;
    if batches_per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch size {bs} exceeds dataset size {}",
            train_data.len()
        )));
    }

    let mut model = SegModel::from_config(cfg)?;
    if let Some(path) = &cfg.backbone.init_weights {
        let ckpt = Checkpoint::load(path)?;
        model.load_weights(&ckpt.named_values())?;
    }
    let mut start_iter = 0;
    if let Some(resume) = opts.resume {
        if resume.manifest.config_digest != cfg.digest() {
            return Err(Error::Checkpoint(
                "resume checkpoint was produced by a different configuration".into(),
            ));
        }
        resume.restore(&mut model)?;
        start_iter = resume.iter;
    }

    let head_categories = model.sbd_head.as_ref().map(|h| h.head_categories());
    let needs_binary = model
        .sbd_head
        .as_ref()
        .map(|h| h.cfg.variant == crate::heads::HeadVariant::Dds)
        .unwrap_or(false);
    let sgd = Sgd {
        momentum: cfg.optimizer.momentum,
        weight_decay: cfg.optimizer.weight_decay,
    };
    let weights = cfg.loss_weights();
    let loss_opts = cfg.loss_options();

    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(cfg.output_dir.join("train_log.jsonl"))?,
    );

    let mut history = Vec::with_capacity(cfg.schedule.max_iter - start_iter);
    let mut eval_reports = Vec::new();
    let mut order_epoch = usize::MAX;
    let mut order: Vec<usize> = Vec::new();

    for iter in start_iter..cfg.schedule.max_iter {
        let lr = poly_lr(iter, cfg.schedule.max_iter, cfg.optimizer.lr0, cfg.schedule.power);
        let epoch = iter / batches_per_epoch;
        if epoch != order_epoch {
            order = epoch_order(cfg.seed, epoch, train_data.len());
            order_epoch = epoch;
        }
        let slot = iter % batches_per_epoch;
        let indices = &order[slot * bs..(slot + 1) * bs];
        let batch = assemble_batch(
            &train_data,
            indices,
            cfg,
            (iter * bs) as u64,
            head_categories,
            needs_binary,
        )?;

        let mut tape = Tape::new();
        let x = tape.input(batch.images);
        let out = model.forward(&mut tape, x, Mode::Train)?;
        let (total, report) = total_loss(
            &mut tape,
            out.seg_logits,
            out.head.as_ref(),
            out.aux_logits,
            &batch.labels,
            &batch.targets,
            &weights,
            &loss_opts,
        )?;
        if !report.total.is_finite() {
            let dump = cfg.output_dir.join("divergence.json");
            let info = serde_json::json!({
                "iter": iter,
                "lr": lr,
                "batch_indices": batch.indices,
                "report": report,
            });
            std::fs::write(&dump, serde_json::to_vec_pretty(&info)?)?;
            return Err(Error::NonFiniteLoss {
                iter,
                dump: Some(dump),
            });
        }
        model.store.zero_grads();
        tape.backward(total, &mut model.store);
        sgd.step(&mut model.store, lr);

        writeln!(
            log,
            "{}",
            serde_json::json!({
                "iter": iter,
                "lr": lr,
                "total": report.total,
                "seg_ce": report.seg_ce,
                "sbd_bce": report.sbd_bce,
                "bdry_bce": report.bdry_bce,
                "aux_ce": report.aux_ce,
            })
        )?;
        if let Some(progress) = opts.progress.as_mut() {
            progress(iter, lr, &report);
        }
        history.push(report);

        let done = iter + 1 == cfg.schedule.max_iter;
        if (iter + 1) % cfg.train.eval_interval == 0 || done {
            // Evaluation runs on a captured snapshot, never live weights.
            let snapshot = Checkpoint::capture(&model, cfg, iter + 1);
            if !done {
                snapshot.save(&cfg.output_dir.join("checkpoint_latest.ckpt"))?;
            }
            let eval_model = snapshot.instantiate()?;
            let report = evaluate(&eval_model, &val_data, cfg, &cfg.eval, None)?;
            eval_reports.push((iter + 1, report));
        }
    }
    log.flush()?;

    let checkpoint = Checkpoint::capture(&model, cfg, cfg.schedule.max_iter);
    let checkpoint_path = cfg.output_dir.join("checkpoint_final.ckpt");
    checkpoint.save(&checkpoint_path)?;
    Ok(TrainOutcome {
        checkpoint,
        checkpoint_path,
        history,
        eval_reports,
    })
}
