//! Training and evaluation loops.
//!
//! Everything is deterministic given (config, seed): batches are shuffled by
//! one ChaCha stream whose position travels with the checkpoint, reductions
//! run in fixed order, and the per-epoch log is formatted to fixed width, so
//! identical runs produce identical CSV bytes and a resumed run continues an
//! interrupted one bit-for-bit.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{self, Dataset, PART_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::network::{BatchInput, Model, Task};
use crate::tensor::Mode;
use crate::tensor::{cosine_lr, AdamW};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// Random rotation about the vertical axis plus coordinate jitter
    /// (sigma 0.01), applied to training batches only.
    pub augment: bool,
    /// Stop early once train and test metrics both clear their targets.
    pub target_train_metric: Option<f64>,
    pub target_test_metric: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 8,
            lr: 2e-3,
            weight_decay: 1e-4,
            label_smoothing: 0.2,
            augment: false,
            target_train_metric: None,
            target_test_metric: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must lie in [0, 1]".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_metric: f64,
    pub test_metric: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Header plus one row per completed epoch, fixed-width formatting.
    pub csv: String,
    pub rows: Vec<EpochRow>,
    pub checkpoint: Checkpoint,
    /// Total epochs completed, counting any resumed prefix.
    pub epochs_run: usize,
}

pub const CSV_HEADER: &str = "epoch,lr,train_loss,train_metric,test_metric";

fn format_row(row: &EpochRow) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6}",
        row.epoch, row.lr, row.train_loss, row.train_metric, row.test_metric
    )
}

/// The headline quality figure: overall accuracy for classification, mean
/// IoU for the segmentation tasks.
fn headline_metric(task: Task, cm: &ConfusionMatrix) -> Result<f64> {
    let m = cm.metrics()?;
    Ok(match task {
        Task::Classify => m.oa,
        Task::Segment | Task::Partseg => m.miou,
    })
}

fn check_compatible(model: &Model, dataset: &Dataset) -> Result<()> {
    let cfg = &model.config;
    match cfg.task {
        Task::Classify => {
            if cfg.num_classes != dataset.num_classes() {
                return Err(Error::Data(format!(
                    "model expects {} classes, dataset provides {} families",
                    cfg.num_classes,
                    dataset.num_classes()
                )));
            }
        }
        Task::Segment | Task::Partseg => {
            if cfg.num_classes != PART_CLASSES {
                return Err(Error::Data(format!(
                    "segmentation datasets label {} part classes, model expects {}",
                    PART_CLASSES, cfg.num_classes
                )));
            }
            if cfg.task == Task::Partseg && cfg.num_categories != dataset.num_classes() {
                return Err(Error::Data(format!(
                    "model expects {} shape categories, dataset provides {}",
                    cfg.num_categories,
                    dataset.num_classes()
                )));
            }
        }
    }
    if dataset.points_per_cloud < cfg.min_points() {
        return Err(Error::Data(format!(
            "clouds of {} points are below the network minimum of {}",
            dataset.points_per_cloud,
            cfg.min_points()
        )));
    }
    Ok(())
}

/// Rotate a cloud about z by a random angle and jitter every coordinate.
fn augment_cloud(positions: &mut [[f64; 3]], rng: &mut ChaCha8Rng) {
    let angle = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
    let (sin, cos) = angle.sin_cos();
    for p in positions.iter_mut() {
        let (x, y) = (p[0], p[1]);
        p[0] = cos * x - sin * y;
        p[1] = sin * x + cos * y;
    }
    for p in positions.iter_mut() {
        for c in p.iter_mut() {
            *c += 0.01 * data::gaussian(rng);
        }
    }
}

struct BatchData {
    positions: Vec<[f64; 3]>,
    labels: Vec<usize>,
    categories: Vec<usize>,
    batch: usize,
}

fn assemble(
    dataset: &Dataset,
    indices: &[usize],
    task: Task,
    augment: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> BatchData {
    let n = dataset.points_per_cloud;
    let mut positions = Vec::with_capacity(indices.len() * n);
    let mut labels = Vec::new();
    let mut categories = Vec::with_capacity(indices.len());
    for &i in indices {
        let sample = &dataset.samples[i];
        positions.extend_from_slice(&sample.positions);
        categories.push(sample.category as usize);
        match task {
            Task::Classify => labels.push(sample.cloud_label as usize),
            Task::Segment | Task::Partseg => {
                labels.extend(sample.point_labels.iter().map(|&l| l as usize));
            }
        }
    }
    if augment {
        let rng = rng.expect("augmentation needs the training stream");
        for cloud in positions.chunks_mut(n) {
            augment_cloud(cloud, rng);
        }
    }
    BatchData { positions, labels, categories, batch: indices.len() }
}

/// One forward pass over a batch; returns (mean loss, per-row argmax).
fn forward_batch(
    model: &mut Model,
    data: &BatchData,
    n: usize,
    mode: Mode,
    smoothing: f64,
    backprop: Option<&mut AdamW>,
) -> Result<(f64, Vec<usize>)> {
    let input = BatchInput {
        positions: &data.positions,
        batch: data.batch,
        n,
        categories: Some(&data.categories),
    };
    let task = model.config.task;
    let num_classes = model.config.num_classes;
    let (mut ctx, logits) = model.forward(&input, mode)?;
    let flat = match task {
        Task::Classify => logits,
        Task::Segment | Task::Partseg => {
            ctx.graph.reshape(logits, vec![data.batch * n, num_classes])?
        }
    };
    let loss = ctx.graph.cross_entropy_ls(flat, &data.labels, smoothing)?;
    let loss_val = ctx.graph.value(loss).data()[0];
    if !loss_val.is_finite() {
        let (_, desc) = ctx
            .graph
            .find_nonfinite()
            .unwrap_or((0, "loss output".to_string()));
        return Err(Error::Numeric(format!(
            "non-finite loss; first bad tensor: {desc}"
        )));
    }
    let preds = {
        let t = ctx.graph.value(flat);
        let k = t.last_dim();
        t.data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    };
    if let Some(opt) = backprop {
        ctx.graph.backward(loss)?;
        let grads = ctx.learnable_grads();
        drop(ctx);
        let mut slices = model.store.learnable_data_mut();
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut slices, &grad_refs);
    }
    Ok((loss_val, preds))
}

/// Eval-mode pass over a set of samples: mean loss and confusion counts.
pub fn evaluate(
    model: &mut Model,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<(f64, ConfusionMatrix)> {
    check_compatible(model, dataset)?;
    let task = model.config.task;
    let k = model.config.num_classes;
    let n = dataset.points_per_cloud;
    let mut cm = ConfusionMatrix::new(k);
    let mut loss_sum = 0.0;
    let mut rows = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let data = assemble(dataset, chunk, task, false, None);
        let (loss, preds) = forward_batch(model, &data, n, Mode::Eval, 0.0, None)?;
        loss_sum += loss * data.labels.len() as f64;
        rows += data.labels.len();
        for (&truth, &pred) in data.labels.iter().zip(&preds) {
            cm.add(truth, pred);
        }
    }
    if rows == 0 {
        return Err(Error::Usage("evaluate called with no samples".into()));
    }
    Ok((loss_sum / rows as f64, cm))
}

/// Run (or continue) a training job.
///
/// With `resume`, the checkpoint's weights, optimizer moments, RNG position
/// and epoch counter are restored first, and the loop continues from there;
/// the CSV then contains only the newly run epochs. `stop_after` pauses the
/// run once that many total epochs are complete (checkpointing support).
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    resume: Option<&Checkpoint>,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(model, dataset)?;
    let task = model.config.task;
    let n = dataset.points_per_cloud;
    let k = model.config.num_classes;
    let (train_idx, test_idx) = dataset.train_test();
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Data("dataset too small to split into train and test".into()));
    }

    let mut rng;
    let mut opt;
    let start_epoch;
    match resume {
        Some(ckpt) => {
            ckpt.apply(model)?;
            rng = ckpt.rng.restore();
            start_epoch = ckpt.epoch as usize;
            opt = match &ckpt.optim {
                Some(state) => state.restore(),
                None => new_optimizer(model, cfg),
            };
        }
        None => {
            rng = ChaCha8Rng::seed_from_u64(seed);
            start_epoch = 0;
            opt = new_optimizer(model, cfg);
        }
    }

    let end_epoch = cfg.epochs.min(stop_after.unwrap_or(cfg.epochs));
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut rows = Vec::new();
    let mut completed = start_epoch;
    for epoch in start_epoch..end_epoch {
        opt.lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);

        let mut train_cm = ConfusionMatrix::new(k);
        let mut loss_sum = 0.0;
        let mut loss_rows = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let data = assemble(dataset, chunk, task, cfg.augment, Some(&mut rng));
            let (loss, preds) =
                forward_batch(model, &data, n, Mode::Train, cfg.label_smoothing, Some(&mut opt))?;
            loss_sum += loss * data.labels.len() as f64;
            loss_rows += data.labels.len();
            for (&truth, &pred) in data.labels.iter().zip(&preds) {
                train_cm.add(truth, pred);
            }
        }

        let (_, test_cm) = evaluate(model, dataset, &test_idx, cfg.batch_size)?;
        let row = EpochRow {
            epoch,
            lr: opt.lr,
            train_loss: loss_sum / loss_rows as f64,
            train_metric: headline_metric(task, &train_cm)?,
            test_metric: headline_metric(task, &test_cm)?,
        };
        csv.push_str(&format_row(&row));
        csv.push('\n');
        rows.push(row);
        completed = epoch + 1;

        let targets_set = cfg.target_train_metric.is_some() || cfg.target_test_metric.is_some();
        if targets_set
            && cfg.target_train_metric.map_or(true, |t| row.train_metric >= t)
            && cfg.target_test_metric.map_or(true, |t| row.test_metric >= t)
        {
            break;
        }
    }

    let checkpoint = Checkpoint::capture(model, completed as u32, &rng, Some(&opt));
    Ok(TrainOutcome { csv, rows, checkpoint, epochs_run: completed })
}

fn new_optimizer(model: &Model, cfg: &TrainConfig) -> AdamW {
    let sizes: Vec<usize> = model
        .store
        .entries()
        .iter()
        .filter(|e| e.learnable)
        .map(|e| e.tensor.numel())
        .collect();
    AdamW::new(&sizes, cfg.lr, cfg.weight_decay)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Family, GenConfig};
    use crate::network::{self, NetworkConfig};

    fn tiny_dataset(families: Vec<Family>, n_samples: usize) -> Dataset {
        let cfg = GenConfig {
            families,
            n_samples,
            points_per_cloud: 32,
            noise_sigma: 0.0,
        };
        data::generate(&cfg, 4242).unwrap()
    }

    fn tiny_model(task: Task, num_classes: usize, num_categories: usize) -> Model {
        let mut cfg = NetworkConfig::default();
        cfg.task = task;
        cfg.c_embed = 4;
        cfg.ref_depths = vec![0, 0, 0, 0];
        cfg.k_abs = 4;
        cfg.k_ref = 4;
        // Segmentation stacks four abstraction stages; halve the ratio so
        // 32-point test clouds stay above the network minimum.
        if task == Task::Segment {
            cfg.downsample_ratio = 2;
        }
        cfg.num_classes = num_classes;
        cfg.num_categories = num_categories;
        network::build(cfg, 31).unwrap()
    }

    #[test]
    fn one_epoch_emits_one_csv_row() {
        let dataset = tiny_dataset(vec![Family::Sphere, Family::Cube], 10);
        let mut model = tiny_model(Task::Classify, 2, 2);
        let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
        let out = train(&mut model, &dataset, &cfg, 7, None, None).unwrap();
        let lines: Vec<&str> = out.csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("0,"));
        assert_eq!(out.epochs_run, 1);
    }

    #[test]
    fn same_seed_reproduces_the_csv_bytes() {
        let dataset = tiny_dataset(vec![Family::Sphere, Family::Cube], 10);
        let cfg = TrainConfig { epochs: 2, batch_size: 4, augment: true, ..TrainConfig::default() };
        let mut a = tiny_model(Task::Classify, 2, 2);
        let mut b = tiny_model(Task::Classify, 2, 2);
        let out_a = train(&mut a, &dataset, &cfg, 7, None, None).unwrap();
        let out_b = train(&mut b, &dataset, &cfg, 7, None, None).unwrap();
        assert_eq!(out_a.csv, out_b.csv);
    }

    #[test]
    fn resume_matches_the_uninterrupted_run() {
        let dataset = tiny_dataset(vec![Family::Sphere, Family::Cube], 10);
        let cfg = TrainConfig { epochs: 4, batch_size: 4, ..TrainConfig::default() };

        let mut full = tiny_model(Task::Classify, 2, 2);
        let out_full = train(&mut full, &dataset, &cfg, 7, None, None).unwrap();

        let mut paused = tiny_model(Task::Classify, 2, 2);
        let out_half = train(&mut paused, &dataset, &cfg, 7, None, Some(2)).unwrap();
        assert_eq!(out_half.epochs_run, 2);
        let mut resumed = tiny_model(Task::Classify, 2, 2);
        let out_rest =
            train(&mut resumed, &dataset, &cfg, 7, Some(&out_half.checkpoint), None).unwrap();
        assert_eq!(out_rest.epochs_run, 4);

        let full_lines: Vec<&str> = out_full.csv.lines().collect();
        let rest_lines: Vec<&str> = out_rest.csv.lines().collect();
        assert_eq!(rest_lines.len(), 3);
        assert_eq!(full_lines[3], rest_lines[1]);
        assert_eq!(full_lines[4], rest_lines[2]);
        for (a, b) in full.store.entries().iter().zip(resumed.store.entries()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
    }

    #[test]
    fn segmentation_labels_feed_per_point_rows() {
        let dataset = tiny_dataset(vec![Family::Cylinder], 5);
        let mut model = tiny_model(Task::Segment, 2, 1);
        let cfg = TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::default() };
        let out = train(&mut model, &dataset, &cfg, 3, None, None).unwrap();
        assert_eq!(out.rows.len(), 1);
        let (_, cm) = evaluate(&mut model, &dataset, &dataset.train_test().1, 2).unwrap();
        assert_eq!(cm.total(), 32);
    }

    #[test]
    fn class_count_mismatch_is_a_data_error() {
        let dataset = tiny_dataset(vec![Family::Sphere, Family::Cube], 10);
        let mut model = tiny_model(Task::Classify, 3, 3);
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        match train(&mut model, &dataset, &cfg, 7, None, None) {
            Err(Error::Data(msg)) => assert!(msg.contains("classes")),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn early_stop_honors_metric_targets() {
        let dataset = tiny_dataset(vec![Family::Sphere, Family::Cube], 10);
        let mut model = tiny_model(Task::Classify, 2, 2);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            target_train_metric: Some(0.0),
            target_test_metric: Some(0.0),
            ..TrainConfig::default()
        };
        let out = train(&mut model, &dataset, &cfg, 7, None, None).unwrap();
        assert_eq!(out.epochs_run, 1);
    }
}
