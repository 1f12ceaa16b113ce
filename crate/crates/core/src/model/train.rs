//! Mini-batch training of a [`Classifier`] under any loss family.
//!
//! The training scene is cut into vertical columns on an xy grid; each column
//! is one mini-batch and carries its own k-neighbourhoods, so the neighbourhood
//! entropy only ever looks at predictions that exist in the current batch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::features::{extract_features, FeatureConfig, PointFeatures, FEATURE_DIM};
use super::mlp::{Classifier, ForwardCache};
use crate::error::{Error, Result};
use crate::loss::{evaluate, LogitBatch, LossConfig, LossInputs};
use crate::metrics::ConfusionMatrix;
use crate::par::Exec;
use crate::pointcloud::{ClassPartition, LabeledPointCloud};
use crate::spatial::{Neighborhoods, SpatialIndex};
use crate::stats::{normalize_weights, ClassStats, PartitionRule};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Step size reached at the end of the cosine schedule.
    pub min_learning_rate: f64,
    /// Batch gradients with a larger L2 norm are rescaled to this norm.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            min_learning_rate: 0.0,
            max_grad_norm: Some(10.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::domain("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::domain("weight decay must be >= 0"));
        }
        if !(0.0..=self.learning_rate).contains(&self.min_learning_rate) {
            return Err(Error::domain(
                "minimum learning rate must lie in [0, learning rate]",
            ));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::domain("gradient clipping norm must be positive"));
            }
        }
        Ok(())
    }

    /// Factor that brings `grad` within the clipping norm.
    pub fn clip_scale(&self, grad: &[f64]) -> f64 {
        let Some(max) = self.max_grad_norm else {
            return 1.0;
        };
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max {
            max / norm
        } else {
            1.0
        }
    }

    /// Cosine-annealed step size for `epoch` (0-based) out of `epochs`.
    pub fn learning_rate_at(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs == 0 {
            return self.learning_rate;
        }
        let t = epoch as f64 / epochs as f64;
        self.min_learning_rate
            + 0.5
                * (self.learning_rate - self.min_learning_rate)
                * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub features: FeatureConfig,
    /// Edge length in metres of the xy grid that defines mini-batches; zero
    /// makes the whole scene a single batch.
    pub block_size: f64,
    /// Grid cells with fewer points are merged into a neighbouring batch.
    pub min_block_points: usize,
    pub partition: PartitionRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 150,
            seed: 0,
            hidden: vec![64, 64],
            features: FeatureConfig::default(),
            block_size: 4.0,
            min_block_points: 64,
            partition: PartitionRule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.hidden.contains(&0) {
            return Err(Error::domain("hidden layer sizes must be positive"));
        }
        if !(self.block_size >= 0.0 && self.block_size.is_finite()) {
            return Err(Error::domain("block size must be finite and >= 0"));
        }
        if self.features.k_feat < 4 {
            return Err(Error::domain("feature neighbourhood needs k >= 4"));
        }
        Ok(())
    }

    pub fn layer_sizes(&self, classes: usize) -> Vec<usize> {
        let mut sizes = vec![FEATURE_DIM];
        sizes.extend(&self.hidden);
        sizes.push(classes);
        sizes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_miou: f64,
    pub val_tail_miou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, if any epoch ran.
    pub best_epoch: Option<usize>,
    /// Validation confusion matrix of the kept parameters.
    pub confusion: ConfusionMatrix,
    pub partition: ClassPartition,
    pub seed: u64,
    pub wall_clock_seconds: f64,
}

impl PartialEq for TrainReport {
    /// Wall-clock time is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.confusion == other.confusion
            && self.partition == other.partition
            && self.seed == other.seed
    }
}

impl TrainReport {
    pub const CSV_HEADER: &'static str =
        "epoch,learning_rate,train_loss,val_loss,val_miou,val_tail_miou";

    /// One row per epoch. Timing is left out so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.epochs {
            let tail = r
                .val_tail_miou
                .map_or_else(|| "NA".to_string(), |v| v.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.learning_rate, r.train_loss, r.val_loss, r.val_miou, tail
            );
        }
        out
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|e| &self.epochs[e])
    }
}

/// Features, labels and loss inputs of one batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Vec<f64>,
    pub labels: Vec<u16>,
    pub neighborhoods: Option<Neighborhoods>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Class weights and density modulators shared by every batch of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct LossContext {
    pub class_weights: Vec<f64>,
    pub density_modulators: Vec<f64>,
}

impl LossContext {
    pub fn from_stats(stats: &ClassStats, config: &LossConfig) -> Self {
        LossContext {
            class_weights: normalize_weights(&stats.weights, &stats.counts, config.weight_norm),
            density_modulators: stats.modulators_or_one(),
        }
    }

    pub fn inputs<'a>(&'a self, batch: &'a Batch) -> LossInputs<'a> {
        LossInputs {
            class_weights: Some(&self.class_weights),
            density_modulators: Some(&self.density_modulators),
            neighborhoods: batch.neighborhoods.as_ref(),
        }
    }
}

/// Point ids grouped by xy grid cell, small cells merged into the previous
/// cell in row-major order.
pub fn spatial_blocks(
    cloud: &LabeledPointCloud,
    block_size: f64,
    min_points: usize,
) -> Vec<Vec<usize>> {
    if cloud.is_empty() {
        return Vec::new();
    }
    if block_size <= 0.0 {
        return vec![(0..cloud.len()).collect()];
    }
    let mut min = [f64::INFINITY; 2];
    for p in cloud.positions() {
        min[0] = min[0].min(p[0] as f64);
        min[1] = min[1].min(p[1] as f64);
    }
    let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.positions().iter().enumerate() {
        let cx = ((p[0] as f64 - min[0]) / block_size).floor() as i64;
        let cy = ((p[1] as f64 - min[1]) / block_size).floor() as i64;
        cells.entry((cy, cx)).or_default().push(i);
    }
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut pending: Vec<usize> = Vec::new();
    for (_, ids) in cells {
        pending.extend(ids);
        if pending.len() >= min_points {
            blocks.push(std::mem::take(&mut pending));
        }
    }
    if !pending.is_empty() {
        match blocks.last_mut() {
            Some(last) => last.extend(pending),
            None => blocks.push(pending),
        }
    }
    blocks
}

/// Builds a batch from `ids`, with block-local k-neighbourhoods when the loss
/// needs them (`k` is capped at the batch size).
pub fn make_batch(
    cloud: &LabeledPointCloud,
    features: &PointFeatures,
    ids: &[usize],
    loss: &LossConfig,
    exec: Exec,
) -> Result<Batch> {
    let mut feats = Vec::with_capacity(ids.len() * FEATURE_DIM);
    for &i in ids {
        feats.extend_from_slice(&features.rows[i]);
    }
    let labels = ids.iter().map(|&i| cloud.labels()[i]).collect();
    let neighborhoods = if loss.family.uses_entropy() {
        let positions: Vec<_> = ids.iter().map(|&i| cloud.positions()[i]).collect();
        let index = SpatialIndex::from_positions(&positions)?;
        let k = if loss.include_self {
            loss.k.min(ids.len())
        } else {
            loss.k.min(ids.len() - 1)
        };
        if k == 0 {
            None
        } else {
            Some(index.knn_all(exec, k, loss.include_self)?)
        }
    } else {
        None
    };
    let neighborhoods = match (loss.family.uses_entropy(), neighborhoods) {
        (true, None) => {
            // A one-point batch without self-inclusion has nobody to ask.
            Some(Neighborhoods::new(1, vec![0])?)
        }
        (_, nb) => nb,
    };
    Ok(Batch {
        features: feats,
        labels,
        neighborhoods,
    })
}

/// Forward pass plus loss evaluation on one batch.
pub fn batch_loss(
    model: &Classifier,
    batch: &Batch,
    loss: &LossConfig,
    ctx: &LossContext,
    exec: Exec,
) -> Result<(f64, Vec<f64>, ForwardCache)> {
    let cache = model.forward(&batch.features, exec)?;
    let out = evaluate(
        loss,
        LogitBatch::new(cache.logits(), model.classes())?,
        &batch.labels,
        ctx.inputs(batch),
        exec,
    )?;
    Ok((out.loss, out.grad, cache))
}

/// Norm of the parameter gradient contributed by the points of each class.
pub fn class_gradient_norms(
    model: &Classifier,
    batch: &Batch,
    loss: &LossConfig,
    ctx: &LossContext,
    exec: Exec,
) -> Result<Vec<f64>> {
    let (_, grad, cache) = batch_loss(model, batch, loss, ctx, exec)?;
    let c = model.classes();
    (0..c)
        .map(|class| {
            let masked: Vec<f64> = grad
                .chunks(c)
                .zip(&batch.labels)
                .flat_map(|(row, &l)| {
                    let keep = l as usize == class;
                    row.iter().map(move |&g| if keep { g } else { 0.0 })
                })
                .collect();
            let g = model.backward(&cache, &masked)?;
            Ok(g.iter().map(|v| v * v).sum::<f64>().sqrt())
        })
        .collect()
}

/// Confusion matrix of `model` over a batch.
pub fn confusion(model: &Classifier, batch: &Batch, exec: Exec) -> Result<ConfusionMatrix> {
    let cache = model.forward(&batch.features, exec)?;
    ConfusionMatrix::from_predictions(model.classes(), &batch.labels, &cache.predictions())
}

/// Everything derived from the data before the first step.
pub struct Prepared {
    pub stats: ClassStats,
    pub context: LossContext,
    pub train_batches: Vec<Batch>,
    pub val_batch: Batch,
    pub train_features: Vec<f64>,
}

fn check_scenes(
    train_cloud: &LabeledPointCloud,
    val_cloud: &LabeledPointCloud,
    config: &TrainConfig,
) -> Result<()> {
    config.validate()?;
    if train_cloud.num_classes() != val_cloud.num_classes() {
        return Err(Error::domain(format!(
            "train scene has {} classes, validation scene {}",
            train_cloud.num_classes(),
            val_cloud.num_classes()
        )));
    }
    if train_cloud.is_empty() || val_cloud.is_empty() {
        return Err(Error::domain(
            "train and validation scenes must be non-empty",
        ));
    }
    Ok(())
}

pub fn prepare(
    train_cloud: &LabeledPointCloud,
    val_cloud: &LabeledPointCloud,
    config: &TrainConfig,
    exec: Exec,
) -> Result<Prepared> {
    check_scenes(train_cloud, val_cloud, config)?;
    let train_index = SpatialIndex::build(train_cloud)?;
    let val_index = SpatialIndex::build(val_cloud)?;
    let train_feats = extract_features(train_cloud, &train_index, config.features, exec)?;
    let val_feats = extract_features(val_cloud, &val_index, config.features, exec)?;
    prepare_with_features(
        train_cloud,
        val_cloud,
        &train_feats,
        &val_feats,
        config,
        exec,
    )
}

/// [`prepare`] with features computed beforehand, so several loss settings
/// can share one extraction. The features must have been extracted with
/// `config.features`.
pub fn prepare_with_features(
    train_cloud: &LabeledPointCloud,
    val_cloud: &LabeledPointCloud,
    train_feats: &PointFeatures,
    val_feats: &PointFeatures,
    config: &TrainConfig,
    exec: Exec,
) -> Result<Prepared> {
    check_scenes(train_cloud, val_cloud, config)?;
    if train_feats.config != config.features || val_feats.config != config.features {
        return Err(Error::domain(
            "features were extracted with different settings",
        ));
    }
    if train_feats.len() != train_cloud.len() || val_feats.len() != val_cloud.len() {
        return Err(Error::domain("feature rows do not match the scenes"));
    }
    let train_index = SpatialIndex::build(train_cloud)?;
    let stats = ClassStats::compute(
        train_cloud,
        &train_index,
        config.loss.beta,
        config.loss.radius,
        &config.partition,
        exec,
    )?;
    let context = LossContext::from_stats(&stats, &config.loss);
    let train_batches = spatial_blocks(train_cloud, config.block_size, config.min_block_points)
        .iter()
        .map(|ids| make_batch(train_cloud, train_feats, ids, &config.loss, exec))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<usize> = (0..val_cloud.len()).collect();
    let val_batch = make_batch(val_cloud, val_feats, &all, &config.loss, exec)?;
    let train_features = train_feats.rows.iter().flatten().copied().collect();
    Ok(Prepared {
        stats,
        context,
        train_batches,
        val_batch,
        train_features,
    })
}

/// Trains a fresh classifier and returns the parameters with the best
/// validation mIoU (the earliest epoch wins ties).
pub fn train(
    train_cloud: &LabeledPointCloud,
    val_cloud: &LabeledPointCloud,
    config: &TrainConfig,
    exec: Exec,
) -> Result<(Classifier, TrainReport)> {
    let prepared = prepare(train_cloud, val_cloud, config, exec)?;
    train_prepared(&prepared, train_cloud.num_classes(), config, exec)
}

pub fn train_prepared(
    prepared: &Prepared,
    classes: usize,
    config: &TrainConfig,
    exec: Exec,
) -> Result<(Classifier, TrainReport)> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Classifier::new(&config.layer_sizes(classes), config.features, &mut rng)?;
    model.fit_standardization(&prepared.train_features)?;
    let ctx = &prepared.context;
    let val = &prepared.val_batch;

    let mut velocity = vec![0.0; model.params().len()];
    let mut order: Vec<usize> = (0..prepared.train_batches.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Vec<f64>, ConfusionMatrix)> = None;
    let opt = &config.optimizer;
    let total_points: usize = prepared.train_batches.iter().map(Batch::len).sum();

    for epoch in 0..config.epochs {
        let lr = opt.learning_rate_at(epoch, config.epochs);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &b in &order {
            let batch = &prepared.train_batches[b];
            let (loss, grad, cache) = batch_loss(&model, batch, &config.loss, ctx, exec)?;
            if !loss.is_finite() {
                return Err(diverged(epoch, loss));
            }
            loss_sum += loss * batch.len() as f64;
            let g = model.backward(&cache, &grad)?;
            let scale = opt.clip_scale(&g);
            for ((p, v), g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&g) {
                *v = opt.momentum * *v + g * scale + opt.weight_decay * *p;
                *p -= lr * *v;
            }
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(diverged(epoch, f64::NAN));
            }
        }
        let (val_loss, _, cache) =
            batch_loss(&model, val, &config.loss, ctx, exec).map_err(|e| match e {
                Error::Domain(m) if m.contains("non-finite") => diverged(epoch, f64::NAN),
                other => other,
            })?;
        if !val_loss.is_finite() {
            return Err(diverged(epoch, val_loss));
        }
        let matrix = ConfusionMatrix::from_predictions(classes, &val.labels, &cache.predictions())?;
        let val_miou = matrix.miou_all().unwrap_or(0.0);
        records.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / total_points as f64,
            val_loss,
            val_miou,
            val_tail_miou: matrix.miou(prepared.stats.partition.tail()),
        });
        if best.as_ref().is_none_or(|(_, m, _, _)| val_miou > *m) {
            best = Some((epoch, val_miou, model.params().to_vec(), matrix));
        }
    }

    let (best_epoch, confusion) = match best {
        Some((epoch, _, params, matrix)) => {
            model.params_mut().copy_from_slice(&params);
            (Some(epoch), matrix)
        }
        None => (None, self::confusion(&model, val, exec)?),
    };
    let report = TrainReport {
        epochs: records,
        best_epoch,
        confusion,
        partition: prepared.stats.partition.clone(),
        seed: config.seed,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

fn diverged(epoch: usize, loss: f64) -> Error {
    Error::Divergence(format!(
        "loss became {loss} in epoch {epoch}; lower the learning rate"
    ))
}
