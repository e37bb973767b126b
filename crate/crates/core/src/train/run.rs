use rand::Rng;
use serde::Serialize;

use super::optim::{apply_schedules, he_init, Adam, Schedule};
use crate::data::{augment, input_dropout, AugmentationConfig};
use crate::geometry::PointCloud;
use crate::networks::{Hierarchy, Network, NetworkConfig, Task};
use crate::rng::{self, Stream};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Exec, Result};

const INIT_TAG: u64 = 0x1417;
const TRAIN_TAG: u64 = 0x7A15;
const EVAL_TAG: u64 = 0xE7A1;

/// Factor applied to the output layer's He-initialised weights so that the
/// initial predictions are close to uniform.
pub const OUTPUT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub augmentation: AugmentationConfig,
    pub seed: u64,
    pub exec: Exec,
    /// Test-set evaluation period in epochs; 0 evaluates only after the
    /// last epoch.
    pub eval_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            schedule: Schedule::default(),
            augmentation: AugmentationConfig::default(),
            seed: 0,
            exec: Exec::default(),
            eval_every: 0,
        }
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    /// Classification: fraction of clouds right. Segmentation: fraction of
    /// points right. Normals: mean cosine between prediction and truth.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// Mean angle between predicted and true normals, normal estimation only.
    pub mean_angle_deg: Option<f64>,
}

/// Sum-of-terms accumulator behind an [`Evaluation`].
#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    loss_sum: f64,
    batches: usize,
    hits: f64,
    count: usize,
    angle_sum: f64,
}

impl Tally {
    fn finish(self, task: Task) -> Evaluation {
        let count = self.count.max(1) as f64;
        Evaluation {
            loss: self.loss_sum / self.batches.max(1) as f64,
            accuracy: self.hits / count,
            mean_angle_deg: (task == Task::NormalEstimation).then(|| self.angle_sum / count),
        }
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn shape_label(h: &Hierarchy) -> Result<usize> {
    h.levels[0]
        .shape_label
        .ok_or_else(|| Error::Invalid("cloud has no shape label".into()))
}

/// Builds the task's forward pass and loss for one batch; returns the loss
/// node, the raw output node and the batch's contribution to the tally.
fn forward_loss<T: Real>(
    tape: &mut Tape<T>,
    network: &Network,
    hs: &[&Hierarchy],
    training: bool,
    rng: &mut Stream,
) -> Result<(Var, Var, Tally)> {
    let mut tally = Tally::default();
    let config = &network.config;
    match config.task {
        Task::Classification => {
            let labels = hs.iter().map(|h| shape_label(h)).collect::<Result<Vec<_>>>()?;
            if let Some(&l) = labels.iter().find(|&&l| l >= config.num_classes) {
                return Err(Error::Invalid(format!("label {l} outside {} classes", config.num_classes)));
            }
            let out = network.classify(tape, hs, training, rng)?;
            let loss = tape.softmax_cross_entropy(out, &labels)?;
            let logits = tape.value(out);
            for (row, &l) in logits.chunks(config.num_classes).zip(&labels) {
                let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                tally.hits += f64::from(argmax(&row) == l);
            }
            tally.count = labels.len();
            Ok((loss, out, tally))
        }
        Task::Segmentation => {
            let mut targets = Vec::new();
            for h in hs {
                let labels = h.levels[0]
                    .point_labels
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("segmentation needs per-point labels".into()))?;
                targets.extend_from_slice(labels);
            }
            if let Some(&l) = targets.iter().find(|&&l| l >= config.num_classes) {
                return Err(Error::Invalid(format!("part label {l} outside {} parts", config.num_classes)));
            }
            let onehot = if config.onehot_classes > 0 {
                Some(hs.iter().map(|h| shape_label(h)).collect::<Result<Vec<_>>>()?)
            } else {
                None
            };
            let out = network.segment(tape, hs, onehot.as_deref(), training, rng)?;
            let loss = tape.softmax_cross_entropy(out, &targets)?;
            for (row, &l) in tape.value(out).chunks(config.num_classes).zip(&targets) {
                let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                tally.hits += f64::from(argmax(&row) == l);
            }
            tally.count = targets.len();
            Ok((loss, out, tally))
        }
        Task::NormalEstimation => {
            let mut target = Vec::new();
            for h in hs {
                let normals = h.levels[0]
                    .normals
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("normal estimation needs ground-truth normals".into()))?;
                target.extend(normals.iter().flatten().map(|&v| T::lit(v)));
            }
            let rows = target.len() / 3;
            let target = Tensor::new(vec![rows, 3], target)?;
            let out = network.normals(tape, hs, training, rng)?;
            let loss = tape.cosine_loss(out, &target)?;
            for (p, t) in tape.value(out).chunks(3).zip(target.data().chunks(3)) {
                let cos = (0..3).map(|a| p[a].as_f64() * t[a].as_f64()).sum::<f64>().clamp(-1.0, 1.0);
                tally.hits += cos;
                tally.angle_sum += cos.acos().to_degrees();
            }
            tally.count = rows;
            Ok((loss, out, tally))
        }
    }
}

fn eval_stream(seed: u64, index: usize, vote: usize) -> Stream {
    rng::stream(seed, &[EVAL_TAG, index as u64, vote as u64])
}

/// Parameters, optimizer state and epoch counter of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub network: Network,
    pub store: ParamStore<f32>,
    pub opt: Adam<f32>,
    /// Next epoch to run.
    pub epoch: usize,
}

impl Trainer {
    /// Fresh He-initialised network, output layer scaled down by
    /// [`OUTPUT_INIT_SCALE`].
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let network = Network::build(config, &mut store)?;
        he_init(&mut store, &mut rng::stream(seed, &[INIT_TAG]));
        if let Some(out) = network.head.last() {
            let k = f32::lit(OUTPUT_INIT_SCALE);
            store.get_mut(out.weight).value.data_mut().iter_mut().for_each(|w| *w *= k);
        }
        let opt = Adam::new(&store, Schedule::default().lr(0));
        Ok(Self {
            network,
            store,
            opt,
            epoch: 0,
        })
    }

    /// One pass over `data` in seeded random order; returns the mean batch
    /// loss and the accuracy of the training-mode outputs.
    pub fn run_epoch(&mut self, data: &[PointCloud], opts: &TrainOptions) -> Result<EpochMetrics> {
        if data.len() < 2 {
            return Err(Error::Invalid("training needs at least 2 clouds".into()));
        }
        if opts.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 (batch normalisation)".into()));
        }
        let epoch = self.epoch;
        apply_schedules(&opts.schedule, epoch, &mut self.opt, &mut self.store);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle = rng::stream(opts.seed, &[TRAIN_TAG, epoch as u64]);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle.random_range(0..=i));
        }
        let mut batches: Vec<&[usize]> = order.chunks(opts.batch_size).collect();
        // A lone trailing cloud cannot be batch-normalised; fold it into the
        // previous batch.
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            batches.pop();
            let n = batches.len();
            batches[n - 1] = &order[(n - 1) * opts.batch_size..];
        }

        let mut tally = Tally::default();
        for (b, batch) in batches.iter().enumerate() {
            let hs: Vec<Hierarchy> = opts
                .exec
                .map(batch, |&i| {
                    let mut r = rng::stream(opts.seed, &[TRAIN_TAG, epoch as u64, i as u64]);
                    let cloud = augment(&data[i], &opts.augmentation, &mut r);
                    let cloud = input_dropout(&cloud, opts.augmentation.input_dropout, &mut r);
                    self.network.prepare(&cloud, &mut r)
                })
                .into_iter()
                .collect::<Result<_>>()?;
            let refs: Vec<&Hierarchy> = hs.iter().collect();
            let mut r = rng::stream(opts.seed, &[TRAIN_TAG, epoch as u64, u64::MAX, b as u64]);
            let mut tape = Tape::with_exec(&self.store, opts.exec);
            let (loss, _, t) = forward_loss(&mut tape, &self.network, &refs, true, &mut r)?;
            let value = tape.value(loss)[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Invalid(format!(
                    "non-finite loss {value} at epoch {epoch}, batch {b} (seed {})",
                    opts.seed
                )));
            }
            let grads = tape.backward(loss)?;
            let updates = tape.take_bn_updates();
            drop(tape);
            self.store.accumulate(&grads);
            self.store.apply_bn_updates(&updates);
            self.opt.step(&mut self.store)?;
            tally.loss_sum += value;
            tally.batches += 1;
            tally.hits += t.hits;
            tally.count += t.count;
            tally.angle_sum += t.angle_sum;
        }
        self.epoch += 1;
        let e = tally.finish(self.network.config.task);
        Ok(EpochMetrics {
            epoch,
            split: "train",
            loss: e.loss,
            accuracy: e.accuracy,
        })
    }

    /// Runs epochs until `opts.epochs` have completed, evaluating on `test`
    /// as configured. `on_epoch` sees every metrics row as it is produced.
    pub fn train(
        &mut self,
        train: &[PointCloud],
        test: Option<&[PointCloud]>,
        opts: &TrainOptions,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        opts.schedule.validate()?;
        opts.augmentation.validate()?;
        let mut rows = Vec::new();
        while self.epoch < opts.epochs {
            let m = self.run_epoch(train, opts)?;
            on_epoch(&m);
            rows.push(m);
            let done = self.epoch;
            let due = (opts.eval_every > 0 && done % opts.eval_every == 0) || done == opts.epochs;
            if let (Some(test), true) = (test, due) {
                let e = evaluate(&self.network, &self.store, test, opts.seed, opts.exec, opts.batch_size)?;
                let m = EpochMetrics {
                    epoch: done - 1,
                    split: "test",
                    loss: e.loss,
                    accuracy: e.accuracy,
                };
                on_epoch(&m);
                rows.push(m);
            }
        }
        Ok(rows)
    }
}

fn prepare_eval(network: &Network, clouds: &[PointCloud], offset: usize, seed: u64, exec: Exec) -> Result<Vec<Hierarchy>> {
    exec.map_range(clouds.len(), |i| network.prepare(&clouds[i], &mut eval_stream(seed, offset + i, 0)))
        .into_iter()
        .collect()
}

/// Inference-mode loss and accuracy. Sampling for cloud `i` uses a stream
/// keyed by `(seed, i)`, so results do not depend on `batch_size`.
pub fn evaluate<T: Real>(
    network: &Network,
    store: &ParamStore<T>,
    clouds: &[PointCloud],
    seed: u64,
    exec: Exec,
    batch_size: usize,
) -> Result<Evaluation> {
    if clouds.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    let mut tally = Tally::default();
    let mut offset = 0;
    for chunk in clouds.chunks(batch_size.max(1)) {
        let hs = prepare_eval(network, chunk, offset, seed, exec)?;
        let refs: Vec<&Hierarchy> = hs.iter().collect();
        let mut tape = Tape::with_exec(store, exec);
        let (loss, _, t) = forward_loss(&mut tape, network, &refs, false, &mut eval_stream(seed, usize::MAX, 0))?;
        // Weight by batch size so the mean loss is per cloud.
        tally.loss_sum += tape.value(loss)[0].as_f64() * chunk.len() as f64;
        tally.batches += chunk.len();
        tally.hits += t.hits;
        tally.count += t.count;
        tally.angle_sum += t.angle_sum;
        offset += chunk.len();
    }
    Ok(tally.finish(network.config.task))
}

/// Inference-mode classifier logits, one row per cloud.
pub fn predict_logits<T: Real>(
    network: &Network,
    store: &ParamStore<T>,
    clouds: &[PointCloud],
    seed: u64,
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(clouds.len());
    let mut offset = 0;
    for chunk in clouds.chunks(32) {
        let hs = prepare_eval(network, chunk, offset, seed, exec)?;
        let refs: Vec<&Hierarchy> = hs.iter().collect();
        out.extend(logits(network, store, &refs, exec)?);
        offset += chunk.len();
    }
    Ok(out)
}

/// Inference-mode class probabilities, one row per cloud.
pub fn predict<T: Real>(
    network: &Network,
    store: &ParamStore<T>,
    clouds: &[PointCloud],
    seed: u64,
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    Ok(predict_logits(network, store, clouds, seed, exec)?.iter().map(|r| softmax(r)).collect())
}

fn logits<T: Real>(network: &Network, store: &ParamStore<T>, hs: &[&Hierarchy], exec: Exec) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::with_exec(store, exec);
    let out = network.classify(&mut tape, hs, false, &mut rng::stream(0, &[]))?;
    Ok(tape
        .value(out)
        .chunks(network.config.num_classes)
        .map(|row| row.iter().map(|v| v.as_f64()).collect())
        .collect())
}

/// Averages class probabilities over `votes` randomly scaled copies of
/// `cloud` (scaling only, from the augmentation's scale range). `index`
/// keys the sampling streams; vote 0 shares its stream with [`predict`].
pub fn vote_predict<T: Real>(
    network: &Network,
    store: &ParamStore<T>,
    cloud: &PointCloud,
    index: usize,
    votes: usize,
    scaling: &AugmentationConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if votes == 0 {
        return Err(Error::Invalid("votes must be at least 1".into()));
    }
    let scale_only = AugmentationConfig {
        translation_range: 0.0,
        input_dropout: 0.0,
        ..*scaling
    };
    let mut hs = Vec::with_capacity(votes);
    for v in 0..votes {
        let mut r = eval_stream(seed, index, v);
        let copy = augment(cloud, &scale_only, &mut rng::stream(seed, &[EVAL_TAG, index as u64, v as u64, 1]));
        hs.push(network.prepare(&copy, &mut r)?);
    }
    let refs: Vec<&Hierarchy> = hs.iter().collect();
    let probs: Vec<Vec<f64>> = logits(network, store, &refs, Exec::Sequential)?.iter().map(|r| softmax(r)).collect();
    let k = network.config.num_classes;
    let mut mean = vec![0.0; k];
    for p in &probs {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / votes as f64;
        }
    }
    Ok(mean)
}

/// Voted accuracy over a labelled set.
pub fn vote_accuracy<T: Real>(
    network: &Network,
    store: &ParamStore<T>,
    clouds: &[PointCloud],
    votes: usize,
    scaling: &AugmentationConfig,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    let hits = exec
        .map_range(clouds.len(), |i| -> Result<f64> {
            let p = vote_predict(network, store, &clouds[i], i, votes, scaling, seed)?;
            let label = clouds[i]
                .shape_label
                .ok_or_else(|| Error::Invalid(format!("cloud {i} has no shape label")))?;
            Ok(f64::from(argmax(&p) == label))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<f64>() / clouds.len() as f64)
}
