//! Mini-batch training loop and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::encoders::{PostRecord, SocialGraph};
use crate::error::{Error, Result};
use crate::fusion::{predictions, LossBreakdown};

use super::config::TrainConfig;
use super::data::{split_dataset, DatasetBundle, Split};
use super::metrics::{EpochRecord, MetricsReport};
use super::model::{ForwardOptions, Model};
use super::optim::{Adam, NoHook, UpdateHook};

/// Offset separating the shuffling/dropout stream from parameter init.
const LOOP_SEED_OFFSET: u64 = 0x0b5e_55ed;

/// Where training stopped on a non-finite loss or gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation accuracy (the initial ones when
    /// no epoch ran).
    pub model: Model,
    /// Validation metrics of `model`, with the full per-epoch history.
    pub report: MetricsReport,
    /// Zero-based epoch `model` was taken from.
    pub best_epoch: Option<usize>,
    pub divergence: Option<Divergence>,
}

/// Splits `data` with the configured fractions unless it already carries
/// an assignment.
pub fn ensure_split(data: &DatasetBundle, config: &TrainConfig) -> Result<DatasetBundle> {
    if data.assignment.len() == data.posts.len() && !data.posts.is_empty() {
        return Ok(data.clone());
    }
    split_dataset(data.clone(), &config.split, config.seed)
}

/// Consecutive batches of `order`; a trailing batch of one joins the
/// previous batch so every batch has at least two posts.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(last);
        }
    }
    out
}

pub fn train(config: &TrainConfig, data: &DatasetBundle) -> Result<TrainOutcome> {
    train_with_hook(config, data, &mut NoHook)
}

pub fn train_with_hook(
    config: &TrainConfig,
    data: &DatasetBundle,
    hook: &mut dyn UpdateHook,
) -> Result<TrainOutcome> {
    config.validate()?;
    data.validate()?;
    let data = ensure_split(data, config)?;
    let train_idx = data.indices(Split::Train);
    let val_idx = data.indices(Split::Val);
    if train_idx.len() < 2 {
        return Err(Error::invalid(format!(
            "training split has {} posts, need at least 2",
            train_idx.len()
        )));
    }

    let mut model = Model::for_data(config.clone(), &data)?;
    let graph = model.build_graph(&data)?;
    let mut adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(LOOP_SEED_OFFSET));

    let mut best: Option<(f64, usize, Model)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let mut divergence = None;
    let mut order = train_idx.clone();

    'epochs: for epoch in 0..config.epochs {
        let lr = config.lr * config.lr_decay.powi(epoch as i32);
        order.shuffle(&mut rng);
        let mut steps = Vec::new();
        for (step, batch) in batches(&order, config.batch_size).into_iter().enumerate() {
            let posts: Vec<&PostRecord> = batch.iter().map(|&i| &data.posts[i]).collect();
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let out = model.forward(
                &tape,
                &bound,
                &graph,
                &posts,
                ForwardOptions::train(),
                &mut rng,
            )?;
            let (Some(loss), Some(terms)) = (out.loss, out.terms) else {
                return Err(Error::invalid("training forward pass produced no loss"));
            };
            let breakdown = terms.breakdown(&tape, config.lambda);
            let mut grads = tape.backward(loss)?;
            let mut grads = bound.collect(&mut grads, &model.params)?;
            hook.before_update(&model.params, &mut grads)?;
            if !breakdown.is_finite() || grads.values().any(|g| !g.is_finite()) {
                divergence = Some(Divergence { epoch, step });
                break 'epochs;
            }
            adam.step(&mut model.params, &grads, lr)?;
            steps.push(breakdown);
        }
        let val_acc = if val_idx.is_empty() {
            0.0
        } else {
            accuracy(&model, &graph, &data, &val_idx, false)?
        };
        if best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, epoch, model.clone()));
        }
        history.push(EpochRecord {
            epoch,
            lr,
            loss: LossBreakdown::mean(&steps),
            steps,
            val_acc,
        });
    }

    let (model, best_epoch) = match best {
        Some((_, epoch, m)) => (m, Some(epoch)),
        None => (model, None),
    };
    let mut report = if val_idx.is_empty() {
        MetricsReport::default()
    } else {
        evaluate_indices(&model, &graph, &data, &val_idx, false)?
    };
    report.history = history;
    Ok(TrainOutcome {
        model,
        report,
        best_epoch,
        divergence,
    })
}

fn accuracy(
    model: &Model,
    graph: &SocialGraph,
    data: &DatasetBundle,
    idx: &[usize],
    zero_social: bool,
) -> Result<f64> {
    Ok(evaluate_indices(model, graph, data, idx, zero_social)?.acc)
}

/// Metrics of `model` on the posts at `indices` of `data`.
pub fn evaluate_indices(
    model: &Model,
    graph: &SocialGraph,
    data: &DatasetBundle,
    indices: &[usize],
    zero_social: bool,
) -> Result<MetricsReport> {
    if indices.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty split"));
    }
    let probs = model.predict_proba(graph, data, indices, zero_social)?;
    let truth: Vec<u8> = indices.iter().map(|&i| data.posts[i].label).collect();
    MetricsReport::from_predictions(&predictions(&probs), &truth)
}

/// Deterministic metrics on one split; the data is split with the model's
/// configuration when it carries no assignment yet.
pub fn evaluate(model: &Model, data: &DatasetBundle, split: Split) -> Result<MetricsReport> {
    evaluate_with(model, data, split, false)
}

/// As [`evaluate`], optionally replacing the social representation by zeros.
pub fn evaluate_with(
    model: &Model,
    data: &DatasetBundle,
    split: Split,
    zero_social: bool,
) -> Result<MetricsReport> {
    let data = ensure_split(data, &model.config)?;
    let graph = model.build_graph(&data)?;
    evaluate_indices(model, &graph, &data, &data.indices(split), zero_social)
}
