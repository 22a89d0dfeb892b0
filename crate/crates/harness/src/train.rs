//! Mini-batch SGD training and eval-mode evaluation.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use tdaf_core::params::named_rng;
use tdaf_core::{Mode, R2dnsModel, Sgd, Tape, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetKind, RunConfig};
use crate::data::{assemble_batch, load_cifar10, load_synthetic, synthetic_split, Augment, Dataset, Normalization};
use crate::error::{HarnessError, Result};
use crate::metrics::{summarize, Event, MetricsLog, MetricsSummary};

pub fn build_model(cfg: &RunConfig) -> Result<R2dnsModel<f32>> {
    Ok(R2dnsModel::build(&cfg.model_config(), cfg.seed)?)
}

pub fn normalization(cfg: &RunConfig) -> Normalization {
    Normalization {
        mean: cfg.mean,
        std: cfg.std,
    }
}

/// Train and test sets named by the config, truncated to the configured sizes.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match (cfg.dataset, &cfg.data_dir) {
        (DatasetKind::Cifar10, Some(dir)) => load_cifar10(dir)?,
        (DatasetKind::Cifar10, None) => return Err(HarnessError::Invalid("cifar10 needs data.dir".into())),
        (DatasetKind::Synthetic, Some(dir)) => load_synthetic(dir)?,
        (DatasetKind::Synthetic, None) => synthetic_split(cfg.data_seed, cfg.train_samples, cfg.test_samples)?,
    };
    let take = |ds: Dataset, n: usize| {
        if ds.len() > n {
            ds.subset(&(0..n).collect::<Vec<_>>())
        } else {
            ds
        }
    };
    Ok((take(train, cfg.train_samples), take(test, cfg.test_samples)))
}

fn argmax_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let classes = logits.channels();
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == l
        })
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub loss: f32,
    pub correct: usize,
}

/// One forward/backward/update on a prepared batch.
pub fn train_step(
    model: &mut R2dnsModel<f32>,
    opt: &mut Sgd<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    lr: f64,
    step: usize,
) -> Result<StepResult> {
    let mut tape = Tape::new();
    let (loss, out) = model.loss(&mut tape, images, labels, Mode::Train)?;
    let loss_value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    if !loss_value.is_finite() {
        let max_grad = grads
            .params()
            .iter()
            .map(|(_, g)| g.max_abs() as f64)
            .fold(0.0, f64::max);
        return Err(HarnessError::NonFinite { step, lr, max_grad });
    }
    grads.accumulate_into(&mut model.store);
    opt.step(&mut model.store, lr)?;
    Ok(StepResult {
        loss: loss_value,
        correct: argmax_correct(tape.value(out.logits), labels),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Eval-mode top-1 accuracy and mean cross-entropy over a single center view.
pub fn evaluate(model: &mut R2dnsModel<f32>, ds: &Dataset, norm: &Normalization, batch: usize) -> Result<EvalReport> {
    let mut correct = 0;
    let mut loss_sum = 0.0f64;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch) {
        let (x, labels) = assemble_batch(ds, chunk, norm, None);
        let mut tape = Tape::new();
        let (loss, out) = model.loss(&mut tape, &x, &labels, Mode::Eval)?;
        loss_sum += tape.value(loss).item() as f64 * chunk.len() as f64;
        correct += argmax_correct(tape.value(out.logits), &labels);
    }
    let n = ds.len().max(1);
    Ok(EvalReport {
        samples: ds.len(),
        correct,
        accuracy: correct as f64 / n as f64,
        mean_loss: loss_sum / n as f64,
    })
}

/// Loads `ckpt` into a fresh model built from `cfg`, then evaluates.
pub fn evaluate_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint, ds: &Dataset) -> Result<EvalReport> {
    let mut model = build_model(cfg)?;
    ckpt.restore(&mut model.store)?;
    evaluate(&mut model, ds, &normalization(cfg), cfg.eval_batch_size)
}

pub struct TrainOutcome {
    pub summary: MetricsSummary,
    pub log: MetricsLog,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub steps: usize,
}

/// Runs the configured epochs. With `out` set, writes `config.txt`,
/// `metrics.csv`, `timing.csv`, `best.ckpt` and `final.ckpt` there.
pub fn train(cfg: &RunConfig, train_set: &Dataset, test_set: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = build_model(cfg)?;
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
            let p = dir.join("config.txt");
            std::fs::write(&p, cfg.to_text()).map_err(|e| HarnessError::io(&p, e))?;
            MetricsLog::create(dir)?
        }
        None => MetricsLog::in_memory(),
    };
    let norm = normalization(cfg);
    let schedule = cfg.schedule();
    let mut opt = Sgd::new(cfg.sgd());
    let mut shuffle_rng = named_rng(cfg.seed, "shuffle");
    let mut augment_rng = named_rng(cfg.seed, "augment");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = schedule.lr_at(epoch - 1);
        order.shuffle(&mut shuffle_rng);
        let (mut seen, mut correct, mut loss_sum) = (0usize, 0usize, 0f64);
        for chunk in order.chunks(cfg.batch_size) {
            let augment = cfg.augment_enabled().then(|| Augment { rng: &mut augment_rng });
            let (x, labels) = assemble_batch(train_set, chunk, &norm, augment);
            step += 1;
            let r = train_step(&mut model, &mut opt, &x, &labels, lr, step)?;
            seen += chunk.len();
            correct += r.correct;
            loss_sum += r.loss as f64 * chunk.len() as f64;
            log.push(Event::Step {
                epoch,
                step,
                lr,
                loss: r.loss,
            })?;
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                close_epoch(&mut model, cfg, test_set, &norm, &mut log, &mut best, (epoch, step, lr), (seen, correct, loss_sum), started)?;
                break 'epochs;
            }
        }
        close_epoch(&mut model, cfg, test_set, &norm, &mut log, &mut best, (epoch, step, lr), (seen, correct, loss_sum), started)?;
    }
    let last = Checkpoint::from_store(&model.store);
    let (_, best) = best.expect("at least one epoch ran");
    if let Some(dir) = out {
        best.save(&dir.join("best.ckpt"))?;
        last.save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome {
        summary: summarize(log.events())?,
        log,
        best,
        last,
        steps: step,
    })
}

#[allow(clippy::too_many_arguments)]
fn close_epoch(
    model: &mut R2dnsModel<f32>,
    cfg: &RunConfig,
    test_set: &Dataset,
    norm: &Normalization,
    log: &mut MetricsLog,
    best: &mut Option<(f64, Checkpoint)>,
    (epoch, step, lr): (usize, usize, f64),
    (seen, correct, loss_sum): (usize, usize, f64),
    started: Instant,
) -> Result<()> {
    let eval = evaluate(model, test_set, norm, cfg.eval_batch_size)?;
    log.push(Event::Epoch {
        epoch,
        step,
        lr,
        loss: loss_sum / seen.max(1) as f64,
        train_acc: correct as f64 / seen.max(1) as f64,
        test_acc: eval.accuracy,
        test_loss: eval.mean_loss,
    })?;
    log.record_time(epoch, started.elapsed().as_secs_f64())?;
    if best.as_ref().is_none_or(|(acc, _)| eval.accuracy > *acc) {
        *best = Some((eval.accuracy, Checkpoint::from_store(&model.store)));
    }
    Ok(())
}
