//! The training loop: identity-balanced sampling, augmentation, the full
//! forward/backward pass, SGD updates on the warmup-cosine schedule, and
//! JSON-lines metrics.

use std::io::Write;

use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use serde::Serialize;
use thiserror::Error;

use crate::config::RunConfig;
use crate::data::{augment, sample_batch, DataError, Dataset, SpectralTriple};
use crate::model::{LossReport, Model};
use crate::optim::{lr_at, sgd_step};
use crate::tensor::{ParamStore, Scalar, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("metrics log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Serialize)]
struct StepRecord<'a> {
    step: usize,
    lr: f64,
    #[serde(flatten)]
    loss: &'a LossReport,
}

/// Run up to `total_steps` of training, logging one JSON object per step.
/// `stop` may end the run early (it sees the step index and its report);
/// returns every step's report.
pub fn train<F: Scalar>(
    cfg: &RunConfig,
    dataset: &Dataset,
    model: &Model,
    store: &mut ParamStore<F>,
    mut log: Option<&mut dyn Write>,
    mut stop: Option<&mut dyn FnMut(usize, &LossReport) -> bool>,
) -> Result<Vec<LossReport>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(7));
    let mut reports = Vec::new();
    for step in 0..cfg.optimizer.total_steps {
        let idx = sample_batch(dataset, &cfg.sampler, cfg.seed, step as u64)?;
        let batch: Vec<SpectralTriple> = idx
            .iter()
            .map(|&i| augment(&dataset.triples[i], &cfg.augment, &mut rng))
            .collect();
        let refs: Vec<&SpectralTriple> = batch.iter().collect();

        let mut tape = crate::tensor::Tape::<F>::new();
        let bind = store.bind(&mut tape);
        let dropout = (cfg.encoder.dropout > 0.0).then_some((&mut rng, cfg.encoder.dropout));
        let (total, report) = model.forward_batch_losses(&mut tape, &bind, &refs, dataset, dropout)?;
        if !report.total.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        let grads = tape.backward(total)?;
        sgd_step(store, &bind, &grads, &cfg.optimizer, step);

        if let Some(log) = log.as_deref_mut() {
            let record = StepRecord {
                step,
                lr: lr_at(&cfg.optimizer, step),
                loss: &report,
            };
            serde_json::to_writer(&mut *log, &record)
                .map_err(|e| TrainError::Io(std::io::Error::other(e)))?;
            writeln!(log)?;
        }
        let done = stop.as_mut().is_some_and(|f| f(step, &report));
        reports.push(report);
        if done {
            break;
        }
    }
    Ok(reports)
}
