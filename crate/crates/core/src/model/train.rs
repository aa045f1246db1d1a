use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, score, BackboneConfig, Model, Prepared};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::tensor::{Adam, Graph, ParamId, Tensor};

pub const DEFAULT_BATCH: usize = 64;
pub const DEFAULT_DECODER_BATCH: usize = 24;
pub const DEFAULT_TOY_LR: f64 = 1e-3;
pub const DEFAULT_FILE_LR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Defaults to 64, or 24 when the decoder head is present.
    pub batch_size: Option<usize>,
    /// Defaults to 1e-3 for the toy encoder and 1e-5 for file-backed states.
    pub learning_rate: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after the first epoch whose full-pass train micro-F1 reaches this.
    pub target_train_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: None, learning_rate: None, epochs: 6, seed: 0, target_train_f1: None }
    }
}

impl TrainConfig {
    pub fn batch_size_for(&self, model: &Model) -> usize {
        self.batch_size.unwrap_or(if model.config.heads.has_decoder() { DEFAULT_DECODER_BATCH } else { DEFAULT_BATCH })
    }

    pub fn learning_rate_for(&self, model: &Model) -> f64 {
        self.learning_rate.unwrap_or(match model.config.backbone {
            BackboneConfig::Toy => DEFAULT_TOY_LR,
            BackboneConfig::File { .. } => DEFAULT_FILE_LR,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == Some(0) {
            return Err(Error::config("batch_size must be positive"));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("learning_rate {lr} must be positive")));
            }
        }
        if let Some(t) = self.target_train_f1 {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config(format!("target_train_f1 {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Optimizer state and counters, enough to resume.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub optimizer: Adam,
    /// Optimizer updates applied so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    /// Mean per-instance loss over the epoch.
    pub loss: f64,
    /// Micro-F1 of the predictions made while training this epoch.
    pub running_micro_f1: f64,
    /// Full-pass train micro-F1, computed when checking the early-stop target.
    pub train_micro_f1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub trace: Vec<EpochRecord>,
    pub stopped_early: bool,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn predicted_index(logits: &Tensor) -> usize {
    argmax(logits.data())
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Divergence { step, message: format!("non-finite value in {op}") },
        other => other,
    }
}

/// Loss, predicted label index and scaled parameter gradients of one instance.
type InstancePass = (f64, usize, Vec<(ParamId, Tensor)>);

fn instance_pass(model: &Model, p: &Prepared, scale: f64) -> Result<InstancePass> {
    let mut g = Graph::with_params(&model.store);
    let r = model.record(&mut g, p)?;
    let loss = g.value(r.loss).scalar_value()?;
    let pred = predicted_index(g.value(r.logits));
    let grads = g.backward_scaled(r.loss, scale)?.into_param_grads(&g);
    Ok((loss, pred, grads))
}

/// Mini-batch Adam over `corpus`. Batches are shuffled per epoch from
/// `cfg.seed` and the epoch number, so a resumed run replays the same order.
pub fn train(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus has no instances".into()));
    }
    let prepared = model.prepare_corpus(corpus)?;
    let batch_size = cfg.batch_size_for(model);
    let lr = cfg.learning_rate_for(model);
    let mut state = match resume {
        Some(mut s) => {
            s.optimizer.lr = lr;
            s
        }
        None => TrainState { optimizer: Adam::new(&model.store, lr), step: 0, epoch: 0 },
    };
    let mut trace = Vec::new();
    let mut stopped_early = false;
    while state.epoch < cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(state.epoch as u64)));
        let mut loss_sum = 0.0;
        let mut pairs = Vec::with_capacity(order.len());
        for batch in order.chunks(batch_size) {
            let scale = 1.0 / batch.len() as f64;
            model.store.zero_grads();
            for &i in batch {
                let p = &prepared[i];
                let (loss, pred, grads) = instance_pass(model, p, scale).map_err(|e| diverged(state.step, e))?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        step: state.step,
                        message: format!("loss {loss} on instance {}", p.id),
                    });
                }
                loss_sum += loss;
                pairs.push((model.relations[p.label].clone(), model.relations[pred].clone()));
                for (id, g) in &grads {
                    model.store.accumulate(*id, g, 1.0)?;
                }
            }
            state.optimizer.step(&mut model.store).map_err(|e| diverged(state.step, e))?;
            state.step += 1;
        }
        state.epoch += 1;
        let running = score(pairs.iter().map(|(a, b)| (a.as_str(), b.as_str()))).micro_f1;
        let mut record = EpochRecord {
            epoch: state.epoch,
            step: state.step,
            loss: loss_sum / prepared.len() as f64,
            running_micro_f1: running,
            train_micro_f1: None,
        };
        if let Some(target) = cfg.target_train_f1 {
            if running >= target - 0.05 {
                let full = evaluate(model, corpus)?.0.micro_f1;
                record.train_micro_f1 = Some(full);
                stopped_early = full >= target;
            }
        }
        trace.push(record);
        if stopped_early {
            break;
        }
    }
    Ok(TrainOutcome { state, trace, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_config, tiny_corpus};
    use crate::tensor::{grad_check_params, GradCheckOptions};

    #[test]
    fn one_step_lowers_the_loss() {
        let corpus = tiny_corpus();
        let one = Corpus::new(corpus.instances[..1].to_vec(), corpus.split).unwrap();
        let mut model = Model::for_corpus(tiny_config("h3"), &corpus, 1).unwrap();
        let batch = model.prepare_corpus(&one).unwrap();
        let before = model.loss(&batch).unwrap();
        let cfg = TrainConfig { epochs: 2, learning_rate: Some(0.01), ..TrainConfig::default() };
        train(&mut model, &one, &cfg, None).unwrap();
        assert!(model.loss(&batch).unwrap() < before);
    }

    #[test]
    fn zero_epochs_leave_parameters_alone() {
        let corpus = tiny_corpus();
        let mut model = Model::for_corpus(tiny_config("h1,h3"), &corpus, 1).unwrap();
        let before = model.param_values();
        let out = train(&mut model, &corpus, &TrainConfig { epochs: 0, ..TrainConfig::default() }, None).unwrap();
        assert_eq!(model.param_values(), before);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn fixed_seed_reproduces_the_trace() {
        let corpus = tiny_corpus();
        let run = || {
            let mut model = Model::for_corpus(tiny_config("h3,decoder"), &corpus, 5).unwrap();
            let cfg = TrainConfig { epochs: 2, batch_size: Some(3), seed: 9, ..TrainConfig::default() };
            let out = train(&mut model, &corpus, &cfg, None).unwrap();
            (out.trace, model.param_values())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resuming_continues_the_step_counter() {
        let corpus = tiny_corpus();
        let cfg = |epochs| TrainConfig { epochs, batch_size: Some(4), seed: 2, ..TrainConfig::default() };
        let mut straight = Model::for_corpus(tiny_config("h3"), &corpus, 5).unwrap();
        let full = train(&mut straight, &corpus, &cfg(2), None).unwrap();
        let mut resumed = Model::for_corpus(tiny_config("h3"), &corpus, 5).unwrap();
        let first = train(&mut resumed, &corpus, &cfg(1), None).unwrap();
        assert_eq!(first.state.step, 2);
        let second = train(&mut resumed, &corpus, &cfg(2), Some(first.state)).unwrap();
        assert_eq!(second.state.step, full.state.step);
        assert_eq!(resumed.param_values(), straight.param_values());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let corpus = tiny_corpus();
        let model = Model::for_corpus(tiny_config("h3"), &corpus, 4).unwrap();
        let p = model.prepare(&corpus.instances[0]).unwrap();
        // Nonzero classifier weights so gradients reach the encoder.
        let mut store = model.store.clone();
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).name.starts_with("classifier") {
                let shape = store.value(id).shape().to_vec();
                let n: usize = shape.iter().product();
                let vals = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
                store.get_mut(id).value = Tensor::new(shape, vals).unwrap();
            }
        }
        let report = grad_check_params(
            &store,
            |g| Ok(model.record(g, &p)?.loss),
            &GradCheckOptions { max_coords: Some(6), floor: 1e-5, ..GradCheckOptions::default() },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
