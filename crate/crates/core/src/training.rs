//! Minibatch training loops for classifiers and for language-model
//! pre-training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::grad;
use crate::classifier::{self, ClassifierParams};
use crate::error::Result;
use crate::lm::{self, LmParams, Span};
use crate::optim::OptState;
use crate::rng::Rng;
use crate::vocab::{TokenSeq, BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            minibatch: 16,
            lr: 1e-3,
        }
    }
}

/// Cross-entropy training; returns the model and the mean loss per epoch.
pub fn train_classifier(
    params: &ClassifierParams<f32>,
    data: &[(&TokenSeq, usize)],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(ClassifierParams<f32>, Vec<f64>)> {
    let mut model = params.clone();
    if data.is_empty() || cfg.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let mut opt = OptState::new(&model.tensors, cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            let (loss, g) = grad(&model.tensors, |tape, b| {
                let mut terms = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let (x, y) = data[i];
                    let logits = classifier::forward(tape, b, &model.arch, &x.ids)?;
                    let lp = tape.log_softmax(logits);
                    terms.push((tape.pick_sum(lp, &[(0, y)]), -1.0 / chunk.len() as f64));
                }
                Ok(tape.linear(&terms))
            })?;
            total += loss * chunk.len() as f64;
            model.tensors = opt.step(&model.tensors, &g)?;
        }
        epoch_losses.push(total / data.len() as f64);
    }
    Ok((model, epoch_losses))
}

/// `[BOS, words.., EOS]`, truncated to the model context.
pub fn lm_line(ids: &[usize], context: usize) -> TokenSeq {
    let mut v = Vec::with_capacity(ids.len() + 2);
    v.push(BOS);
    v.extend_from_slice(ids);
    v.push(EOS);
    v.truncate(context);
    TokenSeq::raw(v)
}

/// Next-token pre-training on whole lines; returns the mean per-token
/// negative log-likelihood per epoch.
pub fn pretrain_lm(
    params: &LmParams<f32>,
    lines: &[TokenSeq],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(LmParams<f32>, Vec<f64>)> {
    let mut model = params.clone();
    if lines.is_empty() || cfg.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let mut opt = OptState::new(&model.tensors, cfg.lr);
    let mut order: Vec<usize> = (0..lines.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut nll, mut tokens) = (0.0, 0usize);
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            let count: usize = chunk.iter().map(|&i| lines[i].len() - 1).sum();
            let (loss, g) = grad(&model.tensors, |tape, b| {
                let mut terms = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let (lp, _) = lm::sequence_log_prob_var(tape, b, &model.arch, &lines[i], Span::All)?;
                    terms.push((lp, -1.0 / count as f64));
                }
                Ok(tape.linear(&terms))
            })?;
            nll += loss * count as f64;
            tokens += count;
            model.tensors = opt.step(&model.tensors, &g)?;
        }
        epoch_losses.push(nll / tokens as f64);
    }
    Ok((model, epoch_losses))
}
