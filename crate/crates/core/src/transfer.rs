//! Knowledge transfer between the classifiers and the language model.
//!
//! Covers verbalized zero-shot classification, label-conditioned synthetic
//! generation, classifier rewards, the three language-model losses and their
//! weighted combination, and one server-side training round.
//!
//! Sequence conventions: every language-model sequence starts with BOS,
//! which is conditioning-only. A synthetic sample's `full_gen` is
//! `[BOS, M(y), x]` plus the terminating EOS when one was generated; the
//! unsupervised sequence is `[BOS, x, M'(y)]`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Bound, Mat, Tape, Var};
use crate::classifier::{self, ClassifierParams};
use crate::error::{Error, Result};
use crate::lm::{self, LmParams, Span};
use crate::optim::OptState;
use crate::rng::Rng;
use crate::sampling::{self, SamplingConfig};
use crate::tensor::Scalar;
use crate::vocab::{Role, TokenSeq, Vocab, BOS, EOS, UNK};

/// Prompt text per label, as written in the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    /// `M(y)`: generation prefix per label.
    pub gen_prompts: Vec<String>,
    /// `M'(y)`: suffix appended to a synthetic sentence for unsupervised training.
    pub train_prompts: Vec<String>,
    /// Label-independent suffix whose next token is read for classification.
    pub nlu_prompt: String,
    /// Single-token verbalizer per label.
    pub verbalizer: Vec<String>,
}

impl PromptConfig {
    /// Generation is conditioned on the bare label name. The verbalizer is the
    /// upper-cased name, a token the general corpus never contains, so its
    /// meaning comes only from the unsupervised suffix seen during federation.
    pub fn for_labels(labels: &[String]) -> Self {
        let upper: Vec<String> = labels.iter().map(|l| l.to_uppercase()).collect();
        Self {
            gen_prompts: labels.to_vec(),
            train_prompts: upper.clone(),
            nlu_prompt: String::new(),
            verbalizer: upper,
        }
    }

    /// Every line of prompt text, for vocabulary construction.
    pub fn lines(&self) -> Vec<String> {
        self.gen_prompts
            .iter()
            .chain(&self.train_prompts)
            .chain(std::iter::once(&self.nlu_prompt))
            .chain(&self.verbalizer)
            .cloned()
            .collect()
    }

    pub fn compile(&self, vocab: &Vocab, classes: usize) -> Result<(PromptSet, Verbalizer)> {
        if self.gen_prompts.len() != classes
            || self.train_prompts.len() != classes
            || self.verbalizer.len() != classes
        {
            return Err(Error::Config(format!(
                "prompts and verbalizer need exactly {classes} entries each"
            )));
        }
        let encode = |text: &str| -> Result<Vec<usize>> {
            let ids = vocab.encode(text);
            if ids.contains(&UNK) {
                return Err(Error::Config(format!("prompt `{text}` has out-of-vocabulary words")));
            }
            Ok(ids)
        };
        let mut gen = Vec::with_capacity(classes);
        for p in &self.gen_prompts {
            let mut ids = vec![BOS];
            ids.extend(encode(p)?);
            gen.push(TokenSeq::prompt(ids));
        }
        for i in 0..gen.len() {
            if gen[..i].iter().any(|g| g.ids == gen[i].ids) {
                return Err(Error::Config("generation prompts must differ per label".into()));
            }
        }
        let train = self
            .train_prompts
            .iter()
            .map(|p| encode(p).map(TokenSeq::prompt))
            .collect::<Result<Vec<_>>>()?;
        let nlu = TokenSeq::prompt(encode(&self.nlu_prompt)?);
        let mut tokens = Vec::with_capacity(classes);
        for v in &self.verbalizer {
            match encode(v)?.as_slice() {
                [id] => tokens.push(*id),
                _ => return Err(Error::Config(format!("verbalizer `{v}` is not a single token"))),
            }
        }
        Ok((PromptSet { gen, train, nlu }, Verbalizer::new(tokens)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub gen: Vec<TokenSeq>,
    pub train: Vec<TokenSeq>,
    pub nlu: TokenSeq,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verbalizer {
    tokens: Vec<usize>,
}

impl Verbalizer {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        for i in 0..tokens.len() {
            if tokens[..i].contains(&tokens[i]) {
                return Err(Error::Config("verbalizer must map labels to distinct tokens".into()));
            }
        }
        Ok(Self { tokens })
    }

    pub fn token(&self, label: usize) -> usize {
        self.tokens[label]
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GammaWeights {
    pub generation: f64,
    pub unsupervised: f64,
    pub regularization: f64,
}

impl Default for GammaWeights {
    fn default() -> Self {
        Self {
            generation: 1.0,
            unsupervised: 0.1,
            regularization: 0.05,
        }
    }
}

impl GammaWeights {
    pub fn new(generation: f64, unsupervised: f64, regularization: f64) -> Self {
        Self {
            generation,
            unsupervised,
            regularization,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.generation, self.unsupervised, self.regularization];
        if all.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if all.iter().all(|&g| g == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub label: usize,
    /// Generated sentence without the terminating EOS.
    pub x: TokenSeq,
    pub full_gen: TokenSeq,
    pub reward: Option<f64>,
    pub diversity: Option<f64>,
    pub score: Option<f64>,
}

impl SyntheticSample {
    pub fn from_generation(label: usize, full_gen: TokenSeq) -> Option<Self> {
        let words: Vec<usize> = full_gen
            .span(Role::Completion)
            .into_iter()
            .filter(|&t| t != EOS)
            .collect();
        if words.is_empty() {
            return None;
        }
        Some(Self {
            label,
            x: TokenSeq::raw(words),
            full_gen,
            reward: None,
            diversity: None,
            score: None,
        })
    }

    pub fn reward(&self) -> Result<f64> {
        self.reward
            .ok_or_else(|| Error::Contract("sample reward is unset".into()))
    }

    /// `[BOS, x, M'(y)]`.
    pub fn unsupervised_seq(&self, prompts: &PromptSet) -> TokenSeq {
        let mut s = TokenSeq::prompt(vec![BOS]);
        s.extend(&TokenSeq::tagged(self.x.ids.clone(), Role::Raw));
        s.extend(&prompts.train[self.label]);
        s
    }
}

/// Reads the verbalizer tokens' next-token probabilities after
/// `[BOS, x, nlu_prompt]` and renormalizes them over the labels.
pub fn classify_with_verbalizer<T: Scalar>(
    llm: &LmParams<T>,
    x: &TokenSeq,
    prompts: &PromptSet,
    verbalizer: &Verbalizer,
) -> Result<(usize, Vec<f64>)> {
    let mut seq = TokenSeq::prompt(vec![BOS]);
    seq.extend(x);
    seq.extend(&prompts.nlu);
    let dist = lm::next_dist(llm, &seq)?;
    let raw: Vec<f64> = verbalizer.tokens().iter().map(|&t| dist[t]).collect();
    Ok(renormalize(&raw))
}

/// `(argmax, raw / Σ raw)` with lowest-label ties.
pub fn renormalize(raw: &[f64]) -> (usize, Vec<f64>) {
    let z: f64 = raw.iter().sum();
    let probs: Vec<f64> = if z > 0.0 {
        raw.iter().map(|p| p / z).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    };
    (sampling::argmax(raw), probs)
}

pub fn sample_label(classes: usize, rng: &mut Rng) -> usize {
    rng.random_range(0..classes)
}

const MAX_RESAMPLES: usize = 5;

/// Draws `n` label-conditioned samples. Empty generations are retried up
/// to five times with the same label, then dropped.
pub fn generate_synthetic<T: Scalar>(
    llm: &LmParams<T>,
    prompts: &PromptSet,
    n: usize,
    cfg: &SamplingConfig,
    rng: &mut Rng,
) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::Config("must request at least one synthetic sample".into()));
    }
    let classes = prompts.gen.len();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let y = sample_label(classes, rng);
        for _ in 0..=MAX_RESAMPLES {
            let seq = sampling::sample(llm, &prompts.gen[y], cfg, rng)?;
            if let Some(s) = SyntheticSample::from_generation(y, seq) {
                out.push(s);
                break;
            }
        }
    }
    let dropped = n - out.len();
    if dropped * 2 > n {
        return Err(Error::DegenerateGenerator { dropped, requested: n });
    }
    Ok(out)
}

/// `r = 2·S(y|x) − 1`, stored on the sample.
pub fn compute_reward<T: Scalar>(slm: &ClassifierParams<T>, s: &mut SyntheticSample) -> Result<f64> {
    let p = classifier::probs(slm, &s.x.ids)?;
    let r = (2.0 * p[s.label] - 1.0).clamp(-1.0, 1.0);
    s.reward = Some(r);
    Ok(r)
}

/// Quantities of the frozen reference model for one sample; constants
/// under differentiation.
#[derive(Debug, Clone)]
pub struct Reference {
    log_prob: f64,
    completion_rows: Vec<usize>,
    log_q: Vec<f64>,
}

impl Reference {
    pub fn compute<T: Scalar>(old: &LmParams<T>, s: &SyntheticSample, span: Span) -> Result<Self> {
        let rows = lm::next_log_probs(old, &s.full_gen.ids[..s.full_gen.len() - 1])?;
        let positions = lm::scored_positions(&s.full_gen, span);
        if positions.is_empty() {
            return Err(Error::DegenerateSpan);
        }
        let log_prob = positions
            .iter()
            .map(|&i| rows.at(i - 1, s.full_gen.ids[i]))
            .sum();
        let completion_rows = completion_rows(&s.full_gen);
        let mut log_q = Vec::with_capacity(completion_rows.len() * rows.cols);
        for &r in &completion_rows {
            log_q.extend_from_slice(rows.row(r));
        }
        Ok(Self {
            log_prob,
            completion_rows,
            log_q,
        })
    }
}

/// Rows of the prediction matrix whose target is a completion token.
fn completion_rows(seq: &TokenSeq) -> Vec<usize> {
    (1..seq.len())
        .filter(|&i| seq.roles[i] == Role::Completion)
        .map(|i| i - 1)
        .collect()
}

/// Tape handles of the three per-sample losses.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub generation: Option<Var>,
    pub unsupervised: Option<Var>,
    pub regularization: Option<Var>,
}

/// Records the losses with a nonzero weight for one sample. `L_g` and `L_r`
/// share a single forward pass over `full_gen`.
#[allow(clippy::too_many_arguments)]
pub fn sample_losses<T: Scalar>(
    tape: &mut Tape<T>,
    theta: &Bound,
    arch: &lm::LmArch,
    s: &SyntheticSample,
    reference: &Reference,
    prompts: &PromptSet,
    gamma: &GammaWeights,
    span: Span,
) -> Result<LossVars> {
    let mut out = LossVars {
        generation: None,
        unsupervised: None,
        regularization: None,
    };
    if gamma.generation > 0.0 || gamma.regularization > 0.0 {
        let (lp, logp) = lm::sequence_log_prob_var(tape, theta, arch, &s.full_gen, span)?;
        if gamma.generation > 0.0 {
            let r = s.reward()?;
            // −r·(log p_θ − log p_old); the reference term is a constant
            let old_term = tape.constant(Mat {
                rows: 1,
                cols: 1,
                data: vec![T::of(r * reference.log_prob)],
            });
            out.generation = Some(tape.linear(&[(lp, -r), (old_term, 1.0)]));
        }
        if gamma.regularization > 0.0 {
            out.regularization = Some(if reference.completion_rows.is_empty() {
                tape.constant(Mat::zeros(1, 1))
            } else {
                tape.kl_rows(logp, &reference.completion_rows, reference.log_q.clone())
            });
        }
    }
    if gamma.unsupervised > 0.0 {
        let seq = s.unsupervised_seq(prompts);
        let (lp, _) = lm::sequence_log_prob_var(tape, theta, arch, &seq, Span::All)?;
        out.unsupervised = Some(tape.linear(&[(lp, -1.0)]));
    }
    Ok(out)
}

/// Per-component batch means and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub generation: f64,
    pub unsupervised: f64,
    pub regularization: f64,
}

/// Records `mean(γ1·L_g + γ2·L_t + γ3·L_r)` over `batch`.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    theta: &Bound,
    arch: &lm::LmArch,
    batch: &[SyntheticSample],
    references: &[Reference],
    prompts: &PromptSet,
    gamma: &GammaWeights,
    span: Span,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Contract("combined loss over an empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut terms = Vec::new();
    let mut parts = LossBreakdown::default();
    for (s, r) in batch.iter().zip(references) {
        let v = sample_losses(tape, theta, arch, s, r, prompts, gamma, span)?;
        for (var, weight, slot) in [
            (v.generation, gamma.generation, &mut parts.generation),
            (v.unsupervised, gamma.unsupervised, &mut parts.unsupervised),
            (v.regularization, gamma.regularization, &mut parts.regularization),
        ] {
            if let Some(var) = var {
                *slot += tape.value(var).scalar().f64() / n;
                terms.push((var, weight / n));
            }
        }
    }
    let total = tape.linear(&terms);
    parts.total = tape.value(total).scalar().f64();
    Ok((total, parts))
}

pub fn references<T: Scalar>(old: &LmParams<T>, batch: &[SyntheticSample], span: Span) -> Result<Vec<Reference>> {
    batch.iter().map(|s| Reference::compute(old, s, span)).collect()
}

/// Value of the combined loss.
pub fn combined_loss<T: Scalar>(
    theta: &LmParams<T>,
    old: &LmParams<T>,
    batch: &[SyntheticSample],
    prompts: &PromptSet,
    gamma: &GammaWeights,
    span: Span,
) -> Result<LossBreakdown> {
    let refs = references(old, batch, span)?;
    let mut tape = Tape::new();
    let b = tape.bind(&theta.tensors, false);
    Ok(combined_loss_var(&mut tape, &b, &theta.arch, batch, &refs, prompts, gamma, span)?.1)
}

/// `L_g = −r·(log p_θ(full_gen) − log p_old(full_gen))`.
pub fn generation_loss<T: Scalar>(
    theta: &LmParams<T>,
    old: &LmParams<T>,
    s: &SyntheticSample,
    span: Span,
) -> Result<f64> {
    let r = s.reward()?;
    let a = lm::sequence_log_prob(theta, &s.full_gen, span)?;
    let b = lm::sequence_log_prob(old, &s.full_gen, span)?;
    Ok(-r * (a - b))
}

/// `L_t = −log p_θ([BOS, x, M'(y)])`.
pub fn unsupervised_loss<T: Scalar>(theta: &LmParams<T>, s: &SyntheticSample, prompts: &PromptSet) -> Result<f64> {
    Ok(-lm::sequence_log_prob(theta, &s.unsupervised_seq(prompts), Span::All)?)
}

/// Mean token-level KL(θ ‖ old) over the completion positions of `full_gen`.
pub fn regularization_loss<T: Scalar>(theta: &LmParams<T>, old: &LmParams<T>, s: &SyntheticSample) -> Result<f64> {
    let ids = &s.full_gen.ids[..s.full_gen.len() - 1];
    let p = lm::next_log_probs(theta, ids)?;
    let q = lm::next_log_probs(old, ids)?;
    let rows = completion_rows(&s.full_gen);
    if rows.is_empty() {
        return Ok(0.0);
    }
    let kl: f64 = rows
        .iter()
        .map(|&r| {
            p.row(r)
                .iter()
                .zip(q.row(r))
                .map(|(lp, lq)| lp.exp() * (lp - lq))
                .sum::<f64>()
        })
        .sum();
    Ok(kl / rows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmRoundConfig {
    pub llm_epochs: usize,
    pub gen_batch: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub span: Span,
}

impl Default for LlmRoundConfig {
    fn default() -> Self {
        Self {
            llm_epochs: 2,
            gen_batch: 256,
            minibatch: 16,
            lr: 5e-5,
            span: Span::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
    pub mean_reward: f64,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub params: LmParams<f32>,
    pub steps: Vec<StepRecord>,
    /// Mean reward of each epoch's freshly generated batch.
    pub epoch_rewards: Vec<f64>,
    /// Set when generation degenerated or a loss went non-finite; `params`
    /// then hold the last finite state.
    pub aborted: Option<String>,
}

/// One server round: per epoch, generate a batch from the current model,
/// score it with the client's classifier, then take optimizer steps on the
/// combined loss over minibatches.
#[allow(clippy::too_many_arguments)]
pub fn llm_round(
    theta: &LmParams<f32>,
    old: &LmParams<f32>,
    slm: &ClassifierParams<f32>,
    prompts: &PromptSet,
    gamma: &GammaWeights,
    sampling_cfg: &SamplingConfig,
    cfg: &LlmRoundConfig,
    rng: &mut Rng,
) -> Result<RoundOutcome> {
    gamma.validate()?;
    let mut params = theta.clone();
    let mut opt = OptState::new(&params.tensors, cfg.lr);
    let mut steps = Vec::new();
    let mut epoch_rewards = Vec::new();
    for epoch in 0..cfg.llm_epochs {
        let mut batch = match generate_synthetic(&params, prompts, cfg.gen_batch, sampling_cfg, rng) {
            Ok(b) => b,
            Err(e @ Error::DegenerateGenerator { .. }) => {
                return Ok(RoundOutcome {
                    params,
                    steps,
                    epoch_rewards,
                    aborted: Some(e.to_string()),
                })
            }
            Err(e) => return Err(e),
        };
        let mut rsum = 0.0;
        for s in batch.iter_mut() {
            rsum += compute_reward(slm, s)?;
        }
        epoch_rewards.push(rsum / batch.len() as f64);
        let refs = references(old, &batch, cfg.span)?;
        for (step, (mb, mr)) in batch
            .chunks(cfg.minibatch.max(1))
            .zip(refs.chunks(cfg.minibatch.max(1)))
            .enumerate()
        {
            let mut parts = LossBreakdown::default();
            let res = grad(&params.tensors, |tape, b| {
                let (v, p) = combined_loss_var(tape, b, &params.arch, mb, mr, prompts, gamma, cfg.span)?;
                parts = p;
                Ok(v)
            });
            let grads = match res {
                Ok((_, g)) => g,
                Err(e @ Error::NonFinite { .. }) => {
                    return Ok(RoundOutcome {
                        params,
                        steps,
                        epoch_rewards,
                        aborted: Some(e.to_string()),
                    })
                }
                Err(e) => return Err(e),
            };
            let next = opt.step(&params.tensors, &grads)?;
            if let Some(name) = next.first_non_finite() {
                let msg = format!("optimizer produced non-finite `{name}`");
                return Ok(RoundOutcome {
                    params,
                    steps,
                    epoch_rewards,
                    aborted: Some(msg),
                });
            }
            params.tensors = next;
            let mean_reward = mb.iter().filter_map(|s| s.reward).sum::<f64>() / mb.len() as f64;
            steps.push(StepRecord {
                epoch,
                step,
                loss: parts,
                mean_reward,
            });
        }
    }
    Ok(RoundOutcome {
        params,
        steps,
        epoch_rewards,
        aborted: None,
    })
}
