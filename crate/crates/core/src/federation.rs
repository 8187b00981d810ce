//! One-shot asynchronous federation.
//!
//! Clients train their classifiers locally, then arrive at the server one at
//! a time in a seeded virtual-time order. Each arrival triggers a language
//! model round followed by enhancement of that client's classifier with
//! freshly generated, filtered synthetic data.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::hash_params;
use crate::classifier::{ClassifierArch, ClassifierKind, ClassifierParams};
use crate::data::{LabeledExample, Shard};
use crate::error::{Error, Result};
use crate::filter::{self, EmbedTable, FilterConfig};
use crate::lm::LmParams;
use crate::rng::{seeded, Rng, SeedStreams};
use crate::sampling::SamplingConfig;
use crate::tensor::uniform01;
use crate::training::{train_classifier, TrainConfig};
use crate::transfer::{self, GammaWeights, LlmRoundConfig, LossBreakdown, PromptSet, SyntheticSample};
use crate::vocab::TokenSeq;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientSpec {
    pub id: usize,
    pub arch: ClassifierKind,
    pub shard: Shard,
    pub local_epochs: usize,
    pub seed: u64,
}

/// Trains a fresh classifier of the client's architecture on its shard.
pub fn client_local_train(
    spec: &ClientSpec,
    train: &[LabeledExample],
    vocab_len: usize,
    classes: usize,
    cfg: &TrainConfig,
) -> Result<ClassifierParams<f32>> {
    if spec.shard.indices.is_empty() {
        return Err(Error::Config(format!("client {} has an empty shard", spec.id)));
    }
    let examples = spec.shard.examples(train);
    for e in &examples {
        e.x.check_in_vocab(vocab_len)?;
        if e.y >= classes {
            return Err(Error::Config(format!("label {} out of range for {classes} classes", e.y)));
        }
    }
    let mut rng = seeded(spec.seed);
    let init = ClassifierParams::init(ClassifierArch::new(spec.arch, vocab_len, classes), &mut rng)?;
    let data: Vec<(&TokenSeq, usize)> = examples.iter().map(|e| (&e.x, e.y)).collect();
    let cfg = TrainConfig {
        epochs: spec.local_epochs,
        ..*cfg
    };
    Ok(train_classifier(&init, &data, &cfg, &mut rng)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub client: usize,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalSchedule {
    pub arrivals: Vec<Arrival>,
}

/// Random permutation of the clients with gaps drawn from `0.5 + U[0, 1)`.
pub fn make_schedule(clients: &[usize], rng: &mut Rng) -> ArrivalSchedule {
    let mut order = clients.to_vec();
    order.shuffle(rng);
    let mut t = 0.0;
    let arrivals = order
        .into_iter()
        .map(|client| {
            t += 0.5 + uniform01(rng);
            Arrival { client, time: t }
        })
        .collect();
    ArrivalSchedule { arrivals }
}

#[derive(Debug, Clone)]
pub struct ClientRecord {
    pub received: ClassifierParams<f32>,
    pub enhanced: Option<ClassifierParams<f32>>,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub theta: LmParams<f32>,
    theta_old: LmParams<f32>,
    old_hash: String,
    pub round: usize,
    pub registry: BTreeMap<usize, ClientRecord>,
}

impl ServerState {
    /// Starts from the pre-trained model; the frozen copy is taken here.
    pub fn new(pretrained: LmParams<f32>) -> Self {
        let old_hash = hash_params(&pretrained.tensors);
        Self {
            theta: pretrained.clone(),
            theta_old: pretrained,
            old_hash,
            round: 0,
            registry: BTreeMap::new(),
        }
    }

    pub fn theta_old(&self) -> &LmParams<f32> {
        &self.theta_old
    }

    pub fn old_hash(&self) -> &str {
        &self.old_hash
    }
}

/// Knobs shared by the server loop and the data-free baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerConfig {
    pub gamma: GammaWeights,
    pub filter: FilterConfig,
    pub sampling: SamplingConfig,
    pub round: LlmRoundConfig,
    pub enhance_batch: usize,
    pub enhance: TrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnhanceStats {
    pub generated: usize,
    pub selected: usize,
    pub mean_reward: f64,
    pub selected_mean_reward: f64,
    pub losses: Vec<f64>,
}

/// Generates a batch from `llm`, scores it with `slm`, keeps the top
/// samples and trains `slm` on them.
#[allow(clippy::too_many_arguments)]
pub fn enhance_with_synthetic(
    llm: &LmParams<f32>,
    slm: &ClassifierParams<f32>,
    prompts: &PromptSet,
    table: &EmbedTable,
    cfg: &ServerConfig,
    rng: &mut Rng,
) -> Result<(ClassifierParams<f32>, EnhanceStats, Vec<SyntheticSample>, Vec<usize>)> {
    let mut batch = transfer::generate_synthetic(llm, prompts, cfg.enhance_batch, &cfg.sampling, rng)?;
    let mut rsum = 0.0;
    for s in batch.iter_mut() {
        rsum += transfer::compute_reward(slm, s)?;
    }
    let picked = if batch.len() >= 2 {
        filter::diversity_scores(&mut batch, table)?;
        filter::score_and_select(&mut batch, &cfg.filter)?
    } else {
        Vec::new()
    };
    let chosen: Vec<&SyntheticSample> = picked.iter().map(|&i| &batch[i]).collect();
    let (enhanced, losses) = filter::enhance_slm(slm, &chosen, &cfg.enhance, rng)?;
    let stats = EnhanceStats {
        generated: batch.len(),
        selected: chosen.len(),
        mean_reward: rsum / batch.len() as f64,
        selected_mean_reward: if chosen.is_empty() {
            0.0
        } else {
            chosen.iter().filter_map(|s| s.reward).sum::<f64>() / chosen.len() as f64
        },
        losses,
    };
    Ok((enhanced, stats, batch, picked))
}

/// Metrics of one processed arrival, one line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub mode: String,
    pub round: usize,
    pub client: usize,
    pub arch: ClassifierKind,
    pub arrival_time: f64,
    /// Mean reward of each LLM-round epoch batch.
    pub epoch_rewards: Vec<f64>,
    /// Minibatch means of the loss components over the round.
    pub loss: LossBreakdown,
    pub llm_steps: usize,
    pub enhance: Option<EnhanceStats>,
    pub aborted: Option<String>,
}

fn mean_loss(steps: &[transfer::StepRecord]) -> LossBreakdown {
    let mut m = LossBreakdown::default();
    if steps.is_empty() {
        return m;
    }
    let n = steps.len() as f64;
    for s in steps {
        m.total += s.loss.total / n;
        m.generation += s.loss.generation / n;
        m.unsupervised += s.loss.unsupervised / n;
        m.regularization += s.loss.regularization / n;
    }
    m
}

/// Processes every arrival in schedule order. `inbox` holds the classifier
/// each client sent.
pub fn server_loop(
    state: &mut ServerState,
    schedule: &ArrivalSchedule,
    inbox: &BTreeMap<usize, ClassifierParams<f32>>,
    prompts: &PromptSet,
    table: &EmbedTable,
    cfg: &ServerConfig,
    streams: &SeedStreams,
) -> Result<Vec<RoundMetrics>> {
    let mut metrics = Vec::with_capacity(schedule.arrivals.len());
    for a in &schedule.arrivals {
        if state.registry.contains_key(&a.client) {
            return Err(Error::Contract(format!("client {} arrived twice", a.client)));
        }
        let slm = inbox
            .get(&a.client)
            .ok_or_else(|| Error::Contract(format!("no classifier received from client {}", a.client)))?;
        let mut rng = streams.stream(&format!("server/round/{}", state.round));
        let outcome = transfer::llm_round(
            &state.theta,
            &state.theta_old,
            slm,
            prompts,
            &cfg.gamma,
            &cfg.sampling,
            &cfg.round,
            &mut rng,
        )?;
        state.theta = outcome.params;
        let mut aborted = outcome.aborted;
        let mut enhanced = None;
        let mut stats = None;
        if aborted.is_none() {
            let mut erng = streams.stream(&format!("server/enhance/{}", state.round));
            match enhance_with_synthetic(&state.theta, slm, prompts, table, cfg, &mut erng) {
                Ok((e, s, _, _)) => {
                    enhanced = Some(e);
                    stats = Some(s);
                }
                Err(e @ Error::DegenerateGenerator { .. }) => aborted = Some(e.to_string()),
                Err(e) => return Err(e),
            }
        }
        if let Some(msg) = &aborted {
            log::warn!("round {} (client {}) aborted: {msg}", state.round, a.client);
        }
        metrics.push(RoundMetrics {
            mode: "crosslm".into(),
            round: state.round,
            client: a.client,
            arch: slm.arch.kind,
            arrival_time: a.time,
            epoch_rewards: outcome.epoch_rewards,
            loss: mean_loss(&outcome.steps),
            llm_steps: outcome.steps.len(),
            enhance: stats,
            aborted,
        });
        state.registry.insert(
            a.client,
            ClientRecord {
                received: slm.clone(),
                enhanced,
            },
        );
        state.round += 1;
    }
    if hash_params(&state.theta_old.tensors) != state.old_hash {
        return Err(Error::Contract("frozen reference model changed during the run".into()));
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledExample;
    use crate::lm::LmArch;

    fn toy_train() -> Vec<LabeledExample> {
        (0..40)
            .map(|i| LabeledExample {
                x: TokenSeq::raw(vec![4 + (i % 2), 6, 4 + (i % 2)]),
                y: i % 2,
            })
            .collect()
    }

    fn spec(epochs: usize) -> ClientSpec {
        ClientSpec {
            id: 0,
            arch: ClassifierKind::Tiny,
            shard: Shard {
                client: 0,
                indices: (0..40).collect(),
            },
            local_epochs: epochs,
            seed: 5,
        }
    }

    #[test]
    fn zero_epochs_gives_uniform_classifier() {
        let c = client_local_train(&spec(0), &toy_train(), 8, 2, &TrainConfig::default()).unwrap();
        let p = crate::classifier::probs(&c, &[4, 5]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn local_training_is_deterministic_and_learns() {
        let cfg = TrainConfig {
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let a = client_local_train(&spec(5), &toy_train(), 8, 2, &cfg).unwrap();
        let b = client_local_train(&spec(5), &toy_train(), 8, 2, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(crate::classifier::predict(&a, &[4, 6, 4]).unwrap(), 0);
        assert_eq!(crate::classifier::predict(&a, &[5, 6, 5]).unwrap(), 1);
    }

    #[test]
    fn empty_shard_and_foreign_tokens_rejected() {
        let mut s = spec(1);
        s.shard.indices.clear();
        assert!(client_local_train(&s, &toy_train(), 8, 2, &TrainConfig::default()).is_err());
        assert!(client_local_train(&spec(1), &toy_train(), 6, 2, &TrainConfig::default()).is_err());
    }

    #[test]
    fn schedule_is_timed_permutation() {
        let ids: Vec<usize> = (0..7).collect();
        let s = make_schedule(&ids, &mut seeded(3));
        let mut seen: Vec<usize> = s.arrivals.iter().map(|a| a.client).collect();
        seen.sort_unstable();
        assert_eq!(seen, ids);
        assert!(s.arrivals.windows(2).all(|w| w[0].time < w[1].time));
        assert_eq!(s, make_schedule(&ids, &mut seeded(3)));
        assert_eq!(make_schedule(&[4], &mut seeded(1)).arrivals.len(), 1);
    }

    #[test]
    fn empty_schedule_leaves_server_untouched() {
        let lm = LmParams::init(LmArch::new(8, 1, 8, 2, 16), &mut seeded(1)).unwrap();
        let mut st = ServerState::new(lm.clone());
        let prompts = PromptSet {
            gen: vec![],
            train: vec![],
            nlu: TokenSeq::prompt(vec![]),
        };
        let cfg = ServerConfig {
            gamma: GammaWeights::default(),
            filter: FilterConfig::default(),
            sampling: SamplingConfig::default(),
            round: LlmRoundConfig::default(),
            enhance_batch: 256,
            enhance: TrainConfig::default(),
        };
        let m = server_loop(
            &mut st,
            &ArrivalSchedule { arrivals: vec![] },
            &BTreeMap::new(),
            &prompts,
            &EmbedTable::random(8, 4, &mut seeded(0)),
            &cfg,
            &SeedStreams::new(0),
        )
        .unwrap();
        assert!(m.is_empty());
        assert_eq!(st.round, 0);
        assert!(st.registry.is_empty());
        assert_eq!(st.theta, lm);
    }
}
