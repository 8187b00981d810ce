//! Synthetic classification task with an exact Bayes oracle, a general
//! corpus for pre-training and perplexity, and Dirichlet non-IID splits.
//!
//! Sentences are bags of words: each position independently emits, with
//! probability `marker_rate`, a uniformly chosen marker word exclusive to the
//! class, and otherwise a content word drawn from the class's unigram table.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::uniform01;
use crate::vocab::{TokenSeq, Vocab};

const LABEL_NAMES: [&str; 10] = [
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa",
];

pub fn default_label_name(class: usize) -> String {
    LABEL_NAMES
        .get(class)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{class}"))
}

/// Generator knobs for the toy task, as stored in the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub classes: usize,
    pub content_words: usize,
    pub markers_per_class: usize,
    pub neutral_words: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub marker_rate: f64,
    /// Log-scale spread of the class-conditional content-word weights.
    pub weight_spread: f64,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            content_words: 40,
            markers_per_class: 6,
            neutral_words: 10,
            len_min: 4,
            len_max: 12,
            marker_rate: 0.15,
            weight_spread: 0.75,
            train_size: 4000,
            test_size: 2000,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.content_words == 0 {
            return Err(Error::Config("need at least one content word".into()));
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            return Err(Error::Config(format!(
                "invalid sentence length range [{}, {}]",
                self.len_min, self.len_max
            )));
        }
        if !(0.0..1.0).contains(&self.marker_rate) {
            return Err(Error::Config(format!("marker rate {} outside [0, 1)", self.marker_rate)));
        }
        if self.marker_rate > 0.0 && self.markers_per_class == 0 {
            return Err(Error::Config("positive marker rate needs marker words".into()));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config("train and test sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Fully specified generative model of the toy task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub labels: Vec<String>,
    pub content_words: Vec<String>,
    /// One unnormalized weight table over `content_words` per class.
    pub class_weights: Vec<Vec<f64>>,
    pub markers: Vec<Vec<String>>,
    pub neutral_words: Vec<String>,
    pub len_min: usize,
    pub len_max: usize,
    pub marker_rate: f64,
    pub train_size: usize,
    pub test_size: usize,
}

impl ToyTaskSpec {
    /// Draws class weight tables `exp(spread · z)`, `z ~ N(0, 1)`.
    pub fn from_config(cfg: &TaskConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let content_words: Vec<String> = (0..cfg.content_words).map(|i| format!("w{i:02}")).collect();
        let class_weights = (0..cfg.classes)
            .map(|_| {
                (0..cfg.content_words)
                    .map(|_| (cfg.weight_spread * normal.sample(rng)).exp())
                    .collect()
            })
            .collect();
        let spec = Self {
            labels: (0..cfg.classes).map(default_label_name).collect(),
            content_words,
            class_weights,
            markers: (0..cfg.classes)
                .map(|c| (0..cfg.markers_per_class).map(|i| format!("m{c}x{i}")).collect())
                .collect(),
            neutral_words: (0..cfg.neutral_words).map(|i| format!("n{i:02}")).collect(),
            len_min: cfg.len_min,
            len_max: cfg.len_max,
            marker_rate: cfg.marker_rate,
            train_size: cfg.train_size,
            test_size: cfg.test_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.labels.len();
        if c < 2 {
            return Err(Error::Config("toy task needs at least 2 classes".into()));
        }
        if self.class_weights.len() != c || self.markers.len() != c {
            return Err(Error::Config("per-class tables must have one entry per class".into()));
        }
        for w in &self.class_weights {
            if w.len() != self.content_words.len() {
                return Err(Error::Config("weight table length differs from word list".into()));
            }
            if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("weight tables must be nonnegative with positive mass".into()));
            }
        }
        if !(0.0..1.0).contains(&self.marker_rate) {
            return Err(Error::Config(format!("marker rate {} outside [0, 1)", self.marker_rate)));
        }
        if self.marker_rate > 0.0 && self.markers.iter().any(|m| m.is_empty()) {
            return Err(Error::Config("positive marker rate needs marker words for every class".into()));
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            return Err(Error::Config("invalid sentence length range".into()));
        }
        Ok(())
    }

    /// Every word the generators can emit.
    pub fn words(&self) -> Vec<String> {
        self.content_words
            .iter()
            .chain(self.markers.iter().flatten())
            .chain(&self.neutral_words)
            .cloned()
            .collect()
    }

    fn sample_content(&self, class: usize, rng: &mut Rng) -> usize {
        let w = &self.class_weights[class];
        let total: f64 = w.iter().sum();
        let mut u = uniform01(rng) * total;
        for (i, &x) in w.iter().enumerate() {
            if u < x {
                return i;
            }
            u -= x;
        }
        w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
    }

    pub fn sample_sentence(&self, class: usize, rng: &mut Rng) -> Vec<&str> {
        let len = rng.random_range(self.len_min..=self.len_max);
        (0..len)
            .map(|_| {
                if self.marker_rate > 0.0 && uniform01(rng) < self.marker_rate {
                    let m = &self.markers[class];
                    m[rng.random_range(0..m.len())].as_str()
                } else {
                    self.content_words[self.sample_content(class, rng)].as_str()
                }
            })
            .collect()
    }

    fn sample_neutral(&self, rng: &mut Rng) -> Vec<&str> {
        let len = rng.random_range(self.len_min..=self.len_max);
        let pool: Vec<&str> = self
            .content_words
            .iter()
            .chain(&self.neutral_words)
            .map(String::as_str)
            .collect();
        (0..len).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }

    /// Per-class word log-probabilities, keyed by word.
    fn word_log_probs(&self) -> HashMap<&str, Vec<f64>> {
        let c = self.classes();
        let mut table: HashMap<&str, Vec<f64>> = HashMap::new();
        for (k, w) in self.class_weights.iter().enumerate() {
            let total: f64 = w.iter().sum();
            for (word, &x) in self.content_words.iter().zip(w) {
                table.entry(word.as_str()).or_insert_with(|| vec![0.0; c])[k] +=
                    (1.0 - self.marker_rate) * x / total;
            }
        }
        for (k, m) in self.markers.iter().enumerate() {
            for word in m {
                table.entry(word.as_str()).or_insert_with(|| vec![0.0; c])[k] +=
                    self.marker_rate / m.len() as f64;
            }
        }
        table
            .into_iter()
            .map(|(w, p)| (w, p.into_iter().map(f64::ln).collect()))
            .collect()
    }

    /// Exact class posterior of a sentence (labels are balanced, so the
    /// prior is uniform and length carries no class information).
    pub fn posterior(&self, words: &[&str]) -> Result<Vec<f64>> {
        posterior_with(&self.word_log_probs(), self.classes(), words)
    }
}

fn posterior_with(table: &HashMap<&str, Vec<f64>>, c: usize, words: &[&str]) -> Result<Vec<f64>> {
    let mut ll = vec![0f64; c];
    for w in words {
        let lp = table
            .get(w)
            .ok_or_else(|| Error::Config(format!("word `{w}` is not produced by the task generator")))?;
        for k in 0..c {
            ll[k] += lp[k];
        }
    }
    let max = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Config("sentence has zero likelihood under every class".into()));
    }
    let e: Vec<f64> = ll.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabeledExample {
    pub x: TokenSeq,
    pub y: usize,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub labels: Vec<String>,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl Task {
    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes();
        if c < 2 {
            return Err(Error::Config("task needs at least 2 classes".into()));
        }
        if let Some(e) = self.train.iter().chain(&self.test).find(|e| e.y >= c) {
            return Err(Error::Config(format!("label {} out of range for {c} classes", e.y)));
        }
        Ok(())
    }
}

/// Draws balanced train and test sets; test sentences never repeat a
/// training sentence.
pub fn build_toy_task(spec: &ToyTaskSpec, vocab: &Vocab, rng: &mut Rng) -> Result<Task> {
    spec.validate()?;
    let c = spec.classes();
    let draw = |n: usize, exclude: &HashSet<Vec<usize>>, rng: &mut Rng| {
        let mut out = Vec::with_capacity(n);
        let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        labels.shuffle(rng);
        for y in labels {
            loop {
                let ids = vocab.encode(&spec.sample_sentence(y, rng).join(" "));
                if !exclude.contains(&ids) {
                    out.push(LabeledExample {
                        x: TokenSeq::raw(ids),
                        y,
                    });
                    break;
                }
            }
        }
        out
    };
    let train = draw(spec.train_size, &HashSet::new(), rng);
    let seen: HashSet<Vec<usize>> = train.iter().map(|e| e.x.ids.clone()).collect();
    let test = draw(spec.test_size, &seen, rng);
    let task = Task {
        labels: spec.labels.clone(),
        train,
        test,
    };
    if task.train.iter().any(|e| e.x.ids.contains(&crate::vocab::UNK)) {
        return Err(Error::Config("vocabulary does not cover the task generator".into()));
    }
    Ok(task)
}

/// Accuracy of the exact-posterior classifier (argmax, lowest-id ties).
pub fn bayes_oracle_accuracy(spec: &ToyTaskSpec, test: &[LabeledExample], vocab: &Vocab) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let table = spec.word_log_probs();
    let mut correct = 0usize;
    for e in test {
        let words: Vec<&str> = e
            .x
            .ids
            .iter()
            .map(|&i| vocab.token(i).ok_or_else(|| Error::Config(format!("token id {i} outside vocabulary"))))
            .collect::<Result<_>>()?;
        let post = posterior_with(&table, spec.classes(), &words)?;
        if crate::sampling::argmax(&post) == e.y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub pretrain_lines: usize,
    pub heldout_lines: usize,
    /// Probability that a class-conditional line opens with its label name.
    pub label_mention_rate: f64,
    /// Probability that a mention names the line's own class rather than
    /// another one.
    pub mention_accuracy: f64,
    /// Mixture weight of the class-neutral generator.
    pub neutral_share: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            pretrain_lines: 8000,
            heldout_lines: 300,
            label_mention_rate: 0.1,
            mention_accuracy: 0.7,
            neutral_share: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralCorpus {
    pub pretrain: Vec<String>,
    pub heldout: Vec<String>,
}

/// Lines drawn from the class-neutral generator with probability
/// `neutral_share`, otherwise from a uniformly chosen class. A
/// class-conditional line opens with a label name with probability
/// `label_mention_rate`; that name is the line's own class with probability
/// `mention_accuracy`. The result is a weak, noisy association between label
/// words and class content. Held-out lines never occur in the pre-training
/// split.
pub fn build_general_corpus(spec: &ToyTaskSpec, cfg: &CorpusConfig, rng: &mut Rng) -> Result<GeneralCorpus> {
    spec.validate()?;
    if cfg.heldout_lines == 0 {
        return Err(Error::Config("held-out corpus must be nonempty".into()));
    }
    for (name, v) in [
        ("label mention rate", cfg.label_mention_rate),
        ("mention accuracy", cfg.mention_accuracy),
        ("neutral share", cfg.neutral_share),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
        }
    }
    let line = |rng: &mut Rng| {
        if cfg.neutral_share > 0.0 && uniform01(rng) < cfg.neutral_share {
            return spec.sample_neutral(rng).join(" ");
        }
        let k = rng.random_range(0..spec.classes());
        let words = spec.sample_sentence(k, rng).join(" ");
        if cfg.label_mention_rate > 0.0 && uniform01(rng) < cfg.label_mention_rate {
            let mut named = k;
            if uniform01(rng) >= cfg.mention_accuracy {
                named = (k + rng.random_range(1..spec.classes())) % spec.classes();
            }
            return format!("{} {words}", spec.labels[named]);
        }
        words
    };
    let heldout: Vec<String> = (0..cfg.heldout_lines).map(|_| line(rng)).collect();
    let held: HashSet<&String> = heldout.iter().collect();
    let mut pretrain = Vec::with_capacity(cfg.pretrain_lines);
    while pretrain.len() < cfg.pretrain_lines {
        let l = line(rng);
        if !held.contains(&l) {
            pretrain.push(l);
        }
    }
    Ok(GeneralCorpus { pretrain, heldout })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub client: usize,
    /// Indices into the training set, ascending.
    pub indices: Vec<usize>,
}

impl Shard {
    pub fn examples<'a>(&self, train: &'a [LabeledExample]) -> Vec<&'a LabeledExample> {
        self.indices.iter().map(|&i| &train[i]).collect()
    }
}

/// Dirichlet proportions drawn as normalized Gamma(beta, 1) variates.
fn dirichlet(n: usize, beta: f64, rng: &mut Rng) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("positive shape");
    let g: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = g.iter().sum();
    if total > 0.0 && total.is_finite() {
        g.into_iter().map(|x| x / total).collect()
    } else {
        // every draw underflowed; put all mass on one client
        let mut p = vec![0.0; n];
        p[rng.random_range(0..n)] = 1.0;
        p
    }
}

/// Largest-remainder rounding of `total · props`; ties go to lower indices.
fn apportion(total: usize, props: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

pub fn dirichlet_partition(
    train: &[LabeledExample],
    classes: usize,
    clients: usize,
    beta: f64,
    rng: &mut Rng,
) -> Result<Vec<Shard>> {
    if clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Partition(format!("beta must be positive, got {beta}")));
    }
    if train.len() < clients {
        return Err(Error::Partition(format!(
            "{} training examples cannot cover {clients} clients",
            train.len()
        )));
    }
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..train.len()).filter(|&i| train[i].y == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(rng);
        let counts = apportion(idx.len(), &dirichlet(clients, beta, rng));
        let mut it = idx.into_iter();
        for (shard, n) in shards.iter_mut().zip(counts) {
            shard.extend(it.by_ref().take(n));
        }
    }
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let donor = (0..clients)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("clients > 0");
        let moved = shards[donor].pop().expect("largest shard is nonempty");
        shards[empty].push(moved);
    }
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(client, mut indices)| {
            indices.sort_unstable();
            Shard { client, indices }
        })
        .collect())
}

/// Mean total-variation distance between each shard's label distribution
/// and the global one.
pub fn mean_label_tv(shards: &[Shard], train: &[LabeledExample], classes: usize) -> f64 {
    let dist = |idx: &mut dyn Iterator<Item = usize>| {
        let mut h = vec![0f64; classes];
        let mut n = 0f64;
        for i in idx {
            h[train[i].y] += 1.0;
            n += 1.0;
        }
        h.into_iter().map(|x| x / n.max(1.0)).collect::<Vec<_>>()
    };
    let global = dist(&mut (0..train.len()));
    let tvs: Vec<f64> = shards
        .iter()
        .map(|s| {
            let local = dist(&mut s.indices.iter().copied());
            0.5 * local.iter().zip(&global).map(|(a, b)| (a - b).abs()).sum::<f64>()
        })
        .collect();
    tvs.iter().sum::<f64>() / tvs.len().max(1) as f64
}
