//! Run configuration: a single JSON document, validated as a whole before
//! any work starts.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use serde_json::Value;

use crate::classifier::ClassifierKind;
use crate::data::{CorpusConfig, TaskConfig};
use crate::error::{Error, Result};
use crate::filter::{FilterConfig, DEFAULT_EMBED_DIM};
use crate::sampling::SamplingConfig;
use crate::training::TrainConfig;
use crate::transfer::{GammaWeights, LlmRoundConfig, PromptConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Crosslm,
    Standalone,
    DatafreeKd,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Standalone, Mode::DatafreeKd, Mode::Crosslm];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Crosslm => "crosslm",
            Mode::Standalone => "standalone",
            Mode::DatafreeKd => "datafree_kd",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub context: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 2,
            context: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientsConfig {
    pub count: usize,
    /// Per-client architecture; empty means alternating TINY, SMALL, ...
    pub archs: Vec<ClassifierKind>,
    pub beta: f64,
    pub local: TrainConfig,
}

impl Default for ClientsConfig {
    fn default() -> Self {
        Self {
            count: 4,
            archs: Vec::new(),
            beta: 1.0,
            local: TrainConfig {
                epochs: 5,
                minibatch: 16,
                lr: 1e-2,
            },
        }
    }
}

impl ClientsConfig {
    pub fn arch(&self, client: usize) -> ClassifierKind {
        match self.archs.get(client) {
            Some(k) => *k,
            None if client % 2 == 0 => ClassifierKind::Tiny,
            None => ClassifierKind::Small,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeSet {
    /// Classifiers after server-side enhancement.
    #[default]
    Enhanced,
    /// Classifiers as the clients sent them.
    Received,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub nlg_samples: usize,
    pub judges: JudgeSet,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nlg_samples: 1000,
            judges: JudgeSet::Enhanced,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub precision: Precision,
    pub tol_f32: f64,
    pub tol_f64: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            precision: Precision::Both,
            tol_f32: 1e-3,
            tol_f64: 1e-6,
        }
    }
}

fn default_modes() -> Vec<Mode> {
    Mode::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub lm: LmConfig,
    #[serde(default = "default_pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub clients: ClientsConfig,
    #[serde(default)]
    pub prompts: Option<PromptConfig>,
    #[serde(default)]
    pub gamma: GammaWeights,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub llm_round: LlmRoundConfig,
    /// Synthetic samples generated per classifier enhancement.
    #[serde(default = "default_enhance_batch")]
    pub enhance_batch: usize,
    #[serde(default = "default_enhance")]
    pub enhance: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
}

fn default_pretrain() -> TrainConfig {
    TrainConfig {
        epochs: 8,
        minibatch: 16,
        lr: 1e-3,
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn default_embed_dim() -> usize {
    DEFAULT_EMBED_DIM
}

fn default_enhance_batch() -> usize {
    1024
}

fn default_enhance() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        minibatch: 16,
        lr: 3e-3,
    }
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults deserialize")
    }

    /// Parses a config. Sections given only in part keep their own defaults
    /// for the missing fields, so `{"pretrain": {"epochs": 2}}` still uses the
    /// pretraining learning rate rather than a generic one.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = serde_json::to_value(Self::with_seed(0)).expect("config serializes");
        if let Value::Object(m) = &mut merged {
            m.remove("seed");
        }
        merge(&mut merged, user);
        serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// sha256 of the canonical JSON form, without the run directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run_dir = None;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.task.classes).map(crate::data::default_label_name).collect()
    }

    pub fn prompt_config(&self) -> PromptConfig {
        self.prompts
            .clone()
            .unwrap_or_else(|| PromptConfig::for_labels(&self.labels()))
    }

    /// Every problem found, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                errs.push(e.to_string());
            }
        };
        check(self.task.validate());
        if self.corpus.pretrain_lines == 0 || self.corpus.heldout_lines == 0 {
            check(Err(Error::Config("corpus splits must be nonempty".into())));
        }
        let lm = &self.lm;
        if lm.heads == 0 || lm.d_model == 0 || lm.d_model % lm.heads != 0 || lm.layers == 0 {
            check(Err(Error::Config(format!("invalid LM shape {lm:?}"))));
        }
        let longest_line = self.task.len_max + 2;
        if lm.context < longest_line {
            check(Err(Error::Config(format!(
                "context {} shorter than the longest corpus line ({longest_line})",
                lm.context
            ))));
        }
        check(self.sampling.validate(lm.context));
        check(self.gamma.validate());
        check(self.filter.validate());
        if self.clients.count == 0 {
            check(Err(Error::Config("need at least one client".into())));
        }
        if !self.clients.archs.is_empty() && self.clients.archs.len() != self.clients.count {
            check(Err(Error::Config(format!(
                "{} client architectures listed for {} clients",
                self.clients.archs.len(),
                self.clients.count
            ))));
        }
        if self.clients.count > self.task.train_size {
            check(Err(Error::Partition(format!(
                "{} training examples cannot cover {} clients",
                self.task.train_size, self.clients.count
            ))));
        }
        if !(self.clients.beta > 0.0 && self.clients.beta.is_finite()) {
            check(Err(Error::Partition(format!("beta must be positive, got {}", self.clients.beta))));
        }
        for (name, t) in [
            ("pretrain", &self.pretrain),
            ("clients.local", &self.clients.local),
            ("enhance", &self.enhance),
        ] {
            if t.minibatch == 0 || !(t.lr > 0.0 && t.lr.is_finite()) {
                check(Err(Error::Config(format!("{name}: minibatch and lr must be positive"))));
            }
        }
        let r = &self.llm_round;
        if r.gen_batch == 0 || r.minibatch == 0 || !(r.lr > 0.0 && r.lr.is_finite()) {
            check(Err(Error::Config("llm_round: gen_batch, minibatch and lr must be positive".into())));
        }
        if self.enhance_batch < 2 {
            check(Err(Error::Config("enhance_batch must be at least 2".into())));
        }
        if self.embed_dim == 0 {
            check(Err(Error::Config("embed_dim must be positive".into())));
        }
        if self.eval.nlg_samples == 0 {
            check(Err(Error::Config("eval.nlg_samples must be positive".into())));
        }
        if self.modes.is_empty() {
            check(Err(Error::Config("no experiment modes selected".into())));
        }
        let p = self.prompt_config();
        let c = self.task.classes;
        if p.gen_prompts.len() != c || p.train_prompts.len() != c || p.verbalizer.len() != c {
            check(Err(Error::Config(format!("prompts and verbalizer need {c} entries each"))));
        }
        let worst_prompt = p
            .gen_prompts
            .iter()
            .chain(&p.train_prompts)
            .map(|s| s.split_whitespace().count())
            .max()
            .unwrap_or(0);
        let nlu_len = 1 + self.task.len_max + p.nlu_prompt.split_whitespace().count() + 1;
        let gen_len = 1 + worst_prompt + self.sampling.max_len;
        if nlu_len.max(gen_len) > lm.context {
            check(Err(Error::Config(format!(
                "context {} too short for prompts plus generation ({})",
                lm.context,
                nlu_len.max(gen_len)
            ))));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_keep_their_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 1, "pretrain": {"epochs": 2}, "clients": {"local": {"epochs": 1}}}"#).unwrap();
        let d = RunConfig::with_seed(1);
        assert_eq!(c.pretrain.epochs, 2);
        assert_eq!(c.pretrain.lr, d.pretrain.lr);
        assert_eq!(c.clients.local.lr, d.clients.local.lr);
        assert_eq!(c.clients.count, d.clients.count);
        assert!(RunConfig::from_json(r#"{"seed": 1, "pretrain": 3}"#).is_err());
    }

    #[test]
    fn minimal_document_fills_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 7}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.clients.count, 4);
        assert_eq!(c.filter.alpha_percent, 25.0);
        assert_eq!(c.llm_round.gen_batch, 256);
        assert_eq!(c.modes.len(), 3);
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn seed_is_required_and_typos_rejected() {
        assert!(RunConfig::from_json("{}").is_err());
        assert!(RunConfig::from_json(r#"{"seed": 1, "clinets": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seed": 1, "filter": {"alpha": 3}}"#).is_err());
    }

    #[test]
    fn all_problems_reported_together() {
        let mut c = RunConfig::with_seed(1);
        c.clients.beta = -1.0;
        c.filter.alpha_percent = 0.0;
        c.clients.count = 5000;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("beta"), "{msg}");
        assert!(msg.contains("alpha_percent"), "{msg}");
        assert!(msg.contains("cannot cover"), "{msg}");
    }

    #[test]
    fn hash_ignores_run_dir() {
        let a = RunConfig::with_seed(3);
        let mut b = a.clone();
        b.run_dir = Some("/tmp/x".into());
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), RunConfig::with_seed(4).hash());
    }

    #[test]
    fn default_archs_alternate() {
        let c = ClientsConfig::default();
        assert_eq!(c.arch(0), ClassifierKind::Tiny);
        assert_eq!(c.arch(1), ClassifierKind::Small);
        assert_eq!("datafree_kd".parse::<Mode>().unwrap(), Mode::DatafreeKd);
        assert!("nope".parse::<Mode>().is_err());
    }
}
