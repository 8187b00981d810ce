//! Subcommands and run-directory persistence.
//!
//! ```text
//! <run_dir>/config.json            normalized configuration
//! <run_dir>/manifest.json          checksum of every artifact, run state
//! <run_dir>/metrics.jsonl          one JSON object per line, tagged by mode
//! <run_dir>/report.json            evaluation report
//! <run_dir>/data/                  vocabulary, task, corpora, shards
//! <run_dir>/models/                checkpoints
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, hash_params};
use crate::classifier::ClassifierParams;
use crate::config::{JudgeSet, Mode, RunConfig};
use crate::data::{self, LabeledExample, Shard, ToyTaskSpec};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, ModeReport};
use crate::federation::{self, ArrivalSchedule, ClientSpec, ServerConfig, ServerState};
use crate::filter::EmbedTable;
use crate::lm::{LmArch, LmParams};
use crate::rng::SeedStreams;
use crate::training::{self, lm_line};
use crate::transfer::{PromptSet, Verbalizer};
use crate::vocab::{TokenSeq, Vocab};

const PRETRAINED: &str = "models/llm_pretrained.ckpt";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModeArtifacts {
    pub llm: String,
    /// Final classifier per client, in client order.
    pub clients: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    /// Relative path → sha256.
    pub artifacts: BTreeMap<String, String>,
    pub theta_old_hash: Option<String>,
    pub ppl_before: Option<f64>,
    /// Locally trained classifiers, in client order.
    pub local_clients: Vec<String>,
    pub modes: BTreeMap<Mode, ModeArtifacts>,
}

/// A run directory and its manifest.
pub struct RunDir {
    root: PathBuf,
    pub manifest: Manifest,
}

impl RunDir {
    /// Creates the directory, refusing a nonempty one unless `force`.
    pub fn create(root: &Path, cfg: &RunConfig, force: bool) -> Result<Self> {
        if root.exists() {
            let nonempty = fs::read_dir(root)
                .map_err(|e| Error::io(root, e))?
                .next()
                .is_some();
            if nonempty && !force {
                return Err(Error::RunDirExists(root.to_path_buf()));
            }
            if nonempty {
                fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
            }
        }
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut dir = Self {
            root: root.to_path_buf(),
            manifest: Manifest {
                config_hash: cfg.hash(),
                seed: cfg.seed,
                ..Manifest::default()
            },
        };
        let mut stored = cfg.clone();
        stored.run_dir = None;
        dir.write("config.json", stored.to_json().as_bytes())?;
        Ok(dir)
    }

    /// Opens an existing run and checks that it was made with `cfg`.
    pub fn open(root: &Path, cfg: &RunConfig) -> Result<Self> {
        let path = root.join("manifest.json");
        if !path.exists() {
            return Err(Error::IncompleteRun(format!("{} (run gen-data first)", path.display())));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "{} was generated with a different configuration",
                root.display()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Writes a file and records its checksum.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        if let Some(d) = p.parent() {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.manifest.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Reads a manifest artifact, verifying presence and checksum.
    pub fn read(&self, rel: &str) -> Result<Vec<u8>> {
        let want = self
            .manifest
            .artifacts
            .get(rel)
            .ok_or_else(|| Error::IncompleteRun(format!("{rel} (not in manifest)")))?;
        let p = self.path(rel);
        let bytes = fs::read(&p).map_err(|_| Error::IncompleteRun(p.display().to_string()))?;
        if &sha256_hex(&bytes) != want {
            return Err(Error::IncompleteRun(format!("{rel} (checksum mismatch)")));
        }
        Ok(bytes)
    }

    fn read_text(&self, rel: &str) -> Result<String> {
        String::from_utf8(self.read(rel)?).map_err(|_| Error::Config(format!("{rel} is not UTF-8")))
    }

    pub fn save_lm(&mut self, rel: &str, p: &LmParams<f32>) -> Result<()> {
        let bytes = checkpoint::encode(&checkpoint::ArchDescriptor::Lm(p.arch), &p.tensors)?;
        self.write(rel, &bytes)
    }

    pub fn load_lm(&self, rel: &str) -> Result<LmParams<f32>> {
        match checkpoint::decode(&self.read(rel)?)? {
            (checkpoint::ArchDescriptor::Lm(a), t) => LmParams::from_parts(a, t),
            _ => Err(Error::Header(format!("{rel} is not a language-model checkpoint"))),
        }
    }

    pub fn save_classifier(&mut self, rel: &str, p: &ClassifierParams<f32>) -> Result<()> {
        let bytes = checkpoint::encode(&checkpoint::ArchDescriptor::Classifier(p.arch), &p.tensors)?;
        self.write(rel, &bytes)
    }

    pub fn load_classifier(&self, rel: &str) -> Result<ClassifierParams<f32>> {
        match checkpoint::decode(&self.read(rel)?)? {
            (checkpoint::ArchDescriptor::Classifier(a), t) => ClassifierParams::from_parts(a, t),
            _ => Err(Error::Header(format!("{rel} is not a classifier checkpoint"))),
        }
    }

    pub fn save_manifest(&self) -> Result<()> {
        let p = self.path("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    /// Replaces every metrics line of `mode` with `lines`.
    pub fn put_metrics<S: Serialize>(&mut self, mode: &str, lines: &[S]) -> Result<()> {
        let p = self.path("metrics.jsonl");
        let mut kept: Vec<String> = match fs::read_to_string(&p) {
            Ok(text) => text
                .lines()
                .filter(|l| {
                    serde_json::from_str::<serde_json::Value>(l)
                        .map(|v| v["mode"] != mode)
                        .unwrap_or(true)
                })
                .map(str::to_string)
                .collect(),
            Err(_) => Vec::new(),
        };
        for l in lines {
            let mut v = serde_json::to_value(l)?;
            if let Some(obj) = v.as_object_mut() {
                obj.insert("mode".into(), mode.into());
            }
            kept.push(serde_json::to_string(&v)?);
        }
        let mut text = kept.join("\n");
        text.push('\n');
        self.write("metrics.jsonl", text.as_bytes())
    }
}

fn tsv_line(labels: &[String], e: &LabeledExample, vocab: &Vocab) -> String {
    format!("{}\t{}\n", labels[e.y], vocab.detokenize(&e.x.ids))
}

fn parse_tsv(text: &str, labels: &[String], vocab: &Vocab, what: &str) -> Result<Vec<LabeledExample>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            let (y, x) = l
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("{what}:{}: expected `label<TAB>text`", i + 1)))?;
            let y = labels
                .iter()
                .position(|n| n == y)
                .ok_or_else(|| Error::Config(format!("{what}:{}: unknown label `{y}`", i + 1)))?;
            Ok(LabeledExample {
                x: vocab.tokenize(x),
                y,
            })
        })
        .collect()
}

/// Everything `gen-data` produces, loaded back from disk.
pub struct Dataset {
    pub spec: ToyTaskSpec,
    pub vocab: Vocab,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub pretrain: Vec<TokenSeq>,
    pub heldout: Vec<TokenSeq>,
    pub shards: Vec<Shard>,
    pub prompts: PromptSet,
    pub verbalizer: Verbalizer,
}

impl Dataset {
    pub fn load(dir: &RunDir, cfg: &RunConfig) -> Result<Self> {
        let spec: ToyTaskSpec = serde_json::from_str(&dir.read_text("data/task_spec.json")?)?;
        let vocab = Vocab::from_tokens(dir.read_text("data/vocab.txt")?.lines().map(str::to_string).collect())?;
        let labels = &spec.labels;
        let train = parse_tsv(&dir.read_text("data/train.tsv")?, labels, &vocab, "train.tsv")?;
        let test = parse_tsv(&dir.read_text("data/test.tsv")?, labels, &vocab, "test.tsv")?;
        let lines = |rel: &str| -> Result<Vec<TokenSeq>> {
            Ok(dir
                .read_text(rel)?
                .lines()
                .map(|l| lm_line(&vocab.encode(l), cfg.lm.context))
                .collect())
        };
        let pretrain = lines("data/pretrain.txt")?;
        let heldout = lines("data/heldout.txt")?;
        let mut shards = Vec::with_capacity(cfg.clients.count);
        for c in 0..cfg.clients.count {
            let indices = dir
                .read_text(&format!("data/shards/client_{c}.txt"))?
                .lines()
                .map(|l| {
                    l.parse::<usize>()
                        .ok()
                        .filter(|&i| i < train.len())
                        .ok_or_else(|| Error::Config(format!("bad shard index `{l}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            shards.push(Shard { client: c, indices });
        }
        let (prompts, verbalizer) = cfg.prompt_config().compile(&vocab, spec.classes())?;
        Ok(Self {
            spec,
            vocab,
            train,
            test,
            pretrain,
            heldout,
            shards,
            prompts,
            verbalizer,
        })
    }

    pub fn lm_arch(&self, cfg: &RunConfig) -> LmArch {
        LmArch::new(self.vocab.len(), cfg.lm.layers, cfg.lm.d_model, cfg.lm.heads, cfg.lm.context)
    }
}

fn run_root(cfg: &RunConfig, run_dir: Option<&Path>) -> Result<PathBuf> {
    run_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.run_dir.clone())
        .ok_or_else(|| Error::Config("no run directory given (config `run_dir` or --run-dir)".into()))
}

/// Writes the toy task, general corpus, shards and manifest.
pub fn cmd_gen_data(cfg: &RunConfig, run_dir: Option<&Path>, force: bool) -> Result<RunDir> {
    cfg.validate()?;
    let root = run_root(cfg, run_dir)?;
    let streams = SeedStreams::new(cfg.seed);
    let spec = ToyTaskSpec::from_config(&cfg.task, &mut streams.stream("data/spec"))?;
    let prompt_cfg = cfg.prompt_config();
    let mut vocab_lines = spec.words();
    vocab_lines.extend(spec.labels.iter().cloned());
    vocab_lines.extend(prompt_cfg.lines());
    let vocab = Vocab::build(&vocab_lines)?;
    prompt_cfg.compile(&vocab, spec.classes())?;
    let task = data::build_toy_task(&spec, &vocab, &mut streams.stream("data/task"))?;
    let corpus = data::build_general_corpus(&spec, &cfg.corpus, &mut streams.stream("data/corpus"))?;
    let shards = data::dirichlet_partition(
        &task.train,
        spec.classes(),
        cfg.clients.count,
        cfg.clients.beta,
        &mut streams.stream("data/partition"),
    )?;

    let mut dir = RunDir::create(&root, cfg, force)?;
    dir.write("data/task_spec.json", serde_json::to_string_pretty(&spec)?.as_bytes())?;
    let mut vtext = vocab.tokens().join("\n");
    vtext.push('\n');
    dir.write("data/vocab.txt", vtext.as_bytes())?;
    for (rel, set) in [("data/train.tsv", &task.train), ("data/test.tsv", &task.test)] {
        let text: String = set.iter().map(|e| tsv_line(&task.labels, e, &vocab)).collect();
        dir.write(rel, text.as_bytes())?;
    }
    for (rel, lines) in [("data/pretrain.txt", &corpus.pretrain), ("data/heldout.txt", &corpus.heldout)] {
        let mut text = lines.join("\n");
        text.push('\n');
        dir.write(rel, text.as_bytes())?;
    }
    for s in &shards {
        let text: String = s.indices.iter().map(|i| format!("{i}\n")).collect();
        dir.write(&format!("data/shards/client_{}.txt", s.client), text.as_bytes())?;
    }
    dir.save_manifest()?;
    log::info!(
        "wrote {} train / {} test examples, {} shards, |V| = {}",
        task.train.len(),
        task.test.len(),
        shards.len(),
        vocab.len()
    );
    Ok(dir)
}

#[derive(Debug, Clone, Serialize)]
struct PretrainLine {
    epoch: usize,
    nll: f64,
}

/// Pre-trains the language model and records the frozen reference.
pub fn cmd_pretrain(cfg: &RunConfig, run_dir: Option<&Path>) -> Result<f64> {
    cfg.validate()?;
    let mut dir = RunDir::open(&run_root(cfg, run_dir)?, cfg)?;
    let ds = Dataset::load(&dir, cfg)?;
    let streams = SeedStreams::new(cfg.seed);
    let init = LmParams::init(ds.lm_arch(cfg), &mut streams.stream("lm/init"))?;
    let (llm, losses) = training::pretrain_lm(&init, &ds.pretrain, &cfg.pretrain, &mut streams.stream("lm/pretrain"))?;
    let ppl = eval::perplexity(&llm, &ds.heldout)?;
    dir.save_lm(PRETRAINED, &llm)?;
    dir.manifest.theta_old_hash = Some(hash_params(&llm.tensors));
    dir.manifest.ppl_before = Some(ppl);
    // later stages depend on the reference model
    dir.manifest.local_clients.clear();
    dir.manifest.modes.clear();
    let lines: Vec<PretrainLine> = losses
        .iter()
        .enumerate()
        .map(|(epoch, &nll)| PretrainLine { epoch, nll })
        .collect();
    dir.put_metrics("pretrain", &lines)?;
    dir.save_manifest()?;
    log::info!("pre-training done, held-out perplexity {ppl:.3}");
    Ok(ppl)
}

fn client_specs(cfg: &RunConfig, ds: &Dataset, streams: &SeedStreams) -> Vec<ClientSpec> {
    ds.shards
        .iter()
        .map(|s| ClientSpec {
            id: s.client,
            arch: cfg.clients.arch(s.client),
            shard: s.clone(),
            local_epochs: cfg.clients.local.epochs,
            seed: streams.stream(&format!("clients/{}", s.client)).random(),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct LocalLine {
    client: usize,
    arch: crate::classifier::ClassifierKind,
    shard_size: usize,
    train_accuracy: f64,
}

/// Trains (or loads) every client's local classifier.
fn local_models(dir: &mut RunDir, cfg: &RunConfig, ds: &Dataset) -> Result<Vec<ClassifierParams<f32>>> {
    if dir.manifest.local_clients.len() == cfg.clients.count {
        return dir
            .manifest
            .local_clients
            .clone()
            .iter()
            .map(|rel| dir.load_classifier(rel))
            .collect();
    }
    let streams = SeedStreams::new(cfg.seed);
    let mut out = Vec::new();
    let mut lines = Vec::new();
    let mut rels = Vec::new();
    for spec in client_specs(cfg, ds, &streams) {
        let m = federation::client_local_train(&spec, &ds.train, ds.vocab.len(), ds.spec.classes(), &cfg.clients.local)?;
        let shard: Vec<LabeledExample> = spec.shard.examples(&ds.train).into_iter().cloned().collect();
        lines.push(LocalLine {
            client: spec.id,
            arch: spec.arch,
            shard_size: shard.len(),
            train_accuracy: eval::eval_slm_accuracy(&m, &shard)?,
        });
        let rel = format!("models/clients/client_{}.ckpt", spec.id);
        dir.save_classifier(&rel, &m)?;
        rels.push(rel);
        out.push(m);
    }
    dir.manifest.local_clients = rels;
    dir.put_metrics("local", &lines)?;
    Ok(out)
}

fn server_config(cfg: &RunConfig) -> ServerConfig {
    ServerConfig {
        gamma: cfg.gamma,
        filter: cfg.filter,
        sampling: cfg.sampling,
        round: cfg.llm_round,
        enhance_batch: cfg.enhance_batch,
        enhance: cfg.enhance,
    }
}

#[derive(Debug, Clone, Serialize)]
struct DatafreeLine {
    client: usize,
    enhance: federation::EnhanceStats,
}

/// Executes one experiment mode and persists its artifacts and metrics.
pub fn cmd_run(cfg: &RunConfig, run_dir: Option<&Path>, mode: Mode) -> Result<()> {
    cfg.validate()?;
    let mut dir = RunDir::open(&run_root(cfg, run_dir)?, cfg)?;
    let ds = Dataset::load(&dir, cfg)?;
    let old = dir.load_lm(PRETRAINED)?;
    if dir.manifest.theta_old_hash.as_deref() != Some(hash_params(&old.tensors).as_str()) {
        return Err(Error::IncompleteRun(format!("{PRETRAINED} (reference hash mismatch)")));
    }
    let locals = local_models(&mut dir, cfg, &ds)?;
    let streams = SeedStreams::new(cfg.seed);
    let scfg = server_config(cfg);
    let table = EmbedTable::random(ds.vocab.len(), cfg.embed_dim, &mut streams.stream("filter/embed"));
    let prefix = format!("models/{}", mode.name());
    let mut artifacts = ModeArtifacts {
        llm: PRETRAINED.into(),
        clients: Vec::new(),
    };
    let finals: Vec<ClassifierParams<f32>> = match mode {
        Mode::Standalone => locals,
        Mode::DatafreeKd => {
            let mut out = Vec::new();
            let mut lines = Vec::new();
            for (c, slm) in locals.iter().enumerate() {
                let mut rng = streams.stream(&format!("datafree/{c}"));
                let (e, stats, _, _) = federation::enhance_with_synthetic(&old, slm, &ds.prompts, &table, &scfg, &mut rng)?;
                lines.push(DatafreeLine { client: c, enhance: stats });
                out.push(e);
            }
            dir.put_metrics(mode.name(), &lines)?;
            out
        }
        Mode::Crosslm => {
            // clients hand their models over as checkpoint files
            let inbox: BTreeMap<usize, ClassifierParams<f32>> = dir
                .manifest
                .local_clients
                .iter()
                .enumerate()
                .map(|(c, rel)| Ok((c, checkpoint::load_classifier(&dir.path(rel))?)))
                .collect::<Result<_>>()?;
            let ids: Vec<usize> = inbox.keys().copied().collect();
            let schedule: ArrivalSchedule = federation::make_schedule(&ids, &mut streams.stream("schedule"));
            let mut state = ServerState::new(old.clone());
            let metrics = federation::server_loop(&mut state, &schedule, &inbox, &ds.prompts, &table, &scfg, &streams)?;
            dir.put_metrics(mode.name(), &metrics)?;
            let llm_rel = format!("{prefix}/llm.ckpt");
            dir.save_lm(&llm_rel, &state.theta)?;
            artifacts.llm = llm_rel;
            (0..cfg.clients.count)
                .map(|c| {
                    let rec = &state.registry[&c];
                    rec.enhanced.clone().unwrap_or_else(|| rec.received.clone())
                })
                .collect()
        }
    };
    for (c, m) in finals.iter().enumerate() {
        let rel = format!("{prefix}/client_{c}.ckpt");
        dir.save_classifier(&rel, m)?;
        artifacts.clients.push(rel);
    }
    dir.manifest.modes.insert(mode, artifacts);
    dir.save_manifest()?;
    log::info!("mode {mode} complete");
    Ok(())
}

/// Evaluates every executed mode and writes `report.json`.
pub fn cmd_eval(cfg: &RunConfig, run_dir: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let mut dir = RunDir::open(&run_root(cfg, run_dir)?, cfg)?;
    let ds = Dataset::load(&dir, cfg)?;
    let old = dir.load_lm(PRETRAINED)?;
    let ppl_before = dir
        .manifest
        .ppl_before
        .ok_or_else(|| Error::IncompleteRun("pre-training record".into()))?;
    if dir.manifest.modes.is_empty() {
        return Err(Error::IncompleteRun("experiment results (no mode has been run)".into()));
    }
    let streams = SeedStreams::new(cfg.seed);
    let locals: Vec<ClassifierParams<f32>> = dir
        .manifest
        .local_clients
        .iter()
        .map(|rel| dir.load_classifier(rel))
        .collect::<Result<_>>()?;
    if locals.len() != cfg.clients.count {
        return Err(Error::IncompleteRun("local client models".into()));
    }
    let local_acc = locals
        .iter()
        .map(|m| eval::eval_slm_accuracy(m, &ds.test))
        .collect::<Result<Vec<_>>>()?;
    let local_mean = local_acc.iter().sum::<f64>() / local_acc.len() as f64;
    let nlu_before = eval::eval_llm_nlu(&old, &ds.test, &ds.prompts, &ds.verbalizer)?;
    let nlg = |llm: &LmParams<f32>, judges: &[ClassifierParams<f32>]| -> Result<f64> {
        let refs: Vec<&ClassifierParams<f32>> = judges.iter().collect();
        eval::eval_llm_nlg(
            llm,
            &refs,
            &ds.prompts,
            cfg.eval.nlg_samples,
            &cfg.sampling,
            &mut streams.stream("eval/nlg"),
        )
    };

    let mut modes = BTreeMap::new();
    for (mode, art) in dir.manifest.modes.clone() {
        let llm = dir.load_lm(&art.llm)?;
        let finals: Vec<ClassifierParams<f32>> = art
            .clients
            .iter()
            .map(|rel| dir.load_classifier(rel))
            .collect::<Result<_>>()?;
        if finals.len() != cfg.clients.count {
            return Err(Error::IncompleteRun(format!("{mode} client models")));
        }
        let mut acc = BTreeMap::new();
        for (c, m) in finals.iter().enumerate() {
            acc.insert(c, eval::eval_slm_accuracy(m, &ds.test)?);
        }
        let judges = match cfg.eval.judges {
            JudgeSet::Enhanced => &finals,
            JudgeSet::Received => &locals,
        };
        let nlg_pre = nlg(&old, judges)?;
        let changed = hash_params(&llm.tensors) != hash_params(&old.tensors);
        let (nlu, nlg_post, ppl) = if changed {
            (
                eval::eval_llm_nlu(&llm, &ds.test, &ds.prompts, &ds.verbalizer)?,
                nlg(&llm, judges)?,
                eval::perplexity(&llm, &ds.heldout)?,
            )
        } else {
            (nlu_before, nlg_pre, ppl_before)
        };
        modes.insert(
            mode.name().to_string(),
            ModeReport {
                slm_accuracy_mean: acc.values().sum::<f64>() / acc.len() as f64,
                slm_accuracy: acc,
                local_accuracy_mean: local_mean,
                llm_nlu: nlu,
                llm_nlg_pre: nlg_pre,
                llm_nlg: nlg_post,
                perplexity: ppl,
                llm_hash: hash_params(&llm.tensors),
            },
        );
    }
    let report = EvalReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        bayes_ceiling: data::bayes_oracle_accuracy(&ds.spec, &ds.test, &ds.vocab)?,
        vocab_size: ds.vocab.len(),
        llm_nlu_before: nlu_before,
        ppl_before,
        modes,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    dir.write("report.json", text.as_bytes())?;
    dir.save_manifest()?;
    Ok(report)
}

/// `gen-data`, `pretrain`, every configured mode, then `eval`.
pub fn run_all(cfg: &RunConfig, run_dir: Option<&Path>, force: bool) -> Result<EvalReport> {
    cmd_gen_data(cfg, run_dir, force)?;
    cmd_pretrain(cfg, run_dir)?;
    for &m in &cfg.modes {
        cmd_run(cfg, run_dir, m)?;
    }
    cmd_eval(cfg, run_dir)
}
