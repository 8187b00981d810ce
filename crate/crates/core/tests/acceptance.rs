//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Every expected value here is computed by an oracle written for this file
//! (brute force, full sort, closed form) rather than read back from the code
//! under test.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::Rng as _;

use crosslm::checkpoint::{self, ArchDescriptor};
use crosslm::classifier::{ClassifierArch, ClassifierKind, ClassifierParams};
use crosslm::config::{GradcheckConfig, RunConfig};
use crosslm::data::{dirichlet_partition, mean_label_tv, LabeledExample};
use crosslm::eval::{self, EvalReport};
use crosslm::experiment;
use crosslm::filter::{self, EmbedTable, FilterConfig};
use crosslm::gradcheck;
use crosslm::lm::{LmArch, LmParams, Span};
use crosslm::rng::{seeded, Rng};
use crosslm::tensor::{ParamSet, Tensor};
use crosslm::transfer::{self, PromptConfig, SyntheticSample};
use crosslm::vocab::{Role, TokenSeq, Vocab, BOS, EOS};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: usize, name: &'static str, failures: Vec<String>, summary: String) -> Outcome {
    let pass = failures.is_empty();
    let detail = if pass {
        summary
    } else {
        format!("{summary}; {}", failures.join("; "))
    };
    Outcome { id, name, pass, detail }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1e-300)
}

// 1

fn gradients() -> Outcome {
    let t = Instant::now();
    let (failures, summary) = match gradcheck::run_gradcheck(&GradcheckConfig::default(), None) {
        Ok(r) => {
            let mut f: Vec<String> = r
                .checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| format!("{} {:?} rel err {:.2e}", c.precision, c.loss, c.max_rel_err))
                .collect();
            let want = [("f32", 1e-3), ("f64", 1e-6)];
            for (prec, tol) in want {
                let n = r.checks.iter().filter(|c| c.precision == prec && c.tolerance <= tol).count();
                if n != 4 {
                    f.push(format!("{prec}: {n} of 4 losses checked at tolerance {tol:e}"));
                }
            }
            let worst = r.checks.iter().map(|c| c.max_rel_err / c.tolerance).fold(0.0, f64::max);
            (f, format!("{} checks, worst err/tol {worst:.2e}", r.checks.len()))
        }
        Err(e) => (vec![e.to_string()], "gradcheck errored".into()),
    };
    let mut failures = failures;
    let elapsed = t.elapsed();
    if elapsed > Duration::from_secs(30) {
        failures.push(format!("took {elapsed:.1?}"));
    }
    outcome(1, "gradient correctness", failures, format!("{summary}, {elapsed:.1?}"))
}

// 2

fn random_lm(vocab: usize, rng: &mut Rng) -> LmParams<f32> {
    let arch = LmArch::new(vocab, 1, 16, 2, 32);
    LmParams::init_with(arch, 0.4, true, rng).expect("valid arch")
}

fn random_sample(vocab: usize, label: usize, rng: &mut Rng) -> SyntheticSample {
    let mut seq = TokenSeq::prompt(vec![BOS, rng.random_range(4..vocab)]);
    let n = rng.random_range(1..12);
    let mut words: Vec<usize> = (0..n).map(|_| rng.random_range(4..vocab)).collect();
    if rng.random_bool(0.5) {
        words.push(EOS);
    }
    seq.extend(&TokenSeq::tagged(words, Role::Completion));
    SyntheticSample::from_generation(label, seq).expect("nonempty completion")
}

fn loss_identities() -> Outcome {
    let mut rng = seeded(2024);
    let vocab = 20;
    let mut f = Vec::new();
    let (mut worst_g, mut worst_r, mut worst_anti, mut min_kl) = (0f64, 0f64, 0f64, f64::INFINITY);
    for i in 0..100 {
        let old = random_lm(vocab, &mut rng);
        let theta = random_lm(vocab, &mut rng);
        let kind = if i % 2 == 0 { ClassifierKind::Tiny } else { ClassifierKind::Small };
        let slm: ClassifierParams<f32> =
            ClassifierParams::init_with(ClassifierArch::new(kind, vocab, 2), 1.0, true, &mut rng).expect("valid");
        let mut s = random_sample(vocab, rng.random_range(0..2), &mut rng);
        let r = transfer::compute_reward(&slm, &mut s).expect("reward");
        if !(-1.0..=1.0).contains(&r) {
            f.push(format!("sample {i}: reward {r} outside [-1, 1]"));
        }
        let mut flipped = s.clone();
        flipped.label = 1 - s.label;
        let r2 = transfer::compute_reward(&slm, &mut flipped).expect("reward");
        worst_anti = worst_anti.max((r + r2).abs());

        let lg = transfer::generation_loss(&old, &old, &s, Span::All).expect("L_g");
        let lr_self = transfer::regularization_loss(&old, &old, &s).expect("L_r");
        let lr = transfer::regularization_loss(&theta, &old, &s).expect("L_r");
        worst_g = worst_g.max(lg.abs());
        worst_r = worst_r.max(lr_self.abs());
        min_kl = min_kl.min(lr);
    }
    if worst_g > 1e-6 {
        f.push(format!("|L_g(old, old)| up to {worst_g:.2e}"));
    }
    if worst_r > 1e-6 {
        f.push(format!("|L_r(old, old)| up to {worst_r:.2e}"));
    }
    if min_kl < 0.0 {
        f.push(format!("L_r reached {min_kl:.2e}"));
    }
    if worst_anti > 1e-6 {
        f.push(format!("reward antisymmetry off by {worst_anti:.2e}"));
    }
    let summary = format!(
        "100 samples: max|L_g| {worst_g:.1e}, max|L_r| {worst_r:.1e}, min L_r {min_kl:.2e}, antisym {worst_anti:.1e}"
    );
    outcome(2, "loss identities", f, summary)
}

// 3

fn oracle_embed(ids: &[usize], rows: &[f64], dim: usize) -> Vec<f64> {
    let mut v = vec![0f64; dim];
    for &id in ids {
        for d in 0..dim {
            v[d] += rows[id * dim + d];
        }
    }
    v.iter().map(|x| x / ids.len() as f64).collect()
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na.sqrt() < 1e-12 || nb.sqrt() < 1e-12 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// `1 − max_{k≠j} cos` over all ordered pairs.
fn oracle_diversity(sentences: &[Vec<usize>], rows: &[f64], dim: usize) -> Vec<f64> {
    let vecs: Vec<Vec<f64>> = sentences.iter().map(|s| oracle_embed(s, rows, dim)).collect();
    (0..vecs.len())
        .map(|j| {
            let mut m = f64::NEG_INFINITY;
            for k in 0..vecs.len() {
                if k != j {
                    m = m.max(oracle_cos(&vecs[j], &vecs[k]));
                }
            }
            1.0 - m
        })
        .collect()
}

/// Full sort by (score desc, reward desc, index asc), top ⌈αn/100⌉,
/// returned in index order.
fn oracle_select(rewards: &[f64], div: &[f64], alpha_pct: u32) -> Vec<usize> {
    let n = rewards.len();
    let k = (alpha_pct as usize * n).div_ceil(100);
    let mut idx: Vec<usize> = (0..n).collect();
    let score = |i: usize| rewards[i] * div[i];
    idx.sort_by(|&a, &b| {
        score(b)
            .partial_cmp(&score(a))
            .expect("finite")
            .then(rewards[b].partial_cmp(&rewards[a]).expect("finite"))
            .then(a.cmp(&b))
    });
    let mut top: Vec<usize> = idx[..k].to_vec();
    top.sort_unstable();
    top
}

fn filter_oracles() -> Outcome {
    let mut rng = seeded(77);
    let (vocab, dim) = (30, 8);
    let mut f = Vec::new();
    let mut ties = 0usize;
    let alphas = [25u32, 10, 50, 33, 100, 1];
    for b in 0..200 {
        let rows: Vec<f64> = Tensor::<f64>::gaussian(&[vocab, dim], 1.0, &mut rng).data;
        let table = EmbedTable::from_rows(dim, rows.clone()).expect("table");
        let n = rng.random_range(2..=100);
        // small word pool and coarse rewards so duplicates and score ties occur
        let pool = if b % 3 == 0 { 6 } else { vocab - 4 };
        let mut sentences: Vec<Vec<usize>> = Vec::with_capacity(n);
        for _ in 0..n {
            if !sentences.is_empty() && rng.random_bool(0.2) {
                let j = rng.random_range(0..sentences.len());
                sentences.push(sentences[j].clone());
            } else {
                let len = rng.random_range(1..6);
                sentences.push((0..len).map(|_| 4 + rng.random_range(0..pool)).collect());
            }
        }
        let rewards: Vec<f64> = (0..n)
            .map(|_| {
                if b % 2 == 0 {
                    rng.random_range(-4i32..=4) as f64 / 4.0
                } else {
                    rng.random_range(-1.0..=1.0)
                }
            })
            .collect();
        let mut batch: Vec<SyntheticSample> = sentences
            .iter()
            .zip(&rewards)
            .map(|(s, &r)| {
                let seq = TokenSeq::prompt(vec![BOS]).concat(&TokenSeq::tagged(s.clone(), Role::Completion));
                let mut x = SyntheticSample::from_generation(rng.random_range(0..2), seq).expect("nonempty");
                x.reward = Some(r);
                x
            })
            .collect();

        let want_div = oracle_diversity(&sentences, &rows, dim);
        if let Err(e) = filter::diversity_scores(&mut batch, &table) {
            f.push(format!("batch {b}: {e}"));
            continue;
        }
        let got_div: Vec<f64> = batch.iter().map(|s| s.diversity.expect("set")).collect();
        if got_div.iter().zip(&want_div).any(|(a, b)| a.to_bits() != b.to_bits()) {
            f.push(format!("batch {b}: diversity differs from brute force"));
        }

        let alpha = alphas[b % alphas.len()];
        let cfg = FilterConfig {
            alpha_percent: alpha as f64,
            clamp_reward_at_zero: false,
        };
        let want_sel = oracle_select(&rewards, &want_div, alpha);
        let scores: Vec<u64> = (0..n).map(|i| (rewards[i] * want_div[i]).to_bits()).collect();
        if scores.iter().collect::<BTreeSet<_>>().len() < n {
            ties += 1;
        }
        match filter::score_and_select(&mut batch, &cfg) {
            Ok(sel) => {
                if sel != want_sel {
                    f.push(format!("batch {b}: selection differs from full sort"));
                }
                if sel.len() != (alpha as usize * n).div_ceil(100) {
                    f.push(format!("batch {b}: {} selected of {n} at alpha {alpha}", sel.len()));
                }
            }
            Err(e) => f.push(format!("batch {b}: {e}")),
        }
    }
    if ties < 20 {
        f.push(format!("only {ties} batches exercised score ties"));
    }
    f.truncate(5);
    outcome(3, "filter oracle equivalence", f, format!("200 batches, {ties} with tied scores"))
}

// 4

fn uniform_closed_forms() -> Outcome {
    let labels: Vec<String> = vec!["alpha".into(), "beta".into(), "gamma".into()];
    let words = "alpha beta gamma ALPHA BETA GAMMA a b c d e";
    let vocab = Vocab::build(&[words]).expect("vocab");
    let v = vocab.len();
    let (prompts, verb) = PromptConfig::for_labels(&labels).compile(&vocab, 3).expect("prompts");
    let llm: LmParams<f32> = LmParams::init(LmArch::new(v, 2, 16, 2, 32), &mut seeded(9)).expect("lm");
    let mut f = Vec::new();
    let mut rng = seeded(10);
    let c = labels.len() as f64;
    let mut worst = 0f64;
    for i in 0..20 {
        let len = rng.random_range(1..10);
        let x = TokenSeq::raw((0..len).map(|_| rng.random_range(4..v)).collect());
        let (_, probs) = transfer::classify_with_verbalizer(&llm, &x, &prompts, &verb).expect("nlu");
        for p in &probs {
            worst = worst.max(((p - 1.0 / c) * c).abs());
        }
        let y = i % 3;
        let seq = TokenSeq::prompt(prompts.gen[y].ids.clone()).concat(&TokenSeq::tagged(x.ids.clone(), Role::Completion));
        let s = SyntheticSample::from_generation(y, seq).expect("nonempty");
        let lt = transfer::unsupervised_loss(&llm, &s, &prompts).expect("L_t");
        let scored = s.unsupervised_seq(&prompts).len() - 1;
        let want = scored as f64 * (v as f64).ln();
        if !rel_close(lt, want, 1e-6) {
            f.push(format!("L_t {lt} vs n·log|V| {want}"));
        }
    }
    if worst > 1e-6 {
        f.push(format!("NLU distribution off 1/C by {worst:.2e} relative"));
    }
    let lines: Vec<TokenSeq> = (0..10)
        .map(|_| {
            let len = rng.random_range(1..20);
            let mut ids = vec![BOS];
            ids.extend((0..len).map(|_| rng.random_range(4..v)));
            ids.push(EOS);
            TokenSeq::raw(ids)
        })
        .collect();
    let ppl = eval::perplexity(&llm, &lines).expect("ppl");
    if !rel_close(ppl, v as f64, 1e-6) {
        f.push(format!("perplexity {ppl} vs |V| {v}"));
    }
    f.truncate(5);
    outcome(4, "uniform-model closed forms", f, format!("|V| {v}: ppl {ppl:.9}, NLU max rel dev {worst:.1e}"))
}

// 5

fn partition_contract() -> Outcome {
    let mut f = Vec::new();
    let mut rng = seeded(5);
    let mut ordered = 0;
    for combo in 0..20u64 {
        let n = rng.random_range(40..2000);
        let classes = rng.random_range(2..5);
        let clients = rng.random_range(2..9);
        let train: Vec<LabeledExample> = (0..n)
            .map(|i| LabeledExample {
                x: TokenSeq::raw(vec![4]),
                y: i % classes,
            })
            .collect();
        let mut tv = Vec::new();
        for beta in [0.1, 1.0, 100.0] {
            let shards = match dirichlet_partition(&train, classes, clients, beta, &mut seeded(combo * 31 + 7)) {
                Ok(s) => s,
                Err(e) => {
                    f.push(format!("N {n} beta {beta}: {e}"));
                    continue;
                }
            };
            let mut seen = vec![0u8; n];
            for s in &shards {
                for &i in &s.indices {
                    seen[i] += 1;
                }
            }
            if seen.iter().any(|&c| c != 1) {
                f.push(format!("N {n} beta {beta} seed {combo}: shards not a partition"));
            }
            if shards.iter().any(|s| s.indices.is_empty()) {
                f.push(format!("N {n} beta {beta}: empty shard"));
            }
            tv.push(mean_label_tv(&shards, &train, classes));
        }
        if tv.len() == 3 {
            if tv[0] > tv[2] {
                ordered += 1;
            } else {
                f.push(format!("N {n}: TV(beta 0.1) {:.3} <= TV(beta 100) {:.3}", tv[0], tv[2]));
            }
        }
    }
    f.truncate(5);
    outcome(5, "partition contract", f, format!("20 combinations, TV ordered in {ordered}"))
}

// 6 to 10

struct SeedRun {
    seed: u64,
    report: EvalReport,
    elapsed: Duration,
    bytes: Vec<u8>,
}

fn run_seed(seed: u64, root: &Path) -> Result<SeedRun, String> {
    let cfg = RunConfig::with_seed(seed);
    let dir = root.join(format!("seed{seed}"));
    let t = Instant::now();
    let report = experiment::run_all(&cfg, Some(&dir), true).map_err(|e| format!("seed {seed}: {e}"))?;
    let elapsed = t.elapsed();
    let bytes = std::fs::read(dir.join("report.json")).map_err(|e| e.to_string())?;
    Ok(SeedRun {
        seed,
        report,
        elapsed,
        bytes,
    })
}

fn mode(r: &EvalReport, name: &str) -> Result<f64, String> {
    r.modes
        .get(name)
        .map(|m| m.slm_accuracy_mean)
        .ok_or_else(|| format!("seed {}: mode {name} missing", r.seed))
}

fn slm_enhancement(runs: &[SeedRun]) -> Outcome {
    let mut f = Vec::new();
    let (mut cx, mut sa, mut df) = (0.0, 0.0, 0.0);
    for r in runs {
        match (mode(&r.report, "crosslm"), mode(&r.report, "standalone"), mode(&r.report, "datafree_kd")) {
            (Ok(a), Ok(b), Ok(c)) => {
                cx += a;
                sa += b;
                df += c;
            }
            (a, b, c) => f.extend([a, b, c].into_iter().filter_map(|x| x.err())),
        }
        if r.elapsed > Duration::from_secs(600) {
            f.push(format!("seed {} took {:.0?}", r.seed, r.elapsed));
        }
    }
    let n = runs.len() as f64;
    let (cx, sa, df) = (cx / n, sa / n, df / n);
    let gain = 100.0 * (cx - sa);
    let vs_df = 100.0 * (cx - df);
    if gain < 2.0 {
        f.push(format!("crosslm - standalone {gain:+.2} pt < 2"));
    }
    if vs_df < -0.5 {
        f.push(format!("crosslm - datafree {vs_df:+.2} pt < -0.5"));
    }
    let slowest = runs.iter().map(|r| r.elapsed).max().unwrap_or_default();
    let summary = format!(
        "crosslm {cx:.4}, standalone {sa:.4}, datafree {df:.4} ({gain:+.2} / {vs_df:+.2} pt), slowest seed {slowest:.0?}"
    );
    outcome(6, "SLM enhancement", f, summary)
}

fn median_gain(
    id: usize,
    name: &'static str,
    runs: &[SeedRun],
    pick: impl Fn(&EvalReport) -> Option<(f64, f64)>,
    ok: impl Fn(f64) -> bool,
    unit: &str,
) -> Outcome {
    let mut f = Vec::new();
    let mut deltas = Vec::new();
    for r in runs {
        match pick(&r.report) {
            Some((before, after)) => deltas.push((r.seed, before, after)),
            None => f.push(format!("seed {}: crosslm missing", r.seed)),
        }
    }
    let values: Vec<f64> = deltas
        .iter()
        .map(|&(_, b, a)| if unit == "%" { 100.0 * (a / b - 1.0) } else { 100.0 * (a - b) })
        .collect();
    let m = median(values.clone());
    if !ok(m) {
        f.push(format!("median {m:+.2} {unit}"));
    }
    let per: Vec<String> = values.iter().map(|v| format!("{v:+.1}")).collect();
    outcome(id, name, f, format!("median {m:+.2} {unit} (per seed {})", per.join(", ")))
}

fn determinism(first: &SeedRun, root: &Path) -> Outcome {
    let again = run_seed(first.seed, &root.join("rerun"));
    let (f, summary) = match again {
        Ok(r) if r.bytes == first.bytes => (vec![], format!("seed {}: report.json identical ({} bytes)", first.seed, r.bytes.len())),
        Ok(_) => (vec!["report.json differs between runs".to_string()], format!("seed {}", first.seed)),
        Err(e) => (vec![e], "rerun failed".into()),
    };
    outcome(10, "determinism", f, summary)
}

// 11

fn random_params(rng: &mut Rng) -> (ArchDescriptor, ParamSet<f32>) {
    if rng.random_bool(0.5) {
        let heads = *[1usize, 2, 4].choose(rng).expect("nonempty");
        let arch = LmArch::new(rng.random_range(5..40), rng.random_range(1..3), 8 * heads, heads, rng.random_range(4..40));
        let p = LmParams::init_with(arch, rng.random_range(0.01..3.0), true, rng).expect("lm");
        (ArchDescriptor::Lm(arch), p.tensors)
    } else {
        let kind = if rng.random_bool(0.5) { ClassifierKind::Tiny } else { ClassifierKind::Small };
        let arch = ClassifierArch::new(kind, rng.random_range(5..60), rng.random_range(2..6));
        let p: ClassifierParams<f32> = ClassifierParams::init_with(arch, rng.random_range(0.01..3.0), true, rng).expect("slm");
        (ArchDescriptor::Classifier(arch), p.tensors)
    }
}

fn bits(p: &ParamSet<f32>) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    p.iter()
        .map(|(n, t)| (n.clone(), t.shape.clone(), t.data.iter().map(|x| x.to_bits()).collect()))
        .collect()
}

fn serialization(root: &Path) -> Outcome {
    let mut rng = seeded(11);
    let mut f = Vec::new();
    for i in 0..50 {
        let (arch, mut p) = random_params(&mut rng);
        // special values must survive too
        if let Some((_, t)) = p.iter_mut().next() {
            let n = t.data.len();
            t.data[rng.random_range(0..n)] = -0.0;
            t.data[rng.random_range(0..n)] = f32::MIN_POSITIVE / 2.0;
        }
        let path = root.join(format!("ckpt{i}.bin"));
        let back = checkpoint::save(&path, &arch, &p).and_then(|_| checkpoint::load(&path));
        match back {
            Ok((a, q)) => {
                if a != arch || bits(&q) != bits(&p) {
                    f.push(format!("set {i}: round trip not bit-exact"));
                }
            }
            Err(e) => f.push(format!("set {i}: {e}")),
        }
    }

    let (arch, p) = random_params(&mut seeded(12));
    let good = checkpoint::encode(&arch, &p).expect("encode");
    let header_len = u64::from_le_bytes(good[5..13].try_into().expect("8 bytes")) as usize;
    let header = String::from_utf8(good[13..13 + header_len].to_vec()).expect("json header");
    let swap_header = |h: &str| {
        let mut out = good[..5].to_vec();
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(h.as_bytes());
        out.extend_from_slice(&good[13 + header_len..]);
        out
    };
    let mut corrupt: Vec<(&str, Vec<u8>)> = Vec::new();
    let mut b = good.clone();
    b[0] = b'X';
    corrupt.push(("magic", b));
    let mut b = good.clone();
    b[4] = 99;
    corrupt.push(("version", b));
    let mut b = good.clone();
    b[5..13].copy_from_slice(&(u64::MAX - 3).to_le_bytes());
    corrupt.push(("header length", b));
    corrupt.push(("truncated prefix", good[..9].to_vec()));
    corrupt.push(("truncated blob", good[..good.len() - 4].to_vec()));
    corrupt.push(("garbled json", swap_header(&header.replacen('{', "[", 1))));
    corrupt.push(("dtype", swap_header(&header.replacen("\"f32\"", "\"f16\"", 1))));
    corrupt.push(("shape", swap_header(&header.replacen("\"shape\":[", "\"shape\":[1,", 1))));
    corrupt.push(("extra field", swap_header(&header.replacen('{', "{\"x\":1,", 1))));
    let mut b = good.clone();
    b.extend_from_slice(&[0, 0, 0, 0]);
    corrupt.push(("trailing bytes", b));
    let mut rejected = 0;
    for (what, bytes) in &corrupt {
        match checkpoint::decode(bytes) {
            Err(_) => rejected += 1,
            Ok(_) => f.push(format!("{what} corruption accepted")),
        }
    }
    f.truncate(5);
    let summary = format!("50 round trips, {rejected}/{} corruptions rejected", corrupt.len());
    outcome(11, "serialization", f, summary)
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut results = vec![
        gradients(),
        loss_identities(),
        filter_oracles(),
        uniform_closed_forms(),
        partition_contract(),
    ];

    let mut runs = Vec::new();
    let mut run_errors = Vec::new();
    for seed in SEEDS {
        match run_seed(seed, root) {
            Ok(r) => {
                eprintln!("seed {seed} finished in {:.0?}", r.elapsed);
                runs.push(r);
            }
            Err(e) => run_errors.push(e),
        }
    }
    if run_errors.is_empty() {
        results.push(slm_enhancement(&runs));
        results.push(median_gain(
            7,
            "LLM NLU gain",
            &runs,
            |r| r.modes.get("crosslm").map(|m| (r.llm_nlu_before, m.llm_nlu)),
            |m| m >= 5.0,
            "pt",
        ));
        results.push(median_gain(
            8,
            "LLM NLG gain",
            &runs,
            |r| r.modes.get("crosslm").map(|m| (m.llm_nlg_pre, m.llm_nlg)),
            |m| m >= 5.0,
            "pt",
        ));
        results.push(median_gain(
            9,
            "perplexity drift",
            &runs,
            |r| r.modes.get("crosslm").map(|m| (r.ppl_before, m.perplexity)),
            |m| m <= 10.0,
            "%",
        ));
        results.push(determinism(&runs[0], root));
    } else {
        for (id, name) in [(6, "SLM enhancement"), (7, "LLM NLU gain"), (8, "LLM NLG gain"), (9, "perplexity drift"), (10, "determinism")] {
            results.push(outcome(id, name, run_errors.clone(), "pipeline failed".into()));
        }
    }
    results.push(serialization(root));

    results.sort_by_key(|o| o.id);
    for o in &results {
        println!(
            "{} {:>2} {:<28} {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.name,
            o.detail
        );
    }
    let failed = results.iter().filter(|o| !o.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
