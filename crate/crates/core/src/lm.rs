//! Tiny decoder-only transformer.
//!
//! Pre-norm blocks (causal multi-head attention, ReLU MLP), learned
//! positional table, untied output head. The head is zero-initialized, so a
//! fresh model predicts exactly uniform next-token distributions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, softmax_f64, Bound, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamSet, Scalar, Tensor};
use crate::vocab::{Role, TokenSeq};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmArch {
    pub vocab: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub context: usize,
    pub d_ff: usize,
}

impl LmArch {
    pub fn new(vocab: usize, layers: usize, d_model: usize, heads: usize, context: usize) -> Self {
        Self {
            vocab,
            layers,
            d_model,
            heads,
            context,
            d_ff: 4 * d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 5 || self.layers == 0 || self.d_model == 0 || self.context < 2 {
            return Err(Error::Config(format!("invalid LM architecture {self:?}")));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (v, d, f) = (self.vocab, self.d_model, self.d_ff);
        let mut m = BTreeMap::new();
        m.insert("tok_emb".to_string(), vec![v, d]);
        m.insert("pos_emb".to_string(), vec![self.context, d]);
        for l in 0..self.layers {
            for (name, shape) in [
                ("ln1.g", vec![d]),
                ("ln1.b", vec![d]),
                ("attn.wq", vec![d, d]),
                ("attn.wk", vec![d, d]),
                ("attn.wv", vec![d, d]),
                ("attn.wo", vec![d, d]),
                ("ln2.g", vec![d]),
                ("ln2.b", vec![d]),
                ("mlp.w1", vec![d, f]),
                ("mlp.b1", vec![f]),
                ("mlp.w2", vec![f, d]),
                ("mlp.b2", vec![d]),
            ] {
                m.insert(format!("l{l}.{name}"), shape);
            }
        }
        m.insert("ln_f.g".to_string(), vec![d]);
        m.insert("ln_f.b".to_string(), vec![d]);
        m.insert("head.w".to_string(), vec![d, v]);
        m.insert("head.b".to_string(), vec![v]);
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams<T = f32> {
    pub arch: LmArch,
    pub tensors: ParamSet<T>,
}

impl<T: Scalar> LmParams<T> {
    /// Gaussian(0, 0.02) weights and embeddings, unit norm gains, zero
    /// biases, zero output head.
    pub fn init(arch: LmArch, rng: &mut Rng) -> Result<Self> {
        Self::init_with(arch, INIT_STD, false, rng)
    }

    /// Like [`LmParams::init`] with a custom weight scale; `random_head`
    /// also draws the output head.
    pub fn init_with(arch: LmArch, std: f64, random_head: bool, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut tensors = ParamSet::new();
        for (name, shape) in arch.expected_shapes() {
            let t = if name.ends_with(".g") {
                let mut t = Tensor::zeros(&shape);
                t.data.fill(T::one());
                t
            } else if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                Tensor::zeros(&shape)
            } else if name == "head.w" && !random_head {
                Tensor::zeros(&shape)
            } else {
                Tensor::gaussian(&shape, std, rng)
            };
            tensors.insert(name, t);
        }
        Ok(Self { arch, tensors })
    }

    pub fn from_parts(arch: LmArch, tensors: ParamSet<T>) -> Result<Self> {
        check_shapes(&arch.expected_shapes(), &tensors)?;
        Ok(Self { arch, tensors })
    }

    pub fn cast<U: Scalar>(&self) -> LmParams<U> {
        LmParams {
            arch: self.arch,
            tensors: self.tensors.cast(),
        }
    }
}

pub(crate) fn check_shapes<T: Scalar>(
    expected: &BTreeMap<String, Vec<usize>>,
    tensors: &ParamSet<T>,
) -> Result<()> {
    if expected.len() != tensors.len() {
        return Err(Error::Contract(format!(
            "expected {} tensors, found {}",
            expected.len(),
            tensors.len()
        )));
    }
    for (name, shape) in expected {
        let t = tensors.require(name)?;
        if &t.shape != shape {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: t.shape.clone(),
            });
        }
    }
    Ok(())
}

/// Which positions of a sequence contribute to its log-probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Span {
    #[default]
    All,
    CompletionOnly,
}

/// Positions `i ≥ 1` whose token is scored given `s_<i`.
pub fn scored_positions(seq: &TokenSeq, span: Span) -> Vec<usize> {
    (1..seq.len())
        .filter(|&i| match span {
            Span::All => true,
            Span::CompletionOnly => seq.roles[i] == Role::Completion,
        })
        .collect()
}

fn check_ids(arch: &LmArch, ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Contract("empty token sequence".into()));
    }
    if ids.len() > arch.context {
        return Err(Error::ContextOverflow {
            len: ids.len(),
            max: arch.context,
        });
    }
    if let Some(bad) = ids.iter().find(|&&i| i >= arch.vocab) {
        return Err(Error::Contract(format!("token id {bad} outside vocabulary")));
    }
    Ok(())
}

/// Records the forward pass on `tape`; returns logits of shape `[len(ids), V]`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    arch: &LmArch,
    ids: &[usize],
) -> Result<Var> {
    check_ids(arch, ids)?;
    let n = ids.len();
    let tok = tape.gather(p.var("tok_emb")?, ids)?;
    let pos = tape.rows(p.var("pos_emb")?, 0..n)?;
    let mut x = tape.add(tok, pos);
    let dh = arch.d_model / arch.heads;
    let inv = T::of(1.0 / (dh as f64).sqrt());
    for l in 0..arch.layers {
        let w = |s: &str| p.var(&format!("l{l}.{s}"));
        let h = tape.layer_norm(x, w("ln1.g")?, w("ln1.b")?);
        let q = tape.matmul(h, w("attn.wq")?);
        let k = tape.matmul(h, w("attn.wk")?);
        let v = tape.matmul(h, w("attn.wv")?);
        let mut heads = Vec::with_capacity(arch.heads);
        for hd in 0..arch.heads {
            let (qh, kh, vh) = (
                tape.slice_cols(q, hd * dh, dh),
                tape.slice_cols(k, hd * dh, dh),
                tape.slice_cols(v, hd * dh, dh),
            );
            let s = tape.matmul_t(qh, kh);
            let s = tape.scale(s, inv);
            let a = tape.softmax(s, true);
            heads.push(tape.matmul(a, vh));
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let o = tape.matmul(o, w("attn.wo")?);
        x = tape.add(x, o);
        let h = tape.layer_norm(x, w("ln2.g")?, w("ln2.b")?);
        let m = tape.matmul(h, w("mlp.w1")?);
        let m = tape.add_row(m, w("mlp.b1")?);
        let m = tape.relu(m);
        let m = tape.matmul(m, w("mlp.w2")?);
        let m = tape.add_row(m, w("mlp.b2")?);
        x = tape.add(x, m);
    }
    let x = tape.layer_norm(x, p.var("ln_f.g")?, p.var("ln_f.b")?);
    let logits = tape.matmul(x, p.var("head.w")?);
    Ok(tape.add_row(logits, p.var("head.b")?))
}

/// Log-probability of `seq` under the model as a tape scalar, plus the
/// `[len-1, V]` log-softmax matrix it was read from.
pub fn sequence_log_prob_var<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    arch: &LmArch,
    seq: &TokenSeq,
    span: Span,
) -> Result<(Var, Var)> {
    if seq.len() < 2 {
        return Err(Error::Contract("log-probability needs at least two tokens".into()));
    }
    let positions = scored_positions(seq, span);
    if positions.is_empty() {
        return Err(Error::DegenerateSpan);
    }
    let logits = forward(tape, p, arch, &seq.ids[..seq.len() - 1])?;
    let logp = tape.log_softmax(logits);
    let entries: Vec<(usize, usize)> = positions.iter().map(|&i| (i - 1, seq.ids[i])).collect();
    Ok((tape.pick_sum(logp, &entries), logp))
}

/// Σ log P(s_i | s_<i) over the positions selected by `span`.
pub fn sequence_log_prob<T: Scalar>(params: &LmParams<T>, seq: &TokenSeq, span: Span) -> Result<f64> {
    let mut tape = Tape::new();
    let b = tape.bind(&params.tensors, false);
    let (lp, _) = sequence_log_prob_var(&mut tape, &b, &params.arch, seq, span)?;
    Ok(tape.value(lp).scalar().f64())
}

/// Log-softmax rows `[len-1, V]` predicting positions `1..len`, as `f64`.
pub fn next_log_probs<T: Scalar>(params: &LmParams<T>, ids: &[usize]) -> Result<Mat<f64>> {
    let mut tape = Tape::new();
    let b = tape.bind(&params.tensors, false);
    let logits = forward(&mut tape, &b, &params.arch, ids)?;
    let m = tape.value(logits);
    let mut out = Mat::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row = m.row(r);
        let lse = log_sum_exp(row);
        for c in 0..m.cols {
            out.data[r * m.cols + c] = row[c].f64() - lse;
        }
    }
    Ok(out)
}

/// P(· | prefix) over the vocabulary.
pub fn next_dist<T: Scalar>(params: &LmParams<T>, prefix: &TokenSeq) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = tape.bind(&params.tensors, false);
    let logits = forward(&mut tape, &b, &params.arch, &prefix.ids)?;
    let m = tape.value(logits);
    Ok(softmax_f64(m.row(m.rows - 1)))
}

/// Incremental decoder with a key/value cache; one token per [`Decoder::step`].
pub struct Decoder<'a, T> {
    params: &'a LmParams<T>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'a, T: Scalar> Decoder<'a, T> {
    pub fn new(params: &'a LmParams<T>) -> Self {
        let l = params.arch.layers;
        Self {
            params,
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn t(&self, name: &str) -> &[T] {
        &self
            .params
            .tensors
            .get(name)
            .unwrap_or_else(|| panic!("validated parameter set lacks `{name}`"))
            .data
    }

    /// Feeds `token` at the next position and returns next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let arch = self.params.arch;
        if self.len >= arch.context {
            return Err(Error::ContextOverflow {
                len: self.len + 1,
                max: arch.context,
            });
        }
        if token >= arch.vocab {
            return Err(Error::Contract(format!("token id {token} outside vocabulary")));
        }
        let d = arch.d_model;
        let dh = d / arch.heads;
        let pos = self.len;
        let tok = &self.t("tok_emb")[token * d..(token + 1) * d];
        let pe = &self.t("pos_emb")[pos * d..(pos + 1) * d];
        let mut x: Vec<f64> = tok.iter().zip(pe).map(|(a, b)| a.f64() + b.f64()).collect();
        for l in 0..arch.layers {
            let h = ln(&x, self.t(&format!("l{l}.ln1.g")), self.t(&format!("l{l}.ln1.b")));
            let q = vecmat(&h, self.t(&format!("l{l}.attn.wq")), d);
            let k = vecmat(&h, self.t(&format!("l{l}.attn.wk")), d);
            let v = vecmat(&h, self.t(&format!("l{l}.attn.wv")), d);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let n = pos + 1;
            let mut o = vec![0f64; d];
            for hd in 0..arch.heads {
                let off = hd * dh;
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        let kj = &self.keys[l][j * d + off..j * d + off + dh];
                        q[off..off + dh].iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let a = softmax_f64(&scores);
                for (j, aj) in a.iter().enumerate() {
                    let vj = &self.values[l][j * d + off..j * d + off + dh];
                    for (oc, vc) in o[off..off + dh].iter_mut().zip(vj) {
                        *oc += aj * vc;
                    }
                }
            }
            let o = vecmat(&o, self.t(&format!("l{l}.attn.wo")), d);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
            let h = ln(&x, self.t(&format!("l{l}.ln2.g")), self.t(&format!("l{l}.ln2.b")));
            let mut m = vecmat(&h, self.t(&format!("l{l}.mlp.w1")), arch.d_ff);
            for (mi, bi) in m.iter_mut().zip(self.t(&format!("l{l}.mlp.b1"))) {
                *mi = (*mi + bi.f64()).max(0.0);
            }
            let m = vecmat(&m, self.t(&format!("l{l}.mlp.w2")), d);
            for ((xi, mi), bi) in x.iter_mut().zip(&m).zip(self.t(&format!("l{l}.mlp.b2"))) {
                *xi += mi + bi.f64();
            }
        }
        let h = ln(&x, self.t("ln_f.g"), self.t("ln_f.b"));
        let mut logits = vecmat(&h, self.t("head.w"), arch.vocab);
        for (li, bi) in logits.iter_mut().zip(self.t("head.b")) {
            *li += bi.f64();
        }
        self.len += 1;
        Ok(logits)
    }
}

fn ln<T: Scalar>(x: &[f64], g: &[T], b: &[T]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let rstd = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (gi, bi))| (v - mean) * rstd * gi.f64() + bi.f64())
        .collect()
}

fn vecmat<T: Scalar>(x: &[f64], w: &[T], cols: usize) -> Vec<f64> {
    let mut out = vec![0f64; cols];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *o += xi * wv.f64();
        }
    }
    out
}
