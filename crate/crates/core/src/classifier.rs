//! Client-side classifiers.
//!
//! `Tiny` is a mean-pooled bag of embeddings feeding a linear head. `Small`
//! adds one single-head self-attention layer with a residual connection
//! before pooling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_f64, Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::lm::check_shapes;
use crate::rng::Rng;
use crate::tensor::{ParamSet, Scalar, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClassifierKind {
    Tiny,
    Small,
}

impl ClassifierKind {
    pub fn dim(self) -> usize {
        match self {
            ClassifierKind::Tiny => 32,
            ClassifierKind::Small => 64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Tiny => "TINY",
            ClassifierKind::Small => "SMALL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierArch {
    pub kind: ClassifierKind,
    pub vocab: usize,
    pub classes: usize,
    pub dim: usize,
}

impl ClassifierArch {
    pub fn new(kind: ClassifierKind, vocab: usize, classes: usize) -> Self {
        Self {
            kind,
            vocab,
            classes,
            dim: kind.dim(),
        }
    }

    pub fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let d = self.dim;
        let mut m = BTreeMap::new();
        m.insert("emb".to_string(), vec![self.vocab, d]);
        if self.kind == ClassifierKind::Small {
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                m.insert(w.to_string(), vec![d, d]);
            }
        }
        m.insert("head.w".to_string(), vec![d, self.classes]);
        m.insert("head.b".to_string(), vec![self.classes]);
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T = f32> {
    pub arch: ClassifierArch,
    pub tensors: ParamSet<T>,
}

impl<T: Scalar> ClassifierParams<T> {
    /// Gaussian(0, 0.02) embeddings and attention weights, zero head.
    pub fn init(arch: ClassifierArch, rng: &mut Rng) -> Result<Self> {
        Self::init_with(arch, INIT_STD, false, rng)
    }

    pub fn init_with(arch: ClassifierArch, std: f64, random_head: bool, rng: &mut Rng) -> Result<Self> {
        if arch.classes < 2 || arch.vocab == 0 || arch.dim == 0 {
            return Err(Error::Config(format!("invalid classifier architecture {arch:?}")));
        }
        let mut tensors = ParamSet::new();
        for (name, shape) in arch.expected_shapes() {
            let t = match name.as_str() {
                "head.b" => Tensor::zeros(&shape),
                "head.w" if !random_head => Tensor::zeros(&shape),
                _ => Tensor::gaussian(&shape, std, rng),
            };
            tensors.insert(name, t);
        }
        Ok(Self { arch, tensors })
    }

    pub fn from_parts(arch: ClassifierArch, tensors: ParamSet<T>) -> Result<Self> {
        check_shapes(&arch.expected_shapes(), &tensors)?;
        Ok(Self { arch, tensors })
    }
}

/// Records the classifier on `tape`; returns `[1, C]` logits.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    arch: &ClassifierArch,
    ids: &[usize],
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Contract("classifier input is empty".into()));
    }
    let x = tape.gather(p.var("emb")?, ids)?;
    let h = match arch.kind {
        ClassifierKind::Tiny => x,
        ClassifierKind::Small => {
            let q = tape.matmul(x, p.var("attn.wq")?);
            let k = tape.matmul(x, p.var("attn.wk")?);
            let v = tape.matmul(x, p.var("attn.wv")?);
            let s = tape.matmul_t(q, k);
            let s = tape.scale(s, T::of(1.0 / (arch.dim as f64).sqrt()));
            let a = tape.softmax(s, false);
            let o = tape.matmul(a, v);
            let o = tape.matmul(o, p.var("attn.wo")?);
            tape.add(x, o)
        }
    };
    let pooled = tape.mean_rows(h);
    let logits = tape.matmul(pooled, p.var("head.w")?);
    Ok(tape.add_row(logits, p.var("head.b")?))
}

/// Class probabilities for `ids`.
pub fn probs<T: Scalar>(params: &ClassifierParams<T>, ids: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = tape.bind(&params.tensors, false);
    let logits = forward(&mut tape, &b, &params.arch, ids)?;
    Ok(softmax_f64(tape.value(logits).row(0)))
}

/// Argmax class with lowest-id tie-break.
pub fn predict<T: Scalar>(params: &ClassifierParams<T>, ids: &[usize]) -> Result<usize> {
    let p = probs(params, ids)?;
    Ok(crate::sampling::argmax(&p))
}

/// `−log probs[label]`, with the probability clamped below at 1e-12.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs
        .get(label)
        .ok_or_else(|| Error::Contract(format!("label {label} out of range")))?;
    Ok(-p.max(1e-12).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_head_gives_uniform() {
        for kind in [ClassifierKind::Tiny, ClassifierKind::Small] {
            let p: ClassifierParams<f32> =
                ClassifierParams::init(ClassifierArch::new(kind, 10, 3), &mut seeded(2)).unwrap();
            let pr = probs(&p, &[4, 5, 9]).unwrap();
            assert!(pr.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn probs_sum_to_one() {
        for kind in [ClassifierKind::Tiny, ClassifierKind::Small] {
            let p: ClassifierParams<f64> =
                ClassifierParams::init_with(ClassifierArch::new(kind, 10, 4), 0.8, true, &mut seeded(3))
                    .unwrap();
            let pr = probs(&p, &[1, 7, 7, 2]).unwrap();
            assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_input_rejected() {
        let p: ClassifierParams<f32> =
            ClassifierParams::init(ClassifierArch::new(ClassifierKind::Tiny, 6, 2), &mut seeded(1)).unwrap();
        assert!(probs(&p, &[]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!((cross_entropy(&[0.25; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&[1.0, 0.0], 1).unwrap() - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!(cross_entropy(&[1.0, 0.0], 2).is_err());
    }
}
