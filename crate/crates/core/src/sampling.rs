//! Stochastic decoding: top-k and nucleus truncation with temperature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{Decoder, LmParams};
use crate::rng::Rng;
use crate::tensor::{uniform01, Scalar};
use crate::vocab::{Role, TokenSeq, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    TopK,
    Nucleus,
}

/// Decoding knobs. `temperature == 0` switches to argmax decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub p: f64,
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Nucleus,
            k: 40,
            p: 0.9,
            temperature: 1.0,
            max_len: 24,
        }
    }
}

impl SamplingConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            strategy: Strategy::TopK,
            k: 1,
            p: 1.0,
            temperature: 1.0,
            max_len,
        }
    }

    pub fn validate(&self, context: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("sampling k must be positive".into()));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Config(format!("nucleus p={} outside (0, 1]", self.p)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("invalid temperature {}", self.temperature)));
        }
        if self.max_len == 0 || self.max_len > context {
            return Err(Error::Config(format!(
                "max_len {} must be in 1..={context}",
                self.max_len
            )));
        }
        Ok(())
    }

    fn is_argmax(&self) -> bool {
        self.temperature == 0.0 || (self.strategy == Strategy::TopK && self.k == 1)
    }
}

/// Candidate tokens after truncation, sorted by descending probability
/// (ties by lower id), with probabilities renormalized to sum to one.
pub fn truncated_distribution(logits: &[f64], cfg: &SamplingConfig) -> Vec<(usize, f64)> {
    if cfg.is_argmax() {
        return vec![(argmax(logits), 1.0)];
    }
    let t = cfg.temperature;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) / t).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut ranked: Vec<(usize, f64)> = exps.into_iter().map(|e| e / z).enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = match cfg.strategy {
        Strategy::TopK => cfg.k.min(ranked.len()),
        Strategy::Nucleus => {
            let mut acc = 0.0;
            let mut n = 0;
            for &(_, p) in &ranked {
                acc += p;
                n += 1;
                if acc >= cfg.p {
                    break;
                }
            }
            n
        }
    };
    ranked.truncate(keep);
    ranked.retain(|&(_, p)| p > 0.0);
    let z: f64 = ranked.iter().map(|(_, p)| p).sum();
    for e in &mut ranked {
        e.1 /= z;
    }
    ranked
}

/// Inverse-CDF draw from a truncated distribution with uniform `u ∈ [0,1)`.
pub fn draw(candidates: &[(usize, f64)], u: f64) -> usize {
    let mut acc = 0.0;
    for &(id, p) in candidates {
        acc += p;
        if u < acc {
            return id;
        }
    }
    candidates.last().expect("nonempty candidate set").0
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Continues `prompt` until EOS or `max_len` new tokens. Generated tokens,
/// including a terminating EOS, are tagged `Completion`.
pub fn sample<T: Scalar>(
    params: &LmParams<T>,
    prompt: &TokenSeq,
    cfg: &SamplingConfig,
    rng: &mut Rng,
) -> Result<TokenSeq> {
    let ctx = params.arch.context;
    if prompt.is_empty() || prompt.len() >= ctx {
        return Err(Error::ContextOverflow {
            len: prompt.len() + 1,
            max: ctx,
        });
    }
    let mut dec = Decoder::new(params);
    let mut logits = Vec::new();
    for &t in &prompt.ids {
        logits = dec.step(t)?;
    }
    let mut out = prompt.clone();
    for n in 0..cfg.max_len {
        let candidates = truncated_distribution(&logits, cfg);
        let tok = if candidates.len() == 1 {
            candidates[0].0
        } else {
            draw(&candidates, uniform01(rng))
        };
        out.push(tok, Role::Completion);
        if tok == EOS || out.len() >= ctx || n + 1 == cfg.max_len {
            break;
        }
        logits = dec.step(tok)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nucleus(p: f64) -> SamplingConfig {
        SamplingConfig {
            strategy: Strategy::Nucleus,
            k: 1,
            p,
            temperature: 1.0,
            max_len: 4,
        }
    }

    #[test]
    fn nucleus_keeps_smallest_covering_prefix() {
        let logits = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let c = truncated_distribution(&logits, &nucleus(0.75));
        assert_eq!(c.len(), 2);
        assert!((c[0].1 - 0.625).abs() < 1e-12);
        assert_eq!(truncated_distribution(&logits, &nucleus(1.0)).len(), 3);
    }

    #[test]
    fn top_k_truncates() {
        let mut cfg = nucleus(1.0);
        cfg.strategy = Strategy::TopK;
        cfg.k = 2;
        let c = truncated_distribution(&[0.0, 2.0, 1.0, -1.0], &cfg);
        assert_eq!(c.iter().map(|e| e.0).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn zero_temperature_is_argmax_with_low_id_ties() {
        let mut cfg = nucleus(0.9);
        cfg.temperature = 0.0;
        assert_eq!(truncated_distribution(&[1.0, 3.0, 3.0], &cfg), vec![(1, 1.0)]);
    }

    #[test]
    fn validation() {
        assert!(nucleus(0.0).validate(8).is_err());
        assert!(nucleus(0.5).validate(8).is_ok());
        let mut cfg = nucleus(0.5);
        cfg.max_len = 9;
        assert!(cfg.validate(8).is_err());
    }
}
