//! Quality/diversity filtering of synthetic data and classifier enhancement.
//!
//! Sentence vectors come from a frozen, seeded Gaussian word-embedding
//! table, mean-pooled over the sentence.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierParams;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::{train_classifier, TrainConfig};
use crate::transfer::SyntheticSample;
use crate::vocab::{TokenSeq, Vocab};

pub const DEFAULT_EMBED_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedTable {
    dim: usize,
    rows: Vec<f64>,
}

impl EmbedTable {
    pub fn random(vocab: usize, dim: usize, rng: &mut Rng) -> Self {
        let t: Tensor<f64> = Tensor::gaussian(&[vocab, dim], 1.0, rng);
        Self { dim, rows: t.data }
    }

    pub fn from_rows(dim: usize, rows: Vec<f64>) -> Result<Self> {
        if dim == 0 || rows.len() % dim != 0 {
            return Err(Error::Config("embedding table size is not a multiple of its width".into()));
        }
        Ok(Self { dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.rows[id * self.dim..(id + 1) * self.dim]
    }

    fn vocab(&self) -> usize {
        self.rows.len() / self.dim
    }
}

/// Mean of the token embedding rows.
pub fn embed_sentence(x: &TokenSeq, table: &EmbedTable) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Contract("cannot embed an empty sentence".into()));
    }
    let mut v = vec![0f64; table.dim];
    for &id in &x.ids {
        if id >= table.vocab() {
            return Err(Error::Contract(format!("token id {id} outside embedding table")));
        }
        for (a, b) in v.iter_mut().zip(table.row(id)) {
            *a += b;
        }
    }
    let n = x.len() as f64;
    v.iter_mut().for_each(|a| *a /= n);
    Ok(v)
}

/// Cosine similarity clamped to [−1, 1]; 0 when either norm is below 1e-12.
pub fn cosine_sim(v: &[f64], w: &[f64]) -> f64 {
    let dot: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
    let nv: f64 = v.iter().map(|a| a * a).sum();
    let nw: f64 = w.iter().map(|a| a * a).sum();
    if nv.sqrt() < 1e-12 || nw.sqrt() < 1e-12 {
        return 0.0;
    }
    (dot / (nv * nw).sqrt()).clamp(-1.0, 1.0)
}

/// Sets `D_j = 1 − max_{k≠j} sim(v_j, v_k)` on every sample.
pub fn diversity_scores(samples: &mut [SyntheticSample], table: &EmbedTable) -> Result<()> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Contract("diversity needs at least two samples".into()));
    }
    let vecs = samples
        .iter()
        .map(|s| embed_sentence(&s.x, table))
        .collect::<Result<Vec<_>>>()?;
    let mut best = vec![f64::NEG_INFINITY; n];
    for j in 0..n {
        for k in j + 1..n {
            let s = cosine_sim(&vecs[j], &vecs[k]);
            best[j] = best[j].max(s);
            best[k] = best[k].max(s);
        }
    }
    for (s, m) in samples.iter_mut().zip(best) {
        s.diversity = Some(1.0 - m);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub alpha_percent: f64,
    /// Score with `max(r, 0)·D` instead of `r·D`.
    pub clamp_reward_at_zero: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            alpha_percent: 25.0,
            clamp_reward_at_zero: false,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_percent > 0.0 && self.alpha_percent <= 100.0) {
            return Err(Error::Config(format!(
                "alpha_percent {} outside (0, 100]",
                self.alpha_percent
            )));
        }
        Ok(())
    }

    /// `⌈α/100 · n⌉`, robust to representation error in `α`.
    pub fn select_count(&self, n: usize) -> usize {
        if n == 0 {
            return 0;
        }
        let x = self.alpha_percent * n as f64 / 100.0;
        let mut k = x.ceil();
        if k - x > 1.0 - 1e-9 {
            k -= 1.0;
        }
        (k as usize).clamp(1, n)
    }
}

/// Scores every sample and returns the indices of the selected ones in
/// their original order. Ranking: score desc, reward desc, index asc.
pub fn score_and_select(samples: &mut [SyntheticSample], cfg: &FilterConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    for s in samples.iter_mut() {
        let (Some(r), Some(d)) = (s.reward, s.diversity) else {
            return Err(Error::Contract("score needs reward and diversity".into()));
        };
        let r = if cfg.clamp_reward_at_zero { r.max(0.0) } else { r };
        s.score = Some(r * d);
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&samples[a], &samples[b]);
        sb.score
            .unwrap()
            .total_cmp(&sa.score.unwrap())
            .then(sb.reward.unwrap().total_cmp(&sa.reward.unwrap()))
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order.into_iter().take(cfg.select_count(samples.len())).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Trains the classifier on the selected `(x, y)` pairs. An empty
/// selection leaves the classifier untouched.
pub fn enhance_slm(
    slm: &ClassifierParams<f32>,
    selected: &[&SyntheticSample],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(ClassifierParams<f32>, Vec<f64>)> {
    if selected.is_empty() {
        log::warn!("empty synthetic selection; classifier left unchanged");
        return Ok((slm.clone(), Vec::new()));
    }
    let data: Vec<(&TokenSeq, usize)> = selected.iter().map(|s| (&s.x, s.label)).collect();
    train_classifier(slm, &data, cfg, rng)
}

/// Line-delimited dump: label, text, reward, diversity, score, selected.
pub fn dump_scored(
    samples: &[SyntheticSample],
    selected: &[usize],
    labels: &[String],
    vocab: &Vocab,
) -> String {
    let mut out = String::new();
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
    for (i, s) in samples.iter().enumerate() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            labels[s.label],
            vocab.detokenize(&s.x.ids),
            fmt(s.reward),
            fmt(s.diversity),
            fmt(s.score),
            selected.binary_search(&i).is_ok()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn sample(ids: Vec<usize>, reward: f64) -> SyntheticSample {
        let mut s = SyntheticSample::from_generation(
            0,
            TokenSeq::tagged(ids, crate::vocab::Role::Completion),
        )
        .unwrap();
        s.reward = Some(reward);
        s
    }

    fn onehot_table() -> EmbedTable {
        let mut rows = vec![0.0; 6 * 3];
        rows[4 * 3] = 1.0;
        rows[5 * 3 + 1] = 1.0;
        EmbedTable::from_rows(3, rows).unwrap()
    }

    #[test]
    fn embedding_is_mean_pool() {
        let t = EmbedTable::random(8, 4, &mut seeded(1));
        let single = embed_sentence(&TokenSeq::raw(vec![5]), &t).unwrap();
        assert_eq!(single, t.row(5));
        let pair = embed_sentence(&TokenSeq::raw(vec![5, 6]), &t).unwrap();
        for c in 0..4 {
            assert!((pair[c] - (t.row(5)[c] + t.row(6)[c]) / 2.0).abs() < 1e-15);
        }
        let swapped = embed_sentence(&TokenSeq::raw(vec![6, 5]), &t).unwrap();
        assert_eq!(pair, swapped);
        assert!(embed_sentence(&TokenSeq::raw(vec![]), &t).is_err());
    }

    #[test]
    fn cosine_cases() {
        let v = [1.0, 2.0, -0.5];
        assert_eq!(cosine_sim(&v, &v), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine_sim(&v, &[-1.0, -2.0, 0.5]), -1.0);
        assert_eq!(cosine_sim(&[0.0, 0.0], &v), 0.0);
    }

    #[test]
    fn duplicates_and_orthogonal_pairs() {
        let t = onehot_table();
        let mut dup = vec![sample(vec![4], 0.5), sample(vec![4], 0.1)];
        diversity_scores(&mut dup, &t).unwrap();
        assert_eq!(dup[0].diversity, Some(0.0));
        assert_eq!(dup[1].diversity, Some(0.0));
        let mut orth = vec![sample(vec![4], 0.5), sample(vec![5], 0.1)];
        diversity_scores(&mut orth, &t).unwrap();
        assert_eq!(orth[0].diversity, Some(1.0));
        assert!(diversity_scores(&mut orth[..1], &t).is_err());
    }

    #[test]
    fn select_count_uses_ceiling() {
        let cfg = FilterConfig::default();
        assert_eq!(cfg.select_count(8), 2);
        assert_eq!(cfg.select_count(9), 3);
        assert_eq!(cfg.select_count(1), 1);
        let odd = FilterConfig {
            alpha_percent: 7.0,
            ..cfg
        };
        assert_eq!(odd.select_count(100), 7);
    }

    #[test]
    fn equal_scores_pick_first_indices() {
        let mut s: Vec<_> = (0..8).map(|_| sample(vec![4], 0.5)).collect();
        for x in &mut s {
            x.diversity = Some(0.2);
        }
        assert_eq!(score_and_select(&mut s, &FilterConfig::default()).unwrap(), vec![0, 1]);
    }

    #[test]
    fn unset_reward_is_contract_error() {
        let mut s = vec![sample(vec![4], 0.5)];
        s[0].diversity = Some(0.1);
        s[0].reward = None;
        assert!(matches!(
            score_and_select(&mut s, &FilterConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn clamp_flag_zeroes_negative_rewards() {
        let mut s = vec![sample(vec![4], -0.5), sample(vec![4], 0.0)];
        s[0].diversity = Some(0.9);
        s[1].diversity = Some(0.1);
        let cfg = FilterConfig {
            alpha_percent: 50.0,
            clamp_reward_at_zero: true,
        };
        // both score 0, reward breaks the tie
        assert_eq!(score_and_select(&mut s, &cfg).unwrap(), vec![1]);
    }
}
