//! Measurements: classifier accuracy, language-model classification and
//! generation quality, and held-out perplexity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::{self, ClassifierParams};
use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::lm::{self, LmParams, Span};
use crate::rng::Rng;
use crate::sampling::SamplingConfig;
use crate::tensor::Scalar;
use crate::transfer::{self, PromptSet, Verbalizer};
use crate::vocab::TokenSeq;

fn nonempty<T>(xs: &[T], what: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Config(format!("{what} is empty")));
    }
    Ok(())
}

/// Fraction of argmax-correct predictions.
pub fn eval_slm_accuracy<T: Scalar>(slm: &ClassifierParams<T>, test: &[LabeledExample]) -> Result<f64> {
    nonempty(test, "test set")?;
    let mut correct = 0usize;
    for e in test {
        if classifier::predict(slm, &e.x.ids)? == e.y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Verbalizer accuracy. Examples that overflow the context count as wrong.
pub fn eval_llm_nlu<T: Scalar>(
    llm: &LmParams<T>,
    test: &[LabeledExample],
    prompts: &PromptSet,
    verbalizer: &Verbalizer,
) -> Result<f64> {
    nonempty(test, "test set")?;
    let mut correct = 0usize;
    for (i, e) in test.iter().enumerate() {
        match transfer::classify_with_verbalizer(llm, &e.x, prompts, verbalizer) {
            Ok((y, _)) => correct += usize::from(y == e.y),
            Err(err @ Error::ContextOverflow { .. }) => log::warn!("test example {i} scored wrong: {err}"),
            Err(err) => return Err(err),
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Generates `n` label-conditioned samples and returns the judges' mean
/// agreement with the conditioning labels.
pub fn eval_llm_nlg<T: Scalar, J: Scalar>(
    llm: &LmParams<T>,
    judges: &[&ClassifierParams<J>],
    prompts: &PromptSet,
    n: usize,
    cfg: &SamplingConfig,
    rng: &mut Rng,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("generation quality needs n >= 1".into()));
    }
    nonempty(judges, "judge list")?;
    let samples = transfer::generate_synthetic(llm, prompts, n, cfg, rng)?;
    let mut total = 0.0;
    for j in judges {
        let mut agree = 0usize;
        for s in &samples {
            agree += usize::from(classifier::predict(*j, &s.x.ids)? == s.label);
        }
        total += agree as f64 / samples.len() as f64;
    }
    Ok(total / judges.len() as f64)
}

/// `exp(−Σ log p / Σ scored tokens)` over whole sequences.
pub fn perplexity<T: Scalar>(llm: &LmParams<T>, lines: &[TokenSeq]) -> Result<f64> {
    nonempty(lines, "held-out corpus")?;
    let (mut lp, mut count) = (0f64, 0usize);
    for l in lines {
        lp += lm::sequence_log_prob(llm, l, Span::All)?;
        count += l.len() - 1;
    }
    Ok((-lp / count as f64).exp())
}

/// Metrics of one experiment mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    /// Test accuracy of each client's final classifier, by client id.
    pub slm_accuracy: BTreeMap<usize, f64>,
    pub slm_accuracy_mean: f64,
    /// Test accuracy of each client's classifier before enhancement.
    pub local_accuracy_mean: f64,
    pub llm_nlu: f64,
    /// Generation quality of the pre-trained model, judged by this mode's judges.
    pub llm_nlg_pre: f64,
    pub llm_nlg: f64,
    pub perplexity: f64,
    pub llm_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub config_hash: String,
    pub bayes_ceiling: f64,
    pub vocab_size: usize,
    pub llm_nlu_before: f64,
    pub ppl_before: f64,
    pub modes: BTreeMap<String, ModeReport>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "seed {}  bayes ceiling {:.4}  |V| {}\npre-run: nlu {:.4}  ppl {:.3}\n",
            self.seed, self.bayes_ceiling, self.vocab_size, self.llm_nlu_before, self.ppl_before
        );
        out.push_str(&format!(
            "{:<12} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
            "mode", "slm_acc", "local", "nlu", "nlg_pre", "nlg", "ppl"
        ));
        for (name, m) in &self.modes {
            out.push_str(&format!(
                "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.3}\n",
                name, m.slm_accuracy_mean, m.local_accuracy_mean, m.llm_nlu, m.llm_nlg_pre, m.llm_nlg, m.perplexity
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ClassifierArch, ClassifierKind};
    use crate::lm::LmArch;
    use crate::rng::seeded;
    use crate::tensor::Tensor;
    use crate::vocab::{Vocab, BOS, EOS};

    fn vocab() -> Vocab {
        Vocab::build(&["a b alpha beta ALPHA BETA"]).unwrap()
    }

    fn uniform_lm(v: usize) -> LmParams<f32> {
        LmParams::init(LmArch::new(v, 1, 8, 2, 32), &mut seeded(2)).unwrap()
    }

    fn prompts(v: &Vocab) -> (PromptSet, Verbalizer) {
        transfer::PromptConfig::for_labels(&["alpha".into(), "beta".into()])
            .compile(v, 2)
            .unwrap()
    }

    fn balanced(n: usize) -> Vec<LabeledExample> {
        (0..n)
            .map(|i| LabeledExample {
                x: TokenSeq::raw(vec![4 + i % 2]),
                y: i % 2,
            })
            .collect()
    }

    #[test]
    fn zero_head_classifier_predicts_label_zero() {
        let c: ClassifierParams<f32> =
            ClassifierParams::init(ClassifierArch::new(ClassifierKind::Small, 12, 2), &mut seeded(1)).unwrap();
        assert_eq!(eval_slm_accuracy(&c, &balanced(10)).unwrap(), 0.5);
        assert!(eval_slm_accuracy(&c, &[]).is_err());
    }

    #[test]
    fn uniform_lm_nlu_is_base_rate() {
        let v = vocab();
        let (p, verb) = prompts(&v);
        let lm = uniform_lm(v.len());
        assert_eq!(eval_llm_nlu(&lm, &balanced(20), &p, &verb).unwrap(), 0.5);
        let one = eval_llm_nlu(&lm, &balanced(2)[1..], &p, &verb).unwrap();
        assert_eq!(one, 0.0);
    }

    #[test]
    fn overflowing_example_scored_wrong() {
        let v = vocab();
        let (p, verb) = prompts(&v);
        let lm = uniform_lm(v.len());
        let mut test = balanced(2);
        test[0].x = TokenSeq::raw(vec![4; 40]);
        assert_eq!(eval_llm_nlu(&lm, &test, &p, &verb).unwrap(), 0.0);
    }

    #[test]
    fn uniform_perplexity_is_vocab_size() {
        let lm = uniform_lm(11);
        let lines = vec![TokenSeq::raw(vec![BOS, 4, 5, EOS]), TokenSeq::raw(vec![BOS, 6, EOS])];
        let ppl = perplexity(&lm, &lines).unwrap();
        assert!((ppl - 11.0).abs() < 1e-6 * 11.0);
    }

    #[test]
    fn single_token_lines_give_inverse_probability() {
        // head bias puts logit b on token 4: q = e^b / (e^b + V - 1)
        let mut lm = uniform_lm(9);
        let b = 1.3f32;
        lm.tensors.get_mut("head.b").unwrap().data[4] = b;
        let q = (b as f64).exp() / ((b as f64).exp() + 8.0);
        let lines = vec![TokenSeq::raw(vec![BOS, 4]); 3];
        assert!((perplexity(&lm, &lines).unwrap() - 1.0 / q).abs() < 1e-5);
    }

    #[test]
    fn constant_judge_agrees_at_base_rate() {
        let v = vocab();
        let (p, _) = prompts(&v);
        let lm = uniform_lm(v.len());
        let judge: ClassifierParams<f32> =
            ClassifierParams::init(ClassifierArch::new(ClassifierKind::Tiny, v.len(), 2), &mut seeded(1)).unwrap();
        let n = 2000;
        let cfg = SamplingConfig {
            max_len: 4,
            ..SamplingConfig::default()
        };
        let q = eval_llm_nlg(&lm, &[&judge], &p, n, &cfg, &mut seeded(4)).unwrap();
        let sigma = (0.25 / n as f64).sqrt();
        assert!((q - 0.5).abs() < 3.0 * sigma, "{q}");
        assert!(eval_llm_nlg(&lm, &[&judge], &p, 0, &cfg, &mut seeded(4)).is_err());
        let none: [&ClassifierParams<f32>; 0] = [];
        assert!(eval_llm_nlg(&lm, &none, &p, 5, &cfg, &mut seeded(4)).is_err());
    }

    #[test]
    fn evaluation_leaves_parameters_untouched() {
        let v = vocab();
        let (p, verb) = prompts(&v);
        let mut lm = uniform_lm(v.len());
        lm.tensors.insert("head.w", Tensor::gaussian(&[8, v.len()], 0.5, &mut seeded(8)));
        let before = crate::checkpoint::hash_params(&lm.tensors);
        eval_llm_nlu(&lm, &balanced(4), &p, &verb).unwrap();
        perplexity(&lm, &[TokenSeq::raw(vec![BOS, 4, EOS])]).unwrap();
        assert_eq!(before, crate::checkpoint::hash_params(&lm.tensors));
    }
}
