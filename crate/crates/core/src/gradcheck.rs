//! Finite-difference verification of the language-model loss gradients on
//! a micro model.
//!
//! The analytic gradient (in the precision under test) is compared with a
//! central difference computed entirely in f64. Per element the relative
//! error is `|a − n| / max(|a|, |n|, GRAD_FLOOR)`; the floor keeps elements
//! whose true gradient is essentially zero from dominating the maximum.

use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Bound, Tape, Var};
use crate::config::{GradcheckConfig, Precision};
use crate::error::{Error, Result};
use crate::lm::{LmArch, LmParams, Span};
use crate::rng::seeded;
use crate::tensor::{ParamSet, Scalar};
use crate::transfer::{self, GammaWeights, PromptSet, Reference, SyntheticSample};
use crate::vocab::{Role, TokenSeq, BOS, EOS};

pub const GRAD_FLOOR: f64 = 1e-3;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Generation,
    Unsupervised,
    Regularization,
    Combined,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Generation,
        LossKind::Unsupervised,
        LossKind::Regularization,
        LossKind::Combined,
    ];

    fn gamma(self) -> GammaWeights {
        match self {
            LossKind::Generation => GammaWeights::new(1.0, 0.0, 0.0),
            LossKind::Unsupervised => GammaWeights::new(0.0, 1.0, 0.0),
            LossKind::Regularization => GammaWeights::new(0.0, 0.0, 1.0),
            LossKind::Combined => GammaWeights::default(),
        }
    }
}

/// Perturbation added to one analytic gradient element before comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Fault {
    pub tensor: String,
    pub index: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub loss: LossKind,
    pub precision: String,
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<LossCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{:<5} {:<15} max rel err {:.3e} (tol {:.0e}) worst {}[{}] {}\n",
                c.precision,
                format!("{:?}", c.loss).to_lowercase(),
                c.max_rel_err,
                c.tolerance,
                c.worst_tensor,
                c.worst_index,
                if c.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }

    /// `GradCheck` error naming every failing loss and its worst tensor.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let bad: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| {
                format!(
                    "{} {:?}: {:.3e} at {}[{}]",
                    c.precision, c.loss, c.max_rel_err, c.worst_tensor, c.worst_index
                )
            })
            .collect();
        Err(Error::GradCheck(bad.join("; ")))
    }
}

/// Micro model, frozen reference and three synthetic samples.
pub struct Fixture {
    pub theta: LmParams<f32>,
    pub old: LmParams<f32>,
    pub prompts: PromptSet,
    pub batch: Vec<SyntheticSample>,
}

impl Fixture {
    pub fn new() -> Result<Self> {
        let arch = LmArch::new(8, 1, 8, 2, 8);
        let theta = LmParams::init_with(arch, 0.3, true, &mut seeded(11))?;
        let old = LmParams::init_with(arch, 0.3, true, &mut seeded(12))?;
        let prompts = PromptSet {
            gen: vec![TokenSeq::prompt(vec![BOS, 4]), TokenSeq::prompt(vec![BOS, 5])],
            train: vec![TokenSeq::prompt(vec![6]), TokenSeq::prompt(vec![7])],
            nlu: TokenSeq::prompt(vec![6]),
        };
        let mk = |label: usize, words: Vec<usize>, r: f64| -> Result<SyntheticSample> {
            let seq = prompts.gen[label].concat(&TokenSeq::tagged(words, Role::Completion));
            let mut s = SyntheticSample::from_generation(label, seq)
                .ok_or_else(|| Error::Contract("empty fixture sample".into()))?;
            s.reward = Some(r);
            Ok(s)
        };
        let batch = vec![
            mk(0, vec![6, 7, 5, EOS], 0.6)?,
            mk(1, vec![4, 4, EOS], -0.4)?,
            mk(0, vec![7, 6, 5, 4], 0.2)?,
        ];
        Ok(Self {
            theta,
            old,
            prompts,
            batch,
        })
    }

    fn samples(&self, kind: LossKind) -> &[SyntheticSample] {
        match kind {
            LossKind::Combined => &self.batch,
            _ => &self.batch[..1],
        }
    }
}

fn record<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    fx: &Fixture,
    kind: LossKind,
    refs: &[Reference],
) -> Result<Var> {
    let gamma = kind.gamma();
    let (v, _) = transfer::combined_loss_var(
        tape,
        b,
        &fx.theta.arch,
        fx.samples(kind),
        refs,
        &fx.prompts,
        &gamma,
        Span::All,
    )?;
    Ok(v)
}

fn value_f64(params: &ParamSet<f64>, fx: &Fixture, kind: LossKind, refs: &[Reference]) -> Result<f64> {
    let mut tape = Tape::new();
    let b = tape.bind(params, false);
    let v = record(&mut tape, &b, fx, kind, refs)?;
    Ok(tape.value(v).scalar())
}

/// Central differences of every parameter element, in f64.
fn numeric_grad(fx: &Fixture, kind: LossKind) -> Result<ParamSet<f64>> {
    let old = fx.old.cast::<f64>();
    let refs = transfer::references(&old, fx.samples(kind), Span::All)?;
    let mut p = fx.theta.tensors.cast::<f64>();
    let mut out = p.zeros_like();
    let names: Vec<String> = p.names().cloned().collect();
    for name in names {
        let n = p.require(&name)?.len();
        for i in 0..n {
            let x0 = p.get(&name).expect("present").data[i];
            p.get_mut(&name).expect("present").data[i] = x0 + STEP;
            let up = value_f64(&p, fx, kind, &refs)?;
            p.get_mut(&name).expect("present").data[i] = x0 - STEP;
            let down = value_f64(&p, fx, kind, &refs)?;
            p.get_mut(&name).expect("present").data[i] = x0;
            out.get_mut(&name).expect("present").data[i] = (up - down) / (2.0 * STEP);
        }
    }
    Ok(out)
}

fn analytic_grad<T: Scalar>(fx: &Fixture, kind: LossKind) -> Result<ParamSet<f64>> {
    let theta = fx.theta.tensors.cast::<T>();
    let old = fx.old.cast::<T>();
    let refs = transfer::references(&old, fx.samples(kind), Span::All)?;
    let (_, g) = grad(&theta, |tape, b| record(tape, b, fx, kind, &refs))?;
    Ok(g.cast())
}

fn compare(analytic: &ParamSet<f64>, numeric: &ParamSet<f64>) -> (f64, String, usize) {
    let mut worst = (0.0, String::new(), 0);
    for (name, a) in analytic.iter() {
        let n = numeric.get(name).expect("same names");
        for (i, (x, y)) in a.data.iter().zip(&n.data).enumerate() {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(GRAD_FLOOR);
            if rel > worst.0 || worst.1.is_empty() {
                worst = (rel, name.clone(), i);
            }
        }
    }
    worst
}

/// Runs the suite for the configured precisions.
pub fn run_gradcheck(cfg: &GradcheckConfig, fault: Option<&Fault>) -> Result<GradcheckReport> {
    let fx = Fixture::new()?;
    let mut checks = Vec::new();
    let precisions: &[(&str, f64)] = match cfg.precision {
        Precision::F32 => &[("f32", cfg.tol_f32)],
        Precision::F64 => &[("f64", cfg.tol_f64)],
        Precision::Both => &[("f32", cfg.tol_f32), ("f64", cfg.tol_f64)],
    };
    for kind in LossKind::ALL {
        let numeric = numeric_grad(&fx, kind)?;
        for &(prec, tol) in precisions {
            let mut analytic = if prec == "f32" {
                analytic_grad::<f32>(&fx, kind)?
            } else {
                analytic_grad::<f64>(&fx, kind)?
            };
            if let Some(f) = fault {
                let t = analytic
                    .get_mut(&f.tensor)
                    .ok_or_else(|| Error::Config(format!("fault targets unknown tensor `{}`", f.tensor)))?;
                let slot = t
                    .data
                    .get_mut(f.index)
                    .ok_or_else(|| Error::Config(format!("fault index {} out of range", f.index)))?;
                *slot += f.delta;
            }
            let (max_rel_err, worst_tensor, worst_index) = compare(&analytic, &numeric);
            checks.push(LossCheck {
                loss: kind,
                precision: prec.into(),
                max_rel_err,
                worst_tensor,
                worst_index,
                tolerance: tol,
                passed: max_rel_err < tol,
            });
        }
    }
    Ok(GradcheckReport { checks })
}
