//! Central finite-difference check of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::layers::Mode;
use crate::backbone::ParamSet;
use crate::error::{Error, Result};
use crate::fusion::{DropoutPlan, FusionConfig, FusionInputs, FusionModel, TrainObjective};
use crate::fusion::{ClassificationLabels, FusionParams};
use crate::tokenizer::TokenId;

pub const EPSILON: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
/// Entries with smaller analytic and numeric gradients are not compared.
pub const MIN_GRAD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub compared: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares `analytic` against central differences of `loss` around
/// `params`, entry by entry.
pub fn check_gradients<P, F>(params: &P, analytic: &P, loss: F) -> Result<GradcheckReport>
where
    P: ParamSet<f64> + Clone,
    F: Fn(&P) -> Result<f64>,
{
    let mut probe = params.clone();
    let analytic = analytic.named_tensors();
    let mut tensors = Vec::with_capacity(analytic.len());
    for (ti, (name, grad)) in analytic.iter().enumerate() {
        let mut check = TensorCheck {
            name: name.clone(),
            entries: grad.len(),
            compared: 0,
            max_rel_error: 0.0,
        };
        for j in 0..grad.len() {
            let orig = probe.named_tensors_mut()[ti].1.as_slice()[j];
            probe.named_tensors_mut()[ti].1.as_mut_slice()[j] = orig + EPSILON;
            let plus = loss(&probe)?;
            probe.named_tensors_mut()[ti].1.as_mut_slice()[j] = orig - EPSILON;
            let minus = loss(&probe)?;
            probe.named_tensors_mut()[ti].1.as_mut_slice()[j] = orig;
            let numeric = (plus - minus) / (2.0 * EPSILON);
            let a = grad.as_slice()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}[{j}]")));
            }
            if a.abs() > MIN_GRAD || numeric.abs() > MIN_GRAD {
                check.compared += 1;
                check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
            }
        }
        tensors.push(check);
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        tensors,
        max_rel_error,
        tolerance: TOLERANCE,
    })
}

/// Standard deviation of the weights at the check point. At the training
/// initialization scale a step of `EPSILON` is a sizable fraction of the
/// normalized activations and truncation error swamps small gradients.
pub const CHECK_STD: f64 = 0.5;

/// Redraws every parameter (biases and gains included) from a normal
/// distribution with standard deviation `CHECK_STD`; gains are centered on 1.
pub fn check_point<P: ParamSet<f64>>(params: &mut P, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, CHECK_STD).expect("valid std");
    params.visit_mut("", &mut |name, t| {
        let center = if name.ends_with(".gain") { 1.0 } else { 0.0 };
        t.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = center + normal.sample(&mut rng));
    });
}

/// A small fixed fusion instance: a source, three candidates (one of them
/// dropped), a target and labels with ties.
pub struct GradcheckCase {
    pub inputs: FusionInputs,
    pub target: Vec<TokenId>,
    pub labels: ClassificationLabels,
    pub plan: DropoutPlan,
}

impl GradcheckCase {
    pub fn tiny(cfg: &FusionConfig) -> Result<Self> {
        let v = cfg.backbone.vocab_size as TokenId;
        let first_word = (crate::tokenizer::Vocab::reserved_size(cfg.m_max)) as TokenId;
        if first_word + 12 > v || cfg.m_max < 3 {
            return Err(Error::Config("gradcheck needs m_max >= 3 and room for 12 words".into()));
        }
        let w = |i: TokenId| first_word + i;
        let pos = |k: TokenId| crate::tokenizer::FIRST_CAND_POS + k - 1;
        let eos = crate::tokenizer::EOS;
        let n_metrics = cfg.metrics.len();
        Ok(Self {
            inputs: FusionInputs {
                source: vec![w(0), w(1), w(2), w(3), w(4), eos],
                candidates: vec![
                    vec![pos(1), w(1), w(2), eos],
                    vec![pos(2), w(5), eos],
                    vec![pos(3), w(3), w(6), w(7), eos],
                ],
            },
            target: vec![w(1), w(3), eos],
            labels: ClassificationLabels {
                z: vec![vec![true; n_metrics], vec![false; n_metrics], vec![true; n_metrics]],
            },
            plan: DropoutPlan {
                drop_source: false,
                keep: vec![true, false, true],
            },
        })
    }
}

/// Gradient check of the joint fusion loss in double precision.
pub fn check_fusion(model: &FusionModel<f64>, case: &GradcheckCase, objective: TrainObjective) -> Result<GradcheckReport> {
    let mut grads = model.params.zeros_like();
    model.example_grads(
        &case.inputs,
        &case.target,
        Some(&case.labels),
        &case.plan,
        objective,
        &mut Mode::eval(),
        &mut grads,
    )?;
    let cfg = model.config.clone();
    check_gradients(&model.params, &grads, |p: &FusionParams<f64>| {
        let m = FusionModel {
            config: cfg.clone(),
            params: p.clone(),
        };
        Ok(m
            .example_loss(&case.inputs, &case.target, Some(&case.labels), &case.plan, objective)?
            .total)
    })
}
