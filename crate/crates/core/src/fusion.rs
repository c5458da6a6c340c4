//! The fusion model: the source and every candidate are encoded by
//! independent encoder passes, their token states are concatenated along the
//! sequence dimension into one decoder memory, and the decoder is trained on
//! the reference under a joint generation + candidate-classification loss.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::layers::{FeedForward, FeedForwardCache, Linear, Mode};
use crate::backbone::loss::nll_loss;
use crate::backbone::params::{init_normal, param_struct, ParamSet};
use crate::backbone::{Backbone, BackboneConfig, BackboneParams, EncoderCache};
use crate::error::{Error, Result};
use crate::metrics::{self, Objective};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::tokenizer::{TokenId, Vocab, BOS, CAND_DROP, SRC_DROP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub backbone: BackboneConfig,
    /// Maximum number of candidates (and of position tokens).
    pub m_max: usize,
    /// Probability of replacing the source by its placeholder in training.
    pub p_src: f64,
    /// Weight of the classification loss.
    pub lambda: f64,
    /// Metrics the classifier predicts maximizers for.
    pub metrics: Vec<Objective>,
    /// Hidden width of the classification head.
    pub cls_hidden: usize,
    pub max_source_tokens: usize,
    pub max_candidate_tokens: usize,
    pub max_target_tokens: usize,
}

impl FusionConfig {
    pub fn new(backbone: BackboneConfig) -> Self {
        let cls_hidden = backbone.d_model;
        Self {
            backbone,
            m_max: 15,
            p_src: 0.2,
            lambda: 1.0,
            metrics: vec![Objective::R1, Objective::R2, Objective::RL],
            cls_hidden,
            max_source_tokens: 64,
            max_candidate_tokens: 34,
            max_target_tokens: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.m_max < 2 {
            return Err(Error::Config("m_max must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.p_src) {
            return Err(Error::Config("p_src must be in [0, 1)".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.metrics.is_empty() {
            return Err(Error::Config("the classification metric set is empty".into()));
        }
        if self.cls_hidden == 0 {
            return Err(Error::Config("cls_hidden must be at least 1".into()));
        }
        let longest = self
            .max_source_tokens
            .max(self.max_candidate_tokens)
            .max(self.max_target_tokens);
        if longest > self.backbone.max_positions {
            return Err(Error::Config(format!(
                "truncation length {longest} exceeds max_positions {}",
                self.backbone.max_positions
            )));
        }
        if self.max_source_tokens == 0 || self.max_candidate_tokens < 2 || self.max_target_tokens == 0 {
            return Err(Error::Config("truncation lengths too small".into()));
        }
        Ok(())
    }
}

/// `L = L_gen + lambda * L_cls`.
pub fn total_loss(gen: f64, cls: f64, lambda: f64) -> f64 {
    gen + lambda * cls
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T> {
    pub backbone: Backbone<T>,
    /// Two-layer head on `[pooled source ; pooled candidate]`.
    pub classifier: FeedForward<T>,
}
param_struct!(FusionParams { backbone, classifier });

impl<T: Scalar> FusionParams<T> {
    /// Zero weights with layer-norm gains at one.
    pub fn blank(cfg: &FusionConfig) -> Self {
        let d = cfg.backbone.d_model;
        Self {
            backbone: Backbone {
                config: cfg.backbone.clone(),
                params: BackboneParams::blank(&cfg.backbone),
            },
            classifier: FeedForward {
                up: Linear::zeros(2 * d, cfg.cls_hidden),
                down: Linear::zeros(cfg.cls_hidden, cfg.metrics.len()),
            },
        }
    }
}

/// Tokenized model inputs; candidate `k` (1-based) starts with its position
/// token.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInputs {
    pub source: Vec<TokenId>,
    pub candidates: Vec<Vec<TokenId>>,
}

impl FusionInputs {
    pub fn encode<S: AsRef<str>>(vocab: &Vocab, cfg: &FusionConfig, source: &str, candidates: &[S]) -> Result<Self> {
        if candidates.len() > cfg.m_max {
            return Err(Error::Invalid(format!(
                "{} candidates exceed m_max {}",
                candidates.len(),
                cfg.m_max
            )));
        }
        let candidates = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| Ok(vocab.encode(c.as_ref(), cfg.max_candidate_tokens, Some(vocab.cand_pos(i + 1)?))))
            .collect::<Result<_>>()?;
        Ok(Self {
            source: vocab.encode(source, cfg.max_source_tokens, None),
            candidates,
        })
    }
}

/// Which inputs survive: dropped segments are replaced by a single
/// placeholder token, kept candidates stay at their original positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutPlan {
    pub drop_source: bool,
    pub keep: Vec<bool>,
}

impl DropoutPlan {
    /// Inference plan: everything kept.
    pub fn identity(m: usize) -> Self {
        Self {
            drop_source: false,
            keep: vec![true; m],
        }
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Source dropped with probability `p_src`; a count `k` uniform on
/// `{2, .., m}` and then a uniform `k`-subset of candidates kept.
pub fn make_dropout_plan(m: usize, p_src: f64, rng: &mut ChaCha8Rng) -> Result<DropoutPlan> {
    if m < 2 {
        return Err(Error::Invalid(format!(
            "candidate dropout needs at least 2 candidates, got {m}"
        )));
    }
    loop {
        let drop_source = rng.gen::<f64>() < p_src;
        let k = rng.gen_range(2..=m);
        let mut keep = vec![false; m];
        for i in sample(rng, m, k) {
            keep[i] = true;
        }
        let plan = DropoutPlan { drop_source, keep };
        // k >= 2 always keeps a candidate, so this never loops in practice.
        if !plan.drop_source || plan.kept_count() > 0 {
            return Ok(plan);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    NoSource,
    NoCandidates,
    FirstK(usize),
}

/// Inference-time input ablation expressed as a plan over `m` candidates.
pub fn ablated_inference_inputs(m: usize, mode: AblationMode) -> Result<DropoutPlan> {
    let mut plan = DropoutPlan::identity(m);
    match mode {
        AblationMode::Full => {}
        AblationMode::NoSource => plan.drop_source = true,
        AblationMode::NoCandidates => plan.keep.iter_mut().for_each(|k| *k = false),
        AblationMode::FirstK(k) => {
            if k == 0 || k > m {
                return Err(Error::Invalid(format!("first-k ablation needs 1 <= k <= {m}, got {k}")));
            }
            plan.keep.iter_mut().skip(k).for_each(|x| *x = false);
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentTag {
    Source,
    /// 1-based candidate position.
    Candidate(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub tag: SegmentTag,
    pub start: usize,
    pub len: usize,
    pub placeholder: bool,
}

/// Concatenated encoder states of one example.
pub struct FusedEncoding<T> {
    pub memory: Matrix<T>,
    pub segments: Vec<Segment>,
    /// Mean-pooled state per segment, `segments x d`.
    pub pooled: Matrix<T>,
    caches: Vec<EncoderCache<T>>,
}

impl<T: Scalar> FusedEncoding<T> {
    pub fn memory_rows(&self, tag: SegmentTag) -> Option<Matrix<T>> {
        self.segments
            .iter()
            .find(|s| s.tag == tag)
            .map(|s| self.memory.slice_rows(s.start, s.len))
    }
}

/// Per-candidate, per-metric maximizer indicators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationLabels {
    /// `m x |metrics|`.
    pub z: Vec<Vec<bool>>,
}

/// Every candidate attaining the best score of a metric is positive for it.
pub fn classification_labels<S: AsRef<str>>(
    candidates: &[S],
    reference: &str,
    metrics_set: &[Objective],
) -> Result<ClassificationLabels> {
    if candidates.is_empty() {
        return Err(Error::Invalid("labels for an empty candidate set".into()));
    }
    let r = metrics::normalize(reference);
    let triples: Vec<_> = candidates
        .iter()
        .map(|c| metrics::rouge_triple_tokens(&metrics::normalize(c.as_ref()), &r))
        .collect();
    let mut z = vec![vec![false; metrics_set.len()]; candidates.len()];
    for (col, &obj) in metrics_set.iter().enumerate() {
        let best = triples.iter().map(|t| t.get(obj)).fold(f64::NEG_INFINITY, f64::max);
        for (row, t) in triples.iter().enumerate() {
            z[row][col] = t.get(obj) == best;
        }
    }
    Ok(ClassificationLabels { z })
}

/// What the per-example loss optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainObjective {
    /// Generation loss only; the classification branch is not evaluated.
    GenerationOnly,
    /// `L_gen + lambda * L_cls`.
    Joint { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub gen: f64,
    pub cls: Option<f64>,
    pub total: f64,
}

struct ClassifierPass<T> {
    /// Candidate segment index for each classifier row.
    rows: Vec<usize>,
    cache: FeedForwardCache<T>,
    logits: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel<T> {
    pub config: FusionConfig,
    pub params: FusionParams<T>,
}

impl<T: Scalar> FusionModel<T> {
    pub fn new(config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let mut params = FusionParams::blank(&config);
        init_normal(&mut params, config.backbone.seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: FusionConfig, params: FusionParams<T>) -> Result<Self> {
        config.validate()?;
        if params.backbone.config != config.backbone {
            return Err(Error::Checkpoint("backbone configuration mismatch".into()));
        }
        let expected = FusionParams::<T>::blank(&config);
        let shapes = |p: &FusionParams<T>| {
            p.named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.shape()))
                .collect::<Vec<_>>()
        };
        if shapes(&expected) != shapes(&params) {
            return Err(Error::Checkpoint("parameter shapes do not match the configuration".into()));
        }
        Ok(Self { config, params })
    }

    pub fn backbone(&self) -> &Backbone<T> {
        &self.params.backbone
    }

    fn segment_ids<'a>(&self, inputs: &'a FusionInputs, plan: &DropoutPlan) -> Result<Vec<(SegmentTag, bool, std::borrow::Cow<'a, [TokenId]>)>> {
        use std::borrow::Cow;
        let m = inputs.candidates.len();
        if m > self.config.m_max {
            return Err(Error::Invalid(format!("{m} candidates exceed m_max {}", self.config.m_max)));
        }
        if plan.keep.len() != m {
            return Err(Error::Invalid(format!(
                "dropout plan covers {} candidates, inputs have {m}",
                plan.keep.len()
            )));
        }
        let mut segs = Vec::with_capacity(m + 1);
        if plan.drop_source {
            segs.push((SegmentTag::Source, true, Cow::Owned(vec![SRC_DROP])));
        } else {
            segs.push((SegmentTag::Source, false, Cow::Borrowed(&inputs.source[..])));
        }
        for (i, c) in inputs.candidates.iter().enumerate() {
            if plan.keep[i] {
                segs.push((SegmentTag::Candidate(i + 1), false, Cow::Borrowed(&c[..])));
            } else {
                segs.push((SegmentTag::Candidate(i + 1), true, Cow::Owned(vec![CAND_DROP])));
            }
        }
        if segs.iter().all(|s| s.1) {
            return Err(Error::Invalid("no input segment survives the dropout plan".into()));
        }
        Ok(segs)
    }

    /// Encodes every segment independently and concatenates the states in
    /// the order source, candidate 1, .., candidate m.
    pub fn encode_inputs(&self, inputs: &FusionInputs, plan: &DropoutPlan, mode: &mut Mode) -> Result<FusedEncoding<T>> {
        let backbone = &self.params.backbone;
        let segs = self.segment_ids(inputs, plan)?;
        let d = self.config.backbone.d_model;
        let mut parts = Vec::with_capacity(segs.len());
        let mut caches = Vec::with_capacity(segs.len());
        let mut segments = Vec::with_capacity(segs.len());
        let mut pooled = Matrix::zeros(segs.len(), d);
        let mut start = 0;
        for (i, (tag, placeholder, ids)) in segs.iter().enumerate() {
            let (states, cache) = backbone.encode_seq(ids, None, mode)?;
            let n = states.rows();
            for c in 0..d {
                let mean = (0..n).map(|r| states.get(r, c).widen()).sum::<f64>() / n as f64;
                pooled.set(i, c, T::narrow(mean));
            }
            segments.push(Segment {
                tag: *tag,
                start,
                len: n,
                placeholder: *placeholder,
            });
            start += n;
            parts.push(states);
            caches.push(cache);
        }
        let memory = Matrix::vstack(&parts.iter().collect::<Vec<_>>());
        Ok(FusedEncoding {
            memory,
            segments,
            pooled,
            caches,
        })
    }

    fn decoder_io(&self, target: &[TokenId]) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
        if target.is_empty() {
            return Err(Error::Invalid("empty target".into()));
        }
        if target.len() > self.config.max_target_tokens {
            return Err(Error::Invalid(format!(
                "target of {} tokens exceeds max_target_tokens {}",
                target.len(),
                self.config.max_target_tokens
            )));
        }
        let mut input = Vec::with_capacity(target.len());
        input.push(BOS);
        input.extend_from_slice(&target[..target.len() - 1]);
        Ok((input, target.to_vec()))
    }

    fn classify(&self, enc: &FusedEncoding<T>) -> Option<ClassifierPass<T>> {
        let d = self.config.backbone.d_model;
        let rows: Vec<usize> = enc
            .segments
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s.tag, SegmentTag::Candidate(_)) && !s.placeholder)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let mut input = Matrix::zeros(rows.len(), 2 * d);
        for (r, &seg) in rows.iter().enumerate() {
            let dst = input.row_mut(r);
            dst[..d].copy_from_slice(enc.pooled.row(0));
            dst[d..].copy_from_slice(enc.pooled.row(seg));
        }
        let (logits, cache) = self.params.classifier.forward(&input);
        Some(ClassifierPass {
            rows,
            cache,
            logits,
        })
    }

    /// Candidate logits of the classification head, one row per kept
    /// candidate (with its 1-based position).
    pub fn candidate_logits(&self, enc: &FusedEncoding<T>) -> Vec<(usize, Vec<f64>)> {
        match self.classify(enc) {
            None => Vec::new(),
            Some(pass) => pass
                .rows
                .iter()
                .enumerate()
                .map(|(r, &seg)| {
                    let k = match enc.segments[seg].tag {
                        SegmentTag::Candidate(k) => k,
                        SegmentTag::Source => unreachable!(),
                    };
                    (k, pass.logits.row(r).iter().map(|v| v.widen()).collect())
                })
                .collect(),
        }
    }

    /// Summed binary cross-entropy over kept candidates, averaged over
    /// metrics; returns the loss and its gradient w.r.t. the logits.
    fn bce(&self, pass: &ClassifierPass<T>, enc: &FusedEncoding<T>, labels: &ClassificationLabels) -> Result<(f64, Matrix<T>)> {
        let n_metrics = self.config.metrics.len();
        let mut grad = Matrix::zeros(pass.logits.rows(), n_metrics);
        let mut total = 0.0;
        for (r, &seg) in pass.rows.iter().enumerate() {
            let k = match enc.segments[seg].tag {
                SegmentTag::Candidate(k) => k,
                SegmentTag::Source => unreachable!(),
            };
            let z = labels
                .z
                .get(k - 1)
                .ok_or_else(|| Error::Invalid(format!("no labels for candidate {k}")))?;
            if z.len() != n_metrics {
                return Err(Error::Invalid("label width differs from the metric set".into()));
            }
            for (col, &positive) in z.iter().enumerate() {
                let x = pass.logits.get(r, col).widen();
                let y = if positive { 1.0 } else { 0.0 };
                // -y log s(x) - (1 - y) log(1 - s(x)), stable form.
                total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
                let s = 1.0 / (1.0 + (-x).exp());
                grad.set(r, col, T::narrow((s - y) / n_metrics as f64));
            }
        }
        Ok((total / n_metrics as f64, grad))
    }

    /// Forward-only loss of one example.
    pub fn example_loss(
        &self,
        inputs: &FusionInputs,
        target: &[TokenId],
        labels: Option<&ClassificationLabels>,
        plan: &DropoutPlan,
        objective: TrainObjective,
    ) -> Result<LossParts> {
        let mut mode = Mode::eval();
        let enc = self.encode_inputs(inputs, plan, &mut mode)?;
        let backbone = &self.params.backbone;
        let (dec_in, dec_out) = self.decoder_io(target)?;
        let (logits, _) = backbone.decode_logits(&dec_in, &enc.memory, None, &mut mode)?;
        let (gen, _) = nll_loss(&logits, &dec_out, None)?;
        match objective {
            TrainObjective::GenerationOnly => Ok(LossParts { gen, cls: None, total: gen }),
            TrainObjective::Joint { lambda } => {
                let labels = labels.ok_or_else(|| Error::Invalid("joint loss needs labels".into()))?;
                let cls = match self.classify(&enc) {
                    Some(pass) => self.bce(&pass, &enc, labels)?.0,
                    None => 0.0,
                };
                Ok(LossParts {
                    gen,
                    cls: Some(cls),
                    total: total_loss(gen, cls, lambda),
                })
            }
        }
    }

    /// Loss of one example and accumulation of its gradient into `grads`.
    pub fn example_grads(
        &self,
        inputs: &FusionInputs,
        target: &[TokenId],
        labels: Option<&ClassificationLabels>,
        plan: &DropoutPlan,
        objective: TrainObjective,
        mode: &mut Mode,
        grads: &mut FusionParams<T>,
    ) -> Result<LossParts> {
        let enc = self.encode_inputs(inputs, plan, mode)?;
        let backbone = &self.params.backbone;
        let (dec_in, dec_out) = self.decoder_io(target)?;
        let (logits, dcache) = backbone.decode_logits(&dec_in, &enc.memory, None, mode)?;
        let (gen, dlogits) = nll_loss(&logits, &dec_out, None)?;
        let mut d_memory = backbone.decode_backward(&dcache, &dlogits, &mut grads.backbone.params);

        let mut parts = LossParts { gen, cls: None, total: gen };
        if let TrainObjective::Joint { lambda } = objective {
            let labels = labels.ok_or_else(|| Error::Invalid("joint loss needs labels".into()))?;
            let mut cls = 0.0;
            if let Some(pass) = self.classify(&enc) {
                let (loss, mut dlog) = self.bce(&pass, &enc, labels)?;
                cls = loss;
                dlog.scale(lambda);
                let dinput = self.params.classifier.backward(&pass.cache, &dlog, &mut grads.classifier);
                let d = self.config.backbone.d_model;
                let mut dpooled = Matrix::<T>::zeros(enc.segments.len(), d);
                for (r, &seg) in pass.rows.iter().enumerate() {
                    let row = dinput.row(r);
                    for c in 0..d {
                        dpooled.set(0, c, dpooled.get(0, c) + row[c]);
                        dpooled.set(seg, c, dpooled.get(seg, c) + row[d + c]);
                    }
                }
                for (i, s) in enc.segments.iter().enumerate() {
                    let inv = 1.0 / s.len as f64;
                    for r in s.start..s.start + s.len {
                        for c in 0..d {
                            let v = d_memory.get(r, c).widen() + dpooled.get(i, c).widen() * inv;
                            d_memory.set(r, c, T::narrow(v));
                        }
                    }
                }
            }
            parts.cls = Some(cls);
            parts.total = total_loss(gen, cls, lambda);
        }

        for (s, cache) in enc.segments.iter().zip(&enc.caches) {
            let d_seg = d_memory.slice_rows(s.start, s.len);
            backbone.encode_backward(cache, &d_seg, &mut grads.backbone.params);
        }
        Ok(parts)
    }
}
