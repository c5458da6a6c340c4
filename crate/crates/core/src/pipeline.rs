//! The two-stage protocol: base training on each half, cross-half candidate
//! generation, fusion training, evaluation and the few-shot loop.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::checkpoint::{load_into, read_checkpoint, write_checkpoint};
use crate::backbone::layers::Mode;
use crate::backbone::loss::nll_loss;
use crate::backbone::optim::{adam_step, AdamConfig, AdamState};
use crate::backbone::{Backbone, BackboneConfig, BackboneParams, ParamSet};
use crate::corpus::{self, fingerprint, CandidateSet, Example};
use crate::decoding::{self, DecodeConfig};
use crate::error::{Error, Result};
use crate::fusion::{
    ablated_inference_inputs, classification_labels, make_dropout_plan, AblationMode, ClassificationLabels,
    DropoutPlan, FusionConfig, FusionInputs, FusionModel, FusionParams, LossParts, TrainObjective,
};
use crate::metrics::{self, RougeTriple};
use crate::scalar::Scalar;
use crate::tokenizer::{TokenId, Vocab, BOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "base_A")]
    BaseA,
    #[serde(rename = "base_B")]
    BaseB,
    #[serde(rename = "base_full")]
    BaseFull,
    #[serde(rename = "fusion")]
    Fusion,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::BaseA => "base_A",
            Stage::BaseB => "base_B",
            Stage::BaseFull => "base_full",
            Stage::Fusion => "fusion",
        };
        f.write_str(s)
    }
}

/// Which examples a model was trained on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    pub train_fingerprint: String,
    /// Sorted per-example digests of the training data.
    pub train_digests: Vec<String>,
}

impl Provenance {
    pub fn of(stage: Stage, train: &[Example]) -> Self {
        let mut train_digests: Vec<String> = train.iter().map(Example::digest).collect();
        train_digests.sort();
        train_digests.dedup();
        Self {
            stage,
            train_fingerprint: fingerprint(train),
            train_digests,
        }
    }

    pub fn saw(&self, example: &Example) -> bool {
        self.train_digests.binary_search(&example.digest()).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Validation every this many optimizer steps.
    pub eval_every: usize,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    /// Validation examples decoded for ROUGE-based selection.
    pub val_cap: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            lr: 1e-3,
            eval_every: 50,
            max_steps: None,
            val_cap: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch_size and eval_every must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    pub backbone: BackboneConfig,
    pub max_source_tokens: usize,
    pub max_target_tokens: usize,
}

impl BaseConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.max_source_tokens == 0 || self.max_target_tokens == 0 {
            return Err(Error::Config("truncation lengths must be at least 1".into()));
        }
        if self.max_source_tokens.max(self.max_target_tokens) > self.backbone.max_positions {
            return Err(Error::Config("truncation length exceeds max_positions".into()));
        }
        Ok(())
    }
}

/// One line of `logs/metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_gen: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_cls: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
}

impl LogRecord {
    fn losses(step: usize, split: &str, parts: LossParts) -> Self {
        Self {
            step,
            split: split.into(),
            loss_gen: Some(parts.gen),
            loss_cls: parts.cls,
            loss: Some(parts.total),
            r1: None,
            r2: None,
            rl: None,
            mean: None,
        }
    }

    fn with_rouge(mut self, t: RougeTriple) -> Self {
        self.r1 = Some(t.r1);
        self.r2 = Some(t.r2);
        self.rl = Some(t.rl);
        self.mean = Some(t.mean);
        self
    }
}

pub fn write_metrics_log(path: impl AsRef<Path>, log: &[LogRecord]) -> Result<()> {
    corpus::write_jsonl(path.as_ref(), log)
}

pub fn read_metrics_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    corpus::read_jsonl(path.as_ref())
}

/// Outcome of a training loop: the selected parameters and the metric log.
#[derive(Debug, Clone)]
pub struct TrainOutcome<P> {
    pub params: P,
    pub log: Vec<LogRecord>,
    pub best_step: usize,
    pub steps: usize,
}

/// Deterministic per-example random stream.
fn example_rng(seed: u64, step: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 32) | index as u64);
    rng
}

/// Minibatch Adam over per-example gradients.
///
/// `per_example(params, index, step, grads)` accumulates one example's
/// gradient; `evaluate(params, step)` returns a selection score (higher is
/// better) and a log record. `on_step` sees the parameters after every
/// update. The best-scoring parameters are returned; ties keep the earlier
/// step.
fn train_loop<T, P, F, E>(
    initial: P,
    n_train: usize,
    cfg: &TrainConfig,
    per_example: F,
    mut evaluate: E,
    on_step: &mut dyn FnMut(usize, &P),
) -> Result<TrainOutcome<P>>
where
    T: Scalar,
    P: ParamSet<T> + Clone + Send + Sync,
    F: Fn(&P, usize, usize, &mut P) -> Result<LossParts> + Sync,
    E: FnMut(&P, usize) -> Result<(f64, LogRecord)>,
{
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut params = initial;
    let zeros = params.zeros_like();
    let mut adam = AdamState::new(&params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();

    let (score, rec) = evaluate(&params, 0)?;
    log.push(rec);
    let mut best = (score, 0usize, params.clone());
    let mut step = 0usize;
    let mut last_eval = 0usize;

    'epochs: for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut order_rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let results: Vec<Result<(LossParts, P)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = zeros.clone();
                    let parts = per_example(&params, i, step, &mut g)?;
                    Ok((parts, g))
                })
                .collect();
            let mut grads = zeros.clone();
            let scale = 1.0 / batch.len() as f64;
            let (mut gen, mut cls, mut total, mut has_cls) = (0.0, 0.0, 0.0, false);
            for r in results {
                let (parts, g) = r?;
                grads.add_scaled_from(&g, scale);
                gen += parts.gen * scale;
                total += parts.total * scale;
                if let Some(c) = parts.cls {
                    cls += c * scale;
                    has_cls = true;
                }
            }
            step += 1;
            if !total.is_finite() {
                return Err(Error::Diverged { step, loss: total });
            }
            adam_step(&mut params, &grads, &mut adam, &adam_cfg).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { step, loss: total },
                other => other,
            })?;
            on_step(step, &params);
            log.push(LogRecord::losses(
                step,
                "train",
                LossParts {
                    gen,
                    cls: has_cls.then_some(cls),
                    total,
                },
            ));
            if step % cfg.eval_every == 0 {
                let (score, rec) = evaluate(&params, step)?;
                log.push(rec);
                last_eval = step;
                if score > best.0 {
                    best = (score, step, params.clone());
                }
            }
        }
    }
    if last_eval != step {
        let (score, rec) = evaluate(&params, step)?;
        log.push(rec);
        if score > best.0 {
            best = (score, step, params.clone());
        }
    }
    log::info!("training finished after {step} steps, best step {}", best.1);
    Ok(TrainOutcome {
        params: best.2,
        log,
        best_step: best.1,
        steps: step,
    })
}

/// Vocabulary over every source and target of the training corpus.
pub fn build_vocab(train: &[Example], max_size: usize, m_max: usize) -> Result<Vocab> {
    let texts = train
        .iter()
        .flat_map(|e| std::iter::once(e.source.as_str()).chain(e.target.as_deref()));
    Vocab::build(texts, max_size, m_max)
}

fn teacher_forcing(target: &[TokenId]) -> (Vec<TokenId>, Vec<TokenId>) {
    let mut input = Vec::with_capacity(target.len());
    input.push(BOS);
    input.extend_from_slice(&target[..target.len() - 1]);
    (input, target.to_vec())
}

struct BaseExample {
    source: Vec<TokenId>,
    target: Vec<TokenId>,
}

fn encode_base(examples: &[Example], vocab: &Vocab, cfg: &BaseConfig) -> Result<Vec<BaseExample>> {
    examples
        .iter()
        .map(|e| {
            Ok(BaseExample {
                source: vocab.encode(&e.source, cfg.max_source_tokens, None),
                target: vocab.encode(e.target_or_err()?, cfg.max_target_tokens, None),
            })
        })
        .collect()
}

fn base_loss<T: Scalar>(
    model: &Backbone<T>,
    ex: &BaseExample,
    mode: &mut Mode,
    grads: Option<&mut Backbone<T>>,
) -> Result<f64> {
    let (memory, ecache) = model.encode_seq(&ex.source, None, mode)?;
    let (input, output) = teacher_forcing(&ex.target);
    let (logits, dcache) = model.decode_logits(&input, &memory, None, mode)?;
    let (loss, dlogits) = nll_loss(&logits, &output, None)?;
    if let Some(g) = grads {
        let d_memory = model.decode_backward(&dcache, &dlogits, &mut g.params);
        model.encode_backward(&ecache, &d_memory, &mut g.params);
    }
    Ok(loss)
}

/// A trained model together with everything needed to use it.
#[derive(Debug, Clone)]
pub struct TrainedBase {
    pub config: BaseConfig,
    pub model: Backbone<f32>,
    pub vocab: Vocab,
    pub provenance: Provenance,
    pub log: Vec<LogRecord>,
    pub best_step: usize,
}

/// Teacher-forced NLL training; the checkpoint with the lowest validation
/// loss is kept.
pub fn train_base(
    train: &[Example],
    val: &[Example],
    vocab: &Vocab,
    cfg: &BaseConfig,
    train_cfg: &TrainConfig,
    stage: Stage,
) -> Result<TrainedBase> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData("base training needs train and validation examples".into()));
    }
    if vocab.len() != cfg.backbone.vocab_size {
        return Err(Error::Config(format!(
            "vocab_size {} differs from the vocabulary ({})",
            cfg.backbone.vocab_size,
            vocab.len()
        )));
    }
    let provenance = Provenance::of(stage, train);
    let train_enc = encode_base(train, vocab, cfg)?;
    let val_enc = encode_base(val, vocab, cfg)?;
    let dropout = cfg.backbone.dropout;
    let seed = train_cfg.seed;
    let init = Backbone::<f32>::new(cfg.backbone.clone())?;

    let outcome = train_loop(
        init,
        train_enc.len(),
        train_cfg,
        |model: &Backbone<f32>, i, step, grads| {
            let mut rng = example_rng(seed, step, i);
            let mut mode = if dropout > 0.0 { Mode::train(&mut rng, dropout) } else { Mode::eval() };
            let loss = base_loss(model, &train_enc[i], &mut mode, Some(grads))?;
            Ok(LossParts {
                gen: loss,
                cls: None,
                total: loss,
            })
        },
        |model, step| {
            let losses: Vec<f64> = val_enc
                .par_iter()
                .map(|ex| base_loss(model, ex, &mut Mode::eval(), None))
                .collect::<Result<_>>()?;
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            log::debug!("base step {step}: validation loss {mean:.4}");
            Ok((
                -mean,
                LogRecord::losses(
                    step,
                    "val",
                    LossParts {
                        gen: mean,
                        cls: None,
                        total: mean,
                    },
                ),
            ))
        },
        &mut |_, _| {},
    )?;
    Ok(TrainedBase {
        config: cfg.clone(),
        model: outcome.params,
        vocab: vocab.clone(),
        provenance,
        log: outcome.log,
        best_step: outcome.best_step,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Base,
    Fusion,
}

/// The JSON blob stored in a checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    pub kind: ModelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base: Option<BaseConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionConfig>,
    pub vocab: serde_json::Value,
    pub provenance: Provenance,
    pub best_step: usize,
}

fn vocab_value(vocab: &Vocab) -> serde_json::Value {
    serde_json::from_str(&vocab.to_json()).expect("vocab json parses")
}

fn write_model_file<P: ParamSet<f32>>(path: &Path, record: &ModelRecord, params: &P) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_string(record).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), &json, params)
}

fn read_model_file(path: &Path) -> Result<(ModelRecord, crate::backbone::checkpoint::RawCheckpoint)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let raw = read_checkpoint(BufReader::new(file))?;
    let record: ModelRecord = serde_json::from_str(&raw.config_json)
        .map_err(|e| Error::Checkpoint(format!("{}: bad model record: {e}", path.display())))?;
    Ok((record, raw))
}

impl TrainedBase {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let record = ModelRecord {
            kind: ModelKind::Base,
            base: Some(self.config.clone()),
            fusion: None,
            vocab: vocab_value(&self.vocab),
            provenance: self.provenance.clone(),
            best_step: self.best_step,
        };
        write_model_file(path.as_ref(), &record, &self.model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (record, raw) = read_model_file(path)?;
        let config = match (record.kind, record.base) {
            (ModelKind::Base, Some(c)) => c,
            _ => return Err(Error::Checkpoint(format!("{} is not a base model", path.display()))),
        };
        config.validate()?;
        let mut params = BackboneParams::<f32>::blank(&config.backbone);
        load_into(&raw, &mut params)?;
        let vocab = Vocab::from_json(&record.vocab.to_string())?;
        Ok(Self {
            model: Backbone::from_params(config.backbone.clone(), params)?,
            config,
            vocab,
            provenance: record.provenance,
            log: Vec::new(),
            best_step: record.best_step,
        })
    }
}

/// Candidate sets that could not be produced, with the reason.
pub type Skipped = Vec<(String, String)>;

/// Decodes `decode.beam` candidates per example, in parallel over examples.
pub fn generate_candidates(
    base: &TrainedBase,
    examples: &[Example],
    decode: &DecodeConfig,
) -> Result<(Vec<CandidateSet>, Skipped)> {
    decode.validate()?;
    corpus::ensure_unique_ids(examples.iter().map(|e| e.id.as_str()))?;
    let results: Vec<Result<CandidateSet>> = examples
        .par_iter()
        .map(|e| {
            let ids = base.vocab.encode(&e.source, base.config.max_source_tokens, None);
            let (memory, _) = base.model.encode_seq(&ids, None, &mut Mode::eval())?;
            let out = decoding::generate(&base.model, &memory, &base.vocab, decode)?;
            CandidateSet::new(e.id.clone(), out.iter().map(|c| c.to_candidate()).collect())
        })
        .collect();
    let mut sets = Vec::with_capacity(examples.len());
    let mut skipped = Vec::new();
    for (e, r) in examples.iter().zip(results) {
        match r {
            Ok(s) => sets.push(s),
            Err(err) => {
                log::warn!("decoding {} failed: {err}", e.id);
                skipped.push((e.id.clone(), err.to_string()));
            }
        }
    }
    Ok((sets, skipped))
}

/// Sidecar path holding the provenance of a candidate file.
pub fn provenance_path(candidates: impl AsRef<Path>) -> PathBuf {
    let p = candidates.as_ref();
    let mut name = p.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".provenance.json");
    p.with_file_name(name)
}

pub fn save_candidate_file(path: impl AsRef<Path>, sets: &[CandidateSet], generator: &Provenance) -> Result<()> {
    let path = path.as_ref();
    corpus::save_candidates(path, sets)?;
    let side = provenance_path(path);
    let json = serde_json::to_string_pretty(generator).expect("provenance serializes");
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn load_candidate_file(path: impl AsRef<Path>) -> Result<(Vec<CandidateSet>, Provenance)> {
    let path = path.as_ref();
    let sets = corpus::load_candidates(path)?;
    let side = provenance_path(path);
    let json = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let prov = serde_json::from_str(&json).map_err(|e| Error::Parse {
        path: side.clone(),
        line: 1,
        message: e.to_string(),
    })?;
    Ok((sets, prov))
}

/// A source, its reference and the candidates attached to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedRecord {
    pub id: String,
    pub source: String,
    pub target: Option<String>,
    pub candidates: Vec<String>,
}

pub fn save_fused(path: impl AsRef<Path>, records: &[FusedRecord]) -> Result<()> {
    corpus::write_jsonl(path.as_ref(), records)
}

pub fn load_fused(path: impl AsRef<Path>) -> Result<Vec<FusedRecord>> {
    corpus::read_jsonl(path.as_ref())
}

/// Pairs every example with its candidate set. Fails on missing sets and
/// when the generating model was trained on the example.
pub fn attach_candidates(
    examples: &[Example],
    sets: &[CandidateSet],
    generator: &Provenance,
) -> Result<Vec<FusedRecord>> {
    let by_id: HashMap<&str, &CandidateSet> = sets.iter().map(|s| (s.example_id.as_str(), s)).collect();
    let mut missing: Vec<String> = examples
        .iter()
        .filter(|e| !by_id.contains_key(e.id.as_str()))
        .map(|e| e.id.clone())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::Coverage(missing));
    }
    if let Some(e) = examples.iter().find(|e| generator.saw(e)) {
        return Err(Error::Leakage(format!(
            "example {:?} was in the training data of the {} model that produced its candidates",
            e.id, generator.stage
        )));
    }
    Ok(examples
        .iter()
        .map(|e| FusedRecord {
            id: e.id.clone(),
            source: e.source.clone(),
            target: e.target.clone(),
            candidates: by_id[e.id.as_str()].texts().into_iter().map(String::from).collect(),
        })
        .collect())
}

/// Half A with candidates from the model trained on half B, followed by
/// half B with candidates from the model trained on half A.
pub fn build_fusion_trainset(
    half_a: &[Example],
    cands_a: &[CandidateSet],
    generator_a: &Provenance,
    half_b: &[Example],
    cands_b: &[CandidateSet],
    generator_b: &Provenance,
) -> Result<Vec<FusedRecord>> {
    let mut out = attach_candidates(half_a, cands_a, generator_a)?;
    out.extend(attach_candidates(half_b, cands_b, generator_b)?);
    Ok(out)
}

struct FusionExample {
    inputs: FusionInputs,
    target: Vec<TokenId>,
    labels: ClassificationLabels,
    reference: String,
}

fn encode_fused(records: &[FusedRecord], vocab: &Vocab, cfg: &FusionConfig) -> Result<Vec<FusionExample>> {
    records
        .par_iter()
        .map(|r| {
            let reference = r
                .target
                .clone()
                .ok_or_else(|| Error::MissingTarget(r.id.clone()))?;
            if r.candidates.len() < 2 {
                return Err(Error::Invalid(format!(
                    "record {:?} has {} candidates, fusion training needs at least 2",
                    r.id,
                    r.candidates.len()
                )));
            }
            Ok(FusionExample {
                inputs: FusionInputs::encode(vocab, cfg, &r.source, &r.candidates)?,
                target: vocab.encode(&reference, cfg.max_target_tokens, None),
                labels: classification_labels(&r.candidates, &reference, &cfg.metrics)?,
                reference,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainedFusion {
    pub model: FusionModel<f32>,
    pub vocab: Vocab,
    pub provenance: Provenance,
    pub log: Vec<LogRecord>,
    pub best_step: usize,
}

impl TrainedFusion {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let record = ModelRecord {
            kind: ModelKind::Fusion,
            base: None,
            fusion: Some(self.model.config.clone()),
            vocab: vocab_value(&self.vocab),
            provenance: self.provenance.clone(),
            best_step: self.best_step,
        };
        write_model_file(path.as_ref(), &record, &self.model.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (record, raw) = read_model_file(path)?;
        let config = match (record.kind, record.fusion) {
            (ModelKind::Fusion, Some(c)) => c,
            _ => return Err(Error::Checkpoint(format!("{} is not a fusion model", path.display()))),
        };
        config.validate()?;
        let mut params = FusionParams::<f32>::blank(&config);
        load_into(&raw, &mut params)?;
        Ok(Self {
            model: FusionModel::from_params(config, params)?,
            vocab: Vocab::from_json(&record.vocab.to_string())?,
            provenance: record.provenance,
            log: Vec::new(),
            best_step: record.best_step,
        })
    }
}

/// Decodes one fusion output per record under an input ablation.
pub fn fusion_predict<T: Scalar>(
    model: &FusionModel<T>,
    vocab: &Vocab,
    records: &[FusedRecord],
    decode: &DecodeConfig,
    ablation: AblationMode,
) -> Result<Vec<String>> {
    decode.validate()?;
    records
        .par_iter()
        .map(|r| {
            let inputs = FusionInputs::encode(vocab, &model.config, &r.source, &r.candidates)?;
            let plan = ablated_inference_inputs(inputs.candidates.len(), ablation)?;
            fusion_decode(model, vocab, &inputs, &plan, decode)
        })
        .collect()
}

fn fusion_decode<T: Scalar>(
    model: &FusionModel<T>,
    vocab: &Vocab,
    inputs: &FusionInputs,
    plan: &DropoutPlan,
    decode: &DecodeConfig,
) -> Result<String> {
    let enc = model.encode_inputs(inputs, plan, &mut Mode::eval())?;
    let out = decoding::generate(model.backbone(), &enc.memory, vocab, decode)?;
    Ok(out.into_iter().next().map(|c| c.text).unwrap_or_default())
}

/// Per-example ROUGE triples of predictions against references.
pub fn score_predictions(predictions: &[String], records: &[FusedRecord]) -> Result<Vec<RougeTriple>> {
    if predictions.len() != records.len() {
        return Err(Error::Invalid("prediction count differs from record count".into()));
    }
    predictions
        .iter()
        .zip(records)
        .map(|(p, r)| {
            let reference = r.target.as_deref().ok_or_else(|| Error::MissingTarget(r.id.clone()))?;
            Ok(metrics::rouge_triple(p, reference))
        })
        .collect()
}

/// Fusion training with the joint objective (or generation only); the
/// checkpoint with the best greedy validation mean-ROUGE is kept.
pub fn train_fusion(
    train: &[FusedRecord],
    val: &[FusedRecord],
    vocab: &Vocab,
    init: FusionModel<f32>,
    train_cfg: &TrainConfig,
    objective: TrainObjective,
    train_examples: &[Example],
) -> Result<TrainedFusion> {
    train_fusion_with(train, val, vocab, init, train_cfg, objective, train_examples, &mut |_, _| {})
}

/// `train_fusion` with a hook called after every optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn train_fusion_with(
    train: &[FusedRecord],
    val: &[FusedRecord],
    vocab: &Vocab,
    init: FusionModel<f32>,
    train_cfg: &TrainConfig,
    objective: TrainObjective,
    train_examples: &[Example],
    on_step: &mut dyn FnMut(usize, &FusionModel<f32>),
) -> Result<TrainedFusion> {
    let cfg = init.config.clone();
    if val.is_empty() {
        return Err(Error::InsufficientData("fusion training needs validation records".into()));
    }
    let train_enc = encode_fused(train, vocab, &cfg)?;
    let val_enc = encode_fused(&val[..val.len().min(train_cfg.val_cap.max(1))], vocab, &cfg)?;
    let seed = train_cfg.seed;
    let dropout = cfg.backbone.dropout;
    let p_src = cfg.p_src;
    let greedy = DecodeConfig::greedy(cfg.max_target_tokens);

    let outcome = train_loop(
        init,
        train_enc.len(),
        train_cfg,
        |model: &FusionModel<f32>, i, step, grads| {
            let ex = &train_enc[i];
            let mut rng = example_rng(seed, step, i);
            let plan = make_dropout_plan(ex.inputs.candidates.len(), p_src, &mut rng)?;
            let mut mode = if dropout > 0.0 { Mode::train(&mut rng, dropout) } else { Mode::eval() };
            model.example_grads(&ex.inputs, &ex.target, Some(&ex.labels), &plan, objective, &mut mode, &mut grads.params)
        },
        |model, step| {
            let rows: Vec<(LossParts, RougeTriple)> = val_enc
                .par_iter()
                .map(|ex| {
                    let plan = DropoutPlan::identity(ex.inputs.candidates.len());
                    let parts = model.example_loss(&ex.inputs, &ex.target, Some(&ex.labels), &plan, objective)?;
                    let text = fusion_decode(model, vocab, &ex.inputs, &plan, &greedy)?;
                    Ok((parts, metrics::rouge_triple(&text, &ex.reference)))
                })
                .collect::<Result<_>>()?;
            let n = rows.len() as f64;
            let parts = LossParts {
                gen: rows.iter().map(|r| r.0.gen).sum::<f64>() / n,
                cls: rows[0].0.cls.map(|_| rows.iter().filter_map(|r| r.0.cls).sum::<f64>() / n),
                total: rows.iter().map(|r| r.0.total).sum::<f64>() / n,
            };
            let triples: Vec<RougeTriple> = rows.iter().map(|r| r.1).collect();
            let avg = RougeTriple::average(&triples);
            log::debug!("fusion step {step}: validation mean-ROUGE {:.4}", avg.mean);
            Ok((avg.mean, LogRecord::losses(step, "val", parts).with_rouge(avg)))
        },
        on_step,
    )?;
    Ok(TrainedFusion {
        model: outcome.params,
        vocab: vocab.clone(),
        provenance: Provenance::of(Stage::Fusion, train_examples),
        log: outcome.log,
        best_step: outcome.best_step,
    })
}

/// Fusion model whose encoder-decoder starts from a trained base model.
pub fn fusion_from_base(base: &TrainedBase, mut cfg: FusionConfig) -> Result<FusionModel<f32>> {
    cfg.backbone = base.config.backbone.clone();
    let mut model = FusionModel::<f32>::new(cfg)?;
    model.params.backbone = base.model.clone();
    Ok(model)
}

/// `ParamSet` wrapper so the fusion model itself can be optimized.
impl<T: Scalar> ParamSet<T> for FusionModel<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a crate::tensor::Matrix<T>)) {
        self.params.visit(prefix, f)
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut crate::tensor::Matrix<T>)) {
        self.params.visit_mut(prefix, f)
    }
}

/// Every setting of one full two-stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub vocab_max: usize,
    pub base: BaseConfig,
    pub base_train: TrainConfig,
    pub fusion: FusionConfig,
    pub fusion_train: TrainConfig,
    pub candidates: DecodeConfig,
    pub inference: DecodeConfig,
    pub seed: u64,
}

impl ProtocolConfig {
    /// Desk-scale defaults for a vocabulary of the given size (reserved
    /// tokens included).
    pub fn desk(vocab_size: usize) -> Self {
        let backbone = BackboneConfig::desk(vocab_size);
        Self {
            vocab_max: vocab_size,
            base: BaseConfig {
                backbone: backbone.clone(),
                max_source_tokens: 64,
                max_target_tokens: 32,
            },
            base_train: TrainConfig::default(),
            fusion: FusionConfig {
                max_source_tokens: 64,
                max_candidate_tokens: 34,
                max_target_tokens: 32,
                ..FusionConfig::new(backbone)
            },
            fusion_train: TrainConfig::default(),
            candidates: DecodeConfig::diverse(15, 32),
            inference: DecodeConfig::beam(10, 32),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.base_train.validate()?;
        self.fusion.validate()?;
        self.fusion_train.validate()?;
        self.candidates.validate()?;
        self.inference.validate()?;
        if self.candidates.beam > self.fusion.m_max {
            return Err(Error::Config(format!(
                "{} candidates requested but m_max is {}",
                self.candidates.beam, self.fusion.m_max
            )));
        }
        Ok(())
    }

    fn with_seed(&self, stage_offset: u64) -> (TrainConfig, TrainConfig, u64) {
        let s = self.seed.wrapping_mul(1000).wrapping_add(stage_offset);
        let mut b = self.base_train.clone();
        b.seed = b.seed.wrapping_add(s);
        let mut f = self.fusion_train.clone();
        f.seed = f.seed.wrapping_add(s);
        (b, f, s)
    }
}

/// Everything a full two-stage run produces.
#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub vocab: Vocab,
    pub bases: BTreeMap<Stage, TrainedBase>,
    pub fusion: TrainedFusion,
    pub train_records: Vec<FusedRecord>,
    pub val_records: Vec<FusedRecord>,
    pub test_records: Vec<FusedRecord>,
    pub skipped: Skipped,
}

fn keep_decoded(examples: &[Example], skipped: &Skipped) -> Vec<Example> {
    examples
        .iter()
        .filter(|e| !skipped.iter().any(|(id, _)| id == &e.id))
        .cloned()
        .collect()
}

/// Base models on each half and on the full set, cross-half candidates for
/// training, full-model candidates for validation and test, then fusion
/// training initialized from the full base model.
pub fn run_protocol(
    train: &[Example],
    val: &[Example],
    test: &[Example],
    cfg: &ProtocolConfig,
) -> Result<ProtocolOutcome> {
    cfg.validate()?;
    let vocab = build_vocab(train, cfg.vocab_max, cfg.fusion.m_max)?;
    let mut base_cfg = cfg.base.clone();
    base_cfg.backbone.vocab_size = vocab.len();
    let (half_a, half_b) = corpus::split_halves(train, cfg.seed)?;
    let (base_train, fusion_train, _) = cfg.with_seed(0);

    let mut bases = BTreeMap::new();
    for (stage, data) in [(Stage::BaseA, &half_a), (Stage::BaseB, &half_b), (Stage::BaseFull, &train.to_vec())] {
        log::info!("training {stage} on {} examples", data.len());
        bases.insert(stage, train_base(data, val, &vocab, &base_cfg, &base_train, stage)?);
    }

    let mut skipped = Vec::new();
    let mut gen = |stage: Stage, examples: &[Example]| -> Result<(Vec<Example>, Vec<CandidateSet>)> {
        let (sets, sk) = generate_candidates(&bases[&stage], examples, &cfg.candidates)?;
        let kept = keep_decoded(examples, &sk);
        skipped.extend(sk);
        Ok((kept, sets))
    };
    let (a_kept, cands_a) = gen(Stage::BaseB, &half_a)?;
    let (b_kept, cands_b) = gen(Stage::BaseA, &half_b)?;
    let (val_kept, cands_val) = gen(Stage::BaseFull, val)?;
    let (test_kept, cands_test) = gen(Stage::BaseFull, test)?;

    let train_records = build_fusion_trainset(
        &a_kept,
        &cands_a,
        &bases[&Stage::BaseB].provenance,
        &b_kept,
        &cands_b,
        &bases[&Stage::BaseA].provenance,
    )?;
    let full_prov = &bases[&Stage::BaseFull].provenance;
    let val_records = attach_candidates(&val_kept, &cands_val, full_prov)?;
    let test_records = attach_candidates(&test_kept, &cands_test, full_prov)?;

    let mut fusion_cfg = cfg.fusion.clone();
    fusion_cfg.backbone = base_cfg.backbone.clone();
    let init = fusion_from_base(&bases[&Stage::BaseFull], fusion_cfg.clone())?;
    let fusion = train_fusion(
        &train_records,
        &val_records,
        &vocab,
        init,
        &fusion_train,
        TrainObjective::Joint {
            lambda: fusion_cfg.lambda,
        },
        train,
    )?;
    Ok(ProtocolOutcome {
        vocab,
        bases,
        fusion,
        train_records,
        val_records,
        test_records,
        skipped,
    })
}

/// Per-seed scores and their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewshotReport {
    pub k: usize,
    pub seeds: Vec<u64>,
    pub val: Vec<RougeTriple>,
    pub test: Vec<RougeTriple>,
    pub val_mean: RougeTriple,
    pub val_std: RougeTriple,
    pub test_mean: RougeTriple,
    pub test_std: RougeTriple,
}

/// Sample standard deviation of each component.
pub fn triple_std(items: &[RougeTriple]) -> RougeTriple {
    let n = items.len();
    if n < 2 {
        return RougeTriple::new(0.0, 0.0, 0.0);
    }
    // Deviations are taken from the first item so identical inputs give exactly zero.
    let sd = |f: fn(&RougeTriple) -> f64| {
        let x0 = f(&items[0]);
        let (s, s2) = items.iter().fold((0.0, 0.0), |(s, s2), t| {
            let d = f(t) - x0;
            (s + d, s2 + d * d)
        });
        ((s2 - s * s / n as f64).max(0.0) / (n - 1) as f64).sqrt()
    };
    let mut out = RougeTriple::new(sd(|t| t.r1), sd(|t| t.r2), sd(|t| t.rl));
    out.mean = sd(|t| t.mean);
    out
}

/// The full protocol on `k` training and `k` validation examples per seed.
pub fn run_fewshot(
    pool: &[Example],
    test: &[Example],
    k: usize,
    seeds: &[u64],
    cfg: &ProtocolConfig,
) -> Result<FewshotReport> {
    if seeds.is_empty() {
        return Err(Error::Config("few-shot run needs at least one seed".into()));
    }
    let mut val_scores = Vec::new();
    let mut test_scores = Vec::new();
    for &seed in seeds {
        let (train, val) = corpus::sample_fewshot(pool, k, seed)?;
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        let outcome = run_protocol(&train, &val, test, &run_cfg)?;
        let score = |records: &[FusedRecord]| -> Result<RougeTriple> {
            let preds = fusion_predict(
                &outcome.fusion.model,
                &outcome.vocab,
                records,
                &cfg.inference,
                AblationMode::Full,
            )?;
            Ok(RougeTriple::average(&score_predictions(&preds, records)?))
        };
        val_scores.push(score(&outcome.val_records)?);
        test_scores.push(score(&outcome.test_records)?);
    }
    Ok(FewshotReport {
        k,
        seeds: seeds.to_vec(),
        val_mean: RougeTriple::average(&val_scores),
        val_std: triple_std(&val_scores),
        test_mean: RougeTriple::average(&test_scores),
        test_std: triple_std(&test_scores),
        val: val_scores,
        test: test_scores,
    })
}

/// `manifest.json` of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub stage: Stage,
    pub config_snapshot: PathBuf,
    pub fingerprints: BTreeMap<String, String>,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub metric_log: PathBuf,
    #[serde(default)]
    pub skipped: usize,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    /// Run directory layout, relative to the run directory.
    pub fn new(stage: Stage, seed: u64, fingerprints: BTreeMap<String, String>) -> Self {
        let tag = fingerprints
            .values()
            .next()
            .map(|f| f[..f.len().min(12)].to_string())
            .unwrap_or_default();
        Self {
            run_id: format!("{stage}-{seed}-{tag}"),
            stage,
            config_snapshot: PathBuf::from("config.snapshot"),
            fingerprints,
            seed,
            checkpoint: PathBuf::from("checkpoints").join("model.ckpt"),
            metric_log: PathBuf::from("logs").join("metrics.jsonl"),
            skipped: 0,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(Self::FILE);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(json.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(Self::FILE);
        let json = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&json).map_err(|e| Error::Parse {
            path,
            line: 1,
            message: e.to_string(),
        })
    }

    /// Errors with the first referenced artifact that does not exist.
    pub fn check_artifacts(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for p in [&self.config_snapshot, &self.checkpoint, &self.metric_log] {
            let full = dir.join(p);
            if !full.exists() {
                return Err(Error::Invalid(format!("missing run artifact {}", full.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};

    #[test]
    fn provenance_detects_membership() {
        let data = generate_synthetic(&SyntheticSpec::default(), 6).unwrap();
        let p = Provenance::of(Stage::BaseA, &data[..3]);
        assert!(p.saw(&data[0]));
        assert!(!p.saw(&data[4]));
    }

    #[test]
    fn sample_std_of_identical_values_is_zero() {
        let t = RougeTriple::new(0.3, 0.2, 0.1);
        let s = triple_std(&[t, t, t]);
        assert_eq!((s.r1, s.r2, s.rl, s.mean), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn coverage_gap_lists_missing_ids() {
        let data = generate_synthetic(&SyntheticSpec::default(), 3).unwrap();
        let p = Provenance::of(Stage::BaseB, &[]);
        let err = attach_candidates(&data, &[], &p).unwrap_err();
        match err {
            Error::Coverage(ids) => assert_eq!(ids.len(), 3),
            other => panic!("unexpected {other}"),
        }
    }
}
