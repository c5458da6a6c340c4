use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fusum::analysis::{self, Feature};
use fusum::corpus::{self, Example};
use fusum::fusion::{AblationMode, FusionConfig, FusionModel, TrainObjective};
use fusum::gradcheck::{self, GradcheckCase, GradcheckReport};
use fusum::metrics::{self, Objective, RougeTriple};
use fusum::pipeline::{self, FusedRecord, RunManifest, Stage, TrainedBase, TrainedFusion};
use fusum::tokenizer::Vocab;
use serde::{Deserialize, Serialize};

use crate::config::CliConfig;
use crate::{Analyze, Cli, Command, Decoded, Scored};

/// `println!` that tolerates a closed stdout.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

macro_rules! say_raw {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout().lock(), $($arg)*);
    }};
}

/// Errors raised by the command layer itself.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
}

/// 1 for usage and configuration errors, 2 for data errors, 3 for
/// numerical failures.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => 1,
                CliError::Numerical(_) => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<fusum::Error>() {
            return match e {
                fusum::Error::Config(_) => 1,
                e if e.is_numerical() => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 1;
        }
    }
    2
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    CliError::Usage(msg.into()).into()
}

struct Ctx {
    cfg: CliConfig,
    out: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, what: &str) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| usage(format!("--out is required: {what}")))
    }

    fn out_dir(&self) -> Result<&Path> {
        let dir = self.out("output directory")?;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = CliConfig::load(cli.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let ctx = Ctx { cfg, out: cli.out };
    match cli.command {
        Command::Synth { n } => synth(&ctx, n),
        Command::Stats { data } => stats(&ctx, &data),
        Command::Split { data, val, test } => split(&ctx, &data, val, test),
        Command::TrainBase {
            train,
            val,
            stage,
            vocab,
        } => train_base(&ctx, &train, &val, &stage, vocab.as_deref()),
        Command::Generate { model, data, name } => generate(&ctx, &model, &data, name),
        Command::BuildFusionset { data, cands } => build_fusionset(&ctx, &data, &cands),
        Command::TrainFusion {
            train,
            val,
            init,
            vocab,
            objective,
        } => train_fusion(&ctx, &train, &val, init.as_deref(), vocab.as_deref(), &objective),
        Command::Evaluate { model, data, ablation } => evaluate(&ctx, &model, &data, &ablation),
        Command::Analyze(a) => analyze(&ctx, a),
        Command::Fewshot { data, test, k, seeds } => fewshot(&ctx, &data, &test, k, seeds),
        Command::Gradcheck => run_gradcheck(&ctx),
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
}

fn synth(ctx: &Ctx, n: usize) -> Result<()> {
    let out = ctx.out("corpus file")?;
    let data = corpus::generate_synthetic(&ctx.cfg.synthetic, n)?;
    corpus::save_examples(out, &data)?;
    say!("wrote {} examples to {}", data.len(), out.display());
    Ok(())
}

fn stats(ctx: &Ctx, data: &Path) -> Result<()> {
    let examples = corpus::load_examples(data)?;
    let stats = corpus::corpus_stats(&examples)?;
    let json = serde_json::to_string_pretty(&stats)?;
    say!("{json}");
    if let Some(dir) = &ctx.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("stats.json"), &stats)?;
    }
    Ok(())
}

fn split(ctx: &Ctx, data: &Path, n_val: usize, n_test: usize) -> Result<()> {
    let dir = ctx.out_dir()?;
    let seed = ctx.cfg.protocol.seed;
    let examples = corpus::load_examples(data)?;
    let (rest, test) = corpus::holdout(&examples, n_test, seed)?;
    let (train, val) = corpus::holdout(&rest, n_val, seed.wrapping_add(1))?;
    let (half_a, half_b) = corpus::split_halves(&train, seed)?;
    for (name, part) in [
        ("train", &train),
        ("val", &val),
        ("test", &test),
        ("half_a", &half_a),
        ("half_b", &half_b),
    ] {
        corpus::save_examples(dir.join(format!("{name}.jsonl")), part)?;
        say!("{name}\t{}", part.len());
    }
    Ok(())
}

fn parse_stage(s: &str) -> Result<Stage> {
    match s {
        "base_A" => Ok(Stage::BaseA),
        "base_B" => Ok(Stage::BaseB),
        "base_full" => Ok(Stage::BaseFull),
        _ => Err(usage(format!("unknown stage {s:?}; expected base_A, base_B or base_full"))),
    }
}

/// A checkpoint file, or the checkpoint of a run directory.
fn checkpoint_path(p: &Path) -> Result<PathBuf> {
    if p.is_dir() {
        let manifest = RunManifest::load(p)?;
        Ok(p.join(manifest.checkpoint))
    } else {
        Ok(p.to_path_buf())
    }
}

fn write_run(
    ctx: &Ctx,
    vocab: &Vocab,
    stage: Stage,
    fingerprints: BTreeMap<String, String>,
    save: impl FnOnce(&Path) -> fusum::Result<()>,
    log: &[pipeline::LogRecord],
) -> Result<PathBuf> {
    let dir = ctx.out_dir()?;
    let manifest = RunManifest::new(stage, ctx.cfg.seed, fingerprints);
    let mut snapshot = ctx.cfg.clone();
    snapshot.protocol.base.backbone.vocab_size = vocab.len();
    snapshot.protocol.fusion.backbone.vocab_size = vocab.len();
    fs::write(dir.join(&manifest.config_snapshot), snapshot.to_toml())?;
    let ckpt = dir.join(&manifest.checkpoint);
    save(&ckpt)?;
    let log_path = dir.join(&manifest.metric_log);
    fs::create_dir_all(log_path.parent().expect("log path has a parent"))?;
    pipeline::write_metrics_log(&log_path, log)?;
    vocab.save(dir.join("vocab.json"))?;
    manifest.save(dir)?;
    manifest.check_artifacts(dir)?;
    Ok(ckpt)
}

fn train_base(ctx: &Ctx, train: &Path, val: &Path, stage: &str, vocab: Option<&Path>) -> Result<()> {
    let stage = parse_stage(stage)?;
    let p = &ctx.cfg.protocol;
    let train_set = corpus::load_examples(train)?;
    let val_set = corpus::load_examples(val)?;
    let vocab = match vocab {
        Some(path) => Vocab::load(path)?,
        None => pipeline::build_vocab(&train_set, p.vocab_max, p.fusion.m_max)?,
    };
    let mut base_cfg = p.base.clone();
    base_cfg.backbone.vocab_size = vocab.len();
    let trained = pipeline::train_base(&train_set, &val_set, &vocab, &base_cfg, &p.base_train, stage)?;
    let fingerprints = BTreeMap::from([
        ("train".to_string(), corpus::fingerprint(&train_set)),
        ("val".to_string(), corpus::fingerprint(&val_set)),
    ]);
    let ckpt = write_run(ctx, &vocab, stage, fingerprints, |p| trained.save(p), &trained.log)?;
    say!("{stage}: best step {}, checkpoint {}", trained.best_step, ckpt.display());
    Ok(())
}

fn generate(ctx: &Ctx, model: &Path, data: &Path, name: Option<String>) -> Result<()> {
    let base = TrainedBase::load(checkpoint_path(model)?)?;
    let examples = corpus::load_examples(data)?;
    let (sets, skipped) = pipeline::generate_candidates(&base, &examples, &ctx.cfg.protocol.candidates)?;
    let name = match name {
        Some(n) => n,
        None => data
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| usage("cannot derive a name from --data; pass --name"))?
            .to_string(),
    };
    let dir = ctx.out_dir()?.join("candidates");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{name}.jsonl"));
    pipeline::save_candidate_file(&path, &sets, &base.provenance)?;
    for (id, why) in &skipped {
        log::warn!("skipped {id}: {why}");
    }
    say!("{} candidate sets ({} skipped) written to {}", sets.len(), skipped.len(), path.display());
    Ok(())
}

fn build_fusionset(ctx: &Ctx, data: &[PathBuf], cands: &[PathBuf]) -> Result<()> {
    if data.len() != cands.len() {
        return Err(usage("--data and --cands must be given the same number of times"));
    }
    let out = ctx.out("fused record file")?;
    let mut records = Vec::new();
    for (d, c) in data.iter().zip(cands) {
        let examples = corpus::load_examples(d)?;
        let (sets, prov) = pipeline::load_candidate_file(c)?;
        records.extend(pipeline::attach_candidates(&examples, &sets, &prov)?);
    }
    corpus::ensure_unique_ids(records.iter().map(|r| r.id.as_str()))?;
    pipeline::save_fused(out, &records)?;
    say!("wrote {} fused records to {}", records.len(), out.display());
    Ok(())
}

fn as_examples(records: &[FusedRecord]) -> Vec<Example> {
    records
        .iter()
        .map(|r| Example {
            id: r.id.clone(),
            source: r.source.clone(),
            target: r.target.clone(),
        })
        .collect()
}

fn train_fusion(
    ctx: &Ctx,
    train: &Path,
    val: &Path,
    init: Option<&Path>,
    vocab: Option<&Path>,
    objective: &str,
) -> Result<()> {
    let p = &ctx.cfg.protocol;
    let train_set = pipeline::load_fused(train)?;
    let val_set = pipeline::load_fused(val)?;
    let objective = match objective {
        "joint" => TrainObjective::Joint { lambda: p.fusion.lambda },
        "generation" => TrainObjective::GenerationOnly,
        other => return Err(usage(format!("unknown objective {other:?}; expected joint or generation"))),
    };
    let (model, vocab) = match init {
        Some(path) => {
            let base = TrainedBase::load(checkpoint_path(path)?)?;
            (pipeline::fusion_from_base(&base, p.fusion.clone())?, base.vocab)
        }
        None => {
            let path = vocab.ok_or_else(|| usage("train-fusion needs --init or --vocab"))?;
            let vocab = Vocab::load(path)?;
            let mut cfg: FusionConfig = p.fusion.clone();
            cfg.backbone.vocab_size = vocab.len();
            (FusionModel::<f32>::new(cfg)?, vocab)
        }
    };
    let examples = as_examples(&train_set);
    let trained = pipeline::train_fusion(&train_set, &val_set, &vocab, model, &p.fusion_train, objective, &examples)?;
    let fingerprints = BTreeMap::from([
        ("train".to_string(), corpus::fingerprint(&examples)),
        ("val".to_string(), corpus::fingerprint(&as_examples(&val_set))),
    ]);
    let ckpt = write_run(ctx, &vocab, Stage::Fusion, fingerprints, |p| trained.save(p), &trained.log)?;
    say!("fusion: best step {}, checkpoint {}", trained.best_step, ckpt.display());
    Ok(())
}

fn parse_ablation(s: &str) -> Result<AblationMode> {
    match s {
        "full" => Ok(AblationMode::Full),
        "no_source" => Ok(AblationMode::NoSource),
        "no_candidates" => Ok(AblationMode::NoCandidates),
        _ => s
            .strip_prefix("first_")
            .and_then(|k| k.parse().ok())
            .map(AblationMode::FirstK)
            .ok_or_else(|| usage(format!("unknown ablation {s:?}"))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Prediction {
    id: String,
    prediction: String,
}

#[derive(Debug, Serialize)]
struct EvalScores {
    ablation: String,
    n: usize,
    fusion: RougeTriple,
    top_beam: RougeTriple,
    random: RougeTriple,
    oracle: RougeTriple,
}

fn evaluate(ctx: &Ctx, model: &Path, data: &Path, ablation: &str) -> Result<()> {
    let mode = parse_ablation(ablation)?;
    let trained = TrainedFusion::load(checkpoint_path(model)?)?;
    let records = pipeline::load_fused(data)?;
    let preds = pipeline::fusion_predict(&trained.model, &trained.vocab, &records, &ctx.cfg.protocol.inference, mode)?;
    let fusion = pipeline::score_predictions(&preds, &records)?;
    let mut top = Vec::with_capacity(records.len());
    let mut random = Vec::with_capacity(records.len());
    let mut oracle = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let reference = r.target.as_deref().ok_or_else(|| fusum::Error::MissingTarget(r.id.clone()))?;
        let first = r
            .candidates
            .first()
            .ok_or_else(|| fusum::Error::Invalid(format!("record {:?} has no candidates", r.id)))?;
        top.push(metrics::rouge_triple(first, reference));
        let pick = metrics::random_select(r.candidates.len(), ctx.cfg.seed.wrapping_add(i as u64))?;
        random.push(metrics::rouge_triple(&r.candidates[pick], reference));
        oracle.push(metrics::oracle_select(&r.candidates, reference, Objective::Mean)?.1);
    }
    let scores = EvalScores {
        ablation: analysis::ablation_name(mode),
        n: records.len(),
        fusion: RougeTriple::average(&fusion),
        top_beam: RougeTriple::average(&top),
        random: RougeTriple::average(&random),
        oracle: RougeTriple::average(&oracle),
    };
    let dir = ctx.out_dir()?;
    let rows: Vec<Prediction> = records
        .iter()
        .zip(preds)
        .map(|(r, p)| Prediction {
            id: r.id.clone(),
            prediction: p,
        })
        .collect();
    write_jsonl(&dir.join("predictions.jsonl"), &rows)?;
    let mut tsv = String::from("system\tr1\tr2\trl\tmean\n");
    for (name, t) in [
        ("fusion", scores.fusion),
        ("top_beam", scores.top_beam),
        ("random", scores.random),
        ("oracle", scores.oracle),
    ] {
        tsv.push_str(&format!("{name}\t{}\t{}\t{}\t{}\n", t.r1, t.r2, t.rl, t.mean));
    }
    analysis::write_report(dir, "scores", &scores, &tsv)?;
    say_raw!("{tsv}");
    Ok(())
}

fn write_jsonl<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Predictions aligned to the records by id.
fn load_predictions(path: &Path, records: &[FusedRecord]) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut by_id = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: Prediction = serde_json::from_str(line).map_err(|e| fusum::Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        by_id.insert(p.id, p.prediction);
    }
    let missing: Vec<String> = records
        .iter()
        .filter(|r| !by_id.contains_key(&r.id))
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(fusum::Error::Coverage(missing).into());
    }
    Ok(records.iter().map(|r| by_id[&r.id].clone()).collect())
}

fn load_scored(s: &Scored) -> Result<(Vec<FusedRecord>, Vec<String>)> {
    let records = pipeline::load_fused(&s.data)?;
    let preds = load_predictions(&s.predictions, &records)?;
    Ok((records, preds))
}

fn load_decoded(d: &Decoded) -> Result<(TrainedFusion, Vec<FusedRecord>)> {
    Ok((TrainedFusion::load(checkpoint_path(&d.model)?)?, pipeline::load_fused(&d.data)?))
}

#[derive(Debug, Serialize)]
struct SurpassRow {
    k: usize,
    percent: f64,
}

fn analyze(ctx: &Ctx, a: Analyze) -> Result<()> {
    let dir = ctx.out_dir()?;
    let decode = &ctx.cfg.protocol.inference;
    let tsv = match a {
        Analyze::Bins(s) => {
            let (records, preds) = load_scored(&s)?;
            let rows = analysis::example_records(&records, &preds)?;
            let report = analysis::binned_analysis(&rows)?;
            let tsv = analysis::binned_tsv(&report);
            analysis::write_report(dir, "bins", &report, &tsv)?;
            log::info!("binned by {}", Feature::ALL.map(Feature::name).join(", "));
            tsv
        }
        Analyze::Prune { input, ks } => {
            let (trained, records) = load_decoded(&input)?;
            let ks = ks.unwrap_or_else(|| ctx.cfg.analysis.prune_ks.clone());
            let rows = analysis::prune_sweep(&trained.model, &trained.vocab, &records, &ks, decode)?;
            let tsv = analysis::score_rows_tsv(&rows);
            analysis::write_report(dir, "prune", &rows, &tsv)?;
            tsv
        }
        Analyze::Ablate(input) => {
            let (trained, records) = load_decoded(&input)?;
            let modes = [AblationMode::Full, AblationMode::NoSource, AblationMode::NoCandidates];
            let rows = analysis::ablation_eval(&trained.model, &trained.vocab, &records, &modes, decode)?;
            let tsv = analysis::score_rows_tsv(&rows);
            analysis::write_report(dir, "ablate", &rows, &tsv)?;
            tsv
        }
        Analyze::Abstractiveness(s) => {
            let (records, preds) = load_scored(&s)?;
            let summaries: Vec<(String, String)> = records.iter().map(|r| r.id.clone()).zip(preds).collect();
            let report = analysis::abstractiveness_report(&summaries, &records)?;
            let tsv = analysis::abstractiveness_tsv(&report);
            analysis::write_report(dir, "abstractiveness", &report, &tsv)?;
            tsv
        }
        Analyze::OracleSurpass { input, ks } => {
            let (records, preds) = load_scored(&input)?;
            let fusion: Vec<f64> = pipeline::score_predictions(&preds, &records)?
                .iter()
                .map(|t| t.mean)
                .collect();
            let ks = ks.unwrap_or_else(|| ctx.cfg.analysis.surpass_ks.clone());
            let rows = ks
                .iter()
                .map(|&k| {
                    Ok(SurpassRow {
                        k,
                        percent: analysis::oracle_surpass_rate(&fusion, &records, k)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut tsv = String::from("k\tpercent\n");
            for r in &rows {
                tsv.push_str(&format!("{}\t{}\n", r.k, r.percent));
            }
            analysis::write_report(dir, "oracle_surpass", &rows, &tsv)?;
            tsv
        }
    };
    say_raw!("{tsv}");
    Ok(())
}

fn fewshot(ctx: &Ctx, data: &Path, test: &Path, k: Option<usize>, seeds: Option<Vec<u64>>) -> Result<()> {
    let pool = corpus::load_examples(data)?;
    let test = corpus::load_examples(test)?;
    let k = k.unwrap_or(ctx.cfg.fewshot.k);
    let seeds = seeds.unwrap_or_else(|| ctx.cfg.fewshot.seeds.clone());
    let report = pipeline::run_fewshot(&pool, &test, k, &seeds, &ctx.cfg.protocol)?;
    let mut tsv = String::from("split\tstat\tr1\tr2\trl\tmean\n");
    for (split, stat, t) in [
        ("val", "mean", report.val_mean),
        ("val", "std", report.val_std),
        ("test", "mean", report.test_mean),
        ("test", "std", report.test_std),
    ] {
        tsv.push_str(&format!("{split}\t{stat}\t{}\t{}\t{}\t{}\n", t.r1, t.r2, t.rl, t.mean));
    }
    analysis::write_report(ctx.out_dir()?, "fewshot", &report, &tsv)?;
    say_raw!("{tsv}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradcheckOutput {
    generation: GradcheckReport,
    joint: GradcheckReport,
}

fn run_gradcheck(ctx: &Ctx) -> Result<()> {
    let g = &ctx.cfg.gradcheck;
    let cfg = FusionConfig {
        max_source_tokens: g.max_tokens,
        max_candidate_tokens: g.max_tokens,
        max_target_tokens: g.max_tokens,
        cls_hidden: g.cls_hidden,
        ..FusionConfig::new(g.backbone.clone())
    };
    let mut model = FusionModel::<f64>::new(cfg.clone())?;
    gradcheck::check_point(&mut model.params, g.point_seed);
    let case = GradcheckCase::tiny(&cfg)?;
    let out = GradcheckOutput {
        generation: gradcheck::check_fusion(&model, &case, TrainObjective::GenerationOnly)?,
        joint: gradcheck::check_fusion(&model, &case, TrainObjective::Joint { lambda: cfg.lambda })?,
    };
    for (name, r) in [("generation", &out.generation), ("joint", &out.joint)] {
        let worst = r.worst().map(|t| t.name.as_str()).unwrap_or("-");
        say!(
            "{name}: max relative error {:.3e} (tolerance {:.0e}, worst {worst})",
            r.max_rel_error, r.tolerance
        );
    }
    if let Some(dir) = &ctx.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("gradcheck.json"), &out)?;
    }
    if !(out.generation.passed() && out.joint.passed()) {
        bail!(CliError::Numerical("gradient check failed".into()));
    }
    say!("gradient check passed");
    Ok(())
}
