//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines are always shown;
//! the process fails when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::hand::{enumerate, multiset, trap_model, Table};
use common::oracle;
use fusum::analysis::{self, bin_sizes, ExampleRecord, Feature, ScoreRow};
use fusum::backbone::layers::{attention_cells, reset_attention_cells, Mode};
use fusum::backbone::{Backbone, BackboneConfig, ParamSet};
use fusum::corpus::{self, generate_synthetic, Example, SyntheticSpec};
use fusum::decoding::{self, beam_search, diverse_beam_search, greedy, DecodeConfig};
use fusum::fusion::{
    make_dropout_plan, AblationMode, DropoutPlan, FusionConfig, FusionInputs, FusionModel, SegmentTag, TrainObjective,
};
use fusum::gradcheck::{check_fusion, check_point, GradcheckCase};
use fusum::metrics::{self, Objective, RougeTriple};
use fusum::pipeline::{self, FusedRecord, ProtocolConfig, ProtocolOutcome, Stage, TrainConfig};
use fusum::tokenizer::TokenId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const METRIC_PAIRS: usize = 1500;
const METRIC_TOL: f64 = 1e-12;
const METRIC_BUDGET: Duration = Duration::from_secs(10);
const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const LAMBDA_STEPS: usize = 100;
const DECODER_BUDGET: Duration = Duration::from_secs(10);
const CELL_CASES: [(usize, usize, usize); 2] = [(64, 15, 16), (128, 8, 16)];
const DROPOUT_DRAWS: usize = 14_000;
const P_SRC: f64 = 0.2;
const P_SRC_TOL: f64 = 0.012;
/// 13 degrees of freedom at p = 0.001.
const CHI2_LIMIT: f64 = 34.53;
const E2E_MARGIN: f64 = 0.02;
const E2E_BUDGET: Duration = Duration::from_secs(30 * 60);
const SURPASS_KS: [usize; 3] = [5, 10, 15];
const ANALYSIS_EXAMPLES: usize = 100;
const FEATURE_TOL: f64 = 1e-12;

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

fn judge(id: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let t = Instant::now();
    let verdict = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = t.elapsed().as_secs_f64();
    let (tag, detail) = match &verdict {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} criterion {id:>2} {name}: {detail} [{secs:.1}s]");
    verdict.is_ok()
}

// 1. Metric oracle equivalence.

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const WORDS: [&str; 9] = ["a", "b", "c", "d", "the", "The", "cat,", "sat.", "on"];
    let n = rng.gen_range(0..=12);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn metric_oracle() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut exhaustive = 0;
    for _ in 0..METRIC_PAIRS {
        let (h, r) = (random_text(&mut rng), random_text(&mut rng));
        let got = metrics::rouge_triple(&h, &r);
        let want = [oracle::rouge_n(&h, &r, 1), oracle::rouge_n(&h, &r, 2), oracle::rouge_l(&h, &r)];
        for (g, w) in [got.r1, got.r2, got.rl].into_iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
        exhaustive += usize::from(oracle::words(&h).len().min(oracle::words(&r).len()) <= 8);
    }
    let elapsed = t.elapsed();
    ensure!(worst <= METRIC_TOL, "max deviation {worst:e} > {METRIC_TOL:e}");
    ensure!(elapsed < METRIC_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "{METRIC_PAIRS} pairs ({exhaustive} with exhaustive LCS), max deviation {worst:e} <= {METRIC_TOL:e}"
    ))
}

// 2. Gradient check.

fn gradient_check() -> Verdict {
    let t = Instant::now();
    let cfg = FusionConfig {
        max_source_tokens: 16,
        max_candidate_tokens: 16,
        max_target_tokens: 16,
        cls_hidden: 8,
        ..FusionConfig::new(BackboneConfig { seed: 11, ..BackboneConfig::tiny(50) })
    };
    let b = &cfg.backbone;
    ensure!(
        (b.d_model, b.n_heads, b.enc_layers, b.dec_layers, b.vocab_size) == (8, 2, 1, 1, 50),
        "not the tiny configuration"
    );
    let mut model = FusionModel::<f64>::new(cfg.clone()).map_err(|e| e.to_string())?;
    check_point(&mut model.params, 5);
    let case = GradcheckCase::tiny(&cfg).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut tensors = 0;
    for objective in [TrainObjective::GenerationOnly, TrainObjective::Joint { lambda: 1.0 }] {
        let report = check_fusion(&model, &case, objective).map_err(|e| e.to_string())?;
        for t in &report.tensors {
            ensure!(t.max_rel_error <= GRAD_TOL, "{} ({objective:?}) relative error {:e}", t.name, t.max_rel_error);
            let cls = t.name.starts_with("classifier");
            // Key biases shift a whole score row and cancel in the softmax.
            let exempt = t.name.ends_with("wk.bias") || (cls && objective == TrainObjective::GenerationOnly);
            ensure!(t.compared > 0 || exempt, "{} never compared", t.name);
        }
        ensure!(
            objective == TrainObjective::GenerationOnly
                || report.tensors.iter().any(|t| t.name.starts_with("classifier") && t.compared > 0),
            "classification path not exercised"
        );
        worst = worst.max(report.max_rel_error);
        tensors = report.tensors.len();
    }
    let elapsed = t.elapsed();
    ensure!(elapsed < GRAD_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "{tensors} tensors on both paths, max relative error {worst:.2e} <= {GRAD_TOL:e}"
    ))
}

// 3. Lambda reduction.

fn param_digest(model: &FusionModel<f32>) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, t) in model.params.named_tensors() {
        h.update(name.as_bytes());
        for v in t.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().into()
}

fn as_records(examples: &[Example]) -> Vec<FusedRecord> {
    let n = examples.len();
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| FusedRecord {
            id: e.id.clone(),
            source: e.source.clone(),
            target: e.target.clone(),
            candidates: (1..=4)
                .map(|j| examples[(i + j) % n].target.clone().unwrap_or_default())
                .collect(),
        })
        .collect()
}

type Trajectory = (Vec<[u8; 32]>, Vec<pipeline::LogRecord>, usize, [u8; 32]);

fn trajectory(objective: TrainObjective) -> Result<Trajectory, String> {
    let data = generate_synthetic(&SyntheticSpec::default(), 48).map_err(|e| e.to_string())?;
    let records = as_records(&data);
    let (train, val) = records.split_at(40);
    let cfg = FusionConfig {
        max_source_tokens: 32,
        max_candidate_tokens: 16,
        max_target_tokens: 16,
        cls_hidden: 16,
        ..FusionConfig::new(BackboneConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_positions: 32,
            dropout: 0.1,
            seed: 3,
            ..BackboneConfig::tiny(0)
        })
    };
    let vocab = pipeline::build_vocab(&data, 400, cfg.m_max).map_err(|e| e.to_string())?;
    let cfg = FusionConfig {
        backbone: BackboneConfig { vocab_size: vocab.len(), ..cfg.backbone.clone() },
        ..cfg
    };
    let init = FusionModel::<f32>::new(cfg).map_err(|e| e.to_string())?;
    let train_cfg = TrainConfig {
        epochs: 100,
        batch_size: 4,
        lr: 1e-3,
        eval_every: 25,
        max_steps: Some(LAMBDA_STEPS),
        val_cap: 8,
        seed: 9,
    };
    let mut digests = Vec::new();
    let trained = pipeline::train_fusion_with(
        train,
        val,
        &vocab,
        init,
        &train_cfg,
        objective,
        &data[..40],
        &mut |_, m| digests.push(param_digest(m)),
    )
    .map_err(|e| e.to_string())?;
    let last = param_digest(&trained.model);
    Ok((digests, trained.log, trained.best_step, last))
}

fn lambda_reduction() -> Verdict {
    let (gen_digests, gen_log, gen_best, gen_last) = trajectory(TrainObjective::GenerationOnly)?;
    let (zero_digests, zero_log, zero_best, zero_last) = trajectory(TrainObjective::Joint { lambda: 0.0 })?;
    ensure!(gen_digests.len() == LAMBDA_STEPS, "{} steps recorded", gen_digests.len());
    if let Some(step) = gen_digests.iter().zip(&zero_digests).position(|(a, b)| a != b) {
        return Err(format!("parameters diverge after step {}", step + 1));
    }
    ensure!(zero_digests.len() == gen_digests.len(), "step counts differ");
    ensure!(gen_log.len() == zero_log.len(), "log lengths differ");
    for (a, b) in gen_log.iter().zip(&zero_log) {
        ensure!(
            (a.step, &a.split) == (b.step, &b.split)
                && a.loss_gen.map(f64::to_bits) == b.loss_gen.map(f64::to_bits)
                && a.loss.map(f64::to_bits) == b.loss.map(f64::to_bits)
                && a.mean.map(f64::to_bits) == b.mean.map(f64::to_bits),
            "loss curves differ at step {} ({})",
            a.step,
            a.split
        );
    }
    ensure!(gen_best == zero_best && gen_last == zero_last, "selected checkpoints differ");
    let train_points = gen_log.iter().filter(|r| r.split == "train").count();
    Ok(format!(
        "{LAMBDA_STEPS} steps, {} parameter digests and {train_points} training losses bit-identical",
        gen_digests.len()
    ))
}

// 4. Decoder equivalences.

thread_local! {
    static BIGRAM: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

fn bigram(prefix: &[TokenId], t: usize) -> f64 {
    let last = prefix.last().map_or(0, |&l| l as usize + 1);
    BIGRAM.with(|tab| tab.borrow()[last * 5 + t])
}

fn decoder_equivalences() -> Verdict {
    let t = Instant::now();
    let err = |e: fusum::Error| e.to_string();

    // Width one against greedy, on random tables and on a real decoder.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tables = 0;
    for _ in 0..300 {
        BIGRAM.with(|tab| *tab.borrow_mut() = (0..30).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let model = Table { vocab: 5, logits: bigram };
        for alpha in [0.0, 1.0] {
            let g = greedy(&model, &DecodeConfig { length_penalty: alpha, ..DecodeConfig::greedy(6) }).map_err(err)?;
            let b = beam_search(&model, &DecodeConfig { length_penalty: alpha, ..DecodeConfig::beam(1, 6) }).map_err(err)?;
            ensure!(b.len() == 1 && b[0].tokens == g.tokens, "width-one beam differs from greedy");
        }
        tables += 1;
    }
    let data = generate_synthetic(&SyntheticSpec::default(), 20).map_err(err)?;
    let vocab = pipeline::build_vocab(&data, 300, 15).map_err(err)?;
    let backbone = Backbone::<f64>::new(BackboneConfig { seed: 2, ..BackboneConfig::tiny(vocab.len()) }).map_err(err)?;
    for e in &data {
        let ids = vocab.encode(&e.source, 24, None);
        let (memory, _) = backbone.encode_seq(&ids, None, &mut Mode::eval()).map_err(err)?;
        let g = decoding::generate(&backbone, &memory, &vocab, &DecodeConfig::greedy(10)).map_err(err)?;
        let b = decoding::generate(&backbone, &memory, &vocab, &DecodeConfig::beam(1, 10)).map_err(err)?;
        ensure!(g[0].tokens == b[0].tokens, "width-one beam differs from greedy on {}", e.id);
    }

    // One group is beam search for any strength; zero strength runs
    // independent group beams.
    let model = trap_model();
    for b in [1, 2, 4, 6] {
        let beam = beam_search(&model, &DecodeConfig::beam(b, 3)).map_err(err)?;
        for gamma in [0.0, 0.5, 3.0] {
            let cfg = DecodeConfig { groups: 1, diversity: gamma, ..DecodeConfig::diverse(b, 3) };
            ensure!(
                multiset(&diverse_beam_search(&model, &cfg).map_err(err)?) == multiset(&beam),
                "G=1 differs from beam search (b={b}, gamma={gamma})"
            );
        }
    }
    let mut literal = Vec::new();
    for (b, g) in [(4, 2), (6, 3), (4, 4)] {
        let cfg = DecodeConfig { groups: g, diversity: 0.0, ..DecodeConfig::diverse(b, 3) };
        let div = multiset(&diverse_beam_search(&model, &cfg).map_err(err)?);
        let per_group = beam_search(&model, &DecodeConfig::beam(b / g, 3)).map_err(err)?;
        let mut expect = BTreeMap::new();
        for (k, v) in multiset(&per_group) {
            expect.insert(k, v * g);
        }
        ensure!(div == expect, "gamma=0 is not {g} independent beams of width {}", b / g);
        literal.push(div == multiset(&beam_search(&model, &DecodeConfig::beam(b, 3)).map_err(err)?));
    }

    // Exhaustive enumeration of the 3-step, 4-token model.
    for alpha in [0.0, 0.6, 1.0] {
        let all = enumerate(&model, 3, alpha);
        let cfg = DecodeConfig { length_penalty: alpha, ..DecodeConfig::beam(all.len(), 3) };
        let out = beam_search(&model, &cfg).map_err(err)?;
        ensure!(out.len() == all.len(), "beam returned {} of {} sequences", out.len(), all.len());
        for (c, (seq, lp, score)) in out.iter().zip(&all) {
            ensure!(
                &c.tokens == seq && (c.logprob - lp).abs() < 1e-12 && (c.score - score).abs() < 1e-12,
                "beam order differs from enumeration at {seq:?}"
            );
        }
        let narrow = beam_search(&model, &DecodeConfig { length_penalty: alpha, ..DecodeConfig::beam(2, 3) }).map_err(err)?;
        ensure!(narrow[0].tokens == all[0].0, "width-two beam misses the optimum");
    }
    let elapsed = t.elapsed();
    ensure!(elapsed < DECODER_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "b=1 = greedy on {tables} tables and {} sources; G=1 = beam; gamma=0 = G beams of width b/G \
         (literal multiset match with beam(b) for G>1: {}/{}); beam = enumeration of {} sequences",
        data.len(),
        literal.iter().filter(|&&x| x).count(),
        literal.len(),
        enumerate(&model, 3, 0.0).len()
    ))
}

// 5. Fusion-in-decoder structure.

fn fid_structure() -> Verdict {
    let err = |e: fusum::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = common::tiny_fusion(1);
    let seg = |rng: &mut ChaCha8Rng| -> Vec<TokenId> { (0..rng.gen_range(1..8)).map(|_| rng.gen_range(21..50)).collect() };
    let mut perturbations = 0;
    for _ in 0..100 {
        let m = rng.gen_range(2..6);
        let inputs = FusionInputs {
            source: seg(&mut rng),
            candidates: (0..m).map(|_| seg(&mut rng)).collect(),
        };
        let plan = DropoutPlan {
            drop_source: rng.gen_bool(0.3),
            keep: (0..m).map(|i| i == 0 || rng.gen_bool(0.6)).collect(),
        };
        let base = model.encode_inputs(&inputs, &plan, &mut Mode::eval()).map_err(err)?;
        let src = if plan.drop_source { 1 } else { inputs.source.len() };
        let cands: usize = inputs.candidates.iter().zip(&plan.keep).map(|(c, &k)| if k { c.len() } else { 1 }).sum();
        ensure!(base.memory.rows() == src + cands, "memory length {} != {}", base.memory.rows(), src + cands);
        for changed in 0..=m {
            let mut other = inputs.clone();
            let noise = seg(&mut rng);
            if changed == 0 {
                other.source = noise;
            } else {
                other.candidates[changed - 1] = noise;
            }
            let after = model.encode_inputs(&other, &plan, &mut Mode::eval()).map_err(err)?;
            let tags = std::iter::once(SegmentTag::Source).chain((1..=m).map(SegmentTag::Candidate));
            for (i, tag) in tags.enumerate().filter(|&(i, _)| i != changed) {
                ensure!(base.memory_rows(tag) == after.memory_rows(tag), "segment {i} changed when {changed} did");
            }
            perturbations += 1;
        }
    }

    let mut cells = Vec::new();
    for (n, m, l) in CELL_CASES {
        let cfg = FusionConfig {
            m_max: 15,
            max_source_tokens: n,
            max_candidate_tokens: l,
            max_target_tokens: l,
            cls_hidden: 8,
            ..FusionConfig::new(BackboneConfig {
                max_positions: n + m * l,
                seed: 1,
                ..BackboneConfig::tiny(60)
            })
        };
        let layers = (cfg.backbone.enc_layers as u64, cfg.backbone.dec_layers as u64);
        let model = FusionModel::<f64>::new(cfg).map_err(err)?;
        let tok = |i: usize| 30 + (i % 29) as TokenId;
        let inputs = FusionInputs {
            source: (0..n).map(tok).collect(),
            candidates: (0..m).map(|k| (0..l).map(|i| tok(k + i)).collect()).collect(),
        };
        let target: Vec<TokenId> = (0..l).map(tok).collect();
        reset_attention_cells();
        let enc = model.encode_inputs(&inputs, &DropoutPlan::identity(m), &mut Mode::eval()).map_err(err)?;
        let after = attention_cells().encoder_self;
        reset_attention_cells();
        model.backbone().decode_logits(&target, &enc.memory, None, &mut Mode::eval()).map_err(err)?;
        let dec = attention_cells();
        let concat: Vec<TokenId> = inputs.source.iter().chain(inputs.candidates.iter().flatten()).copied().collect();
        reset_attention_cells();
        model.backbone().encode_seq(&concat, None, &mut Mode::eval()).map_err(err)?;
        let before = attention_cells().encoder_self;
        let (n64, m64, l64) = (n as u64, m as u64, l as u64);
        let want_after = layers.0 * (n64 * n64 + m64 * l64 * l64);
        let want_before = layers.0 * (n64 + m64 * l64).pow(2);
        ensure!(after == want_after, "({n},{m},{l}) separate encoding: {after} cells, closed form {want_after}");
        ensure!(before == want_before, "({n},{m},{l}) joint encoding: {before} cells, closed form {want_before}");
        ensure!(
            dec.decoder_cross == layers.1 * l64 * (n64 + m64 * l64) && dec.decoder_self == layers.1 * l64 * l64,
            "({n},{m},{l}) decoder cells {dec:?}"
        );
        ensure!(after < before, "separate encoding is not cheaper");
        cells.push(format!("({n},{m},{l}): {after} vs {before}"));
    }
    Ok(format!(
        "{perturbations} perturbations with zero cross-segment change, memory additive, encoder cells {}",
        cells.join(", ")
    ))
}

// 6. Dropout law.

fn dropout_law() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut counts = [0usize; 16];
    let mut dropped = 0usize;
    for _ in 0..DROPOUT_DRAWS {
        let plan = make_dropout_plan(15, P_SRC, &mut rng).map_err(|e| e.to_string())?;
        counts[plan.kept_count()] += 1;
        dropped += usize::from(plan.drop_source);
    }
    ensure!(counts[0] + counts[1] == 0, "fewer than two candidates kept");
    let n = DROPOUT_DRAWS as f64;
    let p = 1.0 / 14.0;
    let sigma = (n * p * (1.0 - p)).sqrt();
    let mut worst = 0.0f64;
    for (k, &c) in counts.iter().enumerate().skip(2) {
        let z = (c as f64 - n * p) / sigma;
        ensure!(z.abs() <= 3.0, "k={k}: {c} draws, {z:.2} sigma");
        worst = worst.max(z.abs());
    }
    let chi2: f64 = counts[2..].iter().map(|&c| (c as f64 - n * p).powi(2) / (n * p)).sum();
    ensure!(chi2 < CHI2_LIMIT, "chi-square {chi2:.2}");
    let rate = dropped as f64 / n;
    ensure!((rate - P_SRC).abs() <= P_SRC_TOL, "source dropped at rate {rate}");
    Ok(format!(
        "{DROPOUT_DRAWS} plans, worst cell {worst:.2} sigma, chi-square {chi2:.1}, source drop rate {rate:.4}"
    ))
}

// 7. Leakage guard.

fn tiny_protocol() -> ProtocolConfig {
    let mut cfg = ProtocolConfig::desk(300);
    let b = &mut cfg.base.backbone;
    (b.d_model, b.d_ff, b.n_heads, b.enc_layers, b.dec_layers, b.max_positions) = (16, 32, 2, 1, 1, 48);
    (cfg.base.max_source_tokens, cfg.base.max_target_tokens) = (32, 16);
    cfg.fusion.max_source_tokens = 32;
    cfg.fusion.max_candidate_tokens = 18;
    cfg.fusion.max_target_tokens = 16;
    for t in [&mut cfg.base_train, &mut cfg.fusion_train] {
        (t.epochs, t.eval_every, t.val_cap) = (1, 4, 4);
    }
    cfg.candidates = DecodeConfig::diverse(4, 12);
    cfg.inference = DecodeConfig::beam(2, 12);
    cfg
}

fn leakage_guard() -> Verdict {
    let err = |e: fusum::Error| e.to_string();
    let data = generate_synthetic(&SyntheticSpec::default(), 100).map_err(err)?;
    let (train, rest) = data.split_at(70);
    let (val, test) = rest.split_at(15);
    let cfg = tiny_protocol();
    let out = pipeline::run_protocol(train, val, test, &cfg).map_err(err)?;
    let (half_a, half_b) = corpus::split_halves(train, cfg.seed).map_err(err)?;
    let prov = |s: Stage| &out.bases[&s].provenance;
    for (half, own, other) in [(&half_a, Stage::BaseA, Stage::BaseB), (&half_b, Stage::BaseB, Stage::BaseA)] {
        for e in half.iter() {
            ensure!(prov(own).saw(e) && !prov(other).saw(e), "{} crossed halves", e.id);
        }
    }
    let expected: Vec<&str> = half_a.iter().chain(&half_b).map(|e| e.id.as_str()).collect();
    let got: Vec<&str> = out.train_records.iter().map(|r| r.id.as_str()).collect();
    ensure!(got == expected, "fusion training records are not the cross-half pairing");
    ensure!(
        val.iter().chain(test).all(|e| !prov(Stage::BaseFull).saw(e)),
        "evaluation data seen by the full model"
    );

    // A split corrupted with three examples of the other half.
    let mut corrupted = half_a.clone();
    corrupted.extend(half_b[..3].iter().cloned());
    let (sets, _) = pipeline::generate_candidates(&out.bases[&Stage::BaseB], &corrupted, &cfg.candidates).map_err(err)?;
    let caught = |r: fusum::Result<Vec<FusedRecord>>| matches!(r, Err(fusum::Error::Leakage(_)));
    ensure!(caught(pipeline::attach_candidates(&corrupted, &sets, prov(Stage::BaseB))), "corrupted split accepted");
    let (sets_b, _) = pipeline::generate_candidates(&out.bases[&Stage::BaseA], &half_b, &cfg.candidates).map_err(err)?;
    ensure!(
        caught(pipeline::build_fusion_trainset(&corrupted, &sets, prov(Stage::BaseB), &half_b, &sets_b, prov(Stage::BaseA))),
        "corrupted trainset accepted"
    );
    // Candidates from the model trained on the same half.
    let (own, _) = pipeline::generate_candidates(&out.bases[&Stage::BaseA], &half_a, &cfg.candidates).map_err(err)?;
    ensure!(caught(pipeline::attach_candidates(&half_a, &own, prov(Stage::BaseA))), "same-half candidates accepted");
    // A test example slipped into the training data of the full model.
    let mut leaky = train.to_vec();
    leaky.push(test[0].clone());
    let leaky_prov = pipeline::Provenance::of(Stage::BaseFull, &leaky);
    ensure!(
        caught(pipeline::attach_candidates(test, &[], &leaky_prov)) || {
            let (s, _) = pipeline::generate_candidates(&out.bases[&Stage::BaseFull], test, &cfg.candidates).map_err(err)?;
            caught(pipeline::attach_candidates(test, &s, &leaky_prov))
        },
        "test example in training data accepted"
    );
    Ok(format!(
        "{} cross-half records verified; corrupted split, same-half candidates and a leaked test example rejected",
        got.len()
    ))
}

// 8-10 share one end-to-end run.

struct E2e {
    outcome: ProtocolOutcome,
    cfg: ProtocolConfig,
    predictions: Vec<String>,
    elapsed: Duration,
}

fn e2e_protocol() -> ProtocolConfig {
    let mut cfg = ProtocolConfig::desk(230);
    let b = &mut cfg.base.backbone;
    (b.d_model, b.d_ff, b.n_heads, b.max_positions) = (32, 128, 4, 48);
    (cfg.base.max_source_tokens, cfg.base.max_target_tokens) = (32, 16);
    cfg.fusion.max_source_tokens = 32;
    cfg.fusion.max_candidate_tokens = 18;
    cfg.fusion.max_target_tokens = 16;
    cfg.fusion.cls_hidden = 32;
    cfg.candidates.max_len = 16;
    cfg.inference.max_len = 16;
    // Early stopping keeps the base model deliberately weak.
    cfg.base_train.max_steps = Some(300);
    cfg.base_train.eval_every = 25;
    cfg.fusion_train.epochs = 10;
    cfg.fusion_train.eval_every = 100;
    cfg.fusion_train.val_cap = 50;
    cfg
}

fn run_e2e() -> Result<E2e, String> {
    let t = Instant::now();
    let err = |e: fusum::Error| e.to_string();
    let data = generate_synthetic(&SyntheticSpec::default(), 2700).map_err(err)?;
    let (train, rest) = data.split_at(2000);
    let (val, test) = rest.split_at(200);
    let cfg = e2e_protocol();
    let outcome = pipeline::run_protocol(train, val, test, &cfg).map_err(err)?;
    let predictions = pipeline::fusion_predict(
        &outcome.fusion.model,
        &outcome.vocab,
        &outcome.test_records,
        &cfg.inference,
        AblationMode::Full,
    )
    .map_err(err)?;
    Ok(E2e {
        outcome,
        cfg,
        predictions,
        elapsed: t.elapsed(),
    })
}

fn end_to_end(run: &Result<E2e, String>) -> Verdict {
    let run = run.as_ref().map_err(|e| format!("pipeline failed: {e}"))?;
    let records = &run.outcome.test_records;
    ensure!(records.len() == 500 && run.outcome.skipped.is_empty(), "{} test records", records.len());
    let err = |e: fusum::Error| e.to_string();
    let fusion = pipeline::score_predictions(&run.predictions, records).map_err(err)?;
    let mut top = Vec::new();
    let mut random = Vec::new();
    let mut best = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let reference = r.target.as_deref().unwrap();
        top.push(metrics::rouge_triple(&r.candidates[0], reference));
        let pick = metrics::random_select(r.candidates.len(), i as u64).map_err(err)?;
        random.push(metrics::rouge_triple(&r.candidates[pick], reference));
        best.push(metrics::oracle_select(&r.candidates, reference, Objective::Mean).map_err(err)?.1);
    }
    let [f, t, rnd, o] = [&fusion, &top, &random, &best].map(|v| RougeTriple::average(v).mean);
    let means: Vec<f64> = fusion.iter().map(|s| s.mean).collect();
    let rates: Vec<String> = SURPASS_KS
        .iter()
        .map(|&k| analysis::oracle_surpass_rate(&means, records, k).map(|p| format!("k={k} {p:.1}%")))
        .collect::<fusum::Result<_>>()
        .map_err(err)?;
    let summary = format!(
        "fusion {f:.4}, top beam {t:.4}, random {rnd:.4}, oracle {o:.4}; margins {:.4} / {:.4} (>= {E2E_MARGIN}); \
         oracle surpass {}; pipeline {:.0}s",
        f - rnd,
        f - t,
        rates.join(", "),
        run.elapsed.as_secs_f64()
    );
    ensure!(f - rnd >= E2E_MARGIN && f - t >= E2E_MARGIN, "{summary}");
    ensure!(run.elapsed < E2E_BUDGET, "{summary}");
    Ok(summary)
}

fn brute_bins(records: &[ExampleRecord], feature: Feature) -> Vec<(f64, f64, usize, f64, f64, Vec<String>)> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.feature(feature).total_cmp(&b.feature(feature)).then(a.id.cmp(&b.id)));
    let n = sorted.len();
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..10 {
        let size = n / 10 + usize::from(i < n % 10);
        let slice = &sorted[start..start + size];
        start += size;
        let mut base = 0.0;
        let mut fus = 0.0;
        for r in slice {
            base += r.baseline;
            fus += r.fusion;
        }
        out.push((
            slice[0].feature(feature),
            slice[size - 1].feature(feature),
            size,
            base / size as f64,
            fus / size as f64,
            slice.iter().map(|r| r.id.clone()).collect(),
        ));
    }
    out
}

fn brute_average(rows: &[RougeTriple]) -> RougeTriple {
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for t in rows {
        a += t.r1;
        b += t.r2;
        c += t.rl;
    }
    let n = rows.len() as f64;
    RougeTriple::new(a / n, b / n, c / n)
}

fn consistent_rows(rows: &[ScoreRow], records: &[FusedRecord]) -> Result<(), String> {
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    for row in rows {
        ensure!(row.ids.iter().map(String::as_str).eq(ids.iter().copied()), "{}: ids differ", row.label);
        ensure!(row.scores == brute_average(&row.per_example), "{}: aggregate differs", row.label);
    }
    Ok(())
}

fn analysis_reproducibility(run: &Result<E2e, String>) -> Verdict {
    let run = run.as_ref().map_err(|e| format!("pipeline failed: {e}"))?;
    let err = |e: fusum::Error| e.to_string();
    let records = &run.outcome.test_records[..ANALYSIS_EXAMPLES];
    let preds = &run.predictions[..ANALYSIS_EXAMPLES];
    let model = &run.outcome.fusion.model;
    let vocab = &run.outcome.vocab;
    let decode = &run.cfg.inference;

    let rows = analysis::example_records(records, preds).map_err(err)?;
    for (row, (r, p)) in rows.iter().zip(records.iter().zip(preds)) {
        let reference = r.target.as_deref().unwrap();
        let m = r.candidates.len();
        let quality = r.candidates.iter().map(|c| oracle::mean_rouge(c, reference)).sum::<f64>() / m as f64;
        let mut pairs = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                pairs += 1.0 - oracle::rouge_n(&r.candidates[i], &r.candidates[j], 1);
            }
        }
        let diversity = pairs / (m * (m - 1) / 2) as f64;
        let close = |a: f64, b: f64| (a - b).abs() <= FEATURE_TOL;
        ensure!(
            close(row.quality, quality)
                && close(row.diversity, diversity)
                && close(row.baseline, oracle::mean_rouge(&r.candidates[0], reference))
                && close(row.fusion, oracle::mean_rouge(p, reference)),
            "features of {} disagree with recomputation",
            r.id
        );
        ensure!(
            row.source_length == oracle::words(&r.source).len() as f64
                && row.compression_ratio == oracle::words(reference).len() as f64 / oracle::words(&r.source).len() as f64,
            "length features of {} disagree",
            r.id
        );
    }
    let bins = analysis::binned_analysis(&rows).map_err(err)?;
    ensure!(bins == analysis::binned_analysis(&rows).map_err(err)?, "binning is not deterministic");
    ensure!(bins.len() == 4, "{} features binned", bins.len());
    for report in &bins {
        let got: Vec<_> = report
            .bins
            .iter()
            .map(|b| (b.lo, b.hi, b.count, b.baseline_mean, b.fusion_mean, b.ids.clone()))
            .collect();
        ensure!(got == brute_bins(&rows, report.feature), "{} bins differ from recomputation", report.feature.name());
    }
    ensure!(bin_sizes(ANALYSIS_EXAMPLES, 10).iter().all(|&s| s == 10), "bins unequal");

    let prune = analysis::prune_sweep(model, vocab, records, &SURPASS_KS, decode).map_err(err)?;
    ensure!(prune == analysis::prune_sweep(model, vocab, records, &SURPASS_KS, decode).map_err(err)?, "prune sweep not deterministic");
    consistent_rows(&prune, records)?;
    let modes = [AblationMode::Full, AblationMode::NoSource, AblationMode::NoCandidates];
    let ablate = analysis::ablation_eval(model, vocab, records, &modes, decode).map_err(err)?;
    ensure!(ablate == analysis::ablation_eval(model, vocab, records, &modes, decode).map_err(err)?, "ablation not deterministic");
    consistent_rows(&ablate, records)?;
    let labels: Vec<&str> = ablate.iter().map(|r| r.label.as_str()).collect();
    ensure!(labels == ["full", "no_source", "no_candidates"], "ablation labels {labels:?}");
    let direct = pipeline::score_predictions(preds, records).map_err(err)?;
    ensure!(ablate[0].per_example == direct, "full ablation differs from plain inference");
    ensure!(prune[2].per_example == direct, "k=15 prune differs from plain inference");
    Ok(format!(
        "{ANALYSIS_EXAMPLES} examples: 4x10 bins, prune {}, ablation {}; repeated runs identical, exact brute-force match",
        prune.iter().map(|r| format!("{} {:.3}", r.label, r.scores.mean)).collect::<Vec<_>>().join(" "),
        ablate.iter().map(|r| format!("{} {:.3}", r.label, r.scores.mean)).collect::<Vec<_>>().join(" ")
    ))
}

fn k_oracle_monotonicity(run: &Result<E2e, String>) -> Verdict {
    let run = run.as_ref().map_err(|e| format!("pipeline failed: {e}"))?;
    let mut checked = 0;
    for r in &run.outcome.test_records {
        let curve = analysis::k_oracle_scores(r).map_err(|e| e.to_string())?;
        ensure!(curve.len() == r.candidates.len(), "{}: curve length", r.id);
        ensure!(curve.windows(2).all(|w| w[0] <= w[1]), "{}: oracle decreases in k", r.id);
        let reference = r.target.as_deref().unwrap();
        let mut best = f64::NEG_INFINITY;
        for (k, c) in r.candidates.iter().enumerate() {
            best = best.max(oracle::mean_rouge(c, reference));
            ensure!((curve[k] - best).abs() <= FEATURE_TOL, "{}: k={} differs from brute maximum", r.id, k + 1);
            checked += 1;
        }
    }
    Ok(format!(
        "{} test examples, {checked} (example, k) pairs non-decreasing and equal to the brute maximum",
        run.outcome.test_records.len()
    ))
}

fn main() {
    let mut results = vec![
        judge(1, "metric oracle", metric_oracle),
        judge(2, "gradient check", gradient_check),
        judge(3, "lambda reduction", lambda_reduction),
        judge(4, "decoder equivalences", decoder_equivalences),
        judge(5, "FiD structure", fid_structure),
        judge(6, "dropout law", dropout_law),
        judge(7, "leakage guard", leakage_guard),
    ];
    let e2e = panic::catch_unwind(run_e2e).unwrap_or_else(|_| Err("pipeline panicked".into()));
    results.push(judge(8, "end-to-end synthetic", || end_to_end(&e2e)));
    results.push(judge(9, "analysis reproducibility", || analysis_reproducibility(&e2e)));
    results.push(judge(10, "k-oracle monotonicity", || k_oracle_monotonicity(&e2e)));
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
