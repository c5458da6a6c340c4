use fusum::backbone::BackboneConfig;
use fusum::fusion::{FusionConfig, FusionModel, TrainObjective};
use fusum::gradcheck::{check_fusion, check_point, GradcheckCase, TOLERANCE};

fn tiny() -> FusionConfig {
    FusionConfig {
        max_source_tokens: 16,
        max_candidate_tokens: 16,
        max_target_tokens: 16,
        cls_hidden: 8,
        ..FusionConfig::new(BackboneConfig { seed: 11, ..BackboneConfig::tiny(50) })
    }
}

fn run(objective: TrainObjective) {
    let cfg = tiny();
    let mut model = FusionModel::<f64>::new(cfg.clone()).unwrap();
    check_point(&mut model.params, 5);
    let case = GradcheckCase::tiny(&cfg).unwrap();
    let report = check_fusion(&model, &case, objective).unwrap();
    for t in &report.tensors {
        assert!(
            t.max_rel_error <= TOLERANCE,
            "{} relative error {:.3e} over {} compared entries",
            t.name,
            t.max_rel_error,
            t.compared
        );
    }
    // Key biases shift every score of a query row equally and cancel in the softmax.
    let exempt = |name: &str| name.contains("pos") || name.ends_with("wk.bias");
    for t in report.tensors.iter().filter(|t| !t.name.starts_with("classifier") || objective != TrainObjective::GenerationOnly) {
        assert!(t.compared > 0 || exempt(&t.name), "{} never compared", t.name);
    }
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    run(TrainObjective::Joint { lambda: 1.0 });
}

#[test]
fn generation_loss_gradients_match_finite_differences() {
    run(TrainObjective::GenerationOnly);
}
