use pdprune::analysis::AnalysisReport;
use pdprune::distill::{distill_plan, DistillConfig};
use pdprune::kv_prune::{select_layers, KvPlanReport};
use pdprune::model::{checkpoint, ModelConfig};
use pdprune::pipeline::{
    analyze, calibration_attention, search, CalibrationSpec, PlanReport, SearchSettings,
    ToyInstance,
};
use pdprune::plan::{fingerprint, StageViews};
use pdprune::runtime::{reference_unified_run, run_two_node, Transport, WireDtype};
use pdprune::search::AnnealingSchedule;

fn small() -> ToyInstance {
    ToyInstance {
        config: ModelConfig::new(6, 8, 2, 16, 32),
        model_seed: 2,
        calibration: CalibrationSpec {
            seed: 4,
            samples: 8,
            len: 12,
        },
        train_epochs: 5,
        train_lr: 1e-2,
        train_seed: 1,
    }
}

#[test]
fn analysis_to_two_node_run() {
    let toy = small().train().unwrap();
    let analysis = analyze(&toy.model, &toy.calibration, 2, 0.5).unwrap();
    assert_eq!(analysis.profile.redundancy.len(), 6);
    assert_eq!(analysis.profile.pair_metric.len(), 5);

    let settings = SearchSettings {
        k: 2,
        oracle: true,
        ..SearchSettings::default()
    };
    let report = search(&toy.model, &toy.calibration, &analysis, &settings).unwrap();
    assert_eq!(report.iterations, 36);
    assert!(report.oracle.as_ref().unwrap().best_f >= report.best_f);
    let plan = report.stage_plan().unwrap();
    assert_eq!(plan.decode_removals.len(), 2);

    let config = DistillConfig {
        steps: 20,
        ..DistillConfig::default()
    };
    let (merged, outcomes) = distill_plan(
        &toy.model,
        &plan,
        &analysis.profile.redundancy,
        &toy.calibration,
        config,
    )
    .unwrap();
    assert!(outcomes.iter().all(|o| o.final_mse <= o.initial_mse));

    let views = StageViews::new(&toy.model, &plan, &merged).unwrap();
    assert_eq!(views.fingerprint, fingerprint(&toy.model, &merged));
    let stats = calibration_attention(&views.decode, &toy.calibration).unwrap();
    let kv = select_layers(&stats, 0.25, 0.0, 2).unwrap();
    assert_eq!(kv.selected_layers.len(), 2);

    let prompt: Vec<u32> = toy.calibration[0][..10].to_vec();
    let reference = reference_unified_run(&toy.model, &plan, &merged, &kv, &prompt, 6).unwrap();
    let run = run_two_node(
        &toy.model,
        &plan,
        &merged,
        &kv,
        &prompt,
        6,
        WireDtype::F64,
        Transport::Channel,
    )
    .unwrap();
    assert_eq!(run.decode.transcript, reference);
}

#[test]
fn reports_round_trip_through_json() {
    let toy = small().train().unwrap();
    let analysis = analyze(&toy.model, &toy.calibration, 3, 0.5).unwrap();
    let ar = AnalysisReport::new(
        &analysis.profile,
        &analysis.partition,
        3,
        analysis.norm_profile.clone(),
    );
    let back: AnalysisReport = serde_json::from_str(&serde_json::to_string(&ar).unwrap()).unwrap();
    assert_eq!(back, ar);
    assert_eq!(back.partition().unwrap(), analysis.partition);

    let settings = SearchSettings {
        k: 3,
        schedule: AnnealingSchedule {
            seed: 9,
            ..AnnealingSchedule::default()
        },
        ..SearchSettings::default()
    };
    let pr = search(&toy.model, &toy.calibration, &analysis, &settings).unwrap();
    let text = serde_json::to_string_pretty(&pr).unwrap();
    let back: PlanReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, pr);
    assert!(!text.contains("oracle"));

    let stats = calibration_attention(&toy.model.full_view(), &toy.calibration).unwrap();
    let kv = select_layers(&stats, 0.25, 0.0, 3).unwrap();
    let kr = KvPlanReport::new(&kv, 12);
    let back: KvPlanReport = serde_json::from_str(&serde_json::to_string(&kr).unwrap()).unwrap();
    assert_eq!(back.plan().unwrap(), kv);
}

#[test]
fn checkpoint_survives_disk() {
    let toy = small().train().unwrap();
    let dir = std::env::temp_dir().join(format!("pdprune-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.bin");
    let merged = pdprune::plan::MergedBlocks::new();
    checkpoint::save(&path, &toy.model, &merged).unwrap();
    let (model, back) = checkpoint::load(&path).unwrap();
    assert_eq!(model.fingerprint(), toy.model.fingerprint());
    assert!(back.is_empty());
    std::fs::remove_dir_all(&dir).unwrap();
    assert!(checkpoint::load(&path).is_err());
}
