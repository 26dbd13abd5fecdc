use dsadlc::ingest::{recordings_match, DatasetManifest};
use dsadlc::labeling::{extract_cases, read_cases, split_and_balance, write_cases, CaseKind, LabelingConfig};
use dsadlc::model::{Architecture, Model, ModelConfig};
use dsadlc::synthgen::{
    generate, ground_truth_path, read_ground_truth, write_generated, DriverStyleParams, Generated,
    ScenarioConfig, StyleShare,
};

fn style(aggressiveness: f64, threshold: f64) -> DriverStyleParams {
    DriverStyleParams {
        aggressiveness,
        desired_speed: 30.0,
        desired_time_headway: 1.8 - aggressiveness,
        max_accel: 1.0 + aggressiveness,
        comfortable_decel: 1.5 + aggressiveness,
        politeness: 0.5 - 0.4 * aggressiveness,
        lane_change_threshold: threshold,
        reaction_time: 1.0,
    }
}

fn scenario(duration: f64) -> Generated {
    generate(&ScenarioConfig {
        recording_id: 4,
        lane_count: 3,
        road_length: 600.0,
        duration,
        spawn_rate: 1.0,
        style_mixture: vec![
            StyleShare { probability: 0.5, style: style(0.9, 0.1) },
            StyleShare { probability: 0.5, style: style(0.2, 0.6) },
        ],
        rng_seed: 21,
        keep_right_bias: 0.3,
        speed_spread: 0.2,
        entry_speed_ratio: 1.0,
    })
    .unwrap()
}

#[test]
fn synthetic_recording_survives_disk() {
    let g = scenario(240.0);
    let dir = tempfile::tempdir().unwrap();
    write_generated(&g, dir.path()).unwrap();

    let manifest = DatasetManifest::discover(dir.path()).unwrap();
    assert_eq!(manifest.entries.len(), 1);
    let back = manifest.load_all().unwrap().remove(0);
    recordings_match(&g.recording, &back, 1e-9).unwrap();
    assert_eq!(read_ground_truth(&ground_truth_path(dir.path(), 4)).unwrap(), g.ground_truth);

    let cfg = LabelingConfig { stride_s: 4.0, ..LabelingConfig::default() };
    let a = extract_cases(&g.recording, &cfg).unwrap();
    let b = extract_cases(&back, &cfg).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.label, y.label);
        assert_eq!(x.provenance, y.provenance);
    }
}

#[test]
fn case_files_round_trip_through_split() {
    let g = scenario(240.0);
    let cases = extract_cases(&g.recording, &LabelingConfig { stride_s: 4.0, ..LabelingConfig::default() }).unwrap();
    let split = split_and_balance(&cases, 0.8, 3, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.cases");
    write_cases(&path, CaseKind::Train, &split.train).unwrap();
    let (kind, back) = read_cases(&path).unwrap();
    assert_eq!(kind, CaseKind::Train);
    assert_eq!(back.len(), split.train.len());
    for (x, y) in back.iter().zip(&split.train) {
        assert_eq!(x.label, y.label);
        assert_eq!(x.provenance, y.provenance);
        assert_eq!(x.bundle.to_flat(), y.bundle.to_flat());
    }
}

#[test]
fn training_on_synthetic_cases_lowers_loss() {
    let g = scenario(300.0);
    let cases = extract_cases(&g.recording, &LabelingConfig { stride_s: 4.0, ..LabelingConfig::default() }).unwrap();
    let split = split_and_balance(&cases, 0.8, 4, 2).unwrap();
    let cfg = ModelConfig { seed: 4, ..ModelConfig::default() };
    let mut model = Model::new(Architecture::reduced(), &cfg);
    model.fit_normalizer(&split.train).unwrap();
    let report = model.train(&split.train, &cfg, |_, _| {}).unwrap();
    assert_eq!(report.loss_history.len(), 50);
    assert!(report.loss_history[49] < report.loss_history[0], "{:?}", report.loss_history);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.w");
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    for c in &split.test {
        assert_eq!(model.predict(&c.bundle, true), loaded.predict(&c.bundle, true));
    }
}
