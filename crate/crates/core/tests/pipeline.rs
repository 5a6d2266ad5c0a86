use ocf_core::engine::{EngineConfig, Variant};
use ocf_core::eval::{emit_reports, read_points};
use ocf_core::experiment::{run_stream, RunOptions};
use ocf_core::stream::{apply_ordering, load_dataset, save_dataset, synth_generate, Ordering2d, SynthConfig};

fn small_data() -> Vec<ocf_core::stream::Observation> {
    synth_generate(&SynthConfig {
        n_points: 2400,
        n_classes: 4,
        class_proportions: vec![0.4, 0.3, 0.2, 0.1],
        d: 6,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_config(variant: Variant) -> EngineConfig {
    EngineConfig {
        batch_size: 400,
        n_sub: 1200,
        variant,
        seed: 3,
        ..EngineConfig::default()
    }
}

#[test]
fn dataset_file_round_trip() {
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    save_dataset(&path, &data).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), data);
}

#[test]
fn every_variant_runs_every_ordering() {
    let data = small_data();
    for variant in Variant::ALL {
        for ordering in Ordering2d::ALL {
            let stream = apply_ordering(&data, ordering, 3);
            let run = run_stream(&stream, &small_config(variant), RunOptions::default()).unwrap();
            assert_eq!(run.metrics.len(), 6, "{variant}/{ordering:?}");
            let model = run.engine.model();
            model.validate().unwrap();
            assert!((model.total_weight() - 1.0).abs() < 1e-9);
            assert_eq!(model.total_count, 2400);
            let f1 = run.final_f1(&stream).unwrap();
            let floor = if variant == Variant::OnlyMerging { 0.5 } else { 0.8 };
            assert!(f1 >= floor, "{variant}/{ordering:?}: F1 {f1}");
        }
    }
}

#[test]
fn density_variant_is_accurate_and_reports_round_trip() {
    let data = small_data();
    let stream = apply_ordering(&data, Ordering2d::We, 3);
    let run = run_stream(&stream, &small_config(Variant::OcDensity), RunOptions::default()).unwrap();
    assert!(run.final_f1(&stream).unwrap() > 0.95);
    let cumulative: Vec<u64> = run.metrics.iter().map(|m| m.cumulative).collect();
    assert_eq!(cumulative, vec![400, 800, 1200, 1600, 2000, 2400]);

    let report = run.report(&stream).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_reports(&report, dir.path()).unwrap();
    let points = read_points(std::fs::File::open(dir.path().join("points.csv")).unwrap()).unwrap();
    assert_eq!(points, report.points);
    let sizes: u64 = report.cluster_sizes.values().sum();
    assert_eq!(sizes, stream.len() as u64);
}
