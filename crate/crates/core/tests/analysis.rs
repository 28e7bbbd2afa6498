use hiresnet::analysis::{
    ablation_cell, activation_stats, emit_activation_report, emit_report, mean_std, parse_report,
    run_ablation, AblationResult, AblationRow, ReportFormat,
};
use hiresnet::architecture::{count_params, projection_param_delta};
use hiresnet::data::{synthetic_dataset, Dataset};
use hiresnet::gradcheck::micro_config;
use hiresnet::training::{train, TrainConfig};
use hiresnet::{Error, Model, Tensor, VariantMask};

fn data(n: usize, seed: u64) -> Dataset {
    synthetic_dataset(n, 10, [3, 8, 8], seed).unwrap()
}

fn trained_micro(mask: VariantMask) -> Model {
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 10,
        ..TrainConfig::default()
    };
    let d = data(40, 0);
    train(
        Model::new(&micro_config().with_mask(mask)).unwrap(),
        &d,
        &d,
        &cfg,
    )
    .unwrap()
    .model
}

#[test]
fn trained_model_has_positive_statistics() {
    let model = trained_micro(VariantMask::Full);
    let report = activation_stats(&model, &data(30, 1), 8).unwrap();
    assert_eq!(report.images, 30);
    let projections: usize = report.levels.iter().map(|l| l.projections.len()).sum();
    assert_eq!(projections, model.projections().len());
    for level in &report.levels {
        assert!(level.mean_abs_residual > 0.0 && level.mean_abs_residual.is_finite());
        for (p, (src, ratio)) in level.projections.iter().zip(level.ratios()) {
            assert!(p.mean_abs > 0.0 && p.mean_abs.is_finite());
            assert_eq!(src, p.src);
            assert_eq!(ratio, p.mean_abs / level.mean_abs_residual);
        }
    }
}

#[test]
fn zeroed_projections_report_zero() {
    let mut model = trained_micro(VariantMask::Full);
    model.zero_projections();
    let report = activation_stats(&model, &data(12, 2), 5).unwrap();
    for level in &report.levels {
        assert!(level.mean_abs_residual > 0.0);
        assert!(level.projections.iter().all(|p| p.mean_abs == 0.0));
    }
}

#[test]
fn baseline_reports_residuals_only() {
    let model = Model::new(&micro_config().with_mask(VariantMask::None)).unwrap();
    let report = activation_stats(&model, &data(10, 0), 4).unwrap();
    assert_eq!(report.levels.len(), 2);
    assert!(report.levels.iter().all(|l| l.projections.is_empty()));
}

#[test]
fn batch_size_does_not_change_statistics() {
    let model = trained_micro(VariantMask::Full);
    let d = data(23, 3);
    let reference = activation_stats(&model, &d, 23).unwrap();
    for bs in [1, 2, 5, 7, 100] {
        assert_eq!(
            activation_stats(&model, &d, bs).unwrap(),
            reference,
            "batch {bs}"
        );
    }
}

#[test]
fn duplicating_images_keeps_the_means() {
    let model = trained_micro(VariantMask::In);
    let d = data(15, 4);
    let doubled: Vec<usize> = (0..15).chain(0..15).collect();
    let a = activation_stats(&model, &d, 4).unwrap();
    let b = activation_stats(&model, &d.subset(&doubled).unwrap(), 4).unwrap();
    assert_eq!(b.images, 30);
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(y.abs());
    for (la, lb) in a.levels.iter().zip(&b.levels) {
        assert!(close(la.mean_abs_residual, lb.mean_abs_residual));
        for (pa, pb) in la.projections.iter().zip(&lb.projections) {
            assert!(close(pa.mean_abs, pb.mean_abs));
        }
    }
}

#[test]
fn channel_mismatch_errors() {
    let model = Model::new(&micro_config()).unwrap();
    let d = synthetic_dataset(10, 10, [1, 8, 8], 0).unwrap();
    assert!(matches!(
        activation_stats(&model, &d, 4),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn sample_standard_deviation() {
    assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
}

fn tiny_ablation(seeds: &[u64]) -> AblationResult {
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 10,
        ..TrainConfig::default()
    };
    let (t, v) = (data(30, 5), data(10, 6));
    run_ablation(
        &micro_config(),
        &[VariantMask::None, VariantMask::Full],
        &t,
        &v,
        &cfg,
        seeds,
        |_, _, _| {},
    )
    .unwrap()
}

#[test]
fn ablation_rows_carry_exact_counts() {
    let result = tiny_ablation(&[7]);
    let names: Vec<&str> = result.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["none", "full"]);
    let base = micro_config();
    assert_eq!(
        result.rows[1].params - result.rows[0].params,
        projection_param_delta(&base, &VariantMask::Full).unwrap()
    );
    for (row, mask) in result
        .rows
        .iter()
        .zip([VariantMask::None, VariantMask::Full])
    {
        let model = Model::new(&base.clone().with_mask(mask)).unwrap();
        assert_eq!(row.params, count_params(&model).total);
        assert_eq!(row.top1_std, 0.0);
        assert!((0.0..=1.0).contains(&row.top1_mean));
    }
    assert_eq!(tiny_ablation(&[7]), result);
    assert!(tiny_ablation(&[7, 8])
        .rows
        .iter()
        .all(|r| r.top1_std >= 0.0));
}

#[test]
fn ablation_failures_name_the_variant() {
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 10,
        ..TrainConfig::default()
    };
    let wrong = synthetic_dataset(20, 10, [3, 4, 4], 0).unwrap();
    let err =
        ablation_cell(&micro_config(), &VariantMask::Out, &wrong, &wrong, &cfg, 3).unwrap_err();
    assert!(
        matches!(err, Error::Variant { ref variant, seed: 3, .. } if variant == "out"),
        "{err}"
    );
    assert!(err.to_string().contains("out"));
    let none = run_ablation(
        &micro_config(),
        &[],
        &wrong,
        &wrong,
        &cfg,
        &[],
        |_, _, _| {},
    );
    assert!(none.is_err());
}

fn sample_result() -> AblationResult {
    AblationResult {
        rows: vec![
            AblationRow {
                variant: "none".into(),
                params: 267_802,
                top1_mean: 0.8653,
                top1_std: 0.0,
            },
            AblationRow {
                variant: "custom:0-2,1-3".into(),
                params: 270_000,
                top1_mean: 1.0 / 3.0,
                top1_std: 0.023_456_789_012_345_67,
            },
        ],
    }
}

#[test]
fn reports_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for format in [ReportFormat::Rows, ReportFormat::Structured] {
        let path = dir.path().join(format!("{format:?}"));
        emit_report(&sample_result(), &path, format).unwrap();
        assert_eq!(parse_report(&path, format).unwrap(), sample_result());
        emit_report(&AblationResult::default(), &path, format).unwrap();
        assert_eq!(
            parse_report(&path, format).unwrap(),
            AblationResult::default()
        );
    }
}

#[test]
fn row_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    emit_report(&AblationResult::default(), &path, ReportFormat::Rows).unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        "variant,params,top1_mean,top1_std\n"
    );
    emit_report(&sample_result(), &path, ReportFormat::Rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().nth(1), Some("none,267802,0.8653,0"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn activation_rows_list_every_connection() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("activations.csv");
    let model = Model::new(&micro_config()).unwrap();
    let x = Tensor::from_fn(&[4, 3, 8, 8], |i| (i % 7) as f32 - 3.0);
    let d = Dataset::new(x, vec![0, 1, 2, 3], 10).unwrap();
    let report = activation_stats(&model, &d, 2).unwrap();
    emit_activation_report(&report, &path, ReportFormat::Rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text.lines().next(),
        Some("level,connection,src,mean_abs,ratio_to_residual")
    );
    assert_eq!(text.lines().count(), 1 + 2 + model.projections().len());
}
