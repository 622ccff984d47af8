use std::path::Path;

use slidereg::annotations::{compute_rtre, read_landmarks_csv, transform_points, Direction, Frame, LandmarkSet};
use slidereg::pipeline::{generate_synthetic_pair, parse_config, run_pipeline, AffineRanges, RegistrationConfig, SynthParams};
use slidereg::warping::read_dhdf;
use slidereg::{load_image, ErrorClass};

fn small_config(fixed: &Path, moving: &Path) -> RegistrationConfig {
    let text = format!(
        r#"{{
            "fixed": {:?},
            "moving": {:?},
            "preprocessing": {{ "target_long_side": 256 }},
            "initial_alignment": {{ "search_long_side": 256, "working_long_side": 256 }},
            "nonrigid": {{ "levels": [2, 1], "iterations": [20, 10], "registration_long_side": 512 }},
            "output": {{ "tile_size": 256, "save_levels": 2, "traces": true }}
        }}"#,
        fixed.display().to_string(),
        moving.display().to_string()
    );
    parse_config(&text).unwrap()
}

#[test]
fn pipeline_recovers_synthetic_pair() {
    let dir = tempfile::tempdir().unwrap();
    let pair = generate_synthetic_pair(&SynthParams {
        seed: 11,
        size: 512,
        max_deform: 8.0,
        // Moving-to-fixed transfer iterates on the total field, which only
        // contracts when the affine is close to the identity.
        ranges: AffineRanges {
            max_rotation_deg: 8.0,
            scale_min: 0.97,
            scale_max: 1.03,
            max_shear: 0.02,
            max_translation: 0.05,
        },
        ..SynthParams::default()
    })
    .unwrap();
    let files = pair.write(dir.path(), 256).unwrap();
    let out = dir.path().join("out");
    let report = run_pipeline(&small_config(&files.fixed, &files.moving), &out).unwrap();
    assert_eq!(report.status, "ok");

    for name in ["field.dhdf", "warped.tif", "report.json", "qc_checkerboard.png", "refine_trace.csv", "nonrigid_trace.csv"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["status"], "ok");

    let warped = load_image(out.join("warped.tif")).unwrap();
    assert_eq!((warped.width(), warped.height()), (512, 512));
    assert_eq!(warped.num_levels(), 2);

    // Landmarks pushed through the saved field land on their ground truth.
    let field = read_dhdf(out.join("field.dhdf")).unwrap();
    let fixed = read_landmarks_csv(&files.fixed_landmarks, Frame::Fixed).unwrap();
    let moving = read_landmarks_csv(&files.moving_landmarks, Frame::Moving).unwrap();
    let mapped = transform_points(&fixed, &field, Direction::FixedToMoving).unwrap();
    let err = compute_rtre(&mapped.points, &moving, 512.0 * 2f64.sqrt()).unwrap();
    assert!(err.median * 724.0 < 1.0, "median landmark error {} px", err.median * 724.0);

    // And back again, against the ground truth and through the field itself.
    let back = transform_points(&moving, &field, Direction::MovingToFixed).unwrap();
    assert_eq!(back.non_converged(), 0);
    let as_moving = |p: &LandmarkSet| LandmarkSet::new(p.points().to_vec(), Frame::Moving).unwrap();
    let err = compute_rtre(&as_moving(&back.points), &as_moving(&fixed), 724.0).unwrap();
    assert!(err.median * 724.0 < 1.0, "inverse landmark error {} px", err.median * 724.0);
    let round = transform_points(&as_moving(&mapped.points), &field, Direction::MovingToFixed).unwrap();
    let err = compute_rtre(&as_moving(&round.points), &as_moving(&fixed), 724.0).unwrap();
    assert!(err.max * 724.0 < 0.1, "round trip error {} px", err.max * 724.0);
}

#[test]
fn affine_only_run_skips_dense_stage() {
    let dir = tempfile::tempdir().unwrap();
    let pair = generate_synthetic_pair(&SynthParams {
        seed: 12,
        size: 384,
        max_deform: 0.0,
        ..SynthParams::default()
    })
    .unwrap();
    let files = pair.write(dir.path(), 128).unwrap();
    let mut cfg = small_config(&files.fixed, &files.moving);
    cfg.nonrigid.enabled = false;
    cfg.output.qc_path = None;
    let report = run_pipeline(&cfg, &dir.path().join("out")).unwrap();
    assert!(report.nonrigid.is_none());
    let m = report.initial_alignment.unwrap().matrix;
    for (x, y) in [(0.0, 0.0), (383.0, 0.0), (0.0, 383.0), (383.0, 383.0)] {
        let (a, b) = (m.apply(x, y), pair.affine.apply(x, y));
        assert!((a.0 - b.0).hypot(a.1 - b.1) < 3.0, "corner ({x}, {y})");
    }
    assert!(!dir.path().join("out/qc_checkerboard.png").exists());
}

#[test]
fn missing_input_fails_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir.path().join("nope.tif"), &dir.path().join("nope2.tif"));
    let err = run_pipeline(&cfg, dir.path()).unwrap_err();
    assert_eq!(err.error.class(), ErrorClass::Io);
    assert_eq!(err.report.status, "failed");
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert!(text.contains("\"failed\""));
}
