use std::path::PathBuf;

use mimic_core::physics::{MorphologySpec, SimConfig, Simulator};
use mimic_core::render::{render_mask, Camera};
use mimic_core::video::{generate_synthetic_expert, GaitScript, VideoError};
use serde::{Deserialize, Serialize};

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Golden {
    frames: usize,
    displacement: f64,
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets/golden/walker-gait-v1.json")
}

fn walker() -> Simulator {
    Simulator::new(MorphologySpec::walker2d(), SimConfig::default()).unwrap()
}

/// Set `MIMIC_UPDATE_GOLDEN=1` to rewrite the file after an intended change.
#[test]
fn walker_gait_displacement_matches_golden() {
    let run = generate_synthetic_expert(&walker(), &GaitScript::walker_gait_v1(), &Camera::default(), 25.0, 0).unwrap();
    let got = Golden { frames: run.video.len(), displacement: run.forward_displacement() };
    assert!(got.displacement > 1.0, "{got:?}");
    if std::env::var_os("MIMIC_UPDATE_GOLDEN").is_some() {
        std::fs::write(golden_path(), serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
    }
    let want: Golden = serde_json::from_str(&std::fs::read_to_string(golden_path()).unwrap()).unwrap();
    assert_eq!(got.frames, want.frames);
    assert!((got.displacement - want.displacement).abs() <= 1e-12, "{} vs {}", got.displacement, want.displacement);
}

#[test]
fn masks_equal_renders_of_logged_states() {
    let sim = walker();
    let cam = Camera::default();
    let run = generate_synthetic_expert(&sim, &GaitScript::walker_gait_v1(), &cam, 25.0, 1).unwrap();
    let masks = run.video.masks.as_ref().unwrap();
    assert_eq!(masks.len(), run.states.len());
    for (i, (m, s)) in masks.iter().zip(&run.states).enumerate() {
        assert_eq!(*m, render_mask(&sim, s, &cam.follow(s)).with_index(i), "frame {i}");
    }
}

#[test]
fn violent_script_is_unstable() {
    let mut script = GaitScript::walker_gait_v1();
    for j in &mut script.joints {
        j.frequency *= 4.0;
        j.phase = 0.0;
    }
    let err = generate_synthetic_expert(&walker(), &script, &Camera::default(), 25.0, 0).unwrap_err();
    assert!(matches!(err, VideoError::UnstableGait { .. }), "{err:?}");
}
