use super::*;
use crate::dataio::{synth_sequence, Motion, SynthSpec};
use crate::heads::{CLS_BIAS, CLS_WEIGHT};
use crate::network::{build_model, ModelConfig};

fn model() -> Model<f32> {
    build_model::<f32>(&ModelConfig::default(), 3).unwrap()
}

fn static_sequence(frames: usize) -> SequenceRecord {
    let spec = SynthSpec {
        frames,
        size: 128,
        target_size: 20.0,
        noise_std: 0.0,
        target_motion: Some(Motion::linear((64.0, 60.0), (0.0, 0.0))),
        ..Default::default()
    };
    synth_sequence(&spec, 1).unwrap().record
}

fn single_scale() -> TrackerConfig {
    TrackerConfig {
        scales: 1,
        ..Default::default()
    }
}

#[test]
fn config_validation() {
    assert!(TrackerConfig::default().validate().is_ok());
    for bad in [
        TrackerConfig { scales: 2, ..Default::default() },
        TrackerConfig { branch_mix: 1.5, ..Default::default() },
        TrackerConfig { ema_rate: -0.1, ..Default::default() },
        TrackerConfig { response_upsample: 0, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    let f = TrackerConfig::default().scale_factors();
    assert_eq!(f.len(), 3);
    assert_eq!(f[1], 1.0);
    assert!((f[0] * f[2] - 1.0).abs() < 1e-15);
    assert!("sometimes".parse::<TemplateMode>().is_err());
}

#[test]
fn session_is_pruned_and_deterministic() {
    let m = model();
    let seq = static_sequence(2);
    let a = init_session(&m, &seq.frames[0], seq.boxes[0], &single_scale()).unwrap();
    assert!(!a.model().params.contains(CLS_WEIGHT) && !a.model().params.contains(CLS_BIAS));
    let b = init_session(&m, &seq.frames[0], seq.boxes[0], &single_scale()).unwrap();
    assert_eq!(a.features(), b.features());
    assert_eq!(a.filters(), b.filters());
    assert_eq!(a.bbox(), b.bbox());
    let empty = BBox::new(500.0, 500.0, 10.0, 10.0);
    assert!(matches!(
        init_session(&m, &seq.frames[0], empty, &single_scale()),
        Err(Error::Input(_))
    ));
}

#[test]
fn static_target_stays_put_and_weights_constant() {
    let m = model();
    let seq = static_sequence(6);
    let mut s = init_session(&m, &seq.frames[0], seq.boxes[0], &TrackerConfig::default()).unwrap();
    let (w0, f0) = (s.model().params.clone(), s.features().clone());
    for (frame, gt) in seq.frames.iter().zip(&seq.boxes).skip(1) {
        let r = s.track_frame(frame).unwrap();
        let ((px, py), (gx, gy)) = (r.bbox.center(), gt.center());
        assert!((px - gx).hypot(py - gy) <= 2.0, "{r:?} vs {gt}");
    }
    assert_eq!(s.model().params, w0);
    assert_eq!(s.features(), &f0);
}

#[test]
fn half_mix_is_half_the_sum() {
    let m = model();
    let seq = static_sequence(2);
    let s = init_session(&m, &seq.frames[0], seq.boxes[0], &single_scale()).unwrap();
    let (dis, fin) = s.responses_at(&seq.frames[1], 1.0).unwrap();
    let fused = fuse_responses(&dis, &fin, 0.5).unwrap();
    let sum = dis.add(&fin).unwrap();
    for (f, s) in fused.data().iter().zip(sum.data()) {
        assert_eq!(2.0 * f, *s);
    }
    assert_eq!(fuse_responses(&dis, &fin, 1.0).unwrap(), dis);
    assert_eq!(fuse_responses(&dis, &fin, 0.0).unwrap(), fin);
}

#[test]
fn unit_step_pyramid_equals_single_scale() {
    let m = model();
    let spec = SynthSpec {
        frames: 4,
        size: 128,
        target_size: 20.0,
        ..Default::default()
    };
    let seq = synth_sequence(&spec, 5).unwrap().record;
    let flat = TrackerConfig {
        scale_step: 1.0,
        ..Default::default()
    };
    let a = track_sequence(&m, &seq, &flat).unwrap().trajectory;
    let b = track_sequence(&m, &seq, &single_scale()).unwrap().trajectory;
    assert_eq!(a, b);
}

#[test]
fn branch_extremes_give_valid_boxes() {
    let m = model();
    let seq = static_sequence(3);
    for beta in [0.0, 1.0] {
        let cfg = TrackerConfig {
            branch_mix: beta,
            ..single_scale()
        };
        let t = track_sequence(&m, &seq, &cfg).unwrap().trajectory;
        assert!(t.boxes.iter().all(|b| !b.is_degenerate() && b.w.is_finite()));
    }
}

#[test]
fn template_update_modes() {
    let m = model();
    let seq = static_sequence(3);
    let feats_at = |frame: usize| {
        let ex = crop_patch(&seq.frames[frame], &seq.boxes[frame], CONTEXT, 127).unwrap();
        template_features(&m.pruned(), &ex).unwrap()
    };
    let (f0, mut f1) = (feats_at(0), feats_at(1));
    // make the second set distinct
    f1.dis = f1.dis.map(|v| v + 1.0);
    f1.fin = f1.fin.map(|v| v * 2.0);
    let session = |mode, rate| {
        let cfg = TrackerConfig {
            template_mode: mode,
            ema_rate: rate,
            ..single_scale()
        };
        init_session(&m, &seq.frames[0], seq.boxes[0], &cfg).unwrap()
    };

    let mut first = session(TemplateMode::First, 0.5);
    first.update_template(&f1).unwrap();
    assert_eq!(first.features(), &f0);

    let mut frozen = session(TemplateMode::Ema, 0.0);
    frozen.update_template(&f1).unwrap();
    assert_eq!(frozen.features(), &f0);

    let mut prev = session(TemplateMode::Previous, 0.0);
    let mut full = session(TemplateMode::Ema, 1.0);
    prev.update_template(&f1).unwrap();
    full.update_template(&f1).unwrap();
    assert_eq!(prev.features(), &f1);
    assert_eq!(full.features(), &f1);
    assert_eq!(prev.filters(), full.filters());

    let mut half = session(TemplateMode::Ema, 0.5);
    half.update_template(&f1).unwrap();
    for (got, (a, b)) in half.features().dis.data().iter().zip(f0.dis.data().iter().zip(f1.dis.data())) {
        assert!((got - (0.5 * a + 0.5 * b)).abs() <= 1e-6 * (1.0 + got.abs()));
    }
}

#[test]
fn trajectory_csv_round_trip() {
    let m = model();
    let seq = static_sequence(4);
    let run = track_sequence(&m, &seq, &single_scale()).unwrap();
    let t = run.trajectory;
    assert_eq!(t.boxes.len(), seq.frames.len());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.csv");
    t.save(&p).unwrap();
    let back = Trajectory::load(&p).unwrap();
    assert_eq!(back.boxes, t.boxes);
    assert_eq!(back.scores, t.scores);
    assert!(Trajectory::from_csv("x", "frame,x\n").is_err());
    assert!(Trajectory::from_csv("x", &format!("{TRAJECTORY_HEADER}\n1,0,0,1,1,0\n")).is_err());
    assert!(run.fps > 0.0);
}
