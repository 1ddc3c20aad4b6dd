//! Oracle, shape, strategy, metrics, persistence and tracking checks.

use std::sync::Arc;

use image::GrayImage;

use super::overfit::OverfitReport;
use super::{oracles, Check};
use crate::backbone::{backbone_forward, BackboneConfig};
use crate::dataio::{load_sequence, save_sequence, synth_sequence, BBox, Domain, SequenceRecord, SynthSpec};
use crate::error::{Error, Result};
use crate::evalkit::{iou, precision_curve, success_curve, vot_lite, TrackerRunner, VotLiteParams};
use crate::fanet::{build_fanet, fanet_forward, pixel_correlation, pixel_correlation_map, FanetLayout, DELTA};
use crate::heads::{cf_block, cross_correlate, gaussian_label, CfConfig};
use crate::network::{
    build_model, discriminative_similarity, fine_grained_similarity, Model, ModelConfig,
};
use crate::rng::Xoshiro256;
use crate::tensor::{conv2d, conv_transpose2d, fft2d, max_pool2d, Tensor};
use crate::tracker::{track_sequence, TrackerConfig};
use crate::trainer::{
    apply_strategy, combined_mask, load_checkpoint, lr_schedule, make_batch, save_checkpoint, train, Checkpoint,
    Datasets, Strategy, TrainConfig, TrainOutputs, Trainer,
};

fn max_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn below(name: &str, err: f64, tol: f64) -> Check {
    Check::new(name, err < tol, format!("max abs err {err:.2e} (< {tol:.0e})"))
}

fn exact<T: PartialEq + std::fmt::Debug>(name: &str, got: T, want: T) -> Check {
    let passed = got == want;
    Check::new(name, passed, format!("got {got:?}, want {want:?}"))
}

fn or_fail(name: &str, r: Result<Check>) -> Check {
    r.unwrap_or_else(|e| Check::new(name, false, e.to_string()))
}

pub fn oracle_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Xoshiro256::seed_from(seed);
    let mut out = Vec::new();

    for (stride, pad) in [(1, 0), (2, 1), (2, 0)] {
        let x = Tensor::<f64>::randn([2, 3, 11, 11], 1.0, &mut rng);
        let k = Tensor::<f64>::randn([4, 3, 3, 3], 1.0, &mut rng);
        let b = [0.1, -0.2, 0.3, 0.0];
        let fast = conv2d(&x, &k, Some(&b), stride, pad)?;
        let slow = oracles::conv2d_naive(&x, &k, &b, stride, pad);
        out.push(below(
            &format!("conv2d stride {stride} pad {pad}"),
            max_diff(fast.data(), slow.data()),
            1e-6,
        ));
    }

    let x = Tensor::<f64>::randn([1, 3, 4, 6], 1.0, &mut rng);
    let k = Tensor::<f64>::randn([3, 2, 4, 4], 1.0, &mut rng);
    let fast = conv_transpose2d(&x, &k, Some(&[0.5, -1.0]), 2, 1, (9, 12))?;
    let slow = oracles::conv_transpose2d_naive(&x, &k, &[0.5, -1.0], 2, 1, (9, 12));
    out.push(below("conv_transpose2d", max_diff(fast.data(), slow.data()), 1e-6));

    let x = Tensor::<f64>::randn([1, 2, 13, 13], 1.0, &mut rng);
    let (fast, _) = max_pool2d(&x, 3, 2)?;
    out.push(exact("max_pool2d", fast == oracles::max_pool_naive(&x, 3, 2), true));

    let t = Tensor::<f64>::randn([1, 4, 6, 6], 1.0, &mut rng);
    let s = Tensor::<f64>::randn([1, 4, 22, 22], 1.0, &mut rng);
    let fast = cross_correlate(&t, &s)?;
    out.push(below(
        "cross-correlation",
        max_diff(fast.data(), &oracles::xcorr_naive(&t, &s)),
        1e-6,
    ));

    let mut fft_err: f64 = 0.0;
    for (h, w) in [(8, 8), (6, 6), (17, 17), (5, 12)] {
        let x = Tensor::<f64>::randn([1, 2, h, w], 1.0, &mut rng);
        let f = fft2d(&x);
        let d = oracles::dft2d_direct(&x);
        fft_err = f.data().iter().zip(d.data()).map(|(a, b)| (a - b).norm()).fold(fft_err, f64::max);
    }
    out.push(below("fft2d vs direct DFT", fft_err, 1e-8));

    let (h, w) = (6, 6);
    let mut z = Tensor::<f64>::zeros([1, 1, h, w]);
    *z.at_mut(0, 0, h / 2, w / 2) = 1.0;
    let cfg = CfConfig {
        lambda: 0.0,
        window: false,
        ..Default::default()
    };
    let f = cf_block(&z, &cfg)?;
    let r = oracles::circular_xcorr(f.plane(0, 0), z.plane(0, 0), h, w);
    let g = gaussian_label::<f64>(h, w, cfg.sigma_frac);
    out.push(below("cf block reproduces its label", max_diff(&r, g.data()), 1e-5));

    let mut p = build_fanet::<f64>(FanetLayout::new(32)?, seed)?;
    let x = Tensor::<f64>::randn([1, 32, 10, 10], 1.0, &mut rng);
    let s = pixel_correlation_map(&x, &p)?;
    let n = x.plane_len();
    let row_err = s
        .data()
        .chunks(n)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    out.push(below("non-local rows sum to 1", row_err, 1e-5));

    *p.get_mut(DELTA) = Tensor::scalar(0.0);
    out.push(exact("pixel correlation with delta 0 is identity", pixel_correlation(&x, &p)? == x, true));
    Ok(out)
}

pub fn shape_suite() -> Result<Vec<Check>> {
    let cfg = ModelConfig::default();
    let b = &cfg.backbone;
    let mut out = vec![
        exact("taps for 127 input", b.tap_sizes(127)?, (10, 6)),
        exact("taps for 255 input", b.tap_sizes(255)?, (26, 22)),
        exact("response side", cfg.response_size()?, 17),
    ];
    let m = build_model::<f32>(&cfg, 0)?;
    let z = Tensor::<f32>::full([1, 1, 127, 127], 0.5);
    let x = Tensor::<f32>::full([1, 1, 255, 255], 0.5);
    let zf = backbone_forward(&m.params, b, &z)?;
    let xf = backbone_forward(&m.params, b, &x)?;
    out.push(exact("exemplar conv3", zf.conv3.dims(), [1, b.conv3_channels(), 10, 10]));
    out.push(exact("exemplar conv5", zf.conv5.dims(), [1, b.conv5_channels(), 6, 6]));
    out.push(exact("search conv3", xf.conv3.dims(), [1, b.conv3_channels(), 26, 26]));
    out.push(exact("search conv5", xf.conv5.dims(), [1, b.conv5_channels(), 22, 22]));
    out.push(exact("fanet keeps conv3 dims", fanet_forward(&xf.conv3, &m.params)?.dims(), xf.conv3.dims()));
    let dis = discriminative_similarity(&m, &z, &x)?;
    let fin = fine_grained_similarity(&m, &z, &x)?;
    out.push(exact("discriminative response", dis.dims(), [1, 1, 17, 17]));
    out.push(exact("fine-grained response", fin.dims(), [1, 1, 17, 17]));
    out.push(exact("fused response", dis.add(&fin)?.dims(), [1, 1, 17, 17]));
    let full = BackboneConfig::full();
    out.push(exact("full preset response", ModelConfig::new(full).response_size()?, 17));
    Ok(out)
}

/// Small synthetic training data in both domains.
fn tiny_datasets(seed: u64) -> Result<Datasets> {
    let spec = SynthSpec {
        frames: 6,
        size: 96,
        target_size: 16.0,
        domain: Domain::Grayscale,
        ..Default::default()
    };
    let gray = synth_sequence(&spec, seed)?.record;
    let tir = synth_sequence(
        &SynthSpec {
            domain: Domain::Tir,
            ..spec
        },
        seed + 1,
    )?
    .record;
    Ok(Datasets {
        grayscale: Some(Arc::new(vec![gray])),
        tir: Some(Arc::new(vec![tir])),
    })
}

fn quick_train(strategy: Strategy, seed: u64) -> TrainConfig {
    TrainConfig {
        strategy,
        epochs: Some(1),
        pairs_per_epoch: 4,
        batch: 2,
        seed,
        ..Default::default()
    }
}

/// Runs the last stage of `strategy` for a few steps and compares every
/// parameter against its pre-stage value: the frozen ones must be
/// bit-identical, the others must move.
fn freeze_check(strategy: Strategy, seed: u64) -> Result<Check> {
    let name = format!("{strategy} freezes its stage bit-exactly");
    let cfg = ModelConfig::default();
    let plan = apply_strategy(strategy).pop().expect("every strategy has a stage");
    let tc = quick_train(strategy, seed);
    // away from delta 0, where the attention projections get no usable gradient yet
    let mut before = build_model::<f32>(&cfg, seed)?;
    *before.params.get_mut(DELTA) = Tensor::scalar(0.3);
    let mut trainer = Trainer::new(before.clone(), &tc);
    trainer.begin_stage(&plan.freeze)?;
    let mut rng = Xoshiro256::seed_from(seed);
    let seq = synth_sequence(&SynthSpec {
        frames: 8,
        size: 160,
        ..Default::default()
    }, seed)?
    .record;
    for _ in 0..3 {
        let pairs = (0..2)
            .map(|_| crate::dataio::sample_pair(std::slice::from_ref(&seq), &mut rng, &tc.sampler))
            .collect::<Result<Vec<_>>>()?;
        trainer.step(&make_batch(&pairs, &cfg)?, plan.lr_hi)?;
    }
    let mask = combined_mask(&before.params, &plan.freeze)?;
    let (mut frozen, mut moved, mut wrong) = (0, 0, Vec::new());
    for ((pname, t0), &f) in before.params.iter().zip(&mask) {
        let t1 = trainer.model.params.get(pname);
        let same = t0.data().iter().zip(t1.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        match (f, same) {
            (true, true) => frozen += 1,
            (false, false) => moved += 1,
            (true, false) => wrong.push(format!("{pname} changed")),
            // a trainable tensor may legitimately get no gradient (key bias)
            (false, true) if pname.ends_with("wk.bias") => moved += 1,
            (false, true) => wrong.push(format!("{pname} stuck")),
        }
    }
    Ok(Check::new(
        &name,
        wrong.is_empty() && frozen > 0,
        if wrong.is_empty() {
            format!("{frozen} tensors frozen, {moved} updated")
        } else {
            wrong.join("; ")
        },
    ))
}

pub fn strategy_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let ft = apply_strategy(Strategy::Finetune);
    let m = build_model::<f32>(&ModelConfig::default(), seed)?;
    let mask = combined_mask(&m.params, &ft[1].freeze)?;
    let expected = |n: &str| {
        ["backbone.conv1.", "backbone.conv2.", "backbone.conv3.", "fanet.", "heads.fin."]
            .iter()
            .any(|p| n.starts_with(p))
    };
    let mask_ok = m.params.iter().zip(&mask).all(|((n, _), &f)| f == expected(n));
    out.push(exact("finetune mask is conv1-3 and the fine-grained branch", mask_ok, true));
    let mix = apply_strategy(Strategy::Mix);
    let mix_mask = combined_mask(&m.params, &mix[0].freeze)?;
    let mix_ok = m
        .params
        .iter()
        .zip(&mix_mask)
        .all(|((n, _), &f)| f == n.starts_with("heads.cls."));
    out.push(exact("mix mask is the classification head", mix_ok, true));
    out.push(or_fail("finetune stage", freeze_check(Strategy::Finetune, seed)));
    out.push(or_fail("mix stage", freeze_check(Strategy::Mix, seed)));

    let vid = &apply_strategy(Strategy::VidOnly)[0];
    let first = lr_schedule(0, vid.epochs, vid.lr_hi, vid.lr_lo);
    let last = lr_schedule(vid.epochs - 1, vid.epochs, vid.lr_hi, vid.lr_lo);
    out.push(Check::new(
        "lr schedule starts at 1e-2",
        (first - 1e-2).abs() <= 1e-12 * 1e-2,
        format!("{first:e}"),
    ));
    out.push(Check::new(
        "lr schedule ends at 1e-5",
        (last - 1e-5).abs() <= 1e-12 * 1e-5,
        format!("{last:e}"),
    ));
    Ok(out)
}

/// Replays a fixed per-frame script; frames carry their index in pixel (0, 0).
struct Scripted {
    script: Vec<BBox>,
    inits: Vec<usize>,
}

impl TrackerRunner for Scripted {
    fn init(&mut self, frame: &GrayImage, _bbox: BBox) -> Result<()> {
        self.inits.push(frame.get_pixel(0, 0).0[0] as usize);
        Ok(())
    }

    fn track(&mut self, frame: &GrayImage) -> Result<BBox> {
        Ok(self.script[frame.get_pixel(0, 0).0[0] as usize])
    }
}

fn close(name: &str, got: f64, want: f64) -> Check {
    Check::new(name, (got - want).abs() < 1e-9, format!("got {got}, want {want}"))
}

pub fn metrics_suite() -> Result<Vec<Check>> {
    let b = BBox::new;
    let mut out = vec![close(
        "iou of half-shifted squares",
        iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 0.0, 2.0, 2.0)),
        1.0 / 3.0,
    )];
    let gt = vec![b(0.0, 0.0, 10.0, 10.0); 3];
    let pred: Vec<BBox> = [5.0, 25.0, 10.0].iter().map(|&d| b(d, 0.0, 10.0, 10.0)).collect();
    out.push(close("pre20 with one far frame", precision_curve(&pred, &gt)?.1, 2.0 / 3.0));
    out.push(close("auc of a perfect trajectory", success_curve(&gt, &gt)?.1, 20.0 / 21.0));

    // overlap w/10 from a box of width w inside the 10×10 truth; frames 4 and 12 miss
    let widths = [
        10.0, 9.0, 8.0, 7.0, -1.0, 5.0, 5.0, 5.0, 5.0, 10.0, 6.0, 5.0, -1.0, 5.0, 5.0, 5.0, 5.0, 10.0, 4.0, 3.0,
    ];
    let n = widths.len();
    let seq = SequenceRecord {
        name: "planted".into(),
        frames: (0..n).map(|i| GrayImage::from_pixel(4, 4, image::Luma([i as u8]))).collect(),
        boxes: vec![b(0.0, 0.0, 10.0, 10.0); n],
        class_id: 0,
        domain: Domain::Tir,
    };
    let mut runner = Scripted {
        script: widths
            .iter()
            .map(|&w| if w < 0.0 { b(50.0, 50.0, 10.0, 10.0) } else { b(0.0, 0.0, w, 10.0) })
            .collect(),
        inits: Vec::new(),
    };
    let r = vot_lite(
        &mut runner,
        &seq,
        VotLiteParams {
            reinit_skip: 5,
            burnin: 2,
        },
    )?;
    out.push(exact("vot-lite re-initializations", runner.inits, vec![0, 9, 17]));
    out.push(exact("vot-lite failures", r.failures, vec![4, 12]));
    out.push(close("vot-lite accuracy", r.accuracy, 2.3 / 4.0));
    out.push(close("vot-lite eao", r.eao_lite, 7.2 / 20.0));
    Ok(out)
}

pub fn persistence_suite(seed: u64) -> Result<Vec<Check>> {
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let mut out = Vec::new();

    let cfg = ModelConfig::default();
    let m = build_model::<f32>(&cfg, seed)?;
    let ck = Checkpoint::new(&m, m.params.zeros_like(), Xoshiro256::seed_from(seed).state());
    let path = dir.path().join("model.mmn");
    save_checkpoint(&ck, &path)?;
    let back = load_checkpoint(&path)?;
    out.push(exact("checkpoint bytes round-trip", back.to_bytes() == ck.to_bytes(), true));
    out.push(exact("checkpoint params round-trip", back.model()?.params == m.params, true));

    let seq = synth_sequence(
        &SynthSpec {
            frames: 12,
            size: 128,
            target_size: 20.0,
            n_distractors: 1,
            ..Default::default()
        },
        seed,
    )?
    .record;
    let sdir = dir.path().join(&seq.name);
    save_sequence(&seq, &sdir)?;
    out.push(exact("sequence round-trip", load_sequence(&sdir)? == seq, true));

    let data = tiny_datasets(seed)?;
    let tc = quick_train(Strategy::VidOnly, seed);
    let a = train(&tc, &cfg, &data, None, &TrainOutputs::default())?;
    let b = train(&tc, &cfg, &data, None, &TrainOutputs::default())?;
    out.push(exact(
        "same seed gives the same checkpoint",
        a.checkpoint.to_bytes() == b.checkpoint.to_bytes(),
        true,
    ));

    let tcfg = TrackerConfig::default();
    let ta = track_sequence(&m, &seq, &tcfg)?.trajectory.to_csv();
    let tb = track_sequence(&m, &seq, &tcfg)?.trajectory.to_csv();
    out.push(exact("same inputs give the same trajectory csv", ta == tb, true));
    Ok(out)
}

pub fn overfit_checks(r: &OverfitReport, budget_secs: f64) -> Vec<Check> {
    let hits = r.hits.iter().filter(|&&h| h).count();
    vec![
        Check::new(
            "loss below 0.1x initial",
            r.loss_ratio() < 0.1,
            format!("{:.4} -> {:.4} (ratio {:.4})", r.initial.total, r.last.total, r.loss_ratio()),
        ),
        Check::new(
            "fused peak on every labelled cell",
            hits == r.hits.len() && hits > 0,
            format!("{hits}/{}", r.hits.len()),
        ),
        Check::new(
            "runtime",
            r.seconds < budget_secs,
            format!("{:.0} s (< {budget_secs:.0} s)", r.seconds),
        ),
    ]
}

fn mean_iou(model: &Model<f32>, seq: &SequenceRecord, cfg: &TrackerConfig) -> Result<f64> {
    let t = track_sequence(model, seq, cfg)?.trajectory;
    Ok(t.boxes.iter().zip(&seq.boxes).map(|(p, g)| iou(p, g)).sum::<f64>() / seq.boxes.len() as f64)
}

pub fn track_synth_checks(model: &Model<f32>, seeds: usize) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let plain = synth_sequence(&SynthSpec::default(), 0)?.record;
    let fused = TrackerConfig::default();
    let m = mean_iou(model, &plain, &fused)?;
    out.push(Check::new("mean iou without distractors", m >= 0.5, format!("{m:.3} (>= 0.5)")));

    let dis_only = TrackerConfig {
        branch_mix: 1.0,
        ..Default::default()
    };
    let mut wins = 0;
    let mut rows = Vec::new();
    for s in 0..seeds {
        let spec = SynthSpec {
            n_distractors: 2,
            ..Default::default()
        };
        let seq = synth_sequence(&spec, 100 + s as u64)?.record;
        let (f, d) = (mean_iou(model, &seq, &fused)?, mean_iou(model, &seq, &dis_only)?);
        if f >= d {
            wins += 1;
        }
        rows.push(format!("{f:.2}/{d:.2}"));
    }
    let need = (seeds * 7).div_ceil(10);
    out.push(Check::new(
        "fused >= discriminative-only with distractors",
        wins >= need,
        format!("{wins}/{seeds} seeds (need {need}); fused/dis {}", rows.join(" ")),
    ));
    Ok(out)
}
