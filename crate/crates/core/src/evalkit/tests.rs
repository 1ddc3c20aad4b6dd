use super::*;
use proptest::prelude::*;

fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
    BBox::new(x, y, w, h)
}

/// Boxes whose centers sit at the given distances to the right of the origin box.
fn shifted(dists: &[f64]) -> (Vec<BBox>, Vec<BBox>) {
    let gt = vec![b(0.0, 0.0, 10.0, 10.0); dists.len()];
    let pred = dists.iter().map(|&d| b(d, 0.0, 10.0, 10.0)).collect();
    (pred, gt)
}

#[test]
fn iou_and_cle_fixtures() {
    assert_eq!(iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 0.0, 2.0, 2.0)), 1.0 / 3.0);
    assert_eq!(iou(&b(0.0, 0.0, 2.0, 2.0), &b(0.0, 0.0, 2.0, 2.0)), 1.0);
    assert_eq!(iou(&b(0.0, 0.0, 2.0, 2.0), &b(5.0, 5.0, 2.0, 2.0)), 0.0);
    assert_eq!(iou(&b(0.0, 0.0, 0.0, 0.0), &b(0.0, 0.0, 0.0, 0.0)), 0.0);
    let (p, g) = (b(3.0, 4.0, 2.0, 2.0), b(0.0, 0.0, 2.0, 2.0));
    assert_eq!(cle(&p, &g), 5.0);
    assert_eq!(cle(&g, &p), 5.0);
    assert_eq!(cle(&g, &g), 0.0);
}

#[test]
fn precision_fixtures() {
    let (p, g) = shifted(&[5.0, 25.0, 10.0]);
    let (curve, pre20) = precision_curve(&p, &g).unwrap();
    assert!((pre20 - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(curve.len(), 51);
    assert!(curve.windows(2).all(|w| w[0] <= w[1]));
    let (perfect, _) = precision_curve(&g, &g).unwrap();
    assert!(perfect.iter().all(|&v| v == 1.0));
    let (far, _) = shifted(&[60.0, 80.0]);
    let (none, _) = precision_curve(&far, &g[..2]).unwrap();
    assert!(none.iter().all(|&v| v == 0.0));
    assert!(matches!(precision_curve(&p[..2], &g), Err(Error::Input(_))));
}

#[test]
fn success_fixtures() {
    let g = vec![b(0.0, 0.0, 10.0, 10.0); 3];
    let (curve, auc) = success_curve(&g, &g).unwrap();
    assert_eq!(auc, 20.0 / 21.0);
    assert_eq!(curve[20], 0.0);
    // IoU exactly 0.5: width 5 inside width 10
    let half = vec![b(0.0, 0.0, 5.0, 10.0); 2];
    let (curve, auc) = success_curve(&half, &g[..2]).unwrap();
    assert!((auc - 10.0 / 21.0).abs() < 1e-12);
    assert!(curve[..10].iter().all(|&v| v == 1.0) && curve[10..].iter().all(|&v| v == 0.0));
    let miss = vec![b(50.0, 50.0, 10.0, 10.0); 3];
    assert_eq!(success_curve(&miss, &g).unwrap().1, 0.0);
    assert!(success_curve(&miss[..1], &g).is_err());
}

proptest! {
    #[test]
    fn iou_symmetric_and_scale_invariant(
        ax in -50.0..50.0f64, ay in -50.0..50.0f64, aw in 0.1..40.0f64, ah in 0.1..40.0f64,
        bx in -50.0..50.0f64, by in -50.0..50.0f64, bw in 0.1..40.0f64, bh in 0.1..40.0f64,
        s in 0.01..100.0f64,
    ) {
        let (a, c) = (b(ax, ay, aw, ah), b(bx, by, bw, bh));
        let v = iou(&a, &c);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&c, &a));
        let sc = |q: BBox| b(q.x * s, q.y * s, q.w * s, q.h * s);
        prop_assert!((iou(&sc(a), &sc(c)) - v).abs() < 1e-12);
    }

    #[test]
    fn self_overlap_is_exactly_one(
        x in -500.0..500.0f64, y in -500.0..500.0f64, w in 0.1..300.0f64, h in 0.1..300.0f64,
    ) {
        let a = b(x, y, w, h);
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn curves_monotone(d in proptest::collection::vec(0.0..80.0f64, 1..20)) {
        let (p, g) = shifted(&d);
        let (pc, _) = precision_curve(&p, &g).unwrap();
        let (sc, auc) = success_curve(&p, &g).unwrap();
        prop_assert!(pc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(sc.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!((0.0..=1.0).contains(&auc));
    }
}

/// Replays a fixed per-frame script; `init` only records the frame index.
struct Scripted {
    script: Vec<BBox>,
    frame: usize,
    inits: Vec<usize>,
}

impl TrackerRunner for Scripted {
    fn init(&mut self, frame: &GrayImage, _bbox: BBox) -> Result<()> {
        // frames encode their index in pixel (0, 0)
        self.frame = frame.get_pixel(0, 0).0[0] as usize;
        self.inits.push(self.frame);
        Ok(())
    }

    fn track(&mut self, frame: &GrayImage) -> Result<BBox> {
        self.frame = frame.get_pixel(0, 0).0[0] as usize;
        Ok(self.script[self.frame])
    }
}

fn indexed_sequence(n: usize) -> SequenceRecord {
    SequenceRecord {
        name: "fixture".into(),
        frames: (0..n).map(|i| GrayImage::from_pixel(4, 4, image::Luma([i as u8]))).collect(),
        boxes: vec![b(0.0, 0.0, 10.0, 10.0); n],
        class_id: 0,
        domain: crate::dataio::Domain::Tir,
    }
}

#[test]
fn vot_lite_perfect_and_single_failure() {
    let seq = indexed_sequence(30);
    let mut echo = Scripted {
        script: seq.boxes.clone(),
        frame: 0,
        inits: vec![],
    };
    let r = vot_lite(&mut echo, &seq, VotLiteParams::default()).unwrap();
    assert_eq!((r.accuracy, r.robustness, r.eao_lite), (1.0, 0, 1.0));

    let mut script = seq.boxes.clone();
    script[7] = b(100.0, 100.0, 10.0, 10.0);
    let mut once = Scripted {
        script,
        frame: 0,
        inits: vec![],
    };
    let r = vot_lite(&mut once, &seq, VotLiteParams::default()).unwrap();
    assert_eq!(r.robustness, 1);
    assert_eq!(r.failures, vec![7]);
    assert_eq!(once.inits, vec![0, 12]);
}

#[test]
fn vot_lite_planted_failures_hand_computed() {
    // per-frame overlap w/10 from a box of width w inside the 10×10 truth;
    // frames 4 and 12 miss entirely
    let widths = [10.0, 9.0, 8.0, 7.0, -1.0, 5.0, 5.0, 5.0, 5.0, 10.0, 6.0, 5.0, -1.0, 5.0, 5.0, 5.0, 5.0, 10.0, 4.0, 3.0];
    let seq = indexed_sequence(widths.len());
    let script = widths
        .iter()
        .map(|&w| if w < 0.0 { b(50.0, 50.0, 10.0, 10.0) } else { b(0.0, 0.0, w, 10.0) })
        .collect();
    let mut runner = Scripted {
        script,
        frame: 0,
        inits: vec![],
    };
    let p = VotLiteParams {
        reinit_skip: 5,
        burnin: 2,
    };
    let r = vot_lite(&mut runner, &seq, p).unwrap();
    assert_eq!(runner.inits, vec![0, 9, 17]);
    assert_eq!(r.failures, vec![4, 12]);
    assert_eq!(r.robustness, 2);
    // overlaps: 1 .9 .8 .7 | 0×5 | 1 .6 .5 | 0×5 | 1 .4 .3  → sum 7.2
    assert!((r.eao_lite - 7.2 / 20.0).abs() < 1e-9);
    // scored frames: 2, 3, 11, 19 → (.8 + .7 + .5 + .3) / 4
    assert!((r.accuracy - 2.3 / 4.0).abs() < 1e-9);
}

#[test]
fn vot_lite_rejects_short_sequences() {
    let seq = indexed_sequence(6);
    let mut r = Scripted {
        script: seq.boxes.clone(),
        frame: 0,
        inits: vec![],
    };
    assert!(matches!(vot_lite(&mut r, &seq, VotLiteParams::default()), Err(Error::Input(_))));
}

fn two_sequence_report() -> MetricReport {
    let (p1, g1) = shifted(&[5.0, 25.0, 10.0]);
    let (p2, g2) = shifted(&[0.0, 0.0]);
    MetricReport {
        protocol: Protocol::Ptb,
        sequences: vec![
            SequenceMetrics::one_pass("a", &p1, &g1).unwrap(),
            SequenceMetrics::one_pass("b<&>", &p2, &g2).unwrap(),
        ],
    }
}

#[test]
fn aggregate_is_unweighted_mean() {
    let r = two_sequence_report();
    let agg = r.aggregate();
    assert!((agg.pre20.unwrap() - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
    let want_auc = (r.sequences[0].auc.unwrap() + r.sequences[1].auc.unwrap()) / 2.0;
    assert!((agg.auc.unwrap() - want_auc).abs() < 1e-12);
    assert_eq!(agg.accuracy, None);
}

#[test]
fn report_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let r = two_sequence_report();
    write_report(&r, dir.path()).unwrap();
    let back = read_sequence_csv(&dir.path().join(SEQUENCE_FILE)).unwrap();
    for (a, b) in back.iter().zip(&r.sequences) {
        assert_eq!(a.name, b.name);
        assert!((a.pre20.unwrap() - b.pre20.unwrap()).abs() < 1e-9);
        assert!((a.auc.unwrap() - b.auc.unwrap()).abs() < 1e-9);
        assert_eq!(a.eao_lite, None);
    }
    let agg = read_sequence_csv(&dir.path().join(AGGREGATE_FILE)).unwrap();
    assert_eq!(agg.len(), 1);
    assert!((agg[0].pre20.unwrap() - r.aggregate().pre20.unwrap()).abs() < 1e-9);
    let text = fs_read(&dir.path().join(SEQUENCE_FILE));
    assert!(text.starts_with("# protocol: ptb"));
    for svg in ["precision.svg", "success.svg"] {
        let s = fs_read(&dir.path().join(svg));
        let doc = roxmltree::Document::parse(&s).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert_eq!(doc.descendants().filter(|n| n.has_tag_name("path")).count(), 3);
    }
    let curve = fs_read(&dir.path().join("curves/a_success.csv"));
    assert!(curve.starts_with("tau,value\n0.0,"));
}

#[test]
fn vot_header_names_the_caveat() {
    let dir = tempfile::tempdir().unwrap();
    let r = MetricReport {
        protocol: Protocol::VotLite,
        sequences: vec![SequenceMetrics::reset_based(
            "s",
            &VotLiteResult {
                accuracy: 0.5,
                robustness: 2,
                eao_lite: 0.25,
                overlaps: vec![],
                failures: vec![],
            },
        )],
    };
    write_report(&r, dir.path()).unwrap();
    let text = fs_read(&dir.path().join(SEQUENCE_FILE));
    assert!(text.contains("protocol: vot-lite"));
    assert!(text.contains("not the official"));
    let back = read_sequence_csv(&dir.path().join(SEQUENCE_FILE)).unwrap();
    assert_eq!(back[0].robustness, Some(2.0));
    assert!(!dir.path().join("precision.svg").exists());
}

fn fs_read(p: &std::path::Path) -> String {
    std::fs::read_to_string(p).unwrap()
}
