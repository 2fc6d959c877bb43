use fedsparse::dataset::{encode_grid_target, generate, AnnotatedObject, Annotation, SceneSpec};
use fedsparse::detector::{decode, yolo_loss_value, CellTarget, ConfidenceTarget, GridTarget};
use fedsparse::evaluation::BBox;
use fedsparse::{DetectorConfig, LossConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain per-cell reimplementation of the detection loss, averaged over images.
fn loss_oracle(pred: &Tensor, targets: &[GridTarget], boxes: usize, cfg: &LossConfig) -> f64 {
    let [n, s, _, depth] = pred.shape().try_into().unwrap();
    let classes = depth - 5 * boxes;
    let p = |i: usize, r: usize, c: usize, k: usize| pred.data()[((i * s + r) * s + c) * depth + k];
    let overlap = |a: [f64; 4], b: [f64; 4]| {
        let ix = ((a[0] + a[2] / 2.0).min(b[0] + b[2] / 2.0) - (a[0] - a[2] / 2.0).max(b[0] - b[2] / 2.0)).max(0.0);
        let iy = ((a[1] + a[3] / 2.0).min(b[1] + b[3] / 2.0) - (a[1] - a[3] / 2.0).max(b[1] - b[3] / 2.0)).max(0.0);
        let inter = ix * iy;
        inter / (a[2] * a[3] + b[2] * b[3] - inter)
    };
    let mut total = 0.0;
    for i in 0..n {
        for r in 0..s {
            for c in 0..s {
                let mut resp = None;
                if let Some(t) = targets[i].cell(r, c) {
                    let sf = s as f64;
                    let gt = [(c as f64 + t.x) / sf, (r as f64 + t.y) / sf, t.w, t.h];
                    let mut best = (0, -1.0);
                    for b in 0..boxes {
                        let bx = [(c as f64 + p(i, r, c, 5 * b)) / sf, (r as f64 + p(i, r, c, 5 * b + 1)) / sf, p(i, r, c, 5 * b + 2), p(i, r, c, 5 * b + 3)];
                        let o = overlap(bx, gt);
                        if o > best.1 {
                            best = (b, o);
                        }
                    }
                    let b = best.0;
                    let coord = (p(i, r, c, 5 * b) - t.x).powi(2)
                        + (p(i, r, c, 5 * b + 1) - t.y).powi(2)
                        + (p(i, r, c, 5 * b + 2).sqrt() - t.w.sqrt()).powi(2)
                        + (p(i, r, c, 5 * b + 3).sqrt() - t.h.sqrt()).powi(2);
                    let conf_t = if cfg.confidence_target == ConfidenceTarget::Iou { best.1 } else { 1.0 };
                    let conf = (p(i, r, c, 5 * b + 4) - conf_t).powi(2);
                    let class: f64 = (0..classes)
                        .map(|k| {
                            let q = p(i, r, c, 5 * boxes + k);
                            if k == t.class { -q.ln() } else { -(1.0 - q).ln() }
                        })
                        .sum();
                    total += cfg.lambda_coord * coord + cfg.lambda_conf * conf + cfg.lambda_class * class;
                    resp = Some(b);
                }
                for b in 0..boxes {
                    if resp != Some(b) {
                        total += cfg.lambda_noobj * p(i, r, c, 5 * b + 4).powi(2);
                    }
                }
            }
        }
    }
    total / n as f64
}

fn random_case(seed: u64) -> (Tensor, Vec<GridTarget>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, s, boxes, classes) = (3, 4, 2, 3);
    let pred = Tensor::from_fn(&[n, s, s, boxes * 5 + classes], |_| r.gen_range(0.05..0.95));
    let targets = (0..n)
        .map(|_| {
            let mut g = GridTarget::empty(s, classes);
            for k in 0..s * s {
                if r.gen_bool(0.3) {
                    let t = CellTarget {
                        x: r.gen_range(0.0..1.0),
                        y: r.gen_range(0.0..1.0),
                        w: r.gen_range(0.05..0.5),
                        h: r.gen_range(0.05..0.5),
                        class: r.gen_range(0..classes),
                    };
                    g.set(k / s, k % s, t).unwrap();
                }
            }
            g
        })
        .collect();
    (pred, targets)
}

#[test]
fn loss_matches_per_cell_oracle() {
    let weights = LossConfig { lambda_coord: 2.5, lambda_class: 0.7, lambda_conf: 1.3, lambda_noobj: 0.4, ..LossConfig::default() };
    for seed in 0..25 {
        let (pred, targets) = random_case(seed);
        for cfg in [LossConfig::default(), weights, LossConfig { confidence_target: ConfidenceTarget::Iou, ..weights }] {
            let (got, _) = yolo_loss_value(&pred, &targets, &cfg).unwrap();
            let want = loss_oracle(&pred, &targets, 2, &cfg);
            assert!((got.total - want).abs() < 1e-10, "seed {seed}: {} vs {want}", got.total);
        }
    }
}

#[test]
fn decode_hand_fixture() {
    let cfg = DetectorConfig::default();
    let depth = cfg.cell_depth();
    let mut pred = Tensor::zeros(&[1, 4, 4, depth]);
    let mut put = |row: usize, col: usize, b: usize, vals: [f64; 5], probs: [f64; 3]| {
        let base = (row * 4 + col) * depth;
        pred.data_mut()[base + 5 * b..base + 5 * b + 5].copy_from_slice(&vals);
        pred.data_mut()[base + 10..base + 13].copy_from_slice(&probs);
    };
    put(0, 0, 0, [0.5, 0.5, 0.25, 0.25, 0.9], [0.1, 0.8, 0.1]);
    put(2, 1, 1, [0.25, 0.75, 0.5, 0.125, 0.6], [0.7, 0.2, 0.1]);
    put(3, 3, 0, [1.0, 0.0, 0.0625, 1.0, 0.5], [0.0, 0.0, 1.0]);
    // below the threshold
    put(1, 2, 0, [0.5, 0.5, 0.5, 0.5, 0.49], [1.0, 0.0, 0.0]);

    let dets = decode(&pred, &cfg, 0.5).unwrap();
    assert_eq!(dets.len(), 1);
    let got: Vec<(BBox, usize, f64)> = dets[0].iter().map(|d| (d.bbox, d.class, d.score)).collect();
    let want = vec![
        (BBox::new(0.0, 0.0, 16.0, 16.0), 1, 0.9 * 0.8),
        (BBox::new(4.0, 40.0, 36.0, 48.0), 0, 0.6 * 0.7),
        (BBox::new(62.0, 16.0, 66.0, 80.0), 2, 0.5),
    ];
    assert_eq!(got, want);
}

#[test]
fn decode_encode_round_trip() {
    let cfg = DetectorConfig::default();
    let spec = SceneSpec { seed: 3, ..SceneSpec::default() };
    for sample in generate(&spec, 100).unwrap() {
        let target = encode_grid_target(&sample.annotation, 4, (64, 64), 3).unwrap();
        let depth = cfg.cell_depth();
        let mut pred = Tensor::zeros(&[1, 4, 4, depth]);
        for (k, t) in target.cells().iter().enumerate() {
            if let Some(t) = t {
                let base = k * depth;
                pred.data_mut()[base..base + 5].copy_from_slice(&[t.x, t.y, t.w, t.h, 1.0]);
                pred.data_mut()[base + 10 + t.class] = 1.0;
            }
        }
        let dets = decode(&pred, &cfg, 0.5).unwrap().remove(0);
        assert_eq!(dets.len(), sample.annotation.objects.len());
        for obj in &sample.annotation.objects {
            let (cx, cy) = obj.bbox.center();
            let d = dets
                .iter()
                .filter(|d| d.class == obj.class)
                .min_by(|a, b| {
                    let dist = |d: &&fedsparse::evaluation::Detection| (d.bbox.center().0 - cx).abs() + (d.bbox.center().1 - cy).abs();
                    dist(a).total_cmp(&dist(b))
                })
                .expect("object decoded");
            for (a, b) in [(d.bbox.x_min, obj.bbox.x_min), (d.bbox.y_min, obj.bbox.y_min), (d.bbox.x_max, obj.bbox.x_max), (d.bbox.y_max, obj.bbox.y_max)] {
                assert!((a - b).abs() <= 0.5, "{d:?} vs {obj:?}");
            }
        }
    }
}

#[test]
fn encode_grid_target_arithmetic() {
    let ann = Annotation { objects: vec![AnnotatedObject { class: 2, bbox: BBox::new(4.0, 4.0, 16.0, 16.0) }] };
    let t = encode_grid_target(&ann, 4, (64, 64), 3).unwrap();
    let c = t.cell(0, 0).unwrap();
    assert_eq!((c.x, c.y, c.w, c.h, c.class), (0.625, 0.625, 0.1875, 0.1875, 2));
    assert_eq!(t.object_count(), 1);
}
