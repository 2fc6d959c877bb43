use fedsparse::detector::build_model;
use fedsparse::evaluation::{iou, nms, BBox, Detection, GroundTruth};
use fedsparse::sparsifier::{apply_mask, build_mask, global_threshold, SparsityRate};
use fedsparse::{DetectorConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pairwise-matrix reference: walk boxes by descending score and keep one unless a
/// higher-ranked kept box of its class overlaps it above the threshold.
pub fn brute_force_nms(boxes: &[Detection], t: f64) -> Vec<Detection> {
    let n = boxes.len();
    let mut rank: Vec<usize> = (0..n).collect();
    // stable insertion sort so equal scores keep input order
    for i in 1..n {
        let mut j = i;
        while j > 0 && boxes[rank[j - 1]].score < boxes[rank[j]].score {
            rank.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut conflict = vec![vec![false; n]; n];
    for a in 0..n {
        for b in 0..n {
            conflict[a][b] = a != b && boxes[a].class == boxes[b].class && iou(&boxes[a].bbox, &boxes[b].bbox) > t;
        }
    }
    let mut keep = vec![false; n];
    for (pos, &i) in rank.iter().enumerate() {
        keep[i] = rank[..pos].iter().all(|&j| !(keep[j] && conflict[j][i]));
    }
    rank.into_iter().filter(|&i| keep[i]).map(|i| boxes[i]).collect()
}

pub fn random_boxes(r: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    let centers: Vec<(f64, f64)> = (0..5).map(|_| (r.gen_range(10.0..54.0), r.gen_range(10.0..54.0))).collect();
    (0..n)
        .map(|_| {
            let (cx, cy) = centers[r.gen_range(0..centers.len())];
            let bbox = BBox::from_center(
                cx + r.gen_range(-6.0..6.0),
                cy + r.gen_range(-6.0..6.0),
                r.gen_range(4.0..20.0),
                r.gen_range(4.0..20.0),
            );
            // coarse scores so some ties occur
            Detection { bbox, class: r.gen_range(0..3), score: (r.gen_range(0..40) as f64) / 40.0 }
        })
        .collect()
}

/// Random architecture with random γ, some of them repeated to exercise ties.
pub fn random_model(r: &mut ChaCha8Rng) -> ModelParams {
    let blocks = r.gen_range(1..4);
    let widths: Vec<usize> = (0..blocks).map(|_| r.gen_range(2..12)).collect();
    let side = 1 << blocks;
    let cfg = DetectorConfig { channel_widths: widths, input_size: (side, side), grid_size: 1, ..Default::default() };
    let mut m = build_model(&cfg, r.gen()).unwrap();
    let pool: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
    for b in &mut m.blocks {
        for g in b.bn.gamma.data_mut() {
            *g = if r.gen_bool(0.3) { pool[r.gen_range(0..pool.len())] } else { r.gen_range(-1.0..1.0) };
        }
    }
    m
}

pub fn sorted_oracle(m: &ModelParams, s: f64) -> Vec<(usize, usize)> {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (l, b) in m.blocks.iter().enumerate() {
        for (c, g) in b.bn.gamma.data().iter().enumerate() {
            all.push((g.abs(), l, c));
        }
    }
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = (s * all.len() as f64 - 1e-9).ceil() as usize;
    let mut out: Vec<(usize, usize)> = all[..k].iter().map(|&(_, l, c)| (l, c)).collect();
    out.sort();
    out
}

/// Three ground truths and five ranked detections: hit, miss, hit, miss, hit.
pub fn ap_fixture() -> (Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>) {
    let g = |x: f64| GroundTruth { bbox: BBox::new(x, 0.0, x + 10.0, 10.0), class: 0 };
    let d = |x: f64, y: f64, score: f64| Detection { bbox: BBox::new(x, y, x + 10.0, y + 10.0), class: 0, score };
    let dets = vec![d(0.0, 0.0, 0.9), d(100.0, 100.0, 0.8), d(20.0, 0.0, 0.7), d(200.0, 0.0, 0.6), d(40.0, 0.0, 0.5)];
    (vec![dets], vec![vec![g(0.0), g(20.0), g(40.0)]])
}

/// AP of [`ap_fixture`] by hand: precision envelope 1, 2/3 and 3/5 over the recall
/// steps 1/3, 2/3 and 1, summed in ranking order.
pub fn ap_fixture_value() -> f64 {
    100.0 * ((1.0 / 3.0 - 0.0) * 1.0 + (2.0 / 3.0 - 1.0 / 3.0) * (2.0 / 3.0) + (1.0 - 2.0 / 3.0) * (3.0 / 5.0))
}

/// Random `(params, s)` pairs: pruned count is `ceil(s·n)`, the pruned set equals the sort
/// oracle and masking twice is bitwise masking once.
pub fn check_sparsifier_pairs(count: usize) {
    let mut r = ChaCha8Rng::seed_from_u64(42);
    let mut cases = 0;
    while cases < count {
        let m = random_model(&mut r);
        let n: usize = m.blocks.iter().map(|b| b.bn.channels()).sum();
        let s = r.gen_range(0.01..0.9);
        if (s * n as f64).ceil() as usize >= n {
            continue;
        }
        let rate = SparsityRate::new(s).unwrap();
        let t = global_threshold(&m, rate).unwrap();
        let mask = build_mask(&m, t, rate).unwrap();
        let pruned: Vec<(usize, usize)> = mask
            .channels()
            .iter()
            .enumerate()
            .flat_map(|(l, bits)| bits.iter().enumerate().filter(|(_, &k)| !k).map(move |(c, _)| (l, c)))
            .collect();
        assert_eq!(mask.pruned_channels(), (s * n as f64).ceil() as usize);
        assert_eq!(pruned, sorted_oracle(&m, s));
        let once = apply_mask(&m, &mask).unwrap();
        let twice = apply_mask(&once, &mask).unwrap();
        for slot in m.slots() {
            let bits = |p: &ModelParams| p.get(slot).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&once), bits(&twice));
        }
        cases += 1;
    }
}

/// Random 50-box instances against [`brute_force_nms`].
pub fn check_nms_instances(count: usize) {
    let mut r = ChaCha8Rng::seed_from_u64(100);
    for case in 0..count {
        let boxes = random_boxes(&mut r, 50);
        let t = [0.3, 0.45, 0.5, 0.7][case % 4];
        assert_eq!(nms(&boxes, t).unwrap(), brute_force_nms(&boxes, t), "case {case}");
    }
}
