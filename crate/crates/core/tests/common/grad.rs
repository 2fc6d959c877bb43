//! Central finite-difference checks (step 1e-3) for every tape op and the full training
//! objective. The error of a case is `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
//! over all of its inputs.
//!
//! Inputs to ops with kinks (leaky ReLU, |x|, max-pool) are drawn away from the kink so
//! the step never straddles it. Detection-loss cases are drawn so that the responsible box
//! of every object cell wins its IoU comparison by a clear margin.

use fedsparse::autodiff::LEAKY_SLOPE;
use fedsparse::detector::{build_model, forward, responsible_box, yolo_loss, CellTarget, GridTarget, Slot};
use fedsparse::sparsifier::l1_penalty;
use fedsparse::{DetectorConfig, GradTape, LossConfig, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const CASES: u64 = 20;

/// Op name, case seed and relative error.
pub type Case = (&'static str, u64, f64);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Values with |x| in [0.05, 1] and a random sign.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(0.05..1.0);
        if r.gen_bool(0.5) { m } else { -m }
    })
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 { 0.0 } else { diff / scale }
}

/// Checks `f(inputs)` contracted with a fixed random weight tensor, so every output
/// element receives a distinct upstream gradient.
fn check(seed: u64, inputs: Vec<Tensor>, f: impl Fn(&mut GradTape, &[Var]) -> Var) -> f64 {
    let build = |tape: &mut GradTape, values: &[Tensor]| -> (Var, Vec<Var>) {
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t)).collect();
        let out = f(tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let mut r = rng(seed ^ 0xabcdef);
        let w = tape.constant(uniform(&shape, -1.0, 1.0, &mut r));
        let prod = tape.mul(out, w).unwrap();
        (tape.sum(prod), vars)
    };
    let mut tape = GradTape::new();
    let (loss, vars) = build(&mut tape, &inputs);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|v| grads.get(*v).unwrap().to_vec()).collect();

    let eval = |values: &[Tensor]| {
        let mut t = GradTape::new();
        let (l, _) = build(&mut t, values);
        t.value(l).item().unwrap()
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut values = inputs.clone();
    for i in 0..values.len() {
        for j in 0..values[i].len() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + STEP;
            let plus = eval(&values);
            values[i].data_mut()[j] = orig - STEP;
            let minus = eval(&values);
            values[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * STEP));
        }
    }
    rel_error(&analytic, &numeric)
}

pub fn conv2d() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(seed);
        let (n, c_in, c_out) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let (h, w) = (r.gen_range(3..7), r.gen_range(3..7));
        let k = r.gen_range(1..4).min(h).min(w);
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..2);
        let x = uniform(&[n, c_in, h, w], -1.0, 1.0, &mut r);
        let kern = uniform(&[c_out, c_in, k, k], -1.0, 1.0, &mut r);
        out.push(("conv2d", seed, check(seed, vec![x, kern], |t, v| t.conv2d(v[0], v[1], stride, pad).unwrap())));
    }
    out
}

pub fn add_channel_bias() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(seed);
        let (n, c) = (r.gen_range(1..3), r.gen_range(1..5));
        let x = uniform(&[n, c, 3, 2], -1.0, 1.0, &mut r);
        let b = uniform(&[c], -1.0, 1.0, &mut r);
        out.push(("add_channel_bias", seed, check(seed, vec![x, b], |t, v| t.add_channel_bias(v[0], v[1]).unwrap())));
    }
    out
}

pub fn batch_norm_train() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(seed);
        let (n, c) = (r.gen_range(1..4), r.gen_range(1..4));
        let x = uniform(&[n, c, 3, 3], -2.0, 2.0, &mut r);
        let g = uniform(&[c], 0.2, 2.0, &mut r);
        let b = uniform(&[c], -1.0, 1.0, &mut r);
        out.push(("batch_norm_train", seed, check(seed, vec![x, g, b], |t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0)));
    }
    out
}

pub fn batch_norm_eval() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(seed);
        let c = r.gen_range(1..4);
        let x = uniform(&[2, c, 2, 3], -2.0, 2.0, &mut r);
        let g = uniform(&[c], -2.0, 2.0, &mut r);
        let b = uniform(&[c], -1.0, 1.0, &mut r);
        let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.1..3.0)).collect();
        out.push(("batch_norm_eval", seed, check(seed, vec![x, g, b], |t, v| {
            t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap()
        })));
    }
    out
}

pub fn leaky_relu() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(seed);
        let x = away_from_zero(&[2, 3, 4], &mut r);
        out.push(("leaky_relu", seed, check(seed, vec![x], |t, v| t.leaky_relu(v[0], LEAKY_SLOPE))));
    }
    out
}

pub fn sigmoid() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(seed);
        let x = uniform(&[3, 5], -6.0, 6.0, &mut r);
        out.push(("sigmoid", seed, check(seed, vec![x], |t, v| t.sigmoid(v[0]))));
    }
    out
}

pub fn max_pool2d() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(seed);
        let (n, c) = (r.gen_range(1..3), r.gen_range(1..3));
        let (size, stride) = [(2, 2), (2, 1), (3, 2)][r.gen_range(0..3)];
        let len = n * c * 36;
        // Distinct values 0.01 apart so no window has a near tie.
        let mut levels: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
        levels.shuffle(&mut r);
        let x = Tensor::new(vec![n, c, 6, 6], levels).unwrap();
        out.push(("max_pool2d", seed, check(seed, vec![x], |t, v| t.max_pool2d(v[0], size, stride).unwrap())));
    }
    out
}

pub fn add_and_mul() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(seed);
        let a = uniform(&[2, 3, 2], -2.0, 2.0, &mut r);
        let b = uniform(&[2, 3, 2], -2.0, 2.0, &mut r);
        out.push(("add", seed, check(seed, vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap())));
        out.push(("mul", seed, check(seed, vec![a.clone(), b], |t, v| t.mul(v[0], v[1]).unwrap())));
        // Same variable on both sides.
        out.push(("mul_self", seed, check(seed, vec![a], |t, v| t.mul(v[0], v[0]).unwrap())));
    }
    out
}

pub fn scale_and_reductions() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(seed);
        let x = uniform(&[4, 3], -2.0, 2.0, &mut r);
        let factor = r.gen_range(-3.0..3.0);
        out.push(("scale", seed, check(seed, vec![x.clone()], |t, v| t.scale(v[0], factor))));
        out.push(("sum", seed, check(seed, vec![x.clone()], |t, v| t.sum(v[0]))));
        out.push(("mean", seed, check(seed, vec![x], |t, v| t.mean(v[0]))));
        let y = away_from_zero(&[7], &mut r);
        out.push(("abs_sum", seed, check(seed, vec![y], |t, v| t.abs_sum(v[0]))));
    }
    out
}

pub fn reshape_flatten_transpose() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(seed);
        let x = uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut r);
        out.push(("reshape", seed, check(seed, vec![x.clone()], |t, v| t.reshape(v[0], &[6, 4]).unwrap())));
        out.push(("flatten", seed, check(seed, vec![x.clone()], |t, v| t.flatten(v[0]).unwrap())));
        out.push(("nchw_to_nhwc", seed, check(seed, vec![x], |t, v| t.nchw_to_nhwc(v[0]).unwrap())));
    }
    out
}

fn random_targets(n: usize, s: usize, classes: usize, r: &mut ChaCha8Rng) -> Vec<GridTarget> {
    (0..n)
        .map(|_| {
            let mut g = GridTarget::empty(s, classes);
            for row in 0..s {
                for col in 0..s {
                    if r.gen_bool(0.5) {
                        let t = CellTarget {
                            x: r.gen_range(0.1..0.9),
                            y: r.gen_range(0.1..0.9),
                            w: r.gen_range(0.1..0.6),
                            h: r.gen_range(0.1..0.6),
                            class: r.gen_range(0..classes),
                        };
                        g.set(row, col, t).unwrap();
                    }
                }
            }
            g
        })
        .collect()
}

const IOU_MARGIN: f64 = 0.02;

/// True when, in every object cell, the best box overlaps the object and beats the
/// runner-up by at least `IOU_MARGIN`.
fn clear_assignment(pred: &Tensor, targets: &[GridTarget], boxes: usize) -> bool {
    let s = targets[0].grid_size();
    let depth = pred.shape()[3];
    targets.iter().enumerate().all(|(i, g)| {
        (0..s * s).all(|k| {
            let (row, col) = (k / s, k % s);
            let Some(t) = g.cell(row, col) else { return true };
            let at = ((i * s + row) * s + col) * depth;
            let cell = &pred.data()[at..at + depth];
            let (best, best_iou) = responsible_box(cell, boxes, t, row, col, s);
            let runner_up = (0..boxes)
                .filter(|&b| b != best)
                .map(|b| {
                    let mut one = cell.to_vec();
                    one.copy_within(b * 5..b * 5 + 5, 0);
                    responsible_box(&one[..], 1, t, row, col, s).1
                })
                .fold(f64::NEG_INFINITY, f64::max);
            best_iou > IOU_MARGIN && best_iou - runner_up > IOU_MARGIN
        })
    })
}

/// Seeds whose generated case passes `accept`, until `CASES` are found.
fn accepted_seeds(base: u64, mut accept: impl FnMut(u64) -> bool) -> Vec<u64> {
    let seeds: Vec<u64> = (base..base + 50 * CASES).filter(|&s| accept(s)).take(CASES as usize).collect();
    assert_eq!(seeds.len(), CASES as usize, "too few usable cases");
    seeds
}

fn loss_case(seed: u64) -> (Tensor, Vec<GridTarget>) {
    let mut r = rng(seed);
    let (n, s, classes) = (2, 2, 3);
    let depth = 2 * 5 + classes;
    let pred = uniform(&[n, s, s, depth], 0.1, 0.9, &mut r);
    (pred, random_targets(n, s, classes, &mut r))
}

pub fn detection_loss() -> Vec<Case> {
    let cfg = LossConfig::default();
    let mut out = Vec::new();
    for seed in accepted_seeds(0, |s| {
        let (p, t) = loss_case(s);
        clear_assignment(&p, &t, 2)
    }) {
        let (pred, targets) = loss_case(seed);
        let mut tape = GradTape::new();
        let p = tape.param(&pred);
        let (loss, _) = yolo_loss(&mut tape, p, &targets, &cfg).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(p).unwrap().to_vec();
        let value = |t: &Tensor| {
            let mut tape = GradTape::new();
            let p = tape.param(t);
            let (l, _) = yolo_loss(&mut tape, p, &targets, &cfg).unwrap();
            tape.value(l).item().unwrap()
        };
        let mut numeric = Vec::new();
        let mut x = pred.clone();
        for j in 0..x.len() {
            let o = x.data()[j];
            x.data_mut()[j] = o + STEP;
            let plus = value(&x);
            x.data_mut()[j] = o - STEP;
            let minus = value(&x);
            x.data_mut()[j] = o;
            numeric.push((plus - minus) / (2.0 * STEP));
        }
        out.push(("detection_loss", seed, rel_error(&analytic, &numeric)));
    }
    out
}

/// Also asserts that the library helper yields exactly `λ·sign(γ)` for each gamma.
pub fn l1_penalty_gradient() -> Vec<Case> {
    let cfg = DetectorConfig { channel_widths: vec![3, 4], input_size: (8, 8), grid_size: 2, ..Default::default() };
    let mut out = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(seed);
        let mut model = build_model(&cfg, seed).unwrap();
        for b in &mut model.blocks {
            b.bn.gamma = away_from_zero(b.bn.gamma.shape(), &mut r);
        }
        let lambda = r.gen_range(1e-5..1e-2);
        let gammas: Vec<Tensor> = model.blocks.iter().map(|b| b.bn.gamma.clone()).collect();
        out.push(("l1_penalty", seed, check(seed, gammas, |t, v| {
            let abs: Vec<Var> = v.iter().map(|&g| t.abs_sum(g)).collect();
            let total = abs[1..].iter().fold(abs[0], |acc, &a| t.add(acc, a).unwrap());
            t.scale(total, lambda)
        })));
        // The library helper, which takes the model's gamma vars directly.
        let mut tape = GradTape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 8, 8], 0.5));
        let pass = forward(&mut tape, &model, x, true).unwrap();
        let pen = l1_penalty(&mut tape, &pass.vars, lambda).unwrap();
        let grads = tape.backward(pen).unwrap();
        for (i, b) in model.blocks.iter().enumerate() {
            let g = grads.get(pass.vars.get(Slot::Gamma(i)).unwrap()).unwrap();
            for (gv, &gamma) in g.iter().zip(b.bn.gamma.data()) {
                assert_eq!(*gv, lambda * gamma.signum());
            }
        }
    }
    out
}

/// Mirrors `forward` in training mode and records where every kink of the network
/// sits: the sign of each leaky ReLU input, the argmax of each pooling window and the
/// responsible box of each object cell.
fn kink_signature(model: &fedsparse::ModelParams, images: &Tensor, targets: &[GridTarget]) -> (Tensor, Vec<usize>) {
    let mut sig = Vec::new();
    let mut tape = GradTape::new();
    let mut x = tape.constant(images.clone());
    for block in &model.blocks {
        let k = tape.param(&block.kernel);
        let g = tape.param(&block.bn.gamma);
        let b = tape.param(&block.bn.beta);
        let conv = tape.conv2d(x, k, 1, 1).unwrap();
        let (normed, _) = tape.batch_norm_train(conv, g, b, block.bn.epsilon).unwrap();
        sig.extend(tape.value(normed).data().iter().map(|&v| usize::from(v > 0.0)));
        let act = tape.leaky_relu(normed, LEAKY_SLOPE);
        let a = tape.value(act);
        let (nc, h, w) = (a.shape()[0] * a.shape()[1], a.shape()[2], a.shape()[3]);
        for plane in 0..nc {
            for i in (0..h).step_by(2) {
                for j in (0..w).step_by(2) {
                    let at = |di: usize, dj: usize| a.data()[(plane * h + i + di) * w + j + dj];
                    let best = (0..4).fold(0, |best, q| if at(q / 2, q % 2) > at(best / 2, best % 2) { q } else { best });
                    sig.push(best);
                }
            }
        }
        x = tape.max_pool2d(act, 2, 2).unwrap();
    }
    let hk = tape.param(&model.head.kernel);
    let hb = tape.param(&model.head.bias);
    let head = tape.conv2d(x, hk, 1, 0).unwrap();
    let head = tape.add_channel_bias(head, hb).unwrap();
    let nhwc = tape.nchw_to_nhwc(head).unwrap();
    let out = tape.sigmoid(nhwc);
    let pred = tape.value(out).clone();
    let cfg = model.config();
    let (s, depth) = (cfg.grid_size, pred.shape()[3]);
    for (i, g) in targets.iter().enumerate() {
        for k in 0..s * s {
            if let Some(t) = g.cell(k / s, k % s) {
                let at = (i * s * s + k) * depth;
                sig.push(responsible_box(&pred.data()[at..at + depth], cfg.boxes_per_cell, t, k / s, k % s, s).0);
            }
        }
    }
    (pred, sig)
}

/// Relative error of one full-objective case, or `None` when some probe step moves
/// the network across a kink.
fn full_objective_case(seed: u64) -> Option<f64> {
    let cfg = DetectorConfig {
        channel_widths: vec![3, 4],
        input_size: (8, 8),
        grid_size: 2,
        ..DetectorConfig::default()
    };
    let loss_cfg = LossConfig::default();
    let lambda = 0.05;
    let mut r = rng(1000 + seed);
    let mut model = build_model(&cfg, seed).unwrap();
    for b in &mut model.blocks {
        b.bn.gamma = Tensor::from_fn(b.bn.gamma.shape(), |_| r.gen_range(0.3..1.5));
        b.bn.beta = uniform(b.bn.beta.shape(), -0.5, 0.5, &mut r);
    }
    let images = uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut r);
    let targets = random_targets(2, 2, cfg.num_classes, &mut r);

    let objective = |m: &fedsparse::ModelParams, tape: &mut GradTape| {
        let x = tape.constant(images.clone());
        let pass = forward(tape, m, x, true).unwrap();
        let (det, _) = yolo_loss(tape, pass.output, &targets, &loss_cfg).unwrap();
        let pen = l1_penalty(tape, &pass.vars, lambda).unwrap();
        (tape.add(det, pen).unwrap(), pass.vars, pass.output)
    };
    let mut tape = GradTape::new();
    let (loss, vars, output) = objective(&model, &mut tape);
    let (replica, base) = kink_signature(&model, &images, &targets);
    assert_eq!(tape.value(output).data(), replica.data(), "signature replica diverged from forward");
    let grads = tape.backward(loss).unwrap();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for slot in model.trainable_slots() {
        analytic.extend_from_slice(grads.get(vars.get(slot).unwrap()).unwrap());
        for j in 0..model.get(slot).len() {
            let mut probe = model.clone();
            let o = probe.get(slot).data()[j];
            let mut values = [0.0; 2];
            for (v, x) in values.iter_mut().zip([o + STEP, o - STEP]) {
                probe.get_mut(slot).data_mut()[j] = x;
                if kink_signature(&probe, &images, &targets).1 != base {
                    return None;
                }
                let mut t = GradTape::new();
                let (l, _, _) = objective(&probe, &mut t);
                *v = t.value(l).item().unwrap();
            }
            numeric.push((values[0] - values[1]) / (2.0 * STEP));
        }
    }
    Some(rel_error(&analytic, &numeric))
}

/// Every trainable parameter of a small detector under `L + λ·Σ|γ|` on a 2-image batch.
/// Cases whose probes cross a kink are skipped; panics if too many are.
pub fn full_objective() -> Vec<Case> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for seed in 0..50 * CASES {
        if out.len() == CASES as usize {
            break;
        }
        match full_objective_case(seed) {
            Some(err) => out.push(("full_objective", seed, err)),
            None => skipped += 1,
        }
    }
    assert_eq!(out.len(), CASES as usize, "only {} kink-free cases ({skipped} skipped)", out.len());
    assert!(skipped <= 4 * out.len(), "{skipped} cases crossed a kink");
    out
}

/// Every op family, in order.
pub fn all() -> Vec<Case> {
    [
        conv2d, add_channel_bias, batch_norm_train, batch_norm_eval, leaky_relu, sigmoid, max_pool2d, add_and_mul,
        scale_and_reductions, reshape_flatten_transpose, detection_loss, l1_penalty_gradient, full_objective,
    ]
    .into_iter()
    .flat_map(|f| f())
    .collect()
}
