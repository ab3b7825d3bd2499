//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,2,3` runs a subset, `ACCEPTANCE_OUT=<dir>` keeps the
//! training artifacts, `ACCEPTANCE_STRICT=1` makes directional criteria blocking.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::array;
use num_bigint::BigInt;
use num_traits::{Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use weakdet::active::{build_active_set, find_double_prediction, ActiveConfig, ImageDetections};
use weakdet::data::{generate_synthetic, ClassCounts, DatasetManifest, Split, SyntheticConfig};
use weakdet::detector::{AnchorConfig, Checkpoint, ClassScores, Detector, DetectorConfig, TargetConfig};
use weakdet::eval::{corloc, evaluate_detections, fraction_detected, mean_average_precision, ApConvention, EvalThresholds};
use weakdet::geometry::{iou, nms, Annotation, BoundingBox, ClassLabel, Detection, NmsMode};
use weakdet::harness::{
    active_retrain, best_run, read_step_log, resume, run_schedule_study, train, StudyConfig, StudyRow, TrainConfig,
};
use weakdet::rng::rng_for;
use weakdet::schedule::AlphaSchedule;
use weakdet::weak::{select_weak_target, weak_loss, weak_loss_grad, ClassWeights};

/// Criteria whose failure is reported but does not fail the run unless strict.
const DIRECTIONAL: [u32; 1] = [7];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x00ac_ce97 ^ tag)
}

// ---------------------------------------------------------------- criterion 1

/// `(mantissa, shift)` with `x = mantissa / 2^shift`, for finite non-negative `x`.
fn dyadic(x: f64) -> (BigInt, u32) {
    assert!(x.is_finite() && x >= 0.0);
    if x == 0.0 {
        return (BigInt::zero(), 0);
    }
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mant, e) = if exp == 0 { (frac, -1074) } else { (frac | (1 << 52), exp - 1075) };
    if e >= 0 {
        (BigInt::from(mant) << e as usize, 0)
    } else {
        (BigInt::from(mant), (-e) as u32)
    }
}

/// `|x - num/den| <= tol_inv^-1`, evaluated exactly.
fn close_to_rational(x: f64, num: &BigInt, den: &BigInt, tol_inv: u64) -> bool {
    let (m, shift) = dyadic(x);
    let scale = BigInt::from(1) << shift as usize;
    let diff = (&m * den - num * &scale).abs();
    diff * BigInt::from(tol_inv) <= den * &scale
}

struct Fixed {
    one: BigInt,
}

impl Fixed {
    fn new(digits: u32) -> Self {
        Fixed {
            one: BigInt::from(10).pow(digits),
        }
    }

    fn mul(&self, a: &BigInt, b: &BigInt) -> BigInt {
        a * b / &self.one
    }

    /// ln(10/9) = 2 atanh(1/19).
    fn ln_ten_ninths(&self) -> BigInt {
        let mut sum = BigInt::zero();
        let mut pow = BigInt::from(19);
        let mut k = 1u32;
        loop {
            let term: BigInt = &self.one * 2 / (&pow * k);
            if term.is_zero() {
                return sum;
            }
            sum += term;
            pow *= 361;
            k += 2;
        }
    }

    fn exp_pos(&self, y: &BigInt) -> BigInt {
        let mut sum = self.one.clone();
        let mut term = self.one.clone();
        let mut k = 1u32;
        loop {
            term = self.mul(&term, y) / k;
            if term.is_zero() {
                return sum;
            }
            sum += &term;
            k += 1;
        }
    }

    fn fixed_of(&self, x: f64) -> BigInt {
        let (m, shift) = dyadic(x);
        (m * &self.one) >> shift as usize
    }
}

/// Exact value of a rational schedule as `num / den`.
fn rational_alpha(s: AlphaSchedule, step: u64, total: u64) -> (BigInt, BigInt) {
    let (st, tt) = (BigInt::from(step), BigInt::from(total));
    match s {
        AlphaSchedule::Constant => (BigInt::from(1), BigInt::from(1)),
        AlphaSchedule::Linear => (&tt + st * 99, tt * 100),
        AlphaSchedule::Polynomial { exponent } => {
            let tp = tt.pow(exponent);
            (&tp + st.pow(exponent) * 99, tp * 100)
        }
        AlphaSchedule::InverseExponential => unreachable!(),
    }
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let fx = Fixed::new(80);
    let ln09 = fx.ln_ten_ninths();
    let tol = &fx.one / BigInt::from(1_000_000_000u64);
    let mut r = rng(1);
    let mut failures = Vec::new();

    for s in AlphaSchedule::PUBLISHED {
        for _ in 0..1000 {
            let total: u64 = if r.random_bool(0.3) {
                r.random_range(1..=50)
            } else {
                (10f64.powf(r.random_range(1.0..5.5))) as u64
            };
            let step = r.random_range(0..=total);
            let a = s.alpha_at(step, total).unwrap();
            let ok = match s {
                AlphaSchedule::InverseExponential => {
                    // 0.9^(step/2000) = exp(-step ln(10/9) / 2000)
                    let y = &ln09 * BigInt::from(step) / 2000u32;
                    let d = &fx.one * &fx.one / fx.exp_pos(&y);
                    let exact = &fx.one - d * 99u32 / 100u32;
                    (fx.fixed_of(a) - &exact).abs() <= tol
                }
                _ => {
                    let (n, d) = rational_alpha(s, step, total);
                    close_to_rational(a, &n, &d, 1_000_000_000)
                }
            };
            if !ok {
                failures.push(format!("{s} at ({step}, {total}) = {a}"));
            }
        }
    }

    // exact properties
    for s in AlphaSchedule::PUBLISHED {
        for total in [1u64, 2, 3, 7, 100, 2000, 12_345] {
            let mut prev = f64::NEG_INFINITY;
            for step in 0..=total {
                let a = s.alpha_at(step, total).unwrap();
                if a < prev {
                    failures.push(format!("{s} decreases at ({step}, {total})"));
                    break;
                }
                prev = a;
            }
            let a0 = s.alpha_at(0, total).unwrap();
            let a1 = s.alpha_at(total, total).unwrap();
            match s {
                AlphaSchedule::Constant => {
                    if a0 != 1.0 || a1 != 1.0 {
                        failures.push(format!("constant endpoints {a0} {a1}"));
                    }
                }
                AlphaSchedule::InverseExponential => {
                    if a0 != 0.01 {
                        failures.push(format!("{s} alpha(0) = {a0}"));
                    }
                }
                _ => {
                    if a0 != 0.01 || a1 != 1.0 {
                        failures.push(format!("{s} endpoints ({a0}, {a1}) at total {total}"));
                    }
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    if secs >= 1.0 {
        failures.push(format!("runtime {secs:.2}s"));
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!("6x1000 pairs within 1e-9 of exact values, monotone, exact endpoints, {secs:.2}s")
    } else {
        format!("{} problems, first: {}", failures.len(), failures[0])
    };
    outcome(pass, detail)
}

// ---------------------------------------------------------------- criterion 2

fn closed_form_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn raster_iou(a: [f64; 4], b: [f64; 4], h: f64) -> f64 {
    let x0 = a[0].min(b[0]);
    let y0 = a[1].min(b[1]);
    let nx = ((a[2].max(b[2]) - x0) / h).ceil() as usize;
    let ny = ((a[3].max(b[3]) - y0) / h).ceil() as usize;
    let inside = |r: &[f64; 4], x: f64, y: f64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut union) = (0usize, 0usize);
    for j in 0..ny {
        let y = y0 + (j as f64 + 0.5) * h;
        for i in 0..nx {
            let x = x0 + (i as f64 + 0.5) * h;
            let (ia, ib) = (inside(&a, x, y), inside(&b, x, y));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn random_box(r: &mut ChaCha8Rng, lo: f64, hi: f64, min_side: f64, max_side: f64) -> [f64; 4] {
    let w = r.random_range(min_side..max_side);
    let h = r.random_range(min_side..max_side);
    let x = r.random_range(lo..hi - w);
    let y = r.random_range(lo..hi - h);
    [x, y, x + w, y + h]
}

fn bb(v: [f64; 4]) -> BoundingBox {
    BoundingBox::new(v[0], v[1], v[2], v[3]).unwrap()
}

/// The unique subset K such that no two members of K conflict and every
/// non-member conflicts with a higher-ranked member of K.
fn exhaustive_nms(boxes: &[[f64; 4]], scores: &[f64], classes: Option<&[ClassLabel]>, thr: f64) -> Vec<Vec<usize>> {
    let n = boxes.len();
    let rank = |i: usize, j: usize| scores[i] > scores[j] || (scores[i] == scores[j] && i < j);
    let conflict = |i: usize, j: usize| {
        classes.is_none_or(|c| c[i] == c[j]) && closed_form_iou(boxes[i], boxes[j]) > thr
    };
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let member = |i: usize| mask & (1 << i) != 0;
        let independent = (0..n).all(|i| !member(i) || (0..n).all(|j| j == i || !member(j) || !conflict(i, j)));
        let covering =
            (0..n).all(|i| member(i) || (0..n).any(|k| member(k) && rank(k, i) && conflict(k, i)));
        if independent && covering {
            let mut kept: Vec<usize> = (0..n).filter(|&i| member(i)).collect();
            kept.sort_by(|&i, &j| if rank(i, j) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
            found.push(kept);
        }
    }
    found
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut r = rng(2);
    let mut failures = Vec::new();
    let (mut worst_cf, mut worst_raster) = (0.0f64, 0.0f64);
    let mut overlapping = 0;
    for k in 0..1000 {
        let a = random_box(&mut r, 0.0, 64.0, 5.0, 40.0);
        let b = if k % 2 == 0 {
            random_box(&mut r, 0.0, 64.0, 5.0, 40.0)
        } else {
            let s = [r.random_range(-6.0..6.0), r.random_range(-6.0..6.0), r.random_range(-6.0..6.0), r.random_range(-6.0..6.0)];
            let v = [a[0] + s[0], a[1] + s[1], a[2] + s[2], a[3] + s[3]];
            if v[2] - v[0] < 1.0 || v[3] - v[1] < 1.0 {
                a
            } else {
                v
            }
        };
        let lib = iou(&bb(a), &bb(b));
        let cf = closed_form_iou(a, b);
        let ra = raster_iou(a, b, 0.05);
        overlapping += (cf > 0.0) as usize;
        worst_cf = worst_cf.max((lib - cf).abs());
        worst_raster = worst_raster.max((lib - ra).abs());
        if (lib - cf).abs() > 1e-12 || (lib - ra).abs() > 2e-2 {
            failures.push(format!("iou({a:?}, {b:?}) = {lib}, closed form {cf}, raster {ra}"));
        }
        if (iou(&bb(b), &bb(a)) - lib).abs() > 0.0 {
            failures.push(format!("asymmetric iou on {a:?} {b:?}"));
        }
    }

    let labels = [ClassLabel::Class1, ClassLabel::Class2];
    for inst in 0..500 {
        let n = r.random_range(0..=10);
        let boxes: Vec<[f64; 4]> = (0..n)
            .map(|_| {
                let x = r.random_range(0..20) as f64;
                let y = r.random_range(0..20) as f64;
                [x, y, x + r.random_range(4..14) as f64, y + r.random_range(4..14) as f64]
            })
            .collect();
        // coarse scores so that ties occur
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..=20) as f64 / 20.0).collect();
        let classes: Vec<ClassLabel> = (0..n).map(|_| labels[r.random_range(0..2)]).collect();
        let thr = [0.3, 0.5, 0.7][inst % 3];
        let dets: Vec<Detection> =
            (0..n).map(|i| Detection::new(bb(boxes[i]), classes[i], scores[i]).unwrap()).collect();
        for mode in [NmsMode::ClassAgnostic, NmsMode::PerClass] {
            let cls = match mode {
                NmsMode::ClassAgnostic => None,
                NmsMode::PerClass => Some(classes.as_slice()),
            };
            let oracle = exhaustive_nms(&boxes, &scores, cls, thr);
            if oracle.len() != 1 {
                failures.push(format!("instance {inst}: {} consistent subsets", oracle.len()));
                continue;
            }
            let expect: Vec<Detection> = oracle[0].iter().map(|&i| dets[i]).collect();
            if nms(&dets, thr, mode) != expect {
                failures.push(format!("instance {inst} {mode:?}: nms differs from exhaustive suppression"));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    if secs >= 10.0 {
        failures.push(format!("runtime {secs:.2}s"));
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!(
            "1000 pairs ({overlapping} overlapping): max |closed form| {worst_cf:.1e}, max |raster| {worst_raster:.1e}; 500 NMS instances x 2 modes; {secs:.2}s"
        )
    } else {
        format!("{} problems, first: {}", failures.len(), failures[0])
    };
    outcome(pass, detail)
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let probs = array![[0.7, 0.2, 0.1], [0.2, 0.3, 0.5], [0.6, 0.35, 0.05]];
    let scores = ClassScores::from_probs(probs);
    let target = select_weak_target(&scores, ClassLabel::Class2, ClassWeights::UNIT).unwrap();
    let mut failures = Vec::new();
    if target.positive_index != 1 || target.negative_index != Some(2) {
        failures.push(format!("selection ({}, {:?}), expected (r2, r3)", target.positive_index, target.negative_index));
    }
    let expected = (-(0.5f64).ln() - (0.6f64).ln()) / 2.0;
    let (loss, grads) = weak_loss_grad(&scores, &target);
    if (loss - expected).abs() > 1e-9 {
        failures.push(format!("loss {loss} vs {expected}"));
    }

    let eps = 1e-4;
    let mut worst = 0.0f64;
    for row in 0..3 {
        for c in 0..3 {
            let at = |delta: f64| {
                let mut logits = scores.logits.clone();
                logits[[row, c]] += delta;
                weak_loss(&ClassScores::from_logits(logits, scores.deltas.clone()), &target)
            };
            let fd = (at(eps) - at(-eps)) / (2.0 * eps);
            let analytic = grads.iter().find(|(r, _)| *r == row).map_or(0.0, |(_, g)| g[c]);
            let selected = row == target.positive_index || Some(row) == target.negative_index;
            if !selected && (fd.abs() > 1e-6 || analytic != 0.0) {
                failures.push(format!("non-selected r{} has gradient (fd {fd}, analytic {analytic})", row + 1));
            }
            worst = worst.max((fd - analytic).abs());
            if (fd - analytic).abs() > 1e-6 {
                failures.push(format!("r{} class {c}: fd {fd} vs analytic {analytic}", row + 1));
            }
        }
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!("positive r2, negative r3, loss {loss:.12}, max |fd - analytic| {worst:.1e}, r1 gradient zero")
    } else {
        failures.join("; ")
    };
    outcome(pass, detail)
}

// ---------------------------------------------------------------- criterion 4

fn small_detector_config() -> DetectorConfig {
    DetectorConfig {
        image_size: 32,
        backbone_channels: [2, 3, 4, 4],
        rpn_channels: 4,
        head_hidden: 8,
        pool_size: 2,
        anchors: AnchorConfig {
            sizes: vec![8.0, 14.0],
            ratios: vec![1.0],
            train_pre_nms: 16,
            train_post_nms: 8,
            test_pre_nms: 12,
            test_post_nms: 6,
            ..AnchorConfig::default()
        },
        head_targets: TargetConfig {
            fg_iou: 0.5,
            batch_size: 6,
            fg_fraction: 0.5,
        },
        rpn_targets: TargetConfig {
            fg_iou: 0.5,
            batch_size: 12,
            fg_fraction: 0.5,
        },
        ..DetectorConfig::default()
    }
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let mut det = Detector::new(small_detector_config(), 11).unwrap();
    // zero-initialised biases put whole regions exactly on a ReLU kink; move off it
    let mut jitter = rng(4);
    for p in det.params_mut() {
        if p.name.ends_with("bias") {
            p.value.iter_mut().for_each(|v| *v += jitter.random_range(-0.1..0.1));
        }
    }
    let n_params = det.num_params();
    let n = 32;
    let px = (0..n * n)
        .map(|i| 0.5 + 0.35 * ((i % n) as f64 * 0.41 + (i / n) as f64 * 0.19).sin() + 0.1 * ((i * 7919 % 13) as f64 / 13.0 - 0.5))
        .collect();
    let img = weakdet::data::GrayImage::new(n, n, px).unwrap();
    let gt = Annotation {
        bbox: BoundingBox::new(6.0, 5.0, 21.0, 22.0).unwrap(),
        label: ClassLabel::Class1,
    };
    let mut r = rng_for(4, 0);
    let (_, targets) = det.strong_pass(&img, &gt, None, &mut r, None).unwrap();
    let mut failures = Vec::new();
    if n_params > 10_000 {
        failures.push(format!("{n_params} parameters"));
    }
    if targets.rpn.num_positives() == 0 || targets.head.num_positives() == 0 {
        failures.push("fixture has no positive targets".into());
    }
    let base = det.flat_values();
    let eps = 1e-4;
    let names = ["rpn_cls", "rpn_reg", "head_cls", "head_reg"];
    let mut summary = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let mut w = [0.0; 4];
        w[k] = 1.0;
        det.zero_grad();
        det.strong_pass(&img, &gt, Some(&targets), &mut r, Some(w)).unwrap();
        let analytic = det.flat_grads();
        let mut worst = 0.0f64;
        let mut nonzero = 0;
        let mut probe = det.clone();
        for i in 0..base.len() {
            probe.set_flat(i, base[i] + eps);
            let up = probe.strong_pass(&img, &gt, Some(&targets), &mut r, None).unwrap().0.as_array()[k];
            probe.set_flat(i, base[i] - eps);
            let dn = probe.strong_pass(&img, &gt, Some(&targets), &mut r, None).unwrap().0.as_array()[k];
            probe.set_flat(i, base[i]);
            let fd = (up - dn) / (2.0 * eps);
            nonzero += (analytic[i] != 0.0) as usize;
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        if worst >= 1e-3 {
            failures.push(format!("{name}: max relative error {worst:.2e}"));
        }
        if nonzero == 0 {
            failures.push(format!("{name}: gradient identically zero"));
        }
        summary.push(format!("{name} {worst:.1e}"));
    }
    let secs = started.elapsed().as_secs_f64();
    if secs >= 120.0 {
        failures.push(format!("runtime {secs:.1}s"));
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!("{n_params} params, all checked; max relative error {}; {secs:.1}s", summary.join(", "))
    } else {
        failures.join("; ")
    };
    outcome(pass, detail)
}

// ---------------------------------------------------------------- criterion 5

fn int_box(r: &mut ChaCha8Rng) -> [f64; 4] {
    let x = r.random_range(0..30) as f64;
    let y = r.random_range(0..30) as f64;
    [x, y, x + r.random_range(6..20) as f64, y + r.random_range(6..20) as f64]
}

struct Fixture {
    gts: Vec<Annotation>,
    dets: Vec<Vec<Detection>>,
}

fn random_fixture(r: &mut ChaCha8Rng) -> Fixture {
    let fg = ClassLabel::FOREGROUND;
    let n = r.random_range(1..=5);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for _ in 0..n {
        let g = int_box(r);
        gts.push(Annotation {
            bbox: bb(g),
            label: fg[r.random_range(0..2)],
        });
        let m = r.random_range(0..=4);
        dets.push(
            (0..m)
                .map(|_| {
                    let b = if r.random_bool(0.6) {
                        let j = |r: &mut ChaCha8Rng| r.random_range(-4..=4) as f64;
                        let v = [g[0] + j(r), g[1] + j(r), g[2] + j(r), g[3] + j(r)];
                        if v[2] > v[0] && v[3] > v[1] {
                            v
                        } else {
                            g
                        }
                    } else {
                        int_box(r)
                    };
                    Detection::new(bb(b), fg[r.random_range(0..2)], r.random_range(0..=10) as f64 / 10.0).unwrap()
                })
                .collect(),
        );
    }
    Fixture { gts, dets }
}

fn hits(d: &Detection, g: &Annotation) -> bool {
    closed_form_iou(d.bbox.to_array(), g.bbox.to_array()) > 0.5
}

fn oracle_corloc(f: &Fixture) -> (f64, f64) {
    let n = f.gts.len();
    let mut tp = 0;
    let mut loc = 0;
    for (ds, g) in f.dets.iter().zip(&f.gts) {
        let pairs: Vec<(bool, bool)> = ds.iter().map(|d| (hits(d, g), d.label == g.label)).collect();
        tp += pairs.iter().any(|&(h, l)| h && l) as usize;
        loc += pairs.iter().any(|&(h, _)| h) as usize;
    }
    (100.0 * tp as f64 / n as f64, 100.0 * loc as f64 / n as f64)
}

/// AP from the set of GT images hit by each score-ranked prefix of detections.
fn oracle_ap(f: &Fixture, label: ClassLabel) -> Option<f64> {
    let n_gt = f.gts.iter().filter(|g| g.label == label).count();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
    for (img, ds) in f.dets.iter().enumerate() {
        for d in ds.iter().filter(|d| d.label == label) {
            ranked.push((ranked.len(), img, d.score));
        }
    }
    let flat: Vec<(usize, &Detection)> = f
        .dets
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().filter(|d| d.label == label).map(move |d| (img, d)))
        .collect();
    ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let m = ranked.len();
    let mut precision = Vec::with_capacity(m);
    let mut recall = Vec::with_capacity(m);
    for k in 1..=m {
        let found: BTreeSet<usize> = ranked[..k]
            .iter()
            .filter(|&&(idx, img, _)| f.gts[img].label == label && hits(flat[idx].1, &f.gts[img]))
            .map(|&(_, img, _)| img)
            .collect();
        precision.push(found.len() as f64 / k as f64);
        recall.push(found.len() as f64 / n_gt as f64);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..m {
        if recall[k] > prev_recall {
            let best = precision[k..].iter().copied().fold(0.0, f64::max);
            ap += (recall[k] - prev_recall) * best;
            prev_recall = recall[k];
        }
    }
    Some(100.0 * ap)
}

fn criterion_5() -> Outcome {
    let mut r = rng(5);
    let mut failures = Vec::new();
    let mut worst_map = 0.0f64;
    for fx in 0..100 {
        let f = random_fixture(&mut r);
        let (oc, of) = oracle_corloc(&f);
        let c = corloc(&f.dets, &f.gts, 0.5).unwrap();
        let fr = fraction_detected(&f.dets, &f.gts, 0.5).unwrap();
        if c != oc || fr != of {
            failures.push(format!("fixture {fx}: corloc {c}/{oc}, fraction {fr}/{of}"));
        }
        let aps: Vec<f64> = ClassLabel::FOREGROUND.iter().filter_map(|&l| oracle_ap(&f, l)).collect();
        let omap = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
        let (map, _) = mean_average_precision(&f.dets, &f.gts, 0.5, ApConvention::Continuous).unwrap();
        match (map, omap) {
            (Some(a), Some(b)) => {
                worst_map = worst_map.max((a - b).abs());
                if (a - b).abs() > 1e-9 {
                    failures.push(format!("fixture {fx}: mAP {a} vs {b}"));
                }
            }
            (None, None) => {}
            _ => failures.push(format!("fixture {fx}: mAP {map:?} vs {omap:?}")),
        }
        let ids: Vec<String> = (0..f.gts.len()).map(|i| format!("img{i}")).collect();
        let th = EvalThresholds {
            corloc_score: 0.0,
            map_score: 0.0,
            ..EvalThresholds::default()
        };
        let report = evaluate_detections(&ids, &f.dets, &f.gts, th).unwrap();
        if report.corloc != oc || report.fraction_detected != of || report.map != map {
            failures.push(format!("fixture {fx}: report disagrees with direct metrics"));
        }
        for (img, rec) in report.images.iter().enumerate() {
            if rec.record.true_positive && !rec.record.localized {
                failures.push(format!("fixture {fx} image {img}: TP but not localized"));
            }
            for (d, &tp) in f.dets[img].iter().zip(&rec.record.detection_tp) {
                if tp && !hits(d, &f.gts[img]) {
                    failures.push(format!("fixture {fx} image {img}: TP detection does not localize"));
                }
            }
        }
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!("100 fixtures: CorLoc and fraction exact, max |mAP diff| {worst_map:.1e}, TP within localized")
    } else {
        format!("{} problems, first: {}", failures.len(), failures[0])
    };
    outcome(pass, detail)
}

// ---------------------------------------------------------------- criterion 6

fn exhaustive_pair(dets: &[Detection]) -> Option<(usize, usize)> {
    let mut candidates = Vec::new();
    for i in 0..dets.len() {
        for j in i + 1..dets.len() {
            let v = closed_form_iou(dets[i].bbox.to_array(), dets[j].bbox.to_array());
            if dets[i].label != dets[j].label && v > 0.5 {
                candidates.push((v, dets[i].score + dets[j].score, i, j));
            }
        }
    }
    let top_iou = candidates.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let top_score = candidates
        .iter()
        .filter(|c| c.0 == top_iou)
        .map(|c| c.1)
        .fold(f64::NEG_INFINITY, f64::max);
    candidates
        .into_iter()
        .filter(|c| c.0 == top_iou && c.1 == top_score)
        .map(|c| (c.2, c.3))
        .min()
}

/// Every annotation comes from a final detection of its image, carries the
/// image label, and passes the class filter.
fn check_active_soundness(
    weak: &DatasetManifest,
    active: &DatasetManifest,
    dump: &[ImageDetections],
    filter: &BTreeSet<ClassLabel>,
) -> Vec<String> {
    let mut problems = Vec::new();
    for s in active.samples() {
        let Some(w) = weak.samples().iter().find(|w| w.image_id == s.image_id) else {
            problems.push(format!("{} is not a weak image", s.image_id));
            continue;
        };
        if s.label != w.label {
            problems.push(format!("{}: label {} vs image label {}", s.image_id, s.label, w.label));
        }
        if !filter.contains(&s.label) {
            problems.push(format!("{}: label {} outside the filter", s.image_id, s.label));
        }
        let Some(b) = s.bbox else {
            problems.push(format!("{}: no box", s.image_id));
            continue;
        };
        let bits = b.to_array().map(f64::to_bits);
        let found = dump
            .iter()
            .find(|d| d.image_id == s.image_id)
            .is_some_and(|d| d.detections.iter().any(|det| det.bbox.to_array().map(f64::to_bits) == bits));
        if !found {
            problems.push(format!("{}: box is not one of the image's detections", s.image_id));
        }
    }
    problems
}

fn criterion_6(work: &Path) -> Outcome {
    let mut r = rng(6);
    let mut failures = Vec::new();
    let mut with_pair = 0;
    let fg = ClassLabel::FOREGROUND;
    for set in 0..200 {
        let n = r.random_range(0..=8);
        let anchor = int_box(&mut r);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let b = match r.random_range(0..3) {
                    0 => anchor,
                    1 => {
                        let j = |r: &mut ChaCha8Rng| r.random_range(-3..=3) as f64;
                        let v = [anchor[0] + j(&mut r), anchor[1] + j(&mut r), anchor[2] + j(&mut r), anchor[3] + j(&mut r)];
                        if v[2] > v[0] && v[3] > v[1] {
                            v
                        } else {
                            anchor
                        }
                    }
                    _ => int_box(&mut r),
                };
                Detection::new(bb(b), fg[r.random_range(0..2)], r.random_range(0..=4) as f64 / 4.0).unwrap()
            })
            .collect();
        let got = find_double_prediction("x", &dets).map(|p| p.indices);
        let want = exhaustive_pair(&dets);
        with_pair += want.is_some() as usize;
        if got != want {
            failures.push(format!("set {set}: selected {got:?}, exhaustive {want:?}"));
        }
    }

    // end to end on an untrained detector, where low-threshold detections overlap heavily
    let data = work.join("c6_data");
    let synth = SyntheticConfig {
        train_strong: ClassCounts { class_1: 1, class_2: 1 },
        test: ClassCounts { class_1: 1, class_2: 1 },
        weak_total: 12,
        seed: 66,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic(&synth, &data).unwrap();
    let det = Detector::new(DetectorConfig::default(), 6).unwrap();
    let mut emitted = 0;
    for filter in [BTreeSet::from(ClassLabel::FOREGROUND), BTreeSet::from([ClassLabel::Class2])] {
        let cfg = ActiveConfig {
            score_threshold: 0.0,
            class_filter: filter.clone(),
        };
        let set = build_active_set(&det, &ds.weak, &cfg).unwrap();
        emitted += set.manifest.len();
        failures.extend(check_active_soundness(&ds.weak, &set.manifest, &set.dump, &filter));
        for (entry, w) in set.dump.iter().zip(ds.weak.samples()) {
            let want = exhaustive_pair(&entry.detections);
            let got = set.pairs.iter().find(|p| p.image_id == w.image_id).map(|p| p.indices);
            if got.is_some() && got != want {
                failures.push(format!("{}: pair {got:?} vs exhaustive {want:?}", w.image_id));
            }
        }
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!("200 sets ({with_pair} with a pair) match exhaustive enumeration; {emitted} end-to-end annotations sound")
    } else {
        format!("{} problems, first: {}", failures.len(), failures[0])
    };
    outcome(pass, detail)
}

// ------------------------------------------------------- criteria 7, 8 and 9

struct Study {
    train: TrainConfig,
    rows: Vec<StudyRow>,
    root: PathBuf,
}

fn run_study(work: &Path) -> Study {
    let data = work.join("data");
    if !data.join("test.jsonl").exists() {
        generate_synthetic(&SyntheticConfig::default(), &data).unwrap();
    }
    let train = TrainConfig {
        strong_manifest: data.join("train_strong.jsonl"),
        weak_manifest: data.join("train_weak.jsonl"),
        test_manifest: Some(data.join("test.jsonl")),
        total_steps: 2000,
        ..TrainConfig::default()
    };
    let cfg = StudyConfig {
        train: train.clone(),
        schedules: vec![AlphaSchedule::Constant, AlphaSchedule::Polynomial { exponent: 16 }],
        seeds: vec![0, 1, 2],
        active_round: false,
    };
    let root = work.join("study");
    let report = run_schedule_study(&cfg, &root).unwrap();
    assert!(!report.partial, "study failures: {:?}", report.failures);
    Study {
        train,
        rows: report.rows,
        root,
    }
}

fn criterion_7(study: &Study) -> Outcome {
    let corlocs = |s: AlphaSchedule| -> Vec<(u64, f64)> {
        study
            .rows
            .iter()
            .find(|r| r.schedule == s)
            .map(|r| r.runs.iter().map(|run| (run.seed, run.metrics.corloc)).collect())
            .unwrap_or_default()
    };
    let constant = corlocs(AlphaSchedule::Constant);
    let poly = corlocs(AlphaSchedule::Polynomial { exponent: 16 });
    let wins = constant
        .iter()
        .filter(|(seed, c)| poly.iter().any(|(s, p)| s == seed && p >= c))
        .count();
    let mean = |v: &[(u64, f64)]| v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64;
    let (mc, mp) = (mean(&constant), mean(&poly));
    let fmt = |v: &[(u64, f64)]| v.iter().map(|x| format!("{:.0}", x.1)).collect::<Vec<_>>().join("/");
    outcome(
        wins >= 2 && mp > mc,
        format!(
            "CorLoc constant {} (mean {mc:.2}), polynomial-16 {} (mean {mp:.2}); poly >= constant in {wins}/3 seeds",
            fmt(&constant),
            fmt(&poly)
        ),
    )
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (std::fs::read(a), std::fs::read(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn criterion_9(study: &Study, work: &Path) -> (Outcome, TrainConfig, PathBuf) {
    let mut failures = Vec::new();
    let best = best_run(&study.rows).expect("study produced runs");
    let best_cfg = TrainConfig {
        schedule: best.schedule,
        seed: best.seed,
        out_dir: best.out_dir.clone(),
        ..study.train.clone()
    };
    let rerun_cfg = TrainConfig {
        out_dir: work.join("rerun"),
        ..best_cfg.clone()
    };
    let rerun = train(&rerun_cfg).unwrap();
    if !same_file(&best_cfg.log_path(), &rerun.log) {
        failures.push(format!("{} seed {} step log differs on rerun", best.schedule, best.seed));
    }
    let (a, b) = (Checkpoint::load(&best.checkpoint).unwrap(), Checkpoint::load(&rerun.checkpoint).unwrap());
    if a.params != b.params || a.adam != b.adam {
        failures.push("final checkpoint differs on rerun".into());
    }

    let split_cfg = TrainConfig {
        schedule: AlphaSchedule::Polynomial { exponent: 16 },
        seed: 0,
        total_steps: 200,
        checkpoint_every: 100,
        out_dir: work.join("resume_full"),
        ..study.train.clone()
    };
    let full = train(&split_cfg).unwrap();
    let resumed_cfg = TrainConfig {
        out_dir: work.join("resume_split"),
        ..split_cfg.clone()
    };
    let mid = split_cfg.out_dir.join("checkpoints").join("step_000100.ckpt");
    let resumed = resume(&resumed_cfg, &mid).unwrap();
    let full_text = std::fs::read_to_string(&full.log).unwrap();
    let tail: Vec<&str> = full_text.lines().skip(100).collect();
    let resumed_text = std::fs::read_to_string(&resumed.log).unwrap();
    let resumed_lines: Vec<&str> = resumed_text.lines().collect();
    if tail.len() != 100 || tail != resumed_lines {
        failures.push(format!("resumed log rows 101-200 differ ({} vs {} rows)", resumed_lines.len(), tail.len()));
    }
    let (fa, fb) = (Checkpoint::load(&full.checkpoint).unwrap(), Checkpoint::load(&resumed.checkpoint).unwrap());
    if fa.params != fb.params || fa.adam != fb.adam || fa.step != fb.step {
        failures.push("resumed final state differs from the uninterrupted run".into());
    }
    let rows = read_step_log(&resumed.log).unwrap();
    if rows.first().map(|r| r.step) != Some(101) {
        failures.push("resumed log does not start at step 101".into());
    }

    let pass = failures.is_empty();
    let detail = if pass {
        format!(
            "{} seed {} rerun: step log bit-identical ({} rows); 200-step run resumed at 100: rows 101-200 and final state identical",
            best.schedule,
            best.seed,
            read_step_log(&rerun.log).unwrap().len()
        )
    } else {
        failures.join("; ")
    };
    (outcome(pass, detail), best_cfg, rerun.checkpoint)
}

fn criterion_8(best_cfg: &TrainConfig, best_ckpt: &Path, rerun_ckpt: &Path, work: &Path) -> Outcome {
    let mut failures = Vec::new();
    let a_dir = work.join("active_a");
    let b_dir = work.join("active_b");
    let a = active_retrain(best_cfg, best_ckpt, &a_dir).unwrap();
    let b = active_retrain(best_cfg, rerun_ckpt, &b_dir).unwrap();
    if a.counts.active == 0 {
        failures.push("D_active is empty".into());
    }
    if a.before != b.before || a.after != b.after || a.counts != b.counts {
        failures.push("before/after reports differ between reruns".into());
    }
    if !same_file(&a_dir.join("retrain/steps.jsonl"), &b_dir.join("retrain/steps.jsonl")) {
        failures.push("retrain step logs differ between reruns".into());
    }
    let load = |p: &Path| DatasetManifest::load(p, Split::TrainStrong).unwrap();
    if load(&a.merged_manifest).samples() != load(&b.merged_manifest).samples() {
        failures.push("merged manifests differ between reruns".into());
    }
    if a.after == a.before {
        failures.push("retraining left the report unchanged".into());
    }
    let weak = DatasetManifest::load(&best_cfg.weak_manifest, Split::TrainWeak).unwrap();
    let active = load(&a_dir.join("active.jsonl"));
    let dump: Vec<ImageDetections> = std::fs::read_to_string(a_dir.join("curation_detections.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    failures.extend(check_active_soundness(&weak, &active, &dump, &best_cfg.active.class_filter));

    let pass = failures.is_empty();
    let m = |r: &weakdet::eval::MetricsReport| {
        format!("CorLoc {:.2}, fraction {:.2}, mAP {:.2}", r.corloc, r.fraction_detected, r.map.unwrap_or(f64::NAN))
    };
    let detail = if pass {
        format!(
            "{} seed {}: |D_active| = {}; before {}; after {}; identical across two reruns",
            best_cfg.schedule,
            best_cfg.seed,
            a.counts.active,
            m(&a.before),
            m(&a.after)
        )
    } else {
        failures.join("; ")
    };
    outcome(pass, detail)
}

// ---------------------------------------------------------------------- main

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let wanted = |c: u32| only.as_ref().is_none_or(|o| o.contains(&c));
    let tmp = tempfile::tempdir().unwrap();
    let work = std::env::var("ACCEPTANCE_OUT").map(PathBuf::from).unwrap_or_else(|_| tmp.path().to_path_buf());
    std::fs::create_dir_all(&work).unwrap();

    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut record = |c: u32, o: Outcome| {
        println!("criterion {c}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((c, o));
    };

    let fast: [(u32, fn() -> Outcome); 5] =
        [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5)];
    for (c, f) in fast {
        if wanted(c) {
            record(c, f());
        }
    }
    if wanted(6) {
        record(6, criterion_6(&work));
    }
    if wanted(7) || wanted(8) || wanted(9) {
        let study = run_study(&work);
        println!("study artifacts under {}", study.root.display());
        if wanted(7) {
            record(7, criterion_7(&study));
        }
        if wanted(8) || wanted(9) {
            let (o9, best_cfg, rerun_ckpt) = criterion_9(&study, &work);
            if wanted(8) {
                record(8, criterion_8(&best_cfg, &best_cfg.final_checkpoint(), &rerun_ckpt, &work));
            }
            if wanted(9) {
                record(9, o9);
            }
        }
    }

    let passed = results.iter().filter(|(_, o)| o.pass).count();
    let blocking: Vec<u32> = results
        .iter()
        .filter(|(c, o)| !o.pass && (strict || !DIRECTIONAL.contains(c)))
        .map(|(c, _)| *c)
        .collect();
    let advisory: Vec<u32> = results
        .iter()
        .filter(|(c, o)| !o.pass && !strict && DIRECTIONAL.contains(c))
        .map(|(c, _)| *c)
        .collect();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if !advisory.is_empty() {
        println!("directional criteria failed (not blocking without ACCEPTANCE_STRICT=1): {advisory:?}");
    }
    if !blocking.is_empty() {
        println!("blocking failures: {blocking:?}");
        std::process::exit(1);
    }
}
