//! Acceptance checks. Every test writes one `PASS`/`FAIL` line to stderr
//! (bypassing the harness's capture) and then asserts on the same outcome.

use std::collections::HashMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use blockssl::augment::oracle::AgreementCounter;
use blockssl::augment::{block_rects, make_view_batch, overlap_width, AugmentConfig, AugmentMode};
use blockssl::eval::{compute_metrics, probe_encoder, ProbeConfig};
use blockssl::imaging::{synthesize, CorpusConfig, CorpusLayout, ImageSample};
use blockssl::losses::{
    ia_closs, ia_closs_grad, simsiam_loss, stacked_pairs, sup_closs, total_loss, IaVariant, LossConfig, Reduction,
};
use blockssl::model::{ModelConfig, ModelState, PoolingMode};
use blockssl::numcore::gradcheck::{central_differences, relative_error};
use blockssl::numcore::{Graph, Tensor};
use blockssl::rng::{stream, Domain};
use blockssl::train::{epochs_to_reach, Checkpoint, EpochLog, TrainConfig, Trainer};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

fn verdict(id: u32, title: &str, pass: bool, detail: &str) {
    let line = format!("{} criterion {id:>2}: {title} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(pass, "criterion {id} failed: {detail}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Tensor<f64> {
    let mut t = Tensor::from_fn([n, d], |_| rng.random_range(-1.0..1.0));
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

// ------------------------------------------------------------------ 1

#[test]
fn c01_gradient_fidelity() {
    let start = Instant::now();
    let (tau, d) = (0.1, 16);
    let (mut worst_ad, mut worst_fd) = (0.0f64, 0.0f64);
    let mut rng = stream(1, Domain::Test, &[]);
    for _ in 0..20 {
        let z = unit_rows(&mut rng, 24, d);
        let mut ids: Vec<u64> = (0..24).map(|i| 100 + i / 8).collect();
        ids.shuffle(&mut rng);
        let analytic = ia_closs_grad(&z, &ids, tau, Reduction::Sum).unwrap();
        let mut g = Graph::new();
        let zv = g.param(z.clone());
        let l = ia_closs(&mut g, zv, &ids, tau, Reduction::Sum).unwrap();
        g.backward(l).unwrap();
        let autodiff = g.grad(zv).unwrap().clone();
        let numeric = central_differences(std::slice::from_ref(&z), 1e-6, |zs| {
            let mut g = Graph::new();
            let zv = g.constant(zs[0].clone());
            let l = ia_closs(&mut g, zv, &ids, tau, Reduction::Sum).unwrap();
            g.value(l).item()
        })
        .remove(0);
        worst_ad = worst_ad.max(relative_error(&analytic, &autodiff, 1e-12));
        worst_fd = worst_fd
            .max(relative_error(&analytic, &numeric, 1e-12))
            .max(relative_error(&autodiff, &numeric, 1e-12));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "IA-CLoss gradients: analytic, autodiff, finite differences",
        worst_ad < 1e-10 && worst_fd < 1e-5 && secs < 10.0,
        &format!("analytic vs autodiff {worst_ad:.2e} < 1e-10, vs FD {worst_fd:.2e} < 1e-5, {secs:.2}s < 10s"),
    );
}

// ------------------------------------------------------------------ 2

/// Explicit loops over anchors, positives and contrasts.
fn loop_loss(z: &Tensor<f64>, positive: impl Fn(usize, usize) -> bool, tau: f64) -> f64 {
    let n = z.shape()[0];
    let dot = |i: usize, j: usize| z.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        let (mut num, mut den, mut count) = (0.0, 0.0, 0usize);
        for j in (0..n).filter(|&j| j != i) {
            let e = (dot(i, j) / tau).exp();
            den += e;
            if positive(i, j) {
                num += e;
                count += 1;
            }
        }
        total -= (num / den).ln() / count as f64;
    }
    total
}

#[test]
fn c02_loss_oracle_equivalence() {
    let mut rng = stream(2, Domain::Test, &[]);
    let mut worst = 0.0f64;
    let mut identical = true;
    for _ in 0..100 {
        let images = rng.random_range(2..5u64);
        let per = rng.random_range(2..6u64);
        let n = (images * per) as usize;
        let d = rng.random_range(3..12);
        let tau = rng.random_range(0.05..1.0);
        let z = unit_rows(&mut rng, n, d);
        let mut ids: Vec<u64> = (0..n as u64).map(|i| i / per).collect();
        ids.shuffle(&mut rng);
        // labels belong to images, so views of one image always share them
        let per_image: Vec<Vec<usize>> = (0..images)
            .map(|_| {
                let mut l: Vec<usize> = (0..4).filter(|_| rng.random_bool(0.4)).collect();
                if l.is_empty() {
                    l.push(rng.random_range(0..4));
                }
                l
            })
            .collect();
        let labels: Vec<Vec<usize>> = ids.iter().map(|&i| per_image[i as usize].clone()).collect();

        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let ia = ia_closs(&mut g, zv, &ids, tau, Reduction::Sum).unwrap();
        let sup = sup_closs(&mut g, zv, &labels, tau, Reduction::Sum).unwrap();
        let id_labels: Vec<Vec<usize>> = ids.iter().map(|&i| vec![i as usize]).collect();
        let sup_id = sup_closs(&mut g, zv, &id_labels, tau, Reduction::Sum).unwrap();
        let (ia, sup, sup_id) = (g.value(ia).item(), g.value(sup).item(), g.value(sup_id).item());

        let ia_ref = loop_loss(&z, |i, j| ids[i] == ids[j], tau);
        let sup_ref = loop_loss(&z, |i, j| labels[i].iter().any(|c| labels[j].contains(c)), tau);
        worst = worst.max((ia - ia_ref).abs() / ia_ref.abs()).max((sup - sup_ref).abs() / sup_ref.abs());
        identical &= sup_id.to_bits() == ia.to_bits();
    }
    verdict(
        2,
        "ia_closs and sup_closs match the double-loop oracle",
        worst < 1e-12 && identical,
        &format!("max relative error {worst:.2e} < 1e-12, sup with identity labels bitwise equal: {identical}"),
    );
}

// ------------------------------------------------------------------ 3

#[test]
fn c03_stop_gradient_contract() {
    let mut rng = stream(3, Domain::Test, &[]);
    let m = 6;
    let q = Tensor::from_fn([2 * m, 8], |_| rng.random_range(-1.0..1.0));
    let z = unit_rows(&mut rng, 2 * m, 8);
    let ids: Vec<u64> = (0..2 * m as u64).map(|i| (i % m as u64) / 2).collect();
    let pairs = stacked_pairs(m);

    // full objective: L_sim + λ·L_ia with z feeding both terms
    let mut g = Graph::new();
    let qv = g.param(q.clone());
    let zv = g.param(z.clone());
    let l_sim = simsiam_loss(&mut g, qv, zv, &pairs).unwrap();
    let l_ia = ia_closs(&mut g, zv, &ids, 0.1, Reduction::Sum).unwrap();
    let total = total_loss(&mut g, l_sim, l_ia, 4.0).unwrap();
    g.backward(total).unwrap();
    let full_z = g.grad(zv).unwrap().clone();
    let q_moves = g.grad(qv).unwrap().data().iter().any(|&v| v != 0.0);

    // the contrastive term alone
    let mut h = Graph::new();
    let zv2 = h.param(z.clone());
    let l_ia2 = ia_closs(&mut h, zv2, &ids, 0.1, Reduction::Sum).unwrap();
    let scaled = h.scale(l_ia2, 4.0);
    h.backward(scaled).unwrap();
    let ia_only = h.grad(zv2).unwrap().clone();

    // L_sim alone sends nothing to z
    let mut k = Graph::new();
    let qv3 = k.param(q);
    let zv3 = k.param(z);
    let l = simsiam_loss(&mut k, qv3, zv3, &pairs).unwrap();
    k.backward(l).unwrap();
    let sim_z_zero = k.grad(zv3).unwrap().data().iter().all(|&v| v == 0.0);

    let through_sg = full_z
        .data()
        .iter()
        .zip(ia_only.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    verdict(
        3,
        "stop-gradient branch of L_sim contributes exactly zero",
        sim_z_zero && through_sg == 0.0 && q_moves,
        &format!("L_sim-only ∂/∂z all zero: {sim_z_zero}, full minus IA-only ∂/∂z max {through_sg:e}, predictor path live: {q_moves}"),
    );
}

// ------------------------------------------------------------------ 4

#[test]
fn c04_bam_geometry() {
    let mut coverage_ok = true;
    let mut worst_overlap = 0.0f64;
    let mut checked = 0usize;
    for gamma in [0.0, 0.1, 0.2, 0.3, 0.4] {
        for h in 64..=257usize {
            // square images plus a non-square partner side
            for w in [h, 64 + (h * 7) % 194] {
                let blocks = block_rects(h, w, gamma);
                let (bh, bw) = (blocks[0].height, blocks[0].width);
                coverage_ok &= blocks.iter().all(|b| b.height == bh && b.width == bw);
                coverage_ok &= blocks.iter().all(|b| b.top + b.height <= h && b.left + b.width <= w);
                for y in 0..h {
                    for x in 0..w {
                        coverage_ok &= blocks.iter().any(|b| b.contains(y, x));
                    }
                }
                for side in [h, w] {
                    let dev = (overlap_width(side, gamma) as f64 - 2.0 * gamma * side as f64).abs();
                    worst_overlap = worst_overlap.max(dev);
                }
                checked += 1;
            }
        }
    }

    // obfuscation: permutation is a bijection that carries provenance and pixels
    let cfg = CorpusConfig { num_images: 12, size: 64, num_classes: 8, min_objects: 2, max_objects: 4, seed: 40 };
    let (images, _) = synthesize(&cfg).unwrap();
    let aug = AugmentConfig { view_size: 8, ..AugmentConfig::default() };
    let plain = AugmentConfig { obfuscate: false, ..aug.clone() };
    let mut bijection_ok = true;
    let mut rng = stream(4, Domain::Test, &[]);
    for t in 0..1000u64 {
        let b = rng.random_range(1..5);
        let mut pick: Vec<ImageSample> = images.choose_multiple(&mut rng, b).cloned().collect();
        pick.shuffle(&mut rng);
        let shuffled = make_view_batch(&pick, &aug, 9, t).unwrap();
        let reference = make_view_batch(&pick, &plain, 9, t).unwrap();
        let m = reference.len();
        let mut seen = vec![false; m];
        let v = 3 * 8 * 8;
        for (j, &p) in shuffled.permutation.iter().enumerate() {
            bijection_ok &= p < m && !std::mem::replace(&mut seen[p], true);
            bijection_ok &= shuffled.image_id[j] == reference.image_id[p] && shuffled.block_id[j] == reference.block_id[p];
            bijection_ok &= shuffled.stream_a.data()[j * v..(j + 1) * v] == reference.stream_a.data()[p * v..(p + 1) * v];
            bijection_ok &= shuffled.stream_b.data()[j * v..(j + 1) * v] == reference.stream_b.data()[p * v..(p + 1) * v];
        }
        bijection_ok &= seen.iter().all(|&s| s);
    }
    verdict(
        4,
        "BAM coverage, overlap width and provenance-preserving obfuscation",
        coverage_ok && worst_overlap <= 1.0 && bijection_ok,
        &format!(
            "{checked} image shapes × 5 γ fully covered: {coverage_ok}, worst overlap deviation {worst_overlap:.3} px ≤ 1, 1000 batches bijective: {bijection_ok}"
        ),
    );
}

// --------------------------------------------------------- shared pretraining

/// Desk-scale pretraining setup shared by criteria 5, 8 and 9.
const CORPUS: CorpusConfig =
    CorpusConfig { num_images: 1024, size: 64, num_classes: 8, min_objects: 2, max_objects: 4, seed: 7 };
const SEEDS: [u64; 3] = [0, 1, 2];
const THRESHOLD: f64 = -0.7;
const MAX_EPOCHS: usize = 30;
const RUN_BUDGET: Duration = Duration::from_secs(600);
const VIEW: usize = 32;
const WIDTHS: [usize; 4] = [16, 32, 64, 128];
const EMBED: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Arm {
    BamIa,
    Bam,
    Global,
}

impl Arm {
    const ALL: [Arm; 3] = [Arm::BamIa, Arm::Bam, Arm::Global];

    fn name(self) -> &'static str {
        match self {
            Arm::BamIa => "bam+IA",
            Arm::Bam => "bam",
            Arm::Global => "global",
        }
    }
}

fn arm_config(arm: Arm, seed: u64) -> TrainConfig {
    let (mode, variant, batch) = match arm {
        Arm::BamIa => (AugmentMode::Bam, IaVariant::ImageAware, 32),
        Arm::Bam => (AugmentMode::Bam, IaVariant::None, 32),
        // same number of view pairs per step as the block-wise arms
        Arm::Global => (AugmentMode::Global, IaVariant::None, 128),
    };
    TrainConfig {
        epochs: MAX_EPOCHS,
        batch_size: batch,
        seed,
        model: ModelConfig { widths: WIDTHS, embed_dim: EMBED, view_size: VIEW, pooling: PoolingMode::Gap },
        augment: AugmentConfig { mode, view_size: VIEW, ..AugmentConfig::default() },
        loss: LossConfig { variant, ..LossConfig::default() },
        stop_at_l_sim: Some(THRESHOLD),
        ..TrainConfig::default()
    }
}

struct RunResult {
    history: Vec<EpochLog>,
    elapsed: Duration,
    state: ModelState<f32>,
}

struct Pretrained {
    images: Vec<ImageSample>,
    runs: HashMap<(Arm, u64), RunResult>,
}

fn pretrained() -> &'static Pretrained {
    static CELL: OnceLock<Pretrained> = OnceLock::new();
    CELL.get_or_init(|| {
        let (images, _) = synthesize(&CORPUS).unwrap();
        let mut runs = HashMap::new();
        for arm in Arm::ALL {
            for seed in SEEDS {
                let start = Instant::now();
                let mut t = Trainer::<f32>::new(arm_config(arm, seed)).unwrap();
                t.run(&images, None).unwrap();
                let elapsed = start.elapsed();
                let _ = std::io::stderr().lock().write_all(
                    format!(
                        "  pretrain {:<7} seed {seed}: {} epochs, final L_sim {:+.4}, {:.1}s\n",
                        arm.name(),
                        t.history.len(),
                        t.history.last().map_or(f64::NAN, |e| e.l_sim),
                        elapsed.as_secs_f64()
                    )
                    .as_bytes(),
                );
                runs.insert((arm, seed), RunResult { history: t.history, elapsed, state: t.state });
            }
        }
        Pretrained { images, runs }
    })
}

// ------------------------------------------------------------------ 5

#[test]
fn c05_convergence_ordering() {
    let p = pretrained();
    let mut medians = HashMap::new();
    let mut within = true;
    let mut parts = Vec::new();
    for arm in Arm::ALL {
        let epochs: Vec<f64> = SEEDS
            .iter()
            .map(|&s| {
                let r = &p.runs[&(arm, s)];
                within &= r.elapsed <= RUN_BUDGET;
                epochs_to_reach(&r.history, THRESHOLD).map_or(f64::INFINITY, |e| e as f64)
            })
            .collect();
        within &= epochs.iter().all(|&e| e <= MAX_EPOCHS as f64);
        let med = median(epochs.clone());
        parts.push(format!("{} {:?} median {med}", arm.name(), epochs));
        medians.insert(arm, med);
    }
    let ordered = medians[&Arm::BamIa] <= medians[&Arm::Bam] && medians[&Arm::Bam] <= medians[&Arm::Global];
    verdict(
        5,
        "epochs to L_sim = -0.7: bam+IA ≤ bam ≤ global, each ≤ 30 epochs and ≤ 10 min",
        ordered && within,
        &format!("{}; ordered: {ordered}, all within budget: {within}", parts.join("; ")),
    );
}

// ------------------------------------------------------------------ 6

#[test]
fn c06_semantic_pair_quality() {
    let cfg = CorpusConfig { num_images: 512, ..CORPUS };
    let (images, layout): (Vec<ImageSample>, CorpusLayout) = synthesize(&cfg).unwrap();
    let rate = |mode| {
        let aug = AugmentConfig { mode, view_size: 8, ..AugmentConfig::default() };
        let mut counter = AgreementCounter::default();
        for (step, chunk) in images.chunks(32).enumerate() {
            counter.add_batch(&make_view_batch(chunk, &aug, 6, step as u64).unwrap(), &layout);
        }
        counter.finish()
    };
    let bam = rate(AugmentMode::Bam);
    let global = rate(AugmentMode::Global);
    let gap = 100.0 * (bam.intersect_rate - global.intersect_rate);
    verdict(
        6,
        "BAM pair label-intersection rate exceeds global by ≥ 10 points",
        gap >= 10.0,
        &format!(
            "bam {:.1}% over {} pairs, global {:.1}% over {} pairs, difference {gap:+.1} points",
            100.0 * bam.intersect_rate,
            bam.pairs,
            100.0 * global.intersect_rate,
            global.pairs
        ),
    );
}

// ------------------------------------------------------------------ 7

fn brute_ap(scores: &[f64], targets: &[bool]) -> f64 {
    let n = scores.len();
    let ahead = |i: usize| (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
    let pos: Vec<usize> = (0..n).filter(|&i| targets[i]).collect();
    let sum: f64 = pos
        .iter()
        .map(|&i| {
            let r = ahead(i);
            let hits = (0..n).filter(|&j| targets[j] && ahead(j) <= r).count();
            hits as f64 / (r + 1) as f64
        })
        .sum();
    sum / pos.len() as f64
}

#[test]
fn c07_metrics_oracle() {
    let mut rng = stream(7, Domain::Test, &[]);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let (n, k) = (rng.random_range(2..30), rng.random_range(1..6));
        let s = Tensor::from_fn([n, k], |_| {
            let v: f64 = rng.random();
            if trial % 2 == 0 { (v * 4.0).floor() / 4.0 } else { v }
        });
        let mut y = Tensor::from_fn([n, k], |_| f64::from(u8::from(rng.random_bool(0.4))));
        for c in 0..k {
            y.data_mut()[c] = 1.0;
        }
        let r = compute_metrics(&s, &y, 0.5).unwrap();
        let (mut aps, mut cps, mut crs) = (vec![], vec![], vec![]);
        let (mut tp, mut pred, mut act) = (0usize, 0usize, 0usize);
        for c in 0..k {
            let sc: Vec<f64> = (0..n).map(|i| s.at2(i, c)).collect();
            let tc: Vec<bool> = (0..n).map(|i| y.at2(i, c) == 1.0).collect();
            aps.push(brute_ap(&sc, &tc));
            let t = (0..n).filter(|&i| sc[i] >= 0.5 && tc[i]).count();
            let p = (0..n).filter(|&i| sc[i] >= 0.5).count();
            let a = tc.iter().filter(|&&x| x).count();
            cps.push(if p > 0 { t as f64 / p as f64 } else { 0.0 });
            crs.push(t as f64 / a as f64);
            (tp, pred, act) = (tp + t, pred + p, act + a);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let op = if pred > 0 { tp as f64 / pred as f64 } else { 0.0 };
        let or = tp as f64 / act as f64;
        for (a, b) in [(r.map, mean(&aps)), (r.op, op), (r.or, or), (r.cp, mean(&cps)), (r.cr, mean(&crs))] {
            worst = worst.max((a - b).abs());
        }
    }
    let col = |v: &[f64]| Tensor::new([v.len(), 1], v.to_vec()).unwrap();
    let y = col(&[1.0, 0.0, 1.0, 0.0]);
    let a1 = compute_metrics(&col(&[0.9, 0.8, 0.7, 0.6]), &y, 0.5).unwrap().map;
    let a2 = compute_metrics(&col(&[0.6, 0.8, 0.7, 0.9]).map(|v| 1.5 - v), &col(&[0.0, 1.0, 0.0, 1.0]), 0.5)
        .unwrap()
        .map;
    let exact = a1 == (1.0 + 2.0 / 3.0) / 2.0 && a2 == (1.0 / 3.0 + 2.0 / 4.0) / 2.0;
    verdict(
        7,
        "compute_metrics matches brute-force enumeration and hand-worked AP",
        worst < 1e-12 && exact,
        &format!("max deviation {worst:.2e} < 1e-12 over 100 instances; AP {a1:.4} and {a2:.4} exact: {exact}"),
    );
}

// ------------------------------------------------------------------ 8

#[test]
fn c08_gamp_direction() {
    let p = pretrained();
    let test_cfg = CorpusConfig { num_images: 256, seed: CORPUS.seed + 1000, ..CORPUS };
    let (eval_images, _) = synthesize(&test_cfg).unwrap();
    let probe = ProbeConfig::default();
    let (mut or_gap, mut or_gamp, mut map_gap, mut map_gamp) = (vec![], vec![], vec![], vec![]);
    let mut slowest = 0.0f64;
    for seed in SEEDS {
        let start = Instant::now();
        let state: ModelState<f64> = {
            let s = &p.runs[&(Arm::BamIa, seed)].state;
            ModelState::from_tensors(s.config.clone(), s.tensors().map(|n| (n.name.clone(), n.value.cast())).collect())
                .unwrap()
        };
        let cfg = ProbeConfig { seed, ..probe.clone() };
        let out = probe_encoder(
            &state,
            &p.images,
            &eval_images,
            CORPUS.num_classes,
            &[PoolingMode::Gap, PoolingMode::GampMean],
            &cfg,
        )
        .unwrap();
        slowest = slowest.max(start.elapsed().as_secs_f64());
        or_gap.push(out[0].report.or);
        or_gamp.push(out[1].report.or);
        map_gap.push(out[0].report.map);
        map_gamp.push(out[1].report.map);
    }
    let (og, om) = (median(or_gap), median(or_gamp));
    let (mg, mm) = (median(map_gap), median(map_gamp));
    let pass = om >= og && (mm - mg).abs() <= 0.05 && slowest <= 180.0;
    verdict(
        8,
        "gamp-mean probe: OR ≥ gap OR, mAP within 5 points",
        pass,
        &format!(
            "median OR gap {og:.4} vs gamp-mean {om:.4}; median mAP gap {mg:.4} vs gamp-mean {mm:.4}; slowest probe {slowest:.1}s ≤ 180s"
        ),
    );
}

// ------------------------------------------------------------------ 9

#[test]
fn c09_non_collapse() {
    let p = pretrained();
    let floor = 0.5 / (EMBED as f64).sqrt();
    let mut lowest = f64::INFINITY;
    for run in p.runs.values() {
        for e in run.history.iter().skip(1) {
            lowest = lowest.min(e.z_std);
        }
    }
    verdict(
        9,
        "embedding std above 0.5/√d after the first epoch",
        lowest > floor,
        &format!("lowest z_std {lowest:.4} vs floor {floor:.4} across {} runs", p.runs.len()),
    );
}

// ------------------------------------------------------------------ 10

#[test]
fn c10_determinism() {
    let cfg = CorpusConfig { num_images: 32, ..CORPUS };
    let (images, _) = synthesize(&cfg).unwrap();
    let train = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 5,
        model: ModelConfig { widths: [8, 8, 16, 16], embed_dim: 64, view_size: 16, pooling: PoolingMode::Gap },
        augment: AugmentConfig { view_size: 16, ..AugmentConfig::default() },
        ..TrainConfig::default()
    };
    let run = || {
        let mut t = Trainer::<f32>::new(train.clone()).unwrap();
        t.run(&images, None).unwrap();
        t.checkpoint().to_bytes().unwrap()
    };
    let (first, second) = (run(), run());
    let repeat = first == second;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.bssl");
    std::fs::write(&path, &first).unwrap();
    let reloaded = Checkpoint::<f32>::load(&path).unwrap();
    let again = dir.path().join("again.bssl");
    reloaded.save(&again).unwrap();
    let round_trip = std::fs::read(&again).unwrap() == first;
    verdict(
        10,
        "identical runs give identical checkpoints; save→load→save is byte-identical",
        repeat && round_trip,
        &format!("{} bytes, repeat identical: {repeat}, round trip identical: {round_trip}", first.len()),
    );
}
