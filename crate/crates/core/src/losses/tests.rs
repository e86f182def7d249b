use rand::Rng;

use super::*;
use crate::numcore::gradcheck::{central_differences, relative_error};
use crate::rng::{stream, Domain};

fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Tensor<f64> {
    let mut t = Tensor::from_fn([n, d], |_| rng.random_range(-1.0..1.0));
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

/// Three images with eight views each, shuffled.
fn ids_3x8(rng: &mut impl Rng) -> Vec<u64> {
    let mut ids: Vec<u64> = (0..24).map(|i| 10 + (i / 8) as u64).collect();
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), rng);
    ids
}

/// Direct evaluation of the loss with explicit loops over anchors, positives and contrasts.
fn oracle(z: &Tensor<f64>, positive: impl Fn(usize, usize) -> bool, tau: f64) -> f64 {
    let n = z.shape()[0];
    let dot = |i: usize, j: usize| z.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        let mut num = 0.0;
        let mut den = 0.0;
        let mut count = 0usize;
        for j in 0..n {
            if j == i {
                continue;
            }
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

fn graph_loss(z: &Tensor<f64>, mask: &PositiveMask, tau: f64, red: Reduction) -> (f64, Tensor<f64>) {
    let mut g = Graph::new();
    let zv = g.param(z.clone());
    let l = contrastive_loss(&mut g, zv, mask, tau, red).unwrap();
    g.backward(l).unwrap();
    (g.value(l).item(), g.grad(zv).unwrap().clone())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn ia_closs_matches_double_loop() {
    let mut rng = stream(1, Domain::Test, &[]);
    for _ in 0..100 {
        let ids = ids_3x8(&mut rng);
        let z = unit_rows(&mut rng, 24, 16);
        let expect = oracle(&z, |i, j| ids[i] == ids[j], 0.1);
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let l = ia_closs(&mut g, zv, &ids, 0.1, Reduction::Sum).unwrap();
        let got = g.value(l).item();
        assert!(rel(got, expect) < 1e-12, "{got} vs {expect}");
        let direct = contrastive_value(&z, &PositiveMask::from_image_ids(&ids).unwrap(), 0.1, Reduction::Sum).unwrap();
        assert!(rel(direct, expect) < 1e-12);
        assert!(got >= 0.0);
    }
}

#[test]
fn sup_closs_matches_double_loop() {
    let mut rng = stream(2, Domain::Test, &[]);
    for _ in 0..100 {
        let labels: Vec<Vec<usize>> = (0..20)
            .map(|_| {
                let mut l: Vec<usize> = (0..6).filter(|_| rng.random_bool(0.3)).collect();
                if l.is_empty() {
                    l.push(rng.random_range(0..6));
                }
                l
            })
            .collect();
        let Ok(mask) = PositiveMask::from_labels(&labels) else { continue };
        let z = unit_rows(&mut rng, 20, 8);
        let expect = oracle(&z, |i, j| labels[i].iter().any(|l| labels[j].contains(l)), 0.2);
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let l = sup_closs(&mut g, zv, &labels, 0.2, Reduction::Sum).unwrap();
        let got = g.value(l).item();
        assert!(rel(got, expect) < 1e-12);
        let via_mask = contrastive_loss(&mut g, zv, &mask, 0.2, Reduction::Sum).unwrap();
        assert_eq!(got, g.value(via_mask).item());
    }
}

#[test]
fn sup_with_identity_labels_equals_ia_exactly() {
    let mut rng = stream(3, Domain::Test, &[]);
    let ids = ids_3x8(&mut rng);
    let labels: Vec<Vec<usize>> = ids.iter().map(|&i| vec![i as usize]).collect();
    let z = unit_rows(&mut rng, 24, 16);
    let mut g = Graph::new();
    let zv = g.param(z);
    let a = ia_closs(&mut g, zv, &ids, 0.1, Reduction::Sum).unwrap();
    let b = sup_closs(&mut g, zv, &labels, 0.1, Reduction::Sum).unwrap();
    assert_eq!(g.value(a).item().to_bits(), g.value(b).item().to_bits());
}

#[test]
fn positives_equal_to_all_give_zero() {
    let mut rng = stream(4, Domain::Test, &[]);
    let v = unit_rows(&mut rng, 1, 8);
    let z = Tensor::from_fn([2, 8], |i| v.data()[i % 8]);
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let l = ia_closs(&mut g, zv, &[5, 5], 0.1, Reduction::Sum).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let z = unit_rows(&mut rng, 6, 8);
    let zv = g.constant(z);
    let l = sup_closs(&mut g, zv, &vec![vec![1, 2]; 6], 0.1, Reduction::Sum).unwrap();
    assert!(g.value(l).item().abs() < 1e-15);
}

#[test]
fn single_view_image_is_rejected() {
    let mut g = Graph::<f64>::new();
    let zv = g.constant(Tensor::ones([3, 2]));
    match ia_closs(&mut g, zv, &[1, 1, 2], 0.1, Reduction::Sum) {
        Err(Error::Precondition { detail, .. }) => assert!(detail.contains("row 2"), "{detail}"),
        other => panic!("{other:?}"),
    }
    let labels = vec![vec![0], vec![0], vec![3]];
    assert!(sup_closs(&mut g, zv, &labels, 0.1, Reduction::Sum).is_err());
}

#[test]
fn gradient_fidelity_three_ways() {
    let mut rng = stream(5, Domain::Test, &[]);
    for _ in 0..20 {
        let ids = ids_3x8(&mut rng);
        let z = unit_rows(&mut rng, 24, 16);
        let mask = PositiveMask::from_image_ids(&ids).unwrap();
        let analytic = ia_closs_grad(&z, &ids, 0.1, Reduction::Sum).unwrap();
        let (_, auto) = graph_loss(&z, &mask, 0.1, Reduction::Sum);
        let fd = central_differences(&[z.clone()], 1e-6, |zs| {
            contrastive_value(&zs[0], &mask, 0.1, Reduction::Sum).unwrap()
        })
        .remove(0);
        assert!(analytic.max_abs_diff(&auto) < 1e-10, "{}", analytic.max_abs_diff(&auto));
        assert!(relative_error(&analytic, &fd, 1e-8) < 1e-5);
        assert!(relative_error(&auto, &fd, 1e-8) < 1e-5);
    }
}

#[test]
fn mean_reduction_scales_sum() {
    let mut rng = stream(6, Domain::Test, &[]);
    let ids = ids_3x8(&mut rng);
    let z = unit_rows(&mut rng, 24, 16);
    let mask = PositiveMask::from_image_ids(&ids).unwrap();
    let (s, gs) = graph_loss(&z, &mask, 0.1, Reduction::Sum);
    let (m, gm) = graph_loss(&z, &mask, 0.1, Reduction::Mean);
    assert!(rel(m * 24.0, s) < 1e-12);
    let analytic = contrastive_grad(&z, &mask, 0.1, Reduction::Mean).unwrap();
    assert!(analytic.max_abs_diff(&gm) < 1e-12);
    assert!(gm.map(|v| v * 24.0).max_abs_diff(&gs) < 1e-10);
}

#[test]
fn gradient_vanishes_when_rows_coincide() {
    let mut rng = stream(7, Domain::Test, &[]);
    let v = unit_rows(&mut rng, 1, 16);
    let z = Tensor::from_fn([24, 16], |i| v.data()[i % 16]);
    let ids: Vec<u64> = (0..24).map(|i| (i % 3) as u64).collect();
    let grad = ia_closs_grad(&z, &ids, 0.1, Reduction::Sum).unwrap();
    assert!(grad.data().iter().all(|g| g.abs() < 1e-12), "{:?}", grad.data().iter().fold(0.0f64, |m, g| m.max(g.abs())));
}

#[test]
fn permutation_equivariance() {
    let mut rng = stream(8, Domain::Test, &[]);
    let ids = ids_3x8(&mut rng);
    let z = unit_rows(&mut rng, 24, 16);
    let mut perm: Vec<usize> = (0..24).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
    let zp = Tensor::from_fn([24, 16], |k| z.data()[perm[k / 16] * 16 + k % 16]);
    let idp: Vec<u64> = perm.iter().map(|&p| ids[p]).collect();
    let g = ia_closs_grad(&z, &ids, 0.1, Reduction::Sum).unwrap();
    let gp = ia_closs_grad(&zp, &idp, 0.1, Reduction::Sum).unwrap();
    for (k, &p) in perm.iter().enumerate() {
        for c in 0..16 {
            assert!((gp.at2(k, c) - g.at2(p, c)).abs() < 1e-12);
        }
    }
    let m = PositiveMask::from_image_ids(&ids).unwrap();
    let mp = PositiveMask::from_image_ids(&idp).unwrap();
    let a = contrastive_value(&z, &m, 0.1, Reduction::Sum).unwrap();
    let b = contrastive_value(&zp, &mp, 0.1, Reduction::Sum).unwrap();
    assert!(rel(a, b) < 1e-12);
}

#[test]
fn rotation_invariance() {
    let mut rng = stream(9, Domain::Test, &[]);
    let ids = ids_3x8(&mut rng);
    let z = unit_rows(&mut rng, 24, 4);
    // compose two planar rotations into an orthogonal 4×4 map
    let (a, b) = (0.7f64, -1.3f64);
    let r = [
        [a.cos(), -a.sin(), 0.0, 0.0],
        [a.sin(), a.cos(), 0.0, 0.0],
        [0.0, 0.0, b.cos(), -b.sin()],
        [0.0, 0.0, b.sin(), b.cos()],
    ];
    let zr = Tensor::from_fn([24, 4], |k| (0..4).map(|j| r[k % 4][j] * z.data()[(k / 4) * 4 + j]).sum());
    let m = PositiveMask::from_image_ids(&ids).unwrap();
    let v1 = contrastive_value(&z, &m, 0.1, Reduction::Sum).unwrap();
    let v2 = contrastive_value(&zr, &m, 0.1, Reduction::Sum).unwrap();
    assert!(rel(v1, v2) < 1e-12);
}

fn simsiam_value(q: Tensor<f64>, z: Tensor<f64>) -> f64 {
    let m = q.shape()[0] / 2;
    let mut g = Graph::new();
    let (qv, zv) = (g.constant(q), g.constant(z));
    let l = simsiam_loss(&mut g, qv, zv, &stacked_pairs(m)).unwrap();
    g.value(l).item()
}

#[test]
fn simsiam_alignment_and_orthogonality() {
    let mut rng = stream(10, Domain::Test, &[]);
    let z = unit_rows(&mut rng, 6, 5);
    let pairs = stacked_pairs(3);
    let q = Tensor::from_fn([6, 5], |k| 2.5 * z.data()[pairs[k / 5] * 5 + k % 5]);
    assert!((simsiam_value(q, z) + 1.0).abs() < 1e-12);
    let z = Tensor::from_fn([4, 2], |k| if k % 2 == 0 { 1.0 } else { 0.0 });
    let q = Tensor::from_fn([4, 2], |k| if k % 2 == 1 { 3.0 } else { 0.0 });
    assert_eq!(simsiam_value(q, z), 0.0);
}

#[test]
fn simsiam_rejects_zero_q_and_bad_pairs() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(Tensor::zeros([2, 3]));
    let z = g.constant(Tensor::ones([2, 3]));
    assert!(matches!(
        simsiam_loss(&mut g, q, z, &[1, 0]),
        Err(Error::NumericDegenerate { .. })
    ));
    let q = g.constant(Tensor::ones([2, 3]));
    assert!(simsiam_loss(&mut g, q, z, &[0, 1]).is_err());
}

#[test]
fn stop_gradient_side_gets_nothing() {
    let mut rng = stream(11, Domain::Test, &[]);
    let mut g = Graph::new();
    // z = x·Wz feeds only the stop-gradient branch; q = x·Wq
    let x = g.constant(unit_rows(&mut rng, 6, 4));
    let wz = g.param(Tensor::from_fn([4, 3], |_| rng.random_range(-1.0..1.0)));
    let wq = g.param(Tensor::from_fn([4, 3], |_| rng.random_range(-1.0..1.0)));
    let z = g.matmul(x, wz).unwrap();
    let q = g.matmul(x, wq).unwrap();
    let l = simsiam_loss(&mut g, q, z, &stacked_pairs(3)).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(wz).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(g.grad(wq).unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn total_loss_arithmetic() {
    assert_eq!(combine(-0.5, 0.25, 4.0), 0.5);
    assert_eq!(combine(-0.3, 7.0, 0.0), -0.3);
    assert_eq!(LossConfig::default().lambda, 4.0);
    let mut g = Graph::<f64>::new();
    let (a, b) = (g.constant(Tensor::scalar(-0.5)), g.constant(Tensor::scalar(0.25)));
    let t = total_loss(&mut g, a, b, 4.0).unwrap();
    assert_eq!(g.value(t).item(), 0.5);
}

#[test]
fn config_validation() {
    assert!(LossConfig { tau: 0.0, ..LossConfig::default() }.validate().is_err());
    assert!(LossConfig { lambda: -1.0, ..LossConfig::default() }.validate().is_err());
    LossConfig::default().validate().unwrap();
}

#[test]
fn embedding_std_extremes() {
    let collapsed = Tensor::<f64>::ones([8, 4]);
    assert_eq!(embedding_std(&collapsed), 0.0);
    let mut rng = stream(12, Domain::Test, &[]);
    let spread = unit_rows(&mut rng, 2000, 16);
    let s = embedding_std(&spread);
    assert!((s - 0.25).abs() < 0.02, "{s}");
}
