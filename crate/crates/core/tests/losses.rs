use ndiff::{finite_diff_check, Graph, NodeId, Params, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srlood::losses::{
    cross_entropy, cross_entropy_value, margin_loss, margin_loss_value, total_loss, total_loss_value, LossWeights,
};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn batch_params(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Params {
    let mut p = Params::new();
    for i in 0..m {
        let h = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        p.insert(format!("h{i}"), Tensor::vector(h));
    }
    p
}

fn register_all(g: &mut Graph, p: &Params, m: usize) -> Vec<NodeId> {
    (0..m)
        .map(|i| {
            let name = format!("h{i}");
            g.register(&name, p.get(&name).unwrap().clone()).unwrap()
        })
        .collect()
}

/// Margin placed between pairwise distances so no hinge sits at its kink.
fn safe_margin(p: &Params, m: usize) -> f64 {
    let mut dists: Vec<f64> = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            let a = p.get(&format!("h{i}")).unwrap().data();
            let b = p.get(&format!("h{j}")).unwrap().data();
            dists.push(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum());
        }
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    0.5 * (dists[mid - 1] + dists[mid])
}

#[test]
fn margin_loss_gradients() {
    for seed in 0..12 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, d) = (5, 4);
        let p = batch_params(&mut rng, m, d);
        let labels: Vec<usize> = (0..m).map(|i| i % 2 + usize::from(i == 4)).collect();
        let xi = safe_margin(&p, m);
        let check = finite_diff_check(
            |g, p| {
                let hs = register_all(g, p, m);
                Ok(margin_loss(g, &hs, &labels, xi).unwrap())
            },
            &p,
            STEP,
        )
        .unwrap();
        assert!(check.max_rel_error < TOL, "seed {seed}: {check:?}");
    }
}

#[test]
fn cross_entropy_and_total_loss_gradients() {
    for seed in 0..12 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (m, d) = (4, 3);
        let p = batch_params(&mut rng, m, d);
        let labels = [0, 1, 0, 2];
        let xi = safe_margin(&p, m);
        let w = LossWeights {
            alpha1: 1.0,
            alpha2: 3.0,
            alpha3: 0.5,
            xi: Some(xi),
        };
        let check = finite_diff_check(
            |g, p| {
                let hs = register_all(g, p, m);
                let ces: Vec<NodeId> = hs
                    .iter()
                    .zip(labels)
                    .map(|(&h, y)| cross_entropy(g, h, y).unwrap())
                    .collect();
                let s = g.add_many(&ces)?;
                let l_id = g.scale(s, 0.25)?;
                let l_margin = margin_loss(g, &hs, &labels, xi).unwrap();
                let l_ssl = cross_entropy(g, hs[1], 2).unwrap();
                Ok(total_loss(g, l_id, Some(l_margin), Some(l_ssl), &w).unwrap())
            },
            &p,
            STEP,
        )
        .unwrap();
        assert!(check.max_rel_error < TOL, "seed {seed}: {check:?}");
    }
}

#[test]
fn graph_and_value_cross_entropy_agree() {
    let logits = [0.3, -1.2, 2.5, 0.0];
    let mut g = Graph::new();
    let n = g.constant(Tensor::vector(logits.to_vec()));
    for y in 0..4 {
        let node = cross_entropy(&mut g, n, y).unwrap();
        assert!((g.scalar(node).unwrap() - cross_entropy_value(&logits, y).unwrap()).abs() < 1e-15);
    }
}

#[test]
fn margin_loss_hand_cases() {
    // different classes at distance² 1 with ξ = 2: each side pays (2 − 1) / (2·1)
    assert_eq!(margin_loss_value(&[vec![0.0], vec![1.0]], &[0, 1], 2.0).unwrap(), 1.0);
    // same class only: mean squared distance, normalized by m·d
    let v = margin_loss_value(&[vec![0.0, 0.0], vec![3.0, 4.0]], &[1, 1], 1.0).unwrap();
    assert_eq!(v, 2.0 * 25.0 / 4.0);
    // hinge inactive beyond the margin
    assert_eq!(margin_loss_value(&[vec![0.0], vec![5.0]], &[0, 1], 4.0).unwrap(), 0.0);
}

#[test]
fn zero_weights_drop_terms_from_the_total() {
    let w = LossWeights {
        alpha2: 0.0,
        alpha3: 0.0,
        ..Default::default()
    };
    let mut g = Graph::new();
    let a = g.constant(Tensor::scalar(0.8));
    let b = g.constant(Tensor::scalar(f64::NAN));
    let t = total_loss(&mut g, a, Some(b), Some(b), &w).unwrap();
    assert_eq!(g.scalar(t).unwrap(), 0.8);
    assert_eq!(total_loss_value(2.0, 0.0, 0.0, &LossWeights::default()), 2.0);
}

proptest! {
    #[test]
    fn margin_loss_is_non_negative_and_translation_invariant(
        seed in 0u64..1000,
        m in 2usize..7,
        shift in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hs: Vec<Vec<f64>> = (0..m).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
        let moved: Vec<Vec<f64>> = hs.iter().map(|h| h.iter().map(|v| v + shift).collect()).collect();
        let a = margin_loss_value(&hs, &labels, 6.0).unwrap();
        let b = margin_loss_value(&moved, &labels, 6.0).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
    }

    #[test]
    fn cross_entropy_is_non_negative(logits in prop::collection::vec(-30.0f64..30.0, 2..6), pick in 0usize..6) {
        let y = pick % logits.len();
        prop_assert!(cross_entropy_value(&logits, y).unwrap() >= 0.0);
    }
}
