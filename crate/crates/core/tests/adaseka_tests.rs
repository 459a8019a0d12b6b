// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use seka::adaseka::{
    adaseka_plan, adaseka_plan_with_coefficients, dynamic_projection, learn_expert, route_coefficients,
    Expert, ExpertBank, ExpertEntry, RoutingCoefficients,
};
use seka::data::{expand_triplets, generate_synthetic, ExpertDataset, PromptTriplet};
use seka::linalg::{svd, Matrix};
use seka::model::{tokenize, CaptureFlags, ModelConfig, ToyModel};
use seka::steering::{learn_bank, HeadSelection, PlanKind};

fn small() -> ToyModel {
    ToyModel::new(ModelConfig {
        n_layers: 2,
        n_query_heads: 4,
        n_kv_heads: 2,
        d_model: 32,
        d_k: 8,
        max_seq: 96,
        seed: 23,
    })
    .unwrap()
}

fn triplets(n: usize, seed: u64) -> Vec<PromptTriplet> {
    generate_synthetic(n, seed)
        .unwrap()
        .iter()
        .flat_map(|s| expand_triplets(s).unwrap())
        .collect()
}

fn every_head(bank: &ExpertBank) -> HeadSelection {
    HeadSelection {
        fingerprint: Some(bank.fingerprint),
        delta_min: 0.0,
        selected: (0..bank.n_layers).flat_map(|l| (0..bank.n_kv_heads).map(move |h| (l, h))).collect(),
    }
}

/// Two experts over a 1x1 grid with random orthonormal bases.
fn random_bank(seed: u64, d: usize, k: usize) -> ExpertBank {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let experts = (0..2)
        .map(|m| {
            let a = Matrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
            let r = svd(&a).unwrap();
            Expert {
                name: format!("e{m}"),
                entries: vec![ExpertEntry { layer: 0, kv_head: 0, u: r.u.columns(0..k), s: r.s[..k].to_vec() }],
            }
        })
        .collect();
    ExpertBank::new(k, 1, experts).unwrap()
}

#[test]
fn full_basis_expert() {
    let model = small();
    let ds = ExpertDataset::from_triplets("full", &triplets(8, 2));
    let x = learn_expert(&model, &ds, 8).unwrap();
    for e in &x.entries {
        let p = e.projector();
        assert!(p.sub(&Matrix::identity(8)).unwrap().frobenius_norm() <= 1e-10);
    }
    assert!(learn_expert(&model, &ds, 9).is_err());
    assert!(learn_expert(&model, &ds, 0).is_err());
}

#[test]
fn expert_shares_the_bank_components() {
    let model = small();
    let ts = triplets(8, 5);
    let bank = learn_bank(&model, &ts, 0.9).unwrap();
    let x = learn_expert(&model, &ExpertDataset::from_triplets("a", &ts), 3).unwrap();
    for (e, b) in x.entries.iter().zip(&bank.entries) {
        assert_eq!(e.u, b.u_pos.columns(0..3));
        assert_eq!(e.s, b.s_pos[..3].to_vec());
    }
}

#[test]
fn disjoint_data_gives_different_experts() {
    let model = small();
    let a = learn_expert(&model, &ExpertDataset::from_triplets("a", &triplets(6, 1)), 2).unwrap();
    let b = learn_expert(&model, &ExpertDataset::from_triplets("b", &triplets(6, 2)), 2).unwrap();
    assert!(a.entries.iter().zip(&b.entries).any(|(x, y)| x.u != y.u));
}

#[test]
fn bank_validation() {
    let bank = random_bank(3, 6, 2);
    let mut dup = bank.experts.clone();
    dup[1].name = dup[0].name.clone();
    assert!(ExpertBank::new(2, 1, dup).is_err());
    let mut skew = bank.experts.clone();
    skew[0].entries[0].u.set(0, 0, 5.0);
    assert!(ExpertBank::new(2, 1, skew).is_err());
    assert!(ExpertBank::new(1, 1, bank.experts.clone()).is_err());

    let mut b = bank.clone();
    let mut replaced = b.experts[1].clone();
    replaced.entries[0].s = vec![9.0, 1.0];
    b.upsert(replaced.clone()).unwrap();
    assert_eq!(b.experts.len(), 2);
    assert_eq!(b.experts[1], replaced);
    assert_eq!(b.experts[0], bank.experts[0]);
    replaced.name = "e2".into();
    b.upsert(replaced).unwrap();
    assert_eq!(b.experts.len(), 3);
}

fn axis_expert(name: &str, axis: usize, s: f64) -> Expert {
    let mut u = Matrix::zeros(2, 1);
    u.set(axis, 0, 1.0);
    Expert { name: name.into(), entries: vec![ExpertEntry { layer: 0, kv_head: 0, u, s: vec![s] }] }
}

#[test]
fn routing_examples() {
    let bank = ExpertBank::new(1, 0, vec![axis_expert("x", 0, 2.0), axis_expert("y", 1, 1.0)]).unwrap();
    let r = route_coefficients(&[vec![1.0, 1.0]], &bank).unwrap();
    assert_eq!(r.raw, vec![2.0, 1.0]);
    assert_eq!(r.alpha, vec![1.0, 0.5]);
    let r = route_coefficients(&[vec![-3.0, 1.0]], &bank).unwrap();
    assert_eq!(r.alpha, vec![-1.0, 1.0 / 6.0]);
    let r = route_coefficients(&[vec![0.0, 0.0]], &bank).unwrap();
    assert_eq!(r.alpha, vec![0.0, 0.0]);
    assert!(route_coefficients(&[vec![1.0]], &bank).is_err());
    assert!(route_coefficients(&[], &bank).is_err());

    let p = dynamic_projection(&RoutingCoefficients::uniform(&bank), &bank, 0, 0).unwrap();
    assert_eq!(p, Matrix::identity(2));
}

proptest! {
    #[test]
    fn routing_scale_covariance(seed in any::<u64>(), c in 0.01f64..100.0, e in -20i32..20) {
        let bank = random_bank(seed, 6, 3);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0xabc);
        let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = route_coefficients(std::slice::from_ref(&q), &bank).unwrap();

        let scaled: Vec<f64> = q.iter().map(|v| v * c).collect();
        let r = route_coefficients(&[scaled], &bank).unwrap();
        for (a, b) in r.alpha.iter().zip(&base.alpha) {
            prop_assert!((a - b).abs() <= 1e-12);
        }

        let p2 = 2f64.powi(e);
        let r = route_coefficients(&[q.iter().map(|v| v * p2).collect()], &bank).unwrap();
        prop_assert_eq!(&r.alpha, &base.alpha);

        let r = route_coefficients(&[q.iter().map(|v| -v * c).collect()], &bank).unwrap();
        for (a, b) in r.alpha.iter().zip(&base.alpha) {
            prop_assert!((a + b).abs() <= 1e-12);
        }
        prop_assert!(base.alpha.iter().all(|a| a.abs() <= 1.0));
        prop_assert!(base.alpha.iter().any(|a| a.abs() == 1.0));
    }

    #[test]
    fn dynamic_projection_is_symmetric(seed in any::<u64>(), a0 in -1.0f64..1.0, a1 in -1.0f64..1.0) {
        let bank = random_bank(seed, 5, 2);
        let alpha = RoutingCoefficients { n_experts: 2, n_layers: 1, n_kv_heads: 1, raw: vec![a0, a1], alpha: vec![a0, a1] };
        let p = dynamic_projection(&alpha, &bank, 0, 0).unwrap();
        prop_assert!(p.sub(&p.transpose()).unwrap().frobenius_norm() <= 1e-12);
        let want = bank.entry(0, 0, 0).projector().scale(a0).add(&bank.entry(1, 0, 0).projector().scale(a1)).unwrap();
        prop_assert!(p.sub(&want).unwrap().frobenius_norm() <= 1e-12);
    }
}

#[test]
fn learned_plans() {
    let model = small();
    let first = learn_expert(&model, &ExpertDataset::from_triplets("first", &triplets(6, 1)), 3).unwrap();
    let second = learn_expert(&model, &ExpertDataset::from_triplets("second", &triplets(6, 2)), 3).unwrap();
    let bank = ExpertBank::new(3, model.fingerprint(), vec![first, second]).unwrap();
    let seq = tokenize("Context: The clockmaker repaired an old brass compass in the attic.").unwrap();
    let mask: BTreeSet<usize> = [3, 4, 5].into_iter().collect();
    let sel = every_head(&bank);

    let (plan, alpha) = adaseka_plan(&model, &seq, &bank, &sel, 1.5, mask.clone()).unwrap();
    assert_eq!(plan.kind, PlanKind::Adaptive { g: 1.5 });
    assert_eq!(plan, adaseka_plan(&model, &seq, &bank, &sel, 1.5, mask.clone()).unwrap().0);
    for (l, h) in sel.selected.iter().copied() {
        let cell = alpha.cell(l, h);
        assert!(cell.iter().any(|a| a.abs() == 1.0));
        let want = dynamic_projection(&alpha, &bank, l, h).unwrap().scale(1.5);
        assert_eq!(plan.matrix(l, h), Some(&want));
    }

    let (neg, _) = adaseka_plan(&model, &seq, &bank, &sel, -0.5, mask.clone()).unwrap();
    let want = dynamic_projection(&alpha, &bank, 0, 1).unwrap().scale(-0.5);
    assert_eq!(neg.matrix(0, 1), Some(&want));

    let (zero, _) = adaseka_plan(&model, &seq, &bank, &sel, 0.0, mask.clone()).unwrap();
    let base = model.forward(&seq, None, CaptureFlags::none()).unwrap().next_token_scores;
    assert_eq!(base, model.forward(&seq, Some(&zero), CaptureFlags::none()).unwrap().next_token_scores);

    assert!(adaseka_plan_with_coefficients(&bank, &sel, &alpha, f64::NAN, mask.clone()).is_err());
    assert!(adaseka_plan_with_coefficients(&bank, &sel, &alpha, 1.0, BTreeSet::new()).is_err());
    let mut foreign = bank.clone();
    foreign.fingerprint ^= 1;
    assert!(adaseka_plan(&model, &seq, &foreign, &every_head(&foreign), 1.0, mask).is_err());
}
