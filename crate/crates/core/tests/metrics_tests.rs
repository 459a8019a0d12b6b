// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use tempfile::tempdir;

use seka::linalg::{pca2, Matrix};
use seka::metrics::{
    attention_mass, efficacy_score, export_heatmap, export_pca_shift, heatmap_csv, pca_shift,
    pronoun_score, PRONOUNS_ALL, PRONOUNS_CORE,
};
use seka::model::{tokenize, ModelConfig, ToyModel};
use seka::spectral::SteeringGains;
use seka::steering::{EditPlan, PlanEntry, PlanKind};

fn small() -> ToyModel {
    ToyModel::new(ModelConfig {
        n_layers: 2,
        n_query_heads: 4,
        n_kv_heads: 2,
        d_model: 32,
        d_k: 8,
        max_seq: 64,
        seed: 31,
    })
    .unwrap()
}

const TEXT: &str = "Context: the orchard keeper stacked crates of pears beside the barn door.";

fn identity_plan(model: &ToyModel, gain: f64, mask: &[usize]) -> EditPlan {
    EditPlan {
        fingerprint: model.fingerprint(),
        entries: (0..model.config().n_layers)
            .flat_map(|l| (0..2).map(move |h| (l, h)))
            .map(|(layer, kv_head)| PlanEntry { layer, kv_head, matrix: Matrix::identity(8).scale(gain) })
            .collect(),
        mask: mask.iter().copied().collect(),
        kind: PlanKind::Seka(SteeringGains::new(gain, 0.0).unwrap()),
    }
}

#[test]
fn mass_bounds_and_complement() {
    let model = small();
    let seq = tokenize(TEXT).unwrap();
    let all: BTreeSet<usize> = (0..seq.len()).collect();
    let r = attention_mass(&model, &seq, &all, None).unwrap();
    assert_eq!(r.per_head.len(), 8);
    assert!(r.per_head.iter().all(|m| (m - 1.0).abs() <= 1e-12));

    let hl: BTreeSet<usize> = [2, 3, 4].into_iter().collect();
    let rest: BTreeSet<usize> = all.difference(&hl).copied().collect();
    let a = attention_mass(&model, &seq, &hl, None).unwrap();
    let b = attention_mass(&model, &seq, &rest, None).unwrap();
    for (x, y) in a.per_head.iter().zip(&b.per_head) {
        assert!((x + y - 1.0).abs() <= 1e-12);
        assert!((0.0..=1.0).contains(x));
    }
    let mean = a.per_head.iter().sum::<f64>() / 8.0;
    assert!((a.mean - mean).abs() <= 1e-15);

    assert!(attention_mass(&model, &seq, &BTreeSet::new(), None).is_err());
    assert!(attention_mass(&model, &seq, &[seq.len()].into_iter().collect(), None).is_err());
}

#[test]
fn zero_gain_plan_matches_no_plan() {
    let model = small();
    let seq = tokenize(TEXT).unwrap();
    let hl: BTreeSet<usize> = [5, 6].into_iter().collect();
    let zero = identity_plan(&model, 0.0, &[5, 6]);
    assert_eq!(
        attention_mass(&model, &seq, &hl, None).unwrap(),
        attention_mass(&model, &seq, &hl, Some(&zero)).unwrap()
    );
}

#[test]
fn scaling_first_layer_keys_sharpens_their_logits() {
    // One layer, M = I: the masked logit doubles and nothing else moves.
    let mut cfg = *small().config();
    cfg.n_layers = 1;
    let model = ToyModel::new(cfg).unwrap();
    let seq = tokenize(TEXT).unwrap();
    let j = 4;
    let hl: BTreeSet<usize> = [j].into_iter().collect();
    let base = attention_mass(&model, &seq, &hl, None).unwrap().per_head;
    let out = model
        .forward(&seq, None, seka::model::CaptureFlags::debug())
        .unwrap()
        .captures;
    let logits = out.attn_logits.unwrap();
    let last = seq.len() - 1;
    let steered = attention_mass(&model, &seq, &hl, Some(&identity_plan(&model, 1.0, &[j]))).unwrap().per_head;
    for qh in 0..4 {
        let s = logits[qh].get(last, j);
        if s > 0.0 {
            assert!(steered[qh] > base[qh], "head {qh}");
        } else if s < 0.0 {
            assert!(steered[qh] < base[qh], "head {qh}");
        }
    }
}

#[test]
fn pronoun_examples() {
    let ori = "She told him that she would sail.";
    assert_eq!(pronoun_score(ori, "They told them that they would sail.", &PRONOUNS_ALL).unwrap(), 1.0);
    assert_eq!(pronoun_score(ori, "She told him that she would sail.", &PRONOUNS_ALL).unwrap(), 0.0);
    let w = pronoun_score(ori, "They told him that they would sail.", &PRONOUNS_CORE).unwrap();
    assert_eq!(w, 1.0);
    let w = pronoun_score(ori, "They told him that they would sail.", &PRONOUNS_ALL).unwrap();
    assert!((w - 2.0 / 3.0).abs() <= 1e-15);
    let w = pronoun_score(ori, "They told him that she would sail.", &PRONOUNS_ALL).unwrap();
    assert!((w - 1.0 / 3.0).abs() <= 1e-15);
    assert_eq!(pronoun_score("she he", "they", &PRONOUNS_CORE).unwrap(), 1.0);
    assert_eq!(pronoun_score("a quiet harbor", "a harbor", &PRONOUNS_CORE).unwrap(), 2.0 / 3.0);
}

proptest! {
    #[test]
    fn efficacy_is_rank_invariant(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40)) {
        let e = efficacy_score(&pairs).unwrap();
        let mapped: Vec<(f64, f64)> = pairs.iter().map(|(a, b)| (a.ln_1p() * 3.0 + 1.0, b.ln_1p() * 3.0 + 1.0)).collect();
        prop_assert_eq!(e, efficacy_score(&mapped).unwrap());
        prop_assert!((0.0..=1.0).contains(&e));
        let swapped: Vec<(f64, f64)> = pairs.iter().map(|&(a, b)| (b, a)).collect();
        let ties = pairs.iter().filter(|(a, b)| a == b).count() as f64 / pairs.len() as f64;
        prop_assert!((e + efficacy_score(&swapped).unwrap() + ties - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn pronoun_score_range_and_monotonicity(keep in prop::collection::vec(any::<bool>(), 6), drop_words in 0usize..4) {
        let ori = "she met him where he said she would wait by the old gate";
        let pronouns = ["she", "him", "he", "she"];
        let mut gen: Vec<&str> = vec!["they", "met", "them", "where", "they", "said", "they", "would", "wait", "by", "the", "old", "gate"];
        gen.truncate(gen.len() - drop_words);
        let mut with: Vec<String> = gen.iter().map(|s| s.to_string()).collect();
        let base = pronoun_score(ori, &with.join(" "), &PRONOUNS_ALL).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        let mut prev = base;
        for (i, &k) in keep.iter().enumerate() {
            if k {
                with.push(pronouns[i % 4].to_string());
                let s = pronoun_score(ori, &with.join(" "), &PRONOUNS_ALL).unwrap();
                prop_assert!(s <= prev + 1e-15);
                prop_assert!((0.0..=1.0).contains(&s));
                prev = s;
            }
        }
    }
}

#[test]
fn heatmap_round_trip() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
    let d = Matrix::from_fn(3, 4, |_, _| rng.gen_range(0.0..10.0));
    let dir = tempdir().unwrap();
    let path = dir.path().join("h.csv");
    export_heatmap(&d, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut back = Matrix::zeros(3, 4);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("layer,head,distance"));
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        back.set(f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap());
    }
    assert_eq!(back, d);
    let zeros = heatmap_csv(&Matrix::zeros(2, 2));
    assert_eq!(zeros.lines().count(), 5);
    assert!(zeros.lines().skip(1).all(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap() == 0.0));
}

#[test]
fn constant_shift_projects_onto_components() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
    let neg = Matrix::from_fn(26, 6, |_, _| rng.gen_range(-1.0..1.0));
    let c = [0.4, -0.2, 0.1, 0.0, 0.3, -0.5];
    let pos = Matrix::from_fn(26, 6, |i, j| neg.get(i, j) + c[j]);
    let shift = pca_shift(&pos, &neg).unwrap();

    let mut stacked = neg.data().to_vec();
    stacked.extend_from_slice(pos.data());
    let comps = pca2(&Matrix::new(52, 6, stacked).unwrap()).unwrap().components;
    for a in 0..2 {
        let want: f64 = (0..6).map(|j| comps.get(j, a) * c[j]).sum();
        assert!((shift.mean_shift[a] - want).abs() <= 1e-9);
        for p in &shift.pairs {
            assert!((p[2 + a] - p[a] - want).abs() <= 1e-9);
        }
    }

    let dir = tempdir().unwrap();
    let path = dir.path().join("pca.csv");
    export_pca_shift(&pos, &neg, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 27);
    assert!(rows[26].starts_with("MEAN_SHIFT,"));
    assert!(pca_shift(&pos, &Matrix::zeros(25, 6)).is_err());
}
