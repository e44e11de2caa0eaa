//! Property tests for the invariants of each module.

use std::collections::BTreeSet;

use proptest::prelude::*;
use unimatch::backbone::fuse;
use unimatch::harness::{recall, relative_change};
use unimatch::model::bucket;
use unimatch::retrieval::rank;
use unimatch::rrl::{ocl, perspective_weights};
use unimatch::synthdata::{split, unify, EntityClass, FieldValue, RawEntity, Record, Schema, SplitMode};
use unimatch::trainer::{sampled_softmax_loss, uwl_total};
use unimatch_tape::{Tape, Tensor};

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::new(rows, cols, v).unwrap())
}

fn record(user_id: u32, domain: usize, ts: u64) -> Record {
    Record {
        user_id,
        profile: Default::default(),
        sequence: Vec::new(),
        target: 0,
        target_class: EntityClass::A,
        entity: Default::default(),
        domain,
        label: 1,
        ts,
    }
}

proptest! {
    #[test]
    fn recall_is_an_exact_ratio(truth in prop::collection::btree_set(0u32..50, 1..20),
                                found in prop::collection::vec(0u32..50, 0..40)) {
        let r = recall(&truth, &found).unwrap();
        let expected = truth.iter().filter(|t| found.contains(t)).count();
        prop_assert_eq!(r.hits, expected);
        prop_assert_eq!(r.total, truth.len());
        prop_assert!((0.0..=1.0).contains(&r.value()));
        let all: Vec<u32> = truth.iter().copied().collect();
        prop_assert_eq!(recall(&truth, &all).unwrap().value(), 1.0);
    }

    #[test]
    fn relative_change_is_zero_against_itself(x in 0.01f64..1.0) {
        prop_assert_eq!(relative_change(x, x), 0.0);
    }

    #[test]
    fn equal_logits_give_log_candidate_count(rows in 1usize..6, cols in 1usize..10, v in -5.0f64..5.0) {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::full(rows, cols, v)).unwrap();
        let loss = sampled_softmax_loss(&mut t, logits, 0.37).unwrap();
        let expected = rows as f64 * (cols as f64).ln();
        prop_assert!((t.value(loss).data()[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn uncertainty_weighting_closed_form(ce in 0.0f64..10.0,
                                         losses in prop::collection::vec(0.0f64..10.0, 4),
                                         s in prop::collection::vec(-2.0f64..3.0, 4)) {
        let mut t = Tape::new();
        let cev = t.constant(Tensor::scalar(ce)).unwrap();
        let aux = [0, 1, 2, 3].map(|i| Some(t.constant(Tensor::scalar(losses[i])).unwrap()));
        let lv = t.constant(Tensor::row(s.clone())).unwrap();
        let (total, weights) = uwl_total(&mut t, cev, &aux, Some(lv), 0.01).unwrap();
        let expected = ce + (0..4).map(|i| 0.5 * (-s[i]).exp() * losses[i] + 0.5 * s[i]).sum::<f64>();
        prop_assert!((t.value(total).data()[0] - expected).abs() < 1e-9);
        for i in 0..4 {
            prop_assert!((weights[i] - 0.5 * (-s[i]).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn disabled_losses_contribute_nothing(ce in 0.0f64..10.0, l in 0.0f64..10.0) {
        let mut t = Tape::new();
        let cev = t.constant(Tensor::scalar(ce)).unwrap();
        let one = t.constant(Tensor::scalar(l)).unwrap();
        let (total, weights) = uwl_total(&mut t, cev, &[None, Some(one), None, None], None, 0.01).unwrap();
        prop_assert!((t.value(total).data()[0] - (ce + 0.01 * l)).abs() < 1e-12);
        prop_assert_eq!(weights, [0.0, 0.01, 0.0, 0.0]);
    }

    #[test]
    fn perspective_weights_sum_to_one_per_side(labels in prop::collection::vec(0usize..4, 2..40), t in 0usize..4) {
        let w = perspective_weights(&labels, t);
        let own: f64 = w.iter().zip(&labels).filter(|(_, &y)| y == t).map(|(w, _)| w).sum();
        let other: f64 = w.iter().zip(&labels).filter(|(_, &y)| y != t).map(|(w, _)| w).sum();
        if labels.contains(&t) {
            prop_assert!((own - 1.0).abs() < 1e-12);
        }
        if labels.iter().any(|&y| y != t) {
            prop_assert!((other - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ranking_is_sorted_with_id_tie_break(scores in prop::collection::vec(-3i32..3, 1..40)) {
        let mut v: Vec<(u32, f64)> = scores.iter().enumerate().map(|(i, &s)| (i as u32, s as f64)).collect();
        let mut reversed = v.clone();
        reversed.reverse();
        rank(&mut v);
        rank(&mut reversed);
        prop_assert_eq!(&v, &reversed);
        for w in v.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
    }

    #[test]
    fn gradient_reversal_forward_is_bit_identical(x in tensor(3, 4), coef in -2.0f64..2.0) {
        let mut t = Tape::new();
        let v = t.param(x.clone()).unwrap();
        let r = t.grad_reverse(v, coef).unwrap();
        prop_assert_eq!(t.value(r), &x);
    }

    #[test]
    fn orthogonality_loss_is_non_negative(a in tensor(6, 3), b in tensor(6, 3)) {
        let mut t = Tape::new();
        let av = t.constant(a).unwrap();
        let bv = t.constant(b).unwrap();
        let l = ocl(&mut t, av, bv, &[vec![0, 1, 2], vec![3, 4, 5]]).unwrap();
        prop_assert!(t.value(l).data()[0] >= 0.0);
    }

    #[test]
    fn fusion_blocks_are_gated_products(d in tensor(2, 3), s in tensor(2, 3), w0 in 0.0f64..1.0, w1 in 0.0f64..1.0) {
        let mut t = Tape::new();
        let dv = t.constant(d.clone()).unwrap();
        let sv = t.constant(s.clone()).unwrap();
        let w = t.constant(Tensor::row(vec![w0, w1])).unwrap();
        let f = fuse(&mut t, dv, sv, w).unwrap();
        let out = t.value(f);
        prop_assert_eq!(out.shape(), [2, 9]);
        for r in 0..2 {
            for c in 0..3 {
                let a = w0 * d.get(r, c);
                let b = w1 * s.get(r, c);
                prop_assert_eq!(out.get(r, c), a);
                prop_assert_eq!(out.get(r, 3 + c), a * b);
                prop_assert_eq!(out.get(r, 6 + c), b);
            }
        }
    }

    #[test]
    fn buckets_stay_in_range(key in ".{0,20}", buckets in 1usize..5000) {
        prop_assert!(bucket(&key, buckets) < buckets);
    }

    #[test]
    fn unify_closes_the_schema_and_is_idempotent(class in 0usize..4, price in -2.0f64..2.0, with_brand in any::<bool>()) {
        let schema = Schema::default();
        let class = EntityClass::ALL[class];
        let mut features = unimatch::synthdata::Features::new();
        features.insert("price_level".into(), FieldValue::Num(price));
        if with_brand {
            features.insert("brand".into(), FieldValue::Cat("brand_3".into()));
        }
        let raw = RawEntity { class: class.to_string(), features };
        let (c, once) = unify(&raw, &schema).unwrap();
        prop_assert_eq!(c, class);
        let names: BTreeSet<&String> = once.keys().collect();
        let expected: BTreeSet<&String> = schema.fields.iter().map(|f| &f.name).collect();
        prop_assert_eq!(names, expected);
        let again = RawEntity { class: class.to_string(), features: once.clone() };
        prop_assert_eq!(unify(&again, &schema).unwrap().1, once);
    }

    #[test]
    fn time_split_sizes_and_order(n in 2usize..200, ratio in 0.1f64..0.9) {
        let records: Vec<Record> = (0..n).map(|i| record(i as u32 % 7, i % 4, (n - i) as u64)).collect();
        let (train, test, _) = split(&records, ratio, SplitMode::Time, 4, 0).unwrap();
        prop_assert_eq!(train.len() + test.len(), n);
        prop_assert!((train.len() as f64 - ratio * n as f64).abs() <= 1.0);
        let last_train = train.iter().map(|r| r.ts).max();
        let first_test = test.iter().map(|r| r.ts).min();
        if let (Some(a), Some(b)) = (last_train, first_test) {
            prop_assert!(a < b);
        }
    }

    #[test]
    fn user_split_keeps_users_whole(n in 2usize..200, seed in 0u64..50) {
        let records: Vec<Record> = (0..n).map(|i| record(i as u32 % 13, i % 4, i as u64)).collect();
        let (train, test, _) = split(&records, 0.7, SplitMode::UserDisjoint, 4, seed).unwrap();
        let a: BTreeSet<u32> = train.iter().map(|r| r.user_id).collect();
        let b: BTreeSet<u32> = test.iter().map(|r| r.user_id).collect();
        prop_assert!(a.is_disjoint(&b));
        let (train2, _, _) = split(&records, 0.7, SplitMode::UserDisjoint, 4, seed).unwrap();
        prop_assert_eq!(train, train2);
    }
}
