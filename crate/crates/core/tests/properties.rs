use compalign_core::compression::{magnitude_prune, Scope};
use compalign_core::losses::{ce_loss, ce_pred_loss, combined_loss, LossConfig, LossTerm};
use compalign_core::metrics::{count_cie_u, count_cies, dice, fairness_metrics, records, soft_iou};
use compalign_core::models::build_classifier;
use compalign_core::rng::{SeededRng, Stream};
use compalign_core::weighting::Weights;
use compalign_core::{softmax_t, Tensor};
use proptest::prelude::*;

fn logits(rows: usize, classes: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-20.0f64..20.0, rows * classes)
        .prop_map(move |v| Tensor::new(vec![rows, classes], v).unwrap())
}

fn prediction_triples(n: usize, classes: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<usize>)> {
    let v = move || prop::collection::vec(0..classes, n);
    (v(), v(), v())
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(z in logits(3, 5), t in 0.1f64..10.0) {
        let p = softmax_t(&z, t).unwrap();
        for row in p.data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn ce_pred_is_ce_against_teacher_argmax(s in logits(4, 3), t in logits(4, 3)) {
        let argmax: Vec<usize> = t
            .data()
            .chunks(3)
            .map(|r| {
                let mut best = 0;
                for k in 1..3 {
                    if r[k] > r[best] {
                        best = k;
                    }
                }
                best
            })
            .collect();
        let a = ce_pred_loss(&s, &t).unwrap();
        let b = ce_loss(&s, &argmax).unwrap();
        prop_assert_eq!(a.0, b.0);
        prop_assert_eq!(a.1, b.1);
    }

    #[test]
    fn combined_is_linear_in_weights(
        s in logits(4, 3),
        t in logits(4, 3),
        labels in prop::collection::vec(0usize..3, 4),
        raw in prop::collection::vec(0.01f64..1.0, 3),
    ) {
        let total: f64 = raw.iter().sum();
        let terms = [LossTerm::Ce, LossTerm::Mse, LossTerm::CePred];
        let pairs: Vec<(LossTerm, f64)> = terms.iter().zip(&raw).map(|(t, w)| (*t, w / total)).collect();
        let cfg = LossConfig::new(&terms).unwrap();
        let l = combined_loss(&cfg, &Weights::from_pairs(&pairs), &s, Some(&t), &labels).unwrap();
        let expect: f64 = pairs.iter().map(|(term, w)| w * l.terms.get(*term).unwrap()).sum();
        prop_assert!((l.value - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
    }

    #[test]
    fn iou_symmetry_and_self_match(
        a in prop::collection::vec(0.0f64..1.0, 16),
        b in prop::collection::vec(0.0f64..1.0, 16),
        k in 0.01f64..100.0,
    ) {
        prop_assert_eq!(soft_iou(&a, &b).unwrap(), soft_iou(&b, &a).unwrap());
        prop_assert_eq!(soft_iou(&a, &a).unwrap(), 1.0);
        let ka: Vec<f64> = a.iter().map(|v| v * k).collect();
        prop_assert_eq!(soft_iou(&ka, &ka).unwrap(), 1.0);
        let v = soft_iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn dice_symmetry(a in prop::collection::vec(0u8..2, 32), b in prop::collection::vec(0u8..2, 32)) {
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn cie_symmetric_and_cie_u_subset((y, r, c) in prediction_triples(50, 4)) {
        let rc = records(&y, &r, &c);
        let cr = records(&y, &c, &r);
        prop_assert_eq!(count_cies(&rc), count_cies(&cr));
        let (_, all) = count_cies(&rc);
        let (_, u) = count_cie_u(&rc);
        prop_assert!(u.iter().all(|i| all.contains(i)));
    }

    #[test]
    fn gap_is_invariant_under_relabeling((y, r, c) in prediction_triples(60, 4), seed in any::<u64>()) {
        // Every class must appear in the labels.
        let mut y = y;
        y[..4].copy_from_slice(&[0, 1, 2, 3]);
        let mut perm: Vec<usize> = (0..4).collect();
        SeededRng::new(seed, Stream::Test).shuffle(&mut perm);
        let relabel = |v: &[usize]| v.iter().map(|&k| perm[k]).collect::<Vec<_>>();
        let a = fairness_metrics(&records(&y, &r, &c), 4).unwrap();
        let b = fairness_metrics(&records(&relabel(&y), &relabel(&r), &relabel(&c)), 4).unwrap();
        prop_assert!((a.gap_reference - b.gap_reference).abs() < 1e-15);
        prop_assert!((a.gap_compressed - b.gap_compressed).abs() < 1e-15);
        prop_assert!(a.gap_reference >= 0.0);
    }

    #[test]
    fn masking_is_idempotent(seed in 0u64..1000, fraction in 0.0f64..0.9) {
        let mut net = build_classifier(3, &[6], 3, &mut SeededRng::new(seed, Stream::Init)).unwrap();
        magnitude_prune(&mut net, fraction, Scope::PerLayer).unwrap();
        let once = net.clone();
        for p in net.params_mut() {
            p.apply_mask();
        }
        prop_assert_eq!(&once, &net);
        for p in net.params() {
            for (v, m) in p.value.data().iter().zip(p.mask.data()) {
                if *m == 0.0 {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }
    }
}
