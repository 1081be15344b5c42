//! Property tests over randomized inputs: algebraic invariants that hold
//! for arbitrary data, not just the hand-picked unit-test cases.

use proptest::prelude::*;

use graftnet::eval::{pcs, sigmoid_probs};
use graftnet::metrics::{dice, f1, iou_metric};
use graftnet::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_stochastic(data in prop::collection::vec(-1e3f64..1e3, 24)) {
        let x = Tensor::new(&[4, 6], data).unwrap();
        let y = x.softmax_rows().unwrap();
        for row in y.to_vec().chunks(6) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn reshape_permute_roundtrips_bitwise(data in prop::collection::vec(-1e6f64..1e6, 30)) {
        let x = Tensor::new(&[2, 3, 5], data).unwrap();
        let r = x.reshape(&[5, 6]).unwrap().reshape(&[2, 3, 5]).unwrap();
        prop_assert_eq!(x.to_vec(), r.to_vec());
        let p = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
        prop_assert_eq!(x.to_vec(), p.to_vec());
    }

    #[test]
    fn pcs_never_flips_the_hard_mask(data in prop::collection::vec(-20f32..20.0, 36)) {
        let logits = Tensor::new(&[6, 6], data).unwrap();
        let plain: Vec<bool> = sigmoid_probs(&logits).unwrap().to_vec().iter().map(|&p| p >= 0.5).collect();
        let corrected: Vec<bool> = pcs(&logits).unwrap().to_vec().iter().map(|&p| p >= 0.5).collect();
        prop_assert_eq!(plain, corrected);
    }

    #[test]
    fn dice_dominates_iou(
        pred in prop::collection::vec(0f32..1.0, 32),
        target in prop::collection::vec(prop::bool::ANY, 32),
    ) {
        let t: Vec<f32> = target.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let d = dice(&pred, &t);
        let i = iou_metric(&pred, &t);
        prop_assert!(d >= i - 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&i));
    }

    #[test]
    fn binary_f1_equals_hard_dice(
        pred in prop::collection::vec(prop::bool::ANY, 32),
        target in prop::collection::vec(prop::bool::ANY, 32),
    ) {
        let p: Vec<f32> = pred.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let t: Vec<f32> = target.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        prop_assert_eq!(f1(&p, &t), dice(&p, &t));
    }

    #[test]
    fn fuse_addition_laws(
        a in prop::collection::vec(-10f64..10.0, 12),
        b in prop::collection::vec(-10f64..10.0, 12),
    ) {
        let ta = Tensor::new(&[1, 3, 4], a).unwrap();
        let tb = Tensor::new(&[1, 3, 4], b).unwrap();
        let ab = ta.add(&tb).unwrap();
        let ba = tb.add(&ta).unwrap();
        prop_assert_eq!(ab.to_vec(), ba.to_vec());
        let zero = Tensor::<f64>::zeros(&[1, 3, 4]);
        prop_assert_eq!(ta.add(&zero).unwrap().to_vec(), ta.to_vec());
    }
}
