mod oracles;

use oracles::{gradient_report, GRAD_TOLERANCE};

#[test]
fn analytic_loss_gradients_match_central_differences() {
    let rep = gradient_report(100, 0x5eed);
    assert!(rep.focal < GRAD_TOLERANCE, "focal {}", rep.focal);
    assert!(rep.dice < GRAD_TOLERANCE, "dice {}", rep.dice);
    assert!(rep.l1 < GRAD_TOLERANCE, "l1 {}", rep.l1);
    assert!(rep.giou < GRAD_TOLERANCE, "giou {}", rep.giou);
}

#[test]
fn other_seeds_pass_too() {
    for seed in 1..4 {
        oracles::check_gradients(100, seed).unwrap();
    }
}

mod objectness {
    use super::oracles::{central_diff, rel_err, rng, GRAD_TOLERANCE};
    use owseg_core::losses::{objectness_loss, FocalParams, ObjectnessScores, ObjectnessTargets};
    use owseg_core::{LossWeights, ObjectnessVariant};
    use rand::Rng;

    #[test]
    fn iou_regression_gradients_match_central_differences() {
        let mut r = rng(21);
        let w = LossWeights::default();
        let f = FocalParams::default();
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let t = ObjectnessTargets { is_object: true, box_iou: r.random_range(0.0..1.0), mask_iou: r.random_range(0.0..1.0) };
            // Keep the scores away from the kink at the target.
            let s = |r: &mut rand_chacha::ChaCha8Rng, target: f64| loop {
                let v: f64 = r.random_range(0.01..0.99);
                if (v - target).abs() > 1e-3 {
                    break v;
                }
            };
            let scores = ObjectnessScores { cls: Some(s(&mut r, 2.0)), box_iou: Some(s(&mut r, t.box_iou)), mask_iou: Some(s(&mut r, t.mask_iou)) };
            let l = objectness_loss(ObjectnessVariant::Fusion, &scores, &t, &w, f).unwrap();
            let nb = central_diff(|x| objectness_loss(ObjectnessVariant::Fusion, &ObjectnessScores { box_iou: Some(x), ..scores }, &t, &w, f).unwrap().value, scores.box_iou.unwrap());
            let nm = central_diff(|x| objectness_loss(ObjectnessVariant::Fusion, &ObjectnessScores { mask_iou: Some(x), ..scores }, &t, &w, f).unwrap().value, scores.mask_iou.unwrap());
            let nc = central_diff(|x| objectness_loss(ObjectnessVariant::Cls, &ObjectnessScores { cls: Some(x), ..scores }, &t, &w, f).unwrap().value, scores.cls.unwrap());
            let lc = objectness_loss(ObjectnessVariant::Cls, &scores, &t, &w, f).unwrap();
            worst = worst.max(rel_err(l.grad_box_iou, nb)).max(rel_err(l.grad_mask_iou, nm)).max(rel_err(lc.grad_cls, nc));
            assert_eq!(l.grad_cls, 0.0);

            let v = objectness_loss(ObjectnessVariant::Void, &scores, &t, &w, f).unwrap();
            assert_eq!((v.value, v.grad_cls, v.grad_box_iou, v.grad_mask_iou), (0.0, 0.0, 0.0, 0.0));
        }
        assert!(worst < GRAD_TOLERANCE, "{worst}");
    }
}
