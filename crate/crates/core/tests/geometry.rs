mod oracles;

use owseg_core::geometry::{box_iou, generalized_iou, mask_iou, rle_decode, rle_encode, BinaryMask, BoxXyxy};
use proptest::prelude::*;

#[test]
fn boxes_masks_and_rle_match_brute_force() {
    let summary = oracles::check_geometry(1000, 7).unwrap();
    assert!(summary.contains("65536"));
}

#[test]
fn touching_and_nested_boxes() {
    let b = |x1, y1, x2, y2| BoxXyxy::new(x1, y1, x2, y2).unwrap();
    assert_eq!(box_iou(&b(0., 0., 1., 1.), &b(1., 0., 2., 1.)), 0.0);
    assert_eq!(generalized_iou(&b(0., 0., 1., 1.), &b(1., 0., 2., 1.)), 0.0);
    assert_eq!(box_iou(&b(0., 0., 4., 4.), &b(1., 1., 3., 3.)), 0.25);
    assert_eq!(generalized_iou(&b(0., 0., 1., 1.), &b(2., 0., 3., 1.)), -1.0 / 3.0);
}

fn any_box() -> impl Strategy<Value = BoxXyxy> {
    (0.0..100.0f64, 0.0..100.0f64, 0.0..50.0f64, 0.0..50.0f64)
        .prop_map(|(x, y, w, h)| BoxXyxy::new(x, y, x + w, y + h).unwrap())
}

fn any_mask() -> impl Strategy<Value = (usize, usize, Vec<bool>, Vec<bool>)> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        (Just(h), Just(w), prop::collection::vec(any::<bool>(), h * w), prop::collection::vec(any::<bool>(), h * w))
    })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in any_box(), b in any_box()) {
        let (i, j) = (box_iou(&a, &b), box_iou(&b, &a));
        prop_assert_eq!(i, j);
        prop_assert!((0.0..=1.0).contains(&i));
        let g = generalized_iou(&a, &b);
        prop_assert_eq!(g, generalized_iou(&b, &a));
        prop_assert!((-1.0..=1.0).contains(&g));
        prop_assert!(g <= i + 1e-12);
    }

    #[test]
    fn self_iou_is_one(a in any_box()) {
        prop_assume!(a.area() > 0.0);
        prop_assert!((box_iou(&a, &a) - 1.0).abs() < 1e-12);
        prop_assert!((generalized_iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mask_iou_properties((h, w, a, b) in any_mask()) {
        let ma = BinaryMask::from_row_major(h, w, &a).unwrap();
        let mb = BinaryMask::from_row_major(h, w, &b).unwrap();
        let i = mask_iou(&ma, &mb).unwrap();
        prop_assert_eq!(i, mask_iou(&mb, &ma).unwrap());
        prop_assert!((0.0..=1.0).contains(&i));
        prop_assert_eq!(mask_iou(&ma, &ma).unwrap(), 1.0);
        prop_assert!((i - oracles::brute_mask_iou(&ma, &mb)).abs() < 1e-12);
    }

    #[test]
    fn rle_round_trips((h, w, a, _b) in any_mask()) {
        let m = BinaryMask::from_row_major(h, w, &a).unwrap();
        let rle = rle_encode(&m);
        prop_assert_eq!(rle.area(), m.area());
        prop_assert_eq!(rle.counts.iter().map(|&c| c as usize).sum::<usize>(), h * w);
        prop_assert_eq!(rle_decode(&rle).unwrap(), m);
    }
}

#[test]
fn mismatched_mask_shapes_are_rejected() {
    assert!(mask_iou(&BinaryMask::new(2, 3), &BinaryMask::new(3, 2)).is_err());
}
