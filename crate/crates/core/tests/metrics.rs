mod common;

use common::metric_oracle::{assd_oracle, components_oracle, node_recall_oracle};
use lnsynth_core::metrics::{
    assd, assd_masks, evaluate_dataset, node_recall, node_recall_masks, voxel_overlap_metrics, EvalCase,
    DEFAULT_NODE_DSC_THRESHOLD,
};
use lnsynth_core::volume::{Geometry, LabelVolume};
use lnsynth_core::Error;
use proptest::prelude::*;

fn mask(shape: [usize; 3], f: impl Fn([usize; 3]) -> bool) -> LabelVolume {
    LabelVolume::from_fn(Geometry::unit(shape), |p| f(p) as u16)
}

fn boxed(lo: [usize; 3], hi: [usize; 3]) -> impl Fn([usize; 3]) -> bool {
    move |p| (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
}

#[test]
fn overlap_examples() {
    let s = [6; 3];
    let cube = mask(s, boxed([1, 1, 1], [2, 2, 2]));
    let o = voxel_overlap_metrics(&cube, &cube).unwrap();
    assert_eq!((o.dsc, o.iou, o.recall, o.precision), (1.0, 1.0, 1.0, 1.0));
    let far = mask(s, boxed([4, 4, 4], [5, 5, 5]));
    let o = voxel_overlap_metrics(&cube, &far).unwrap();
    assert_eq!((o.dsc, o.iou, o.recall, o.precision), (0.0, 0.0, 0.0, 0.0));
    let shifted = mask(s, boxed([1, 1, 2], [2, 2, 3]));
    let o = voxel_overlap_metrics(&shifted, &cube).unwrap();
    assert_eq!(o.dsc, 0.5);
    assert!((o.iou - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!((o.recall, o.precision), (0.5, 0.5));
}

#[test]
fn empty_mask_conventions() {
    let s = [4; 3];
    let empty = mask(s, |_| false);
    let one = mask(s, |p| p == [1, 1, 1]);
    let o = voxel_overlap_metrics(&empty, &empty).unwrap();
    assert_eq!((o.dsc, o.iou, o.recall, o.precision), (1.0, 1.0, 1.0, 1.0));
    let o = voxel_overlap_metrics(&empty, &one).unwrap();
    assert_eq!((o.dsc, o.iou, o.recall, o.precision), (0.0, 0.0, 0.0, 0.0));
    assert!(matches!(assd(&empty, &one), Err(Error::Data(_))));
    assert!(matches!(node_recall(&one, &empty, 0.1), Err(Error::Data(_))));
    let other = LabelVolume::zeros(Geometry::unit([4, 4, 5]));
    assert!(matches!(voxel_overlap_metrics(&one, &other), Err(Error::Shape { .. })));
}

#[test]
fn assd_examples() {
    let s = [3, 3, 9];
    let a = mask(s, |p| p == [1, 1, 1]);
    let b = mask(s, |p| p == [1, 1, 6]);
    assert_eq!(assd(&a, &a).unwrap(), 0.0);
    assert_eq!(assd(&a, &b).unwrap(), 5.0);
}

#[test]
fn node_recall_examples() {
    assert_eq!(DEFAULT_NODE_DSC_THRESHOLD, 0.1);
    let s = [10; 3];
    let gt = mask(s, |p| boxed([1, 1, 1], [2, 2, 2])(p) || boxed([6, 6, 6], [8, 8, 8])(p));
    let pred = mask(s, boxed([1, 1, 1], [2, 2, 2]));
    assert_eq!(node_recall(&pred, &gt, 0.1).unwrap(), 0.5);
    // one big prediction may detect both nodes
    let big = mask(s, boxed([0, 0, 0], [9, 9, 9]));
    let small_gt = mask(s, |p| p == [0, 0, 0] || p == [9, 9, 9]);
    assert_eq!(node_recall(&big, &small_gt, 0.0).unwrap(), 1.0);
    assert_eq!(node_recall(&big, &small_gt, 0.1).unwrap(), 0.0);
}

#[test]
fn dataset_means() {
    let s = [4; 3];
    let a = mask(s, |p| p[0] < 2);
    let b = mask(s, |p| p[0] >= 2);
    let one = evaluate_dataset(&[EvalCase { id: "x", pred: &a, gt: &a }], 0.1).unwrap();
    assert_eq!(one.dsc, one.per_case[0].dsc);
    assert_eq!(one.assd_mm, one.per_case[0].assd_mm);
    let two = evaluate_dataset(&[EvalCase { id: "x", pred: &a, gt: &a }, EvalCase { id: "y", pred: &b, gt: &a }], 0.1).unwrap();
    assert_eq!(two.dsc, 0.5);
    assert_eq!(two.node_recall, Some(0.5));
    let table = two.to_table();
    for col in ["DSC", "IOU", "Recall", "Precision", "ASSD(mm)", "NodeRecall"] {
        assert!(table.contains(col));
    }
    let empty = mask(s, |_| false);
    let r = evaluate_dataset(&[EvalCase { id: "x", pred: &empty, gt: &a }, EvalCase { id: "y", pred: &a, gt: &a }], 0.1).unwrap();
    assert_eq!(r.assd_missing, 1);
    assert_eq!(r.assd_mm, Some(0.0));
    let other = LabelVolume::zeros(Geometry::unit([5; 3]));
    match evaluate_dataset(&[EvalCase { id: "bad-case", pred: &other, gt: &a }], 0.1) {
        Err(e) => assert!(e.to_string().contains("bad-case"), "{e}"),
        Ok(_) => panic!("geometry mismatch accepted"),
    }
}

fn random_pair() -> impl Strategy<Value = ([usize; 3], Vec<bool>, Vec<bool>, [f64; 3])> {
    (8usize..=12, 8usize..=12, 8usize..=12, 0.02f64..0.3, 0.02f64..0.3).prop_flat_map(|(d, h, w, pa, pb)| {
        let n = d * h * w;
        (
            Just([d, h, w]),
            proptest::collection::vec(proptest::bool::weighted(pa), n),
            proptest::collection::vec(proptest::bool::weighted(pb), n),
            [0.5f64..2.5, 0.5f64..2.5, 0.5f64..2.5],
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_match_brute_force((s, a, b, sp) in random_pair()) {
        let geom = Geometry::new(s, sp).unwrap();
        let va = LabelVolume::from_mask(geom, &a).unwrap();
        let vb = LabelVolume::from_mask(geom, &b).unwrap();
        let o = voxel_overlap_metrics(&va, &vb).unwrap();
        let tp = a.iter().zip(&b).filter(|(x, y)| **x && **y).count() as f64;
        let (na, nb) = (a.iter().filter(|x| **x).count() as f64, b.iter().filter(|x| **x).count() as f64);
        if na > 0.0 && nb > 0.0 {
            prop_assert!((o.dsc - 2.0 * tp / (na + nb)).abs() < 1e-9);
            prop_assert!((o.iou - tp / (na + nb - tp)).abs() < 1e-9);
            prop_assert!((o.precision - tp / na).abs() < 1e-9);
            prop_assert!((o.recall - tp / nb).abs() < 1e-9);
            let got = assd_masks(&a, &b, s, sp).unwrap();
            prop_assert!((got - assd_oracle(&a, &b, s, sp)).abs() < 1e-9);
        }
        prop_assert!((o.dsc - 2.0 * o.iou / (1.0 + o.iou)).abs() < 1e-9);
        if nb > 0.0 {
            let thr = 0.1;
            prop_assert_eq!(node_recall_masks(&a, &b, s, thr).unwrap(), node_recall_oracle(&a, &b, s, thr));
        }
    }

    #[test]
    fn symmetry_and_scale((s, a, b, sp) in random_pair()) {
        prop_assume!(a.iter().any(|x| *x) && b.iter().any(|x| *x));
        let ab = assd_masks(&a, &b, s, sp).unwrap();
        prop_assert!((ab - assd_masks(&b, &a, s, sp).unwrap()).abs() < 1e-12);
        let doubled = assd_masks(&a, &b, s, sp.map(|v| 2.0 * v)).unwrap();
        prop_assert!((doubled - 2.0 * ab).abs() < 1e-9 * ab.max(1.0));
        let geom = Geometry::new(s, sp).unwrap();
        let (va, vb) = (LabelVolume::from_mask(geom, &a).unwrap(), LabelVolume::from_mask(geom, &b).unwrap());
        let o1 = voxel_overlap_metrics(&va, &vb).unwrap();
        let o2 = voxel_overlap_metrics(&vb, &va).unwrap();
        prop_assert_eq!(o1.dsc, o2.dsc);
        prop_assert_eq!(o1.precision, o2.recall);
        let g2 = Geometry::new(s, sp.map(|v| 2.0 * v)).unwrap();
        let o3 = voxel_overlap_metrics(&LabelVolume::from_mask(g2, &a).unwrap(), &LabelVolume::from_mask(g2, &b).unwrap()).unwrap();
        prop_assert_eq!(o1, o3);
    }

    #[test]
    fn adding_a_true_positive_never_hurts((s, a, b, _sp) in random_pair(), pick in any::<prop::sample::Index>()) {
        let missed: Vec<usize> = (0..a.len()).filter(|i| b[*i] && !a[*i]).collect();
        prop_assume!(!missed.is_empty());
        let geom = Geometry::unit(s);
        let gt = LabelVolume::from_mask(geom, &b).unwrap();
        let before = voxel_overlap_metrics(&LabelVolume::from_mask(geom, &a).unwrap(), &gt).unwrap();
        let mut a2 = a.clone();
        a2[missed[pick.index(missed.len())]] = true;
        let after = voxel_overlap_metrics(&LabelVolume::from_mask(geom, &a2).unwrap(), &gt).unwrap();
        prop_assert!(after.dsc >= before.dsc && after.iou >= before.iou && after.recall >= before.recall);
    }

    #[test]
    fn node_recall_is_a_fraction_of_nodes((s, a, b, _sp) in random_pair()) {
        prop_assume!(b.iter().any(|x| *x));
        let n = components_oracle(&b, s).len() as f64;
        let r = node_recall_masks(&a, &b, s, 0.1).unwrap();
        prop_assert!((r * n - (r * n).round()).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&r));
    }
}
