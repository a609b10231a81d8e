use std::collections::BTreeSet;

use fogseg::evalkit::*;
use fogseg::fogsim::{generate_split, DatasetConfig, LabelMap, Raster, Split};
use fogseg::losses::IGNORE;
use fogseg::nets::{build_segnet, ArchConfig};
use proptest::prelude::*;

fn map(h: usize, w: usize, v: Vec<u8>) -> LabelMap {
    LabelMap::new(h, w, v).unwrap()
}

/// IoU per class from pixel index sets, skipping ignored ground truth.
fn set_miou(pred: &LabelMap, gt: &LabelMap, k: usize) -> Option<f64> {
    let mut ious = Vec::new();
    for c in 0..k as u8 {
        let valid = |i: &usize| gt.data()[*i] != IGNORE;
        let p: BTreeSet<usize> = (0..pred.data().len()).filter(valid).filter(|&i| pred.data()[i] == c).collect();
        let g: BTreeSet<usize> = (0..gt.data().len()).filter(valid).filter(|&i| gt.data()[i] == c).collect();
        let union = p.union(&g).count();
        if union > 0 {
            ious.push(p.intersection(&g).count() as f64 / union as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

#[test]
fn confusion_examples() {
    let cm = confusion(&map(2, 2, vec![1; 4]), &map(2, 2, vec![1; 4]), 3).unwrap();
    assert_eq!(cm.get(1, 1), 4);
    assert_eq!(cm.total(), 4);
    let cm = confusion(&map(1, 4, vec![0; 4]), &map(1, 4, vec![0, 0, 1, 1]), 2).unwrap();
    assert_eq!((cm.get(0, 0), cm.get(1, 0), cm.get(0, 1), cm.get(1, 1)), (2, 2, 0, 0));
    assert!(matches!(
        confusion(&map(1, 1, vec![3]), &map(1, 1, vec![0]), 3),
        Err(fogseg::Error::Range(_))
    ));
}

#[test]
fn confusion_is_additive_over_halves() {
    let pred = map(2, 4, vec![0, 1, 2, 1, 0, 0, 2, 2]);
    let gt = map(2, 4, vec![0, 1, 1, 1, 2, 0, 2, IGNORE]);
    let whole = confusion(&pred, &gt, 3).unwrap();
    let top = confusion(&map(1, 4, pred.data()[..4].to_vec()), &map(1, 4, gt.data()[..4].to_vec()), 3).unwrap();
    let mut sum = confusion(&map(1, 4, pred.data()[4..].to_vec()), &map(1, 4, gt.data()[4..].to_vec()), 3).unwrap();
    sum.merge(&top).unwrap();
    assert_eq!(sum, whole);
    assert_eq!(whole.total(), 7);
}

#[test]
fn miou_examples() {
    // Diagonal (3, 1), off-diagonal (1, 1).
    let gt = map(1, 6, vec![0, 0, 0, 0, 1, 1]);
    let pred = map(1, 6, vec![0, 0, 0, 1, 1, 0]);
    let v = miou(&confusion(&pred, &gt, 2).unwrap()).unwrap();
    assert!((v - (0.6 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
    assert_eq!(miou(&confusion(&gt, &gt, 2).unwrap()).unwrap(), 1.0);
    let swapped = map(1, 6, gt.data().iter().map(|c| 1 - c).collect());
    assert_eq!(miou(&confusion(&swapped, &gt, 2).unwrap()).unwrap(), 0.0);
    assert!(matches!(miou(&ConfusionMatrix::new(3)), Err(fogseg::Error::Degenerate(_))));
}

#[test]
fn psnr_examples() {
    let a = Raster::filled(4, 4, 0.5);
    let b = Raster::filled(4, 4, 0.6);
    let p = psnr(&a, &b).unwrap();
    assert!((p.db - 20.0).abs() < 1e-4);
    assert_eq!(p.db, psnr(&b, &a).unwrap().db);
    let same = psnr(&a, &a).unwrap();
    assert!(same.capped && same.db == PSNR_CAP);
}

#[test]
fn evaluation_is_repeatable_and_order_invariant() {
    let cfg = DatasetConfig {
        test: 6,
        ..DatasetConfig::default()
    };
    let mut samples = generate_split(&cfg, Split::Test).unwrap();
    let arch = ArchConfig::default();
    let seg = build_segnet(&arch, 9).unwrap();
    let a = evaluate(&seg, &arch, &samples, EvalInput::Fog).unwrap();
    assert_eq!(a, evaluate(&seg, &arch, &samples, EvalInput::Fog).unwrap());
    samples.reverse();
    assert_eq!(a, evaluate(&seg, &arch, &samples, EvalInput::Fog).unwrap());
    assert_eq!(a.images, 6);
}

#[test]
fn preset_names_round_trip() {
    for p in Preset::ALL {
        assert_eq!(p.name().parse::<Preset>().unwrap(), p);
    }
    assert!(matches!("table9".parse::<Preset>(), Err(fogseg::Error::Config(_))));
    assert!(AblationSpec::new(Preset::Table2, vec![]).validate().is_err());
    assert_eq!(parse_seeds("1, 2,3").unwrap(), vec![1, 2, 3]);
    assert!(parse_seeds("1,x").is_err());
}

#[test]
fn table_reports_mean_std_and_seed_count() {
    let table = AblationTable {
        preset: Preset::Fig1c,
        metrics: vec!["fog_test_miou".into()],
        rows: vec![AblationRow {
            label: "joint".into(),
            seeds: vec![1, 2, 3],
            values: vec![vec![0.5, 0.6, 0.7]],
        }],
    };
    assert!((table.mean("joint", "fog_test_miou").unwrap() - 0.6).abs() < 1e-12);
    assert!((table.rows[0].std(0) - 0.1).abs() < 1e-12);
    let csv = table.to_csv();
    assert_eq!(
        csv.lines().next().unwrap(),
        "schema,preset,row,n_seeds,fog_test_miou_mean,fog_test_miou_std"
    );
    assert_eq!(csv.lines().nth(1).unwrap(), "1,fig1c,joint,3,0.600000,0.100000");
    assert_eq!(table.to_seed_csv().lines().count(), 4);
}

#[test]
fn palette_colors_are_distinct() {
    let set: BTreeSet<[u8; 3]> = PALETTE.iter().copied().chain([IGNORE_COLOR]).collect();
    assert_eq!(set.len(), PALETTE.len() + 1);
    let c = colorize(&map(1, 2, vec![3, IGNORE]));
    assert_eq!(c.pixel(0, 0), PALETTE[3].map(|v| f32::from(v) / 255.0));
    assert_eq!(c.pixel(0, 1), [0.0; 3]);
}

fn label_pair() -> impl Strategy<Value = (usize, usize, Vec<u8>, Vec<u8>)> {
    (1usize..=16, 1usize..=16).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            prop::collection::vec(0u8..4, h * w),
            prop::collection::vec(prop_oneof![8 => 0u8..4, 1 => Just(IGNORE)], h * w),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn miou_matches_set_computation((h, w, p, g) in label_pair()) {
        let (pred, gt) = (map(h, w, p), map(h, w, g));
        let cm = confusion(&pred, &gt, 4).unwrap();
        match set_miou(&pred, &gt, 4) {
            Some(v) => prop_assert_eq!(miou(&cm).unwrap(), v),
            None => prop_assert!(miou(&cm).is_err()),
        }
    }

    #[test]
    fn confusion_is_permutation_equivariant((h, w, p, g) in label_pair(), perm in Just([0u8, 1, 2, 3]).prop_shuffle()) {
        let relabel = |v: &[u8]| v.iter().map(|&c| if c == IGNORE { c } else { perm[c as usize] }).collect::<Vec<_>>();
        let a = confusion(&map(h, w, p.clone()), &map(h, w, g.clone()), 4).unwrap();
        let b = confusion(&map(h, w, relabel(&p)), &map(h, w, relabel(&g)), 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                prop_assert_eq!(a.get(i, j), b.get(perm[i] as usize, perm[j] as usize));
            }
        }
        if a.total() > 0 {
            prop_assert!((miou(&a).unwrap() - miou(&b).unwrap()).abs() < 1e-12);
        }
    }
}
