use std::collections::BTreeMap;

use proptest::prelude::*;

use segunify::eval::{masked_cross_entropy, ConfusionMatrix};
use segunify::label_space::MappingTable;
use segunify::logits::LogitMap;
use segunify::tta::{aggregate, argmax_mask, hflip_logits};
use segunify::{InversionPolicy, LabelSpace, MaskImage};

/// Per-pixel reference for projection: the explicit entry, else target void
/// for any id of the source space.
fn oracle_project(table: &MappingTable, v: u8) -> Option<u8> {
    match table.get(v as u32) {
        Some(t) => Some(t as u8),
        None if table.source().contains(v as u32) => table.target().void_id().map(|t| t as u8),
        None => None,
    }
}

fn random_table() -> impl Strategy<Value = MappingTable> {
    (2u32..40, 2u32..40).prop_flat_map(|(ns, nt)| {
        proptest::collection::vec(0..nt, ns as usize - 1).prop_map(move |targets| {
            let src = LabelSpace::sequential("src", ns, Some(0)).unwrap();
            let dst = LabelSpace::sequential("dst", nt, Some(0)).unwrap();
            let entries = targets.into_iter().enumerate().map(|(i, t)| (i as u32 + 1, t));
            MappingTable::new(src, dst, entries).unwrap()
        })
    })
}

fn mask_for(table: &MappingTable) -> impl Strategy<Value = MaskImage> {
    let n = table.source().len() as u8;
    (1u32..=64, 1u32..=64).prop_flat_map(move |(w, h)| {
        proptest::collection::vec(0..n, (w * h) as usize)
            .prop_map(move |d| MaskImage::new(w, h, d, "src").unwrap())
    })
}

fn grid_logits(w: u32, h: u32, c: u32) -> impl Strategy<Value = LogitMap> {
    // Multiples of 2^-8 in [-64, 64]: every f64 sum of a few of them is exact.
    proptest::collection::vec(-16384i32..=16384, (w * h * c) as usize).prop_map(move |v| {
        let data = v.into_iter().map(|q| q as f32 / 256.0).collect();
        LogitMap::new(w, h, c, data).unwrap()
    })
}

fn brute_matrix(c: usize, ignore: Option<u8>, pred: &MaskImage, gt: &MaskImage) -> Vec<u64> {
    let mut m = vec![0u64; c * c];
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let g = gt.get(x, y);
            if Some(g) == ignore {
                continue;
            }
            m[g as usize * c + pred.get(x, y) as usize] += 1;
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_matches_oracle((table, mask) in random_table().prop_flat_map(|t| {
        let m = mask_for(&t);
        (Just(t), m)
    })) {
        let out = table.build_lut().project(&mask).unwrap();
        for (i, (&v, &o)) in mask.data().iter().zip(out.data()).enumerate() {
            prop_assert_eq!(Some(o), oracle_project(&table, v), "pixel {}", i);
        }
        prop_assert_eq!(out.space(), "dst");
    }

    #[test]
    fn bijective_round_trip(n in 2u32..60, seed in any::<u64>(), (w, h) in (1u32..48, 1u32..48)) {
        // A permutation of the non-void ids, void fixed.
        let mut ids: Vec<u32> = (1..n).collect();
        let mut s = seed;
        for i in (1..ids.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ids.swap(i, (s >> 33) as usize % (i + 1));
        }
        let src = LabelSpace::sequential("src", n, Some(0)).unwrap();
        let dst = LabelSpace::sequential("dst", n, Some(0)).unwrap();
        let table = MappingTable::new(src, dst, (1..n).zip(ids)).unwrap();
        let back = table.invert(InversionPolicy::Strict).unwrap();
        let data: Vec<u8> = (0..w * h).map(|i| (((i as u64 * 2654435761) ^ seed) % n as u64) as u8).collect();
        let mask = MaskImage::new(w, h, data, "src").unwrap();
        let there = table.build_lut().project(&mask).unwrap();
        let again = back.build_lut().project(&there).unwrap();
        prop_assert_eq!(again, mask);
    }

    #[test]
    fn aggregate_is_permutation_invariant(
        maps in (1u32..6, 1u32..6, 1u32..5, 1usize..7).prop_flat_map(|(w, h, c, k)| {
            proptest::collection::vec(grid_logits(w, h, c), k)
        }),
        rot in 0usize..7,
    ) {
        let a = aggregate(&maps).unwrap();
        let mut shuffled = maps.clone();
        shuffled.reverse();
        let r = rot % shuffled.len();
        shuffled.rotate_left(r);
        prop_assert_eq!(aggregate(&shuffled).unwrap(), a);
    }

    #[test]
    fn argmax_invariant_under_monotone_transform(l in grid_logits(5, 4, 6)) {
        let base = argmax_mask(&l, "u").unwrap();
        let mut t = l.clone();
        for v in t.data_mut() {
            // Strictly increasing and exact on the grid at this magnitude.
            *v = ((*v as f64) / 8.0).exp() as f32;
        }
        prop_assert_eq!(argmax_mask(&t, "u").unwrap(), base);
    }

    #[test]
    fn argmax_matches_linear_scan(l in grid_logits(4, 4, 5)) {
        let m = argmax_mask(&l, "u").unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let mut best = 0;
                for c in 1..5 {
                    if l.get(c, x, y) > l.get(best, x, y) {
                        best = c;
                    }
                }
                prop_assert_eq!(m.get(x, y) as u32, best);
            }
        }
    }

    #[test]
    fn hflip_is_an_involution(l in grid_logits(7, 3, 4)) {
        let twice = hflip_logits(&hflip_logits(&l));
        prop_assert_eq!(twice.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        l.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn confusion_matches_tally_and_chunked_merge(
        masks in proptest::collection::vec(
            (proptest::collection::vec(0u8..5, 64), proptest::collection::vec(0u8..5, 64)), 1..10),
        split in 0usize..10,
    ) {
        let pairs: Vec<(MaskImage, MaskImage)> = masks
            .into_iter()
            .map(|(p, g)| (MaskImage::new(8, 8, p, "d").unwrap(), MaskImage::new(8, 8, g, "d").unwrap()))
            .collect();
        let mut single = ConfusionMatrix::new(5, Some(4));
        let mut brute = [0u64; 25];
        for (p, g) in &pairs {
            single.accumulate(p, g).unwrap();
            for (a, b) in brute.iter_mut().zip(brute_matrix(5, Some(4), p, g)) {
                *a += b;
            }
        }
        prop_assert_eq!(single.counts(), &brute[..]);
        let k = split % pairs.len();
        let mut left = ConfusionMatrix::new(5, Some(4));
        let mut right = ConfusionMatrix::new(5, Some(4));
        for (i, (p, g)) in pairs.iter().enumerate() {
            if i < k { left.accumulate(p, g).unwrap() } else { right.accumulate(p, g).unwrap() }
        }
        prop_assert_eq!(left.merge(&right).unwrap(), single.clone());
        prop_assert_eq!(right.merge(&left).unwrap(), single.clone());
        if let Ok(r) = single.iou_report() {
            let defined: Vec<f64> = r.per_class_iou.iter().flatten().copied().collect();
            prop_assert!(defined.iter().all(|v| (0.0..=1.0).contains(v)));
            let lo = defined.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = defined.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.miou >= lo - 1e-15 && r.miou <= hi + 1e-15);
        }
    }

    #[test]
    fn ignored_pixels_never_read(
        gt in proptest::collection::vec(0u8..4, 36),
        pred in proptest::collection::vec(0u8..4, 36),
        noise in proptest::collection::vec(0u8..4, 36),
    ) {
        let g = MaskImage::new(6, 6, gt.clone(), "d").unwrap();
        let p = MaskImage::new(6, 6, pred.clone(), "d").unwrap();
        let perturbed: Vec<u8> = pred.iter().zip(&gt).zip(&noise)
            .map(|((&p, &g), &n)| if g == 3 { n } else { p })
            .collect();
        let q = MaskImage::new(6, 6, perturbed, "d").unwrap();
        let mut a = ConfusionMatrix::new(4, Some(3));
        let mut b = ConfusionMatrix::new(4, Some(3));
        a.accumulate(&p, &g).unwrap();
        b.accumulate(&q, &g).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn cross_entropy_matches_brute_softmax(
        v in proptest::collection::vec(-20.0f64..20.0, 12),
        gt in proptest::collection::vec(0u8..3, 4),
    ) {
        let l = LogitMap::new(2, 2, 3, v.iter().map(|&x| x as f32).collect()).unwrap();
        let g = MaskImage::new(2, 2, gt.clone(), "d").unwrap();
        let got = masked_cross_entropy(&l, &g, None).unwrap();
        let mut want = 0.0;
        for p in 0..4 {
            let z: Vec<f64> = (0..3).map(|c| l.data()[c * 4 + p] as f64).collect();
            let denom: f64 = z.iter().map(|x| x.exp()).sum();
            want -= (z[gt[p] as usize].exp() / denom).ln();
        }
        want /= 4.0;
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn cross_entropy_decreases_with_gt_logit(
        v in proptest::collection::vec(-5.0f32..5.0, 12),
        gt in proptest::collection::vec(0u8..3, 4),
    ) {
        let l = LogitMap::new(2, 2, 3, v).unwrap();
        let g = MaskImage::new(2, 2, gt.clone(), "d").unwrap();
        let before = masked_cross_entropy(&l, &g, None).unwrap();
        let mut raised = l.clone();
        let c = gt[0] as u32;
        let cur = raised.get(c, 0, 0);
        raised.set(c, 0, 0, cur + 0.5);
        prop_assert!(masked_cross_entropy(&raised, &g, None).unwrap() < before);
    }
}

#[test]
fn histogram_oracle_on_two_masks() {
    use segunify::catalog::ClassHistogram;
    let space = LabelSpace::sequential("d", 8, Some(0)).unwrap();
    let a = MaskImage::new(2, 2, vec![1, 1, 2, 0], "d").unwrap();
    let b = MaskImage::new(2, 2, vec![5, 6, 6, 6], "d").unwrap();
    let mut h = ClassHistogram::default();
    h.add_mask(&a, &space, "a").unwrap();
    h.add_mask(&b, &space, "b").unwrap();
    let want: BTreeMap<u32, u64> = [(1, 2), (2, 1), (5, 1), (6, 3)].into();
    assert_eq!(h.to_map(), want);
}
