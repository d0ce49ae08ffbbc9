use proptest::prelude::*;

use zsc_core::counter::count_from_density;
use zsc_core::density::{generate_density_map, DensityMap};
use zsc_core::eval::mae_rmse;
use zsc_core::exemplar::select_top_k;
use zsc_core::geometry::{dedup_negatives, iou, rank_cmp, BBox, ScoredBox};
use zsc_core::losses::{contrastive_from_sims, similarity};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..60.0f64, 0.0..60.0f64, 0.5..40.0f64, 0.5..40.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn scored() -> impl Strategy<Value = ScoredBox> {
    (bbox(), 0.0..1.0f64).prop_map(|(b, l)| ScoredBox::new(b, l, "object").unwrap())
}

fn keys(v: &[ScoredBox]) -> Vec<[u64; 5]> {
    v.iter()
        .map(|b| {
            let c = b.bbox.xyxy();
            [c[0].to_bits(), c[1].to_bits(), c[2].to_bits(), c[3].to_bits(), b.logit.to_bits()]
        })
        .collect()
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn union_box_contains_both(a in bbox(), b in bbox()) {
        let u = a.union_box(&b);
        prop_assert!(u.contains(&a) && u.contains(&b));
    }

    #[test]
    fn dedup_keeps_an_ordered_subset(
        neg in prop::collection::vec(scored(), 0..30),
        pos in prop::collection::vec(scored(), 0..10),
        tau in 0.01..=1.0f64,
    ) {
        let kept = dedup_negatives(&neg, &pos, tau);
        let all = keys(&neg);
        let mut cursor = 0;
        for k in keys(&kept) {
            let at = all[cursor..].iter().position(|x| *x == k);
            prop_assert!(at.is_some(), "kept box not in input order");
            cursor += at.unwrap() + 1;
        }
        for n in &kept {
            prop_assert!(pos.iter().all(|p| iou(&n.bbox, &p.bbox) < tau));
        }
    }

    #[test]
    fn dedup_is_monotone_in_tau(
        neg in prop::collection::vec(scored(), 0..30),
        pos in prop::collection::vec(scored(), 0..10),
        a in 0.01..=1.0f64,
        b in 0.01..=1.0f64,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let strict = keys(&dedup_negatives(&neg, &pos, lo));
        let loose = keys(&dedup_negatives(&neg, &pos, hi));
        prop_assert!(strict.iter().all(|k| loose.contains(k)));
    }

    #[test]
    fn top_k_takes_the_best_ranked(c in prop::collection::vec(scored(), 0..20), k in 1usize..6) {
        let top = select_top_k(&c, k);
        prop_assert_eq!(top.len(), c.len().min(k));
        for w in top.windows(2) {
            prop_assert!(rank_cmp(&w[0], &w[1]).is_le());
        }
        if let Some(last) = top.last() {
            let picked = keys(&top);
            for x in &c {
                if !picked.contains(&keys(std::slice::from_ref(x))[0]) {
                    prop_assert!(rank_cmp(last, x).is_le());
                }
            }
        }
    }

    #[test]
    fn density_integrates_to_the_count(
        pts in prop::collection::vec((0.0..=1.0f64, 0.0..=1.0f64), 0..25),
        h in 4usize..48,
        w in 4usize..48,
        sigma in 0.3..8.0f64,
        scale in prop::sample::select(vec![1.0, 10.0, 100.0]),
    ) {
        let pts: Vec<(f64, f64)> = pts.iter().map(|(u, v)| (u * w as f64, v * h as f64)).collect();
        let d = generate_density_map(&pts, h, w, sigma, scale).unwrap();
        let n = pts.len() as f64;
        prop_assert!((count_from_density(&d) - n).abs() <= 1e-3 * n + 1e-6);
        prop_assert!(d.grid().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn density_bytes_round_trip(
        (h, w, grid) in (1usize..10, 1usize..10)
            .prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(0.0..1e3f32, h * w))),
    ) {
        let d = DensityMap::from_grid(h, w, 4.0, grid.into_iter().map(f64::from).collect()).unwrap();
        let bytes = d.to_bytes();
        let back = DensityMap::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn contrastive_is_bounded_and_monotone(p in -1.0..=1.0f64, n in -1.0..=1.0f64) {
        let l = contrastive_from_sims(p, n);
        prop_assert!(l > 0.0 && l <= (1.0 + 2f64.exp()).ln() + 1e-12);
        let h = 1e-4;
        prop_assert!(contrastive_from_sims(p + h, n) < l);
        prop_assert!(contrastive_from_sims(p, n + h) > l);
    }

    #[test]
    fn similarity_is_bounded(a in prop::collection::vec(0.0..5.0f64, 16), b in prop::collection::vec(0.0..5.0f64, 16)) {
        let a = DensityMap::from_grid(4, 4, 1.0, a).unwrap();
        let b = DensityMap::from_grid(4, 4, 1.0, b).unwrap();
        let s = similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn rmse_dominates_mae(pairs in prop::collection::vec((0.0..50.0f64, 0.0..50.0f64), 1..40)) {
        let (mae, rmse) = mae_rmse(pairs.iter().copied());
        prop_assert!(rmse + 1e-12 >= mae && mae >= 0.0);
        if pairs.iter().all(|(g, p)| g == p) {
            prop_assert_eq!(mae, 0.0);
            prop_assert_eq!(rmse, 0.0);
        }
    }
}
