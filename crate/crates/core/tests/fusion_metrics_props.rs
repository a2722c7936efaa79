mod common;

use common::oracle;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use sgf_core::fusion::{FusedDistribution, W_MAX};
use sgf_core::metrics::{class_iou, label_recall, panoptic_quality, relationship_recall, TripletItem};

fn fuse_all(items: &[Vec<f64>]) -> FusedDistribution {
    let mut d = FusedDistribution::new(items[0].clone(), 1.0).unwrap();
    for p in &items[1..] {
        d.fuse(p, 1.0).unwrap();
        assert!((d.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fusion_is_order_invariant_below_the_cap(seed in any::<u64>(), n in 1usize..=50, k in 2usize..8) {
        let mut rng = common::rng(seed);
        let mut items: Vec<Vec<f64>> = (0..n).map(|_| common::distribution(&mut rng, k)).collect();
        let a = fuse_all(&items);
        items.shuffle(&mut rng);
        let b = fuse_all(&items);
        prop_assert!(common::max_abs_diff(&a.probabilities, &b.probabilities) < 1e-9);
        prop_assert_eq!(a.weight, n as f64);
        let mean: Vec<f64> = (0..k).map(|c| items.iter().map(|p| p[c]).sum::<f64>() / n as f64).collect();
        prop_assert!(common::max_abs_diff(&a.probabilities, &mean) < 1e-9);
    }

    #[test]
    fn weight_saturates(seed in any::<u64>(), extra in 1usize..80) {
        let mut rng = common::rng(seed);
        let items: Vec<Vec<f64>> = (0..100 + extra).map(|_| common::distribution(&mut rng, 4)).collect();
        let d = fuse_all(&items);
        prop_assert_eq!(d.weight, W_MAX);
    }

    #[test]
    fn recall_matches_full_sorting(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = common::rng(seed);
        let items: Vec<(Vec<f64>, usize)> = (0..30)
            .map(|_| {
                let mut p = common::distribution(&mut rng, 5);
                if rng.gen_bool(0.2) {
                    p[1] = p[0];
                }
                (p, rng.gen_range(0..5))
            })
            .collect();
        let r = label_recall(items.iter().map(|(p, l)| (&p[..], *l)), k).unwrap();
        let hits = items.iter().filter(|(p, l)| oracle::in_top_k(p, *l, k)).count();
        prop_assert_eq!((r.hits, r.total), (hits, items.len()));

        let trip: Vec<common::ScoredTriplet> = (0..10)
            .map(|_| {
                let gt = (rng.gen_range(0..3), rng.gen_range(0..3), rng.gen_range(0..4));
                (common::distribution(&mut rng, 3), common::distribution(&mut rng, 3), common::distribution(&mut rng, 4), gt)
            })
            .collect();
        let kk = k * 5;
        let r = relationship_recall(
            trip.iter().map(|(s, o, p, gt)| TripletItem { subject: s, object: o, predicate: p, gt: *gt }),
            kk,
        )
        .unwrap();
        let hits = trip.iter().filter(|(s, o, p, gt)| oracle::triplet_in_top_k(s, o, p, *gt, kk)).count();
        prop_assert_eq!(r.hits, hits);
    }

    #[test]
    fn iou_and_panoptic_match_set_oracles(seed in any::<u64>(), points in 1usize..60, instances in 1u64..7) {
        let mut rng = common::rng(seed);
        let (pred, gt) = common::random_panoptic(&mut rng, points, instances, 4);
        let pc: Vec<Option<usize>> = pred.iter().map(|l| l.map(|x| x.1)).collect();
        let gc: Vec<Option<usize>> = gt.iter().map(|l| l.map(|x| x.1)).collect();
        for c in 0..4 {
            prop_assert_eq!(class_iou(&pc, &gc, c).unwrap(), oracle::class_iou(&pc, &gc, c));
        }
        let report = panoptic_quality(&pred, &gt, 4, &[0]).unwrap();
        let expected = oracle::panoptic_counts(&pred, &gt, &[0]);
        prop_assert!((report.all.pq - oracle::mean_pq(&expected)).abs() < 1e-12);
        for q in report.per_class.iter() {
            let e = expected[&q.class];
            prop_assert_eq!((q.tp, q.fp, q.false_negatives), (e.1, e.2, e.3));
            prop_assert_eq!(q.quality.pq, q.quality.sq * q.quality.rq);
        }
        prop_assert_eq!(report.all.pq, report.all.sq * report.all.rq);
    }
}
