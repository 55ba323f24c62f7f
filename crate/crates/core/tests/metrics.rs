mod common;

use common::{components, dice_oracle, lesion_oracle, random_mask, rng, surface_oracle};
use nerd::data::{restack, Plane};
use nerd::metrics::{
    connected_components, dice, evaluate_volume, lesion_counts, lesion_metrics, surface_distances, Connectivity, Conventions,
};
use nerd::Mask;
use proptest::prelude::*;
use rand::Rng;

const CONNECTIVITIES: [Connectivity; 4] = [Connectivity::Four, Connectivity::Eight, Connectivity::Six, Connectivity::TwentySix];

fn mask_pair() -> impl Strategy<Value = (Mask, Mask, [f64; 3])> {
    (1usize..=3, 1usize..=10, 1usize..=10, 0.05f64..0.7, 0.05f64..0.7, any::<u64>(), [0.2f64..3.0, 0.2f64..3.0, 0.2f64..3.0]).prop_map(
        |(d, h, w, pa, pb, seed, spacing)| {
            let mut r = rng(seed);
            (random_mask(&mut r, [d, h, w], pa), random_mask(&mut r, [d, h, w], pb), spacing)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn components_match_propagation_oracle((m, _, _) in mask_pair(), k in 0usize..4) {
        let conn = CONNECTIVITIES[k];
        let set = connected_components(&m, conn);
        prop_assert_eq!(&set.components, &components(&m, conn));
        let union: usize = set.components.iter().map(Vec::len).sum();
        prop_assert_eq!(union, m.count());
    }

    #[test]
    fn lesion_counts_match_oracle((p, g, _) in mask_pair(), k in 0usize..4) {
        let conn = CONNECTIVITIES[k];
        let c = lesion_counts(&connected_components(&p, conn), &connected_components(&g, conn)).unwrap();
        let o = lesion_oracle(&p, &g, conn);
        prop_assert_eq!((c.gl, c.pl, c.tp_gt, c.tp_pred), (o.gl, o.pl, o.tp_gt, o.tp_pred));
        prop_assert!(c.tp_gt <= c.gl && c.tp_pred <= c.pl);
        let m = lesion_metrics(c, 2);
        if let Some(t) = m.ltpr { prop_assert!((0.0..=1.0).contains(&t)); }
        if let Some(f) = m.lfpr { prop_assert!((0.0..=1.0).contains(&f)); }
    }

    #[test]
    fn surface_metrics_match_all_pairs_oracle((p, g, spacing) in mask_pair()) {
        match (surface_distances(&p, &g, spacing), surface_oracle(&p, &g, spacing)) {
            (Ok(s), Some(o)) => {
                prop_assert!((s.hd() - o.hd).abs() <= 1e-9);
                prop_assert!((s.hd95() - o.hd95).abs() <= 1e-9);
                prop_assert!((s.asd() - o.asd).abs() <= 1e-9);
                prop_assert!(s.hd95() <= s.hd() && s.asd() <= s.hd());
            }
            (Err(nerd::Error::UndefinedBoundary(_)), None) => {}
            (r, o) => prop_assert!(false, "library {:?} vs oracle defined {}", r.map(|s| s.hd()), o.is_some()),
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded((p, g, _) in mask_pair()) {
        let a = dice(&p, &g).unwrap();
        prop_assert_eq!(a, dice(&g, &p).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - dice_oracle(&p, &g)).abs() < 1e-15);
    }

    #[test]
    fn labeling_ignores_enumeration_order((m, _, _) in mask_pair(), k in 0usize..4) {
        // Mirroring every axis reverses the enumeration order; the partition must map back.
        let conn = CONNECTIVITIES[k];
        let [d, h, w] = m.dims();
        let flipped = Mask::from_fn([d, h, w], |z, y, x| m.get(d - 1 - z, h - 1 - y, w - 1 - x));
        let n = d * h * w;
        let mut back: Vec<Vec<usize>> = connected_components(&flipped, conn)
            .components
            .iter()
            .map(|c| { let mut v: Vec<usize> = c.iter().map(|&i| n - 1 - i).collect(); v.sort_unstable(); v })
            .collect();
        back.sort_by_key(|c| c[0]);
        prop_assert_eq!(back, connected_components(&m, conn).components);
    }

    #[test]
    fn restacked_volumes_score_like_direct_volumes((p, g, spacing) in mask_pair()) {
        let [d, h, w] = p.dims();
        let to_planes = |m: &Mask| -> Vec<Plane> {
            (0..d).map(|z| Plane::new(h, w, m.plane(z).data().iter().map(|&v| v as f64).collect()).unwrap()).collect()
        };
        let back = |m: &Mask| {
            let v = restack(&to_planes(m), spacing, "label").unwrap();
            Mask::from_vec([d, h, w], v.values().iter().map(|&x| x as u8).collect()).unwrap()
        };
        let conv = Conventions::default();
        let direct = evaluate_volume("v", &p, &g, spacing, &conv).unwrap();
        let again = evaluate_volume("v", &back(&p), &back(&g), spacing, &conv).unwrap();
        prop_assert_eq!(direct, again);
    }
}

#[test]
fn oracle_equivalence_through_the_report() {
    let mut r = rng(99);
    for _ in 0..40 {
        let dims = [r.random_range(1..=3), r.random_range(1..=10), r.random_range(1..=10)];
        let p = random_mask(&mut r, dims, 0.3);
        let g = random_mask(&mut r, dims, 0.3);
        let spacing = [r.random_range(0.5..3.0), r.random_range(0.5..2.0), r.random_range(0.5..2.0)];
        let v = evaluate_volume("x", &p, &g, spacing, &Conventions::default()).unwrap();
        let o = lesion_oracle(&p, &g, Connectivity::TwentySix);
        let ldice = if o.gl + o.pl == 0 { 100.0 } else { 200.0 * o.tp_gt as f64 / (o.gl + o.pl) as f64 };
        assert!((v.ldice.unwrap() - ldice).abs() < 1e-12);
        assert!((v.dice.unwrap() - 100.0 * dice_oracle(&p, &g)).abs() < 1e-12);
        match surface_oracle(&p, &g, spacing) {
            Some(s) => assert!((v.hd.unwrap() - s.hd).abs() < 1e-9),
            None => assert!(v.hd.is_none()),
        }
    }
}

#[test]
fn perfect_prediction_report() {
    let g = Mask::from_fn([2, 6, 6], |z, y, x| (z + y + x) % 5 == 0);
    let v = evaluate_volume("p", &g, &g, [1.0, 1.0, 1.0], &Conventions::default()).unwrap();
    assert_eq!(v.dice, Some(100.0));
    assert_eq!(v.lfpr, Some(0.0));
    assert_eq!(v.ltpr, Some(100.0));
    assert_eq!(v.hd, Some(0.0));
}
