use dsmix_core::dsm::{gt_dsm, upsample_bilinear, Dsm};
use dsmix_core::dsmix::{assign_lambdas, RegionMap};
use dsmix_core::image::{ImageRgb, Plane};
use dsmix_core::label::SoftLabel;
use dsmix_core::manifest::Rect;
use dsmix_core::metrics::{plcc, srcc, ScorePairs};
use proptest::prelude::*;

fn image(w: usize, h: usize) -> impl Strategy<Value = ImageRgb> {
    prop::collection::vec(0.0f64..1.0, w * h * 3).prop_map(move |d| ImageRgb::new(w, h, d).unwrap())
}

fn image_pair() -> impl Strategy<Value = (ImageRgb, ImageRgb, usize)> {
    (1usize..4, 1usize..4, prop::sample::select(vec![2usize, 4, 8])).prop_flat_map(|(gw, gh, p)| {
        (image(gw * p, gh * p), image(gw * p, gh * p), Just(p))
    })
}

fn region() -> impl Strategy<Value = (usize, usize, Vec<Rect>)> {
    (4usize..24, 4usize..24).prop_flat_map(|(w, h)| {
        let rect = (0..w, 0..h)
            .prop_flat_map(move |(x, y)| (Just(x), Just(y), 1..=w - x, 1..=h - y))
            .prop_map(|(x, y, rw, rh)| Rect::new(x, y, rw, rh));
        (Just(w), Just(h), prop::collection::vec(rect, 0..3))
    })
}

fn distinct(v: &[f64]) -> bool {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s.windows(2).all(|w| w[0] != w[1])
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn crop_of_full_image_is_identity(img in image(9, 7)) {
        prop_assert_eq!(img.crop(0, 0, 9, 7).unwrap(), img.clone());
        let inner = img.crop(2, 1, 5, 4).unwrap();
        prop_assert_eq!(inner.crop(0, 0, 5, 4).unwrap(), inner.clone());
        prop_assert_eq!(inner.crop(1, 1, 3, 2).unwrap(), img.crop(3, 2, 3, 2).unwrap());
    }

    #[test]
    fn gt_dsm_is_symmetric_and_bounded((a, b, p) in image_pair()) {
        let ab = gt_dsm(&a, &b, p).unwrap();
        let ba = gt_dsm(&b, &a, p).unwrap();
        prop_assert_eq!(ab.values(), ba.values());
        prop_assert!(ab.values().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(gt_dsm(&a, &a, p).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_stays_within_cell_range(
        (gw, gh, vals) in (1usize..5, 1usize..5).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), prop::collection::vec(0.0f64..3.0, w * h))
        }),
        p in prop::sample::select(vec![1usize, 2, 4, 8]),
    ) {
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let up = upsample_bilinear(&Dsm::new(gw, gh, p, vals).unwrap());
        prop_assert_eq!((up.width, up.height), (gw * p, gh * p));
        prop_assert!(up.values.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn lambdas_are_scale_invariant_and_sum_to_one(
        (w, h, rects) in region(),
        seed_vals in prop::collection::vec(0.0f64..1.0, 24 * 24),
        s in prop::sample::select(vec![1e-6, 0.37, 1.0, 1e6]),
    ) {
        let region = RegionMap::from_rects(w, h, &rects).unwrap();
        let map = Plane::new(w, h, seed_vals[..w * h].to_vec()).unwrap();
        let base = assign_lambdas(&map, &region).unwrap();
        prop_assert_eq!(base.len(), rects.len() + 1);
        prop_assert!((base.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(base.iter().all(|&l| l >= 0.0));
        let scaled = Plane::new(w, h, map.values.iter().map(|v| v * s).collect()).unwrap();
        for (a, b) in assign_lambdas(&scaled, &region).unwrap().iter().zip(&base) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn lambdas_follow_owner_relabeling(
        (w, h, rects) in region(),
        vals in prop::collection::vec(0.0f64..1.0, 24 * 24),
    ) {
        let region = RegionMap::from_rects(w, h, &rects).unwrap();
        let n = region.n_sources;
        let map = Plane::new(w, h, vals[..w * h].to_vec()).unwrap();
        // Reverse the source indices and expect the weights to reverse too.
        let owners: Vec<u8> = region.owners().iter().map(|&o| (n - 1) as u8 - o).collect();
        let flipped = RegionMap::from_owners(w, h, n, owners).unwrap();
        let a = assign_lambdas(&map, &region).unwrap();
        let mut b = assign_lambdas(&map, &flipped).unwrap();
        b.reverse();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn mixed_label_is_convex(
        raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 6), 1..4),
        w in prop::collection::vec(0.01f64..1.0, 3),
    ) {
        let labels: Vec<SoftLabel> = raw
            .iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                SoftLabel::new(r.iter().map(|v| v / s).collect()).unwrap()
            })
            .collect();
        let w = &w[..labels.len()];
        let total: f64 = w.iter().sum();
        let weights: Vec<f64> = w.iter().map(|v| v / total).collect();
        let refs: Vec<&SoftLabel> = labels.iter().collect();
        let mixed = SoftLabel::mix(&refs, &weights).unwrap();
        prop_assert!((mixed.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for c in 0..6 {
            let lo = labels.iter().map(|l| l.probs()[c]).fold(f64::INFINITY, f64::min);
            let hi = labels.iter().map(|l| l.probs()[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(mixed.probs()[c] >= lo - 1e-12 && mixed.probs()[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn metrics_are_symmetric(
        u in prop::collection::vec(-10.0f64..10.0, 3..40),
        noise in prop::collection::vec(-5.0f64..5.0, 40),
    ) {
        let v: Vec<f64> = u.iter().zip(&noise).map(|(a, b)| a + b).collect();
        prop_assume!(distinct(&u) && distinct(&v));
        let uv = ScorePairs::new(u.clone(), v.clone()).unwrap();
        let vu = ScorePairs::new(v, u).unwrap();
        prop_assert!((srcc(&uv).unwrap() - srcc(&vu).unwrap()).abs() <= 1e-12);
        prop_assert!((plcc(&uv).unwrap() - plcc(&vu).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn srcc_ignores_monotone_transforms(
        u in prop::collection::vec(-3.0f64..3.0, 3..40),
        noise in prop::collection::vec(-2.0f64..2.0, 40),
    ) {
        let v: Vec<f64> = u.iter().zip(&noise).map(|(a, b)| a + b).collect();
        prop_assume!(distinct(&u) && distinct(&v));
        let base = srcc(&ScorePairs::new(u.clone(), v.clone()).unwrap()).unwrap();
        let warped: Vec<f64> = v.iter().map(|x| x.exp() * 3.0 + x.powi(3)).collect();
        let moved = srcc(&ScorePairs::new(u.clone(), warped).unwrap()).unwrap();
        prop_assert!((base - moved).abs() <= 1e-12);
        let negated: Vec<f64> = v.iter().map(|x| -x).collect();
        let flipped = srcc(&ScorePairs::new(u, negated).unwrap()).unwrap();
        prop_assert!((base + flipped).abs() <= 1e-12);
    }
}
