use itnet::builder::{build_itnet, HyperParams};
use itnet::cost::{depth_per_output, graph_memory_bytes, macs_per_output, param_count};
use itnet::ntf::{NtfFile, NtfTensor};
use itnet::search::{rank_and_select, GridCell};
use itnet::tensor::{LabelMap, Tensor};
use itnet::train::{auc, miou, WeightScheme};
use proptest::prelude::*;

fn small_hp() -> impl Strategy<Value = HyperParams> {
    (
        1usize..=3,
        1usize..=4,
        0usize..=2,
        2usize..=12,
        2usize..=5,
        1usize..=3,
        1usize..=3,
    )
        .prop_map(|(l, n, k, f, c, h, w)| HyperParams::new(l, n, k, f, c, 8 * h, 8 * w, true))
}

fn cell(i: usize, auc: f64, peak: f64, shared: bool) -> GridCell {
    GridCell {
        l: 1 + i / 4,
        n: 1 + i % 4,
        k: 0,
        f: Some(4),
        shared,
        cost: None,
        curve: vec![],
        auc: Some(auc),
        peak_miou: Some(peak),
        error: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sharing_changes_neither_macs_nor_depth(hp in small_hp()) {
        let s = build_itnet(&hp).unwrap();
        let i = build_itnet(&hp.with_shared(false)).unwrap();
        prop_assert_eq!(macs_per_output(&s), macs_per_output(&i));
        prop_assert_eq!(depth_per_output(&s), depth_per_output(&i));
        prop_assert!(param_count(&s) <= param_count(&i));
        prop_assert!(graph_memory_bytes(&s) <= graph_memory_bytes(&i));
        let d = depth_per_output(&s);
        for (n, &dn) in d.iter().enumerate() {
            prop_assert_eq!(dn, hp.depth_to_output(n + 1));
        }
    }

    #[test]
    fn truncation_keeps_cost_prefix(hp in small_hp(), cut in 1usize..=4) {
        let g = build_itnet(&hp).unwrap();
        let n = cut.min(hp.n);
        let t = g.truncate(n).unwrap();
        prop_assert_eq!(&macs_per_output(&t)[..], &macs_per_output(&g)[..n]);
        prop_assert_eq!(t.outputs().len(), n);
    }

    #[test]
    fn scheme_normalization_ignores_scale(w in prop::collection::vec(0.0f64..4.0, 1..8), c in 0.01f64..100.0) {
        prop_assume!(w.iter().any(|&x| x > 1e-6));
        let a = WeightScheme::new(w.clone()).unwrap().normalized();
        let b = WeightScheme::new(w.iter().map(|x| x * c).collect()).unwrap().normalized();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_is_invariant_to_cost_units(steps in prop::collection::vec((0.1f64..5.0, 0.0f64..1.0), 1..10), c in 0.001f64..1000.0) {
        let mut x = Vec::new();
        let mut acc = 0.0;
        for (dx, _) in &steps {
            acc += dx;
            x.push(acc);
        }
        let y: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let a = auc(&x, &y, 0.01).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
        let b = auc(&xs, &y, 0.01).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        // mean height above y0, and the curve starts at height 0
        let (lo, hi) = y.iter().fold((0.0f64, 0.0f64), |(l, h), &v| (l.min(v - 0.01), h.max(v - 0.01)));
        prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
    }

    #[test]
    fn ranking_survives_monotone_auc_transform(
        s in prop::collection::vec((0.0f64..1.0, 0.5f64..0.6), 4),
        i in prop::collection::vec((0.0f64..1.0, 0.5f64..0.6), 4),
    ) {
        let mk = |v: &[(f64, f64)], shared: bool, t: &dyn Fn(f64) -> f64| -> Vec<GridCell> {
            v.iter().enumerate().map(|(k, &(a, p))| cell(k, t(a), p, shared)).collect()
        };
        let id = |a: f64| a;
        let cube = |a: f64| 3.0 * a * a * a + 0.5;
        let a = rank_and_select(&mk(&s, true, &id), &mk(&i, false, &id), 0.02).unwrap();
        let b = rank_and_select(&mk(&s, true, &cube), &mk(&i, false, &cube), 0.02).unwrap();
        prop_assert_eq!((a.l, a.n, a.k), (b.l, b.n, b.k));
    }

    #[test]
    fn miou_is_bounded_and_one_on_identity(
        (h, w, c, p, t) in (1usize..6, 1usize..6, 2usize..5).prop_flat_map(|(h, w, c)| {
            let px = prop::collection::vec(0u8..c as u8, h * w);
            (Just(h), Just(w), Just(c), px.clone(), px)
        })
    ) {
        let pm = LabelMap::new([1, h, w], p).unwrap();
        let tm = LabelMap::new([1, h, w], t).unwrap();
        let m = miou(&pm, &tm, c, 255).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert_eq!(miou(&tm, &tm, c, 255).unwrap(), 1.0);
    }

    #[test]
    fn ntf_round_trip(
        shape in prop::collection::vec(1usize..4, 1..5),
        seed in any::<u32>(),
        name in "[a-z/]{1,12}",
    ) {
        prop_assume!(name != "raw");
        let t = Tensor::<f32>::from_fn(&shape, |i| (i as f32 + seed as f32).sin());
        let mut f = NtfFile::new();
        f.push(NtfTensor::f32(name.clone(), &t));
        f.push(NtfTensor::u8("raw", vec![3], vec![1, 2, (seed % 256) as u8]));
        let bytes = f.to_bytes().unwrap();
        let back = NtfFile::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.get(&name).unwrap().to_tensor().unwrap(), t);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
