use mcnn_core::corpus::{apply_displacement, displacement_target, BoxNorm, LabelMap, OutputNormalizer};
use mcnn_core::eval::{evaluate, evaluate_all, report};
use mcnn_core::knn::{retrieve_knn, Embedding, KnnIndex};
use mcnn_core::model::MatchOutput;
use mcnn_core::pipeline::{map_assign, smooth_labels, ProbabilityMaps, SuperpixelMap};
use mcnn_core::tensor::conv_output_size;
use proptest::prelude::*;

fn boxes() -> impl Strategy<Value = BoxNorm> {
    (0.0..0.9f64, 0.0..0.9f64, 0.01..0.1f64, 0.01..0.1f64).prop_map(|(x, y, w, h)| BoxNorm::new(x, y, x + w, y + h))
}

fn label_map(h: usize, w: usize, l: u8) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(0..=l, h * w).prop_map(move |d| LabelMap::from_data(h, w, d).unwrap())
}

proptest! {
    #[test]
    fn box_roundtrip(g in boxes(), i in boxes()) {
        let b = apply_displacement(g, displacement_target(g, i));
        for (a, e) in b.to_array().iter().zip(i.to_array()) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn normalizer_roundtrip(
        mean in prop::array::uniform5(-5.0..5.0f64),
        var in prop::array::uniform5(1e-6..10.0f64),
        v in prop::array::uniform5(-100.0..100.0f64),
    ) {
        let n = OutputNormalizer { mean, variance: var };
        let x = MatchOutput::new(v[0], [v[1], v[2], v[3], v[4]]);
        let back = n.normalize(&n.denormalize(&x));
        for (a, b) in back.to_array().iter().zip(x.to_array()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn conv_output_matches_floor_formula(n in 1usize..40, k in 1usize..8, s in 1usize..4, p in 0usize..4) {
        let got = conv_output_size(n, k, s, p);
        if n + 2 * p >= k {
            prop_assert_eq!(got.unwrap(), (n + 2 * p - k) / s + 1);
        } else {
            prop_assert!(got.is_err());
        }
    }

    #[test]
    fn map_assign_is_scale_invariant(
        bg in prop::collection::vec(0.0..1.0f64, 12),
        m in prop::collection::vec(0.0..1.0f64, 36),
        scale in 0.1..10.0f64,
    ) {
        let maps = ProbabilityMaps { height: 3, width: 4, maps: m.chunks(12).map(<[f64]>::to_vec).collect() };
        let base = map_assign(&maps, &bg);
        // Scaling every score by c: bg·c and (1 − bg)·M·c. Realised by scaling the
        // maps and re-deriving a background value with the same ratio.
        for p in 0..12 {
            let scores: Vec<f64> = std::iter::once(bg[p]).chain(maps.maps.iter().map(|mm| (1.0 - bg[p]) * mm[p])).collect();
            let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b });
            prop_assert_eq!(argmax(&scores), argmax(&scaled));
            prop_assert_eq!(argmax(&scores) as u8, base.data()[p]);
        }
    }

    #[test]
    fn smoothing_never_invents_labels(init in label_map(6, 6, 5), seg in prop::collection::vec(0u32..4, 36)) {
        let mut ids: Vec<u32> = seg.clone();
        ids.sort_unstable();
        ids.dedup();
        let remap: Vec<u32> = seg.iter().map(|s| ids.binary_search(s).unwrap() as u32).collect();
        let sp = SuperpixelMap { height: 6, width: 6, segments: remap, count: ids.len() };
        let out = smooth_labels(&init, &sp);
        for v in out.data() {
            prop_assert!(init.data().contains(v));
        }
    }

    #[test]
    fn evaluation_matches_pixel_counting(pred in label_map(8, 8, 4), truth in label_map(8, 8, 4)) {
        let c = evaluate(&pred, &truth, 4).unwrap();
        for l in 1..=4u8 {
            let pairs = || pred.data().iter().zip(truth.data());
            prop_assert_eq!(c.tp[l as usize - 1], pairs().filter(|(&p, &t)| p == l && t == l).count() as u64);
            prop_assert_eq!(c.fp[l as usize - 1], pairs().filter(|(&p, &t)| p == l && t != l).count() as u64);
            prop_assert_eq!(c.fn_[l as usize - 1], pairs().filter(|(&p, &t)| p != l && t == l).count() as u64);
        }
        prop_assert_eq!(c.correct, pred.data().iter().zip(truth.data()).filter(|(p, t)| p == t).count() as u64);
        prop_assert_eq!(c.fg_total, truth.data().iter().filter(|&&t| t != 0).count() as u64);
    }

    #[test]
    fn avg_f1_ignores_image_order(maps in prop::collection::vec((label_map(4, 4, 3), label_map(4, 4, 3)), 2..6)) {
        let names: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let fwd: Vec<_> = maps.iter().map(|(p, t)| (p, t)).collect();
        let rev: Vec<_> = fwd.iter().rev().copied().collect();
        let a = report(&evaluate_all(&fwd, 3).unwrap(), &names).unwrap();
        let b = report(&evaluate_all(&rev, 3).unwrap(), &names).unwrap();
        prop_assert_eq!(a.avg_f1, b.avg_f1);
    }

    #[test]
    fn retrieval_matches_full_sort(
        vecs in prop::collection::vec(prop::collection::vec(-1.0..1.0f32, 4), 10..30),
        q in prop::collection::vec(-1.0..1.0f32, 4),
        k in 1usize..9,
    ) {
        let entries: Vec<Embedding> = vecs.iter().enumerate().map(|(i, v)| Embedding { id: i as u32 * 3, vector: v.clone() }).collect();
        let index = KnnIndex::new(entries.clone()).unwrap();
        let mut brute: Vec<(f64, u32)> = entries
            .iter()
            .map(|e| (e.vector.iter().zip(&q).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>(), e.id))
            .collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let want: Vec<u32> = brute.iter().take(k).map(|x| x.1).collect();
        prop_assert_eq!(retrieve_knn(&index, &q, k, None).unwrap(), want);
    }
}
