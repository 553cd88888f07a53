use metta::analysis::{
    emit_report, read_report, CurveRow, Endpoint, InterpolationCurve, ReportFormat,
};
use metta::data::{apply_transform, enumerate_group, AugmentationPolicy, Dataset};
use metta::inference::{build_index, mean_embedding, metta_probs, query_index, tta_probs};
use metta::model::{build_backbone, BackboneConfig, LinearHead};
use metta::tensor::Tensor;
use proptest::prelude::*;

fn image(values: Vec<f32>) -> Tensor {
    Tensor::new(vec![1, 12, 12], values).unwrap()
}

fn pixels() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.0f32..1.0, 144)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn group_means_are_invariant(px in pixels(), seed in 0u64..4) {
        let ckpt = build_backbone(&BackboneConfig::small(1, 12), seed).unwrap();
        let x = image(px);
        for policy in [AugmentationPolicy::FlipGroup, AugmentationPolicy::Rot90Group] {
            let base = mean_embedding(&ckpt, &x, &policy, 1, 0, 0).unwrap();
            for g in enumerate_group(&policy, 12, 12).unwrap() {
                let moved = mean_embedding(&ckpt, &apply_transform(&x, &g).unwrap(), &policy, 1, 0, 0).unwrap();
                prop_assert!(base.mean.max_abs_diff(&moved.mean) < 1e-5);
            }
        }
    }

    #[test]
    fn predictions_are_distributions(
        w in prop::collection::vec(-3.0f32..3.0, 12),
        b in prop::collection::vec(-1.0f32..1.0, 3),
        a in prop::collection::vec(-2.0f32..2.0, 4..=20),
    ) {
        let head = LinearHead::new(Tensor::new(vec![3, 4], w).unwrap(), Tensor::new(vec![3], b).unwrap()).unwrap();
        let samples: Vec<Tensor> = a.chunks_exact(4).map(|c| Tensor::new(vec![4], c.to_vec()).unwrap()).collect();
        for p in [metta_probs(&head, &samples).unwrap(), tta_probs(&head, &samples).unwrap()] {
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn rankings_are_sorted(imgs in prop::collection::vec(pixels(), 2..6), k in 1usize..6) {
        let n = imgs.len();
        let data: Vec<f32> = imgs.concat();
        let images = data.chunks(144).map(|c| image(c.to_vec())).collect();
        let corpus = Dataset::new(images, vec![0; n], 1, [1, 12, 12]).unwrap();
        let ckpt = build_backbone(&BackboneConfig::small(1, 12), 1).unwrap();
        let policy = AugmentationPolicy::multi_scale_default();
        let index = build_index(&ckpt, &corpus, &policy, 1, 0).unwrap();
        let k = k.min(n);
        let ranked = query_index(&index, &ckpt, corpus.image(0), &policy, k).unwrap();
        prop_assert_eq!(ranked.len(), k);
        for w in ranked.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
        prop_assert!(ranked.iter().all(|&(_, s)| (-1.0 - 1e-6..=1.0 + 1e-6).contains(&s)));
    }

    #[test]
    fn reports_round_trip_exactly(values in prop::collection::vec((any::<f64>(), 0.0f64..1.0), 0..8)) {
        let rows: Vec<CurveRow> = values
            .iter()
            .filter(|(v, _)| v.is_finite())
            .map(|&(nll, accuracy)| CurveRow { alpha: accuracy, endpoint: Endpoint::CentralCrop, nll, accuracy })
            .collect();
        let curve = InterpolationCurve { endpoint: Endpoint::CentralCrop, samples: 1, seed: 0, rows };
        let dir = tempfile::tempdir().unwrap();
        for format in [ReportFormat::Csv, ReportFormat::Json] {
            let path = dir.path().join("curve");
            emit_report(&curve, &path, format).unwrap();
            let back: Vec<CurveRow> = read_report(&path, format).unwrap();
            prop_assert_eq!(&back, &curve.rows);
        }
    }
}
