use masksep::align::info_nce_symmetric;
use masksep::embed::Temperature;
use masksep::policy::{kl_divergence, params_from_proposal, TensorShape};
use masksep::reward::{cosine_sim, mlbp_fuse, query_mixup, EmbeddingVector, MixupWeights, MlbpParams};
use masksep::rl::{clipped_surrogate, importance_ratio, normalize_advantages};
use masksep::separator::{build_features, SeparatorConfig, SeparatorModel};
use masksep::spectral::{istft, stft, StftConfig, Waveform};
use ndarray::Array2;
use proptest::prelude::*;

fn vec_of(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, dim)
}

fn nonzero(v: Vec<f64>) -> Option<EmbeddingVector> {
    let e = EmbeddingVector::new(v).ok()?;
    (e.norm() > 1e-3).then_some(e)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn surrogate_never_exceeds_unclipped(r in 0.0..5.0f64, a in -5.0..5.0f64, eps in 0.01..0.5f64) {
        let (v, _) = clipped_surrogate(r, a, eps);
        prop_assert!(v <= r * a + 1e-12);
    }

    #[test]
    fn ratio_is_clamped(lp_new in -1e4..1e4f64, lp_old in -1e4..1e4f64) {
        let r = importance_ratio(lp_new, lp_old);
        prop_assert!(r.is_finite());
        prop_assert!(r >= (-20.0f64).exp() * (1.0 - 1e-12) && r <= 20.0f64.exp() * (1.0 + 1e-12));
    }

    #[test]
    fn normalized_advantages_are_standardized(a in prop::collection::vec(-10.0..10.0f64, 2..64)) {
        let z = normalize_advantages(&a, 1e-6, true);
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        let mu = a.iter().sum::<f64>() / n;
        let sd = (a.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n).sqrt();
        if sd > 1e-3 {
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-3);
        } else {
            prop_assert!(var.sqrt() <= 1.0);
        }
    }

    #[test]
    fn mixup_ignores_common_weight_scale(
        qa in vec_of(8), qv in vec_of(8), qt in vec_of(8),
        w in prop::array::uniform3(0.05..1.0f64), c in 0.05..1.0f64,
    ) {
        let (qa, qv, qt) = (
            EmbeddingVector::new(qa).unwrap(),
            EmbeddingVector::new(qv).unwrap(),
            EmbeddingVector::new(qt).unwrap(),
        );
        let w1 = MixupWeights { audio: w[0], video: w[1], text: w[2] };
        let w2 = MixupWeights { audio: c * w[0], video: c * w[1], text: c * w[2] };
        let a = query_mixup(&qa, &qv, &qt, w1).unwrap();
        let b = query_mixup(&qa, &qv, &qt, w2).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_pooling_is_homogeneous_per_input(
        u in vec_of(6), v in vec_of(6), proj in vec_of(72), c in -4.0..4.0f64,
    ) {
        let p1 = Array2::from_shape_vec((6, 6), proj[..36].to_vec()).unwrap();
        let p2 = Array2::from_shape_vec((6, 6), proj[36..].to_vec()).unwrap();
        let mlbp = MlbpParams::new(vec![p1, p2], Array2::eye(6), ndarray::Array1::zeros(6)).unwrap();
        let (u, v) = (EmbeddingVector::new(u).unwrap(), EmbeddingVector::new(v).unwrap());
        let base = mlbp_fuse(&mlbp, &[&u, &v]).unwrap();
        let scaled = mlbp_fuse(&mlbp, &[&u.scaled(c), &v]).unwrap();
        for (x, y) in base.values().iter().zip(scaled.values()) {
            prop_assert!((c * x - y).abs() < 1e-9 * (1.0 + x.abs() * c.abs()));
        }
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(u in vec_of(12), v in vec_of(12)) {
        if let (Some(u), Some(v)) = (nonzero(u), nonzero(v)) {
            let c = cosine_sim(&u, &v).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
            prop_assert!((c - cosine_sim(&v, &u).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn info_nce_is_permutation_invariant(
        za in vec_of(5 * 4), zt in vec_of(5 * 4), perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
        tau in 0.05..1.0f64,
    ) {
        let za = Array2::from_shape_vec((5, 4), za).unwrap();
        let zt = Array2::from_shape_vec((5, 4), zt).unwrap();
        let pa = za.select(ndarray::Axis(0), &perm);
        let pt = zt.select(ndarray::Axis(0), &perm);
        let t = Temperature::from_tau(tau);
        let a = info_nce_symmetric(&za, &zt, t).unwrap().loss;
        let b = info_nce_symmetric(&pa, &pt, t).unwrap().loss;
        prop_assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(p in prop::collection::vec(0.0..=1.0f64, 6), q in prop::collection::vec(0.0..=1.0f64, 6), kappa in 0.5..20.0f64) {
        let shape = TensorShape::new(3, 2, 1);
        let pp = params_from_proposal(&p, shape, kappa).unwrap();
        let qq = params_from_proposal(&q, shape, kappa).unwrap();
        prop_assert!(kl_divergence(&pp, &qq).unwrap() >= 0.0);
        prop_assert!(kl_divergence(&pp, &pp).unwrap().abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stft_round_trip(samples in prop::collection::vec(-1.0..1.0f64, 1500..5000)) {
        let w = Waveform::new(samples.clone(), 16_000).unwrap();
        let s = stft(&w, &StftConfig::default()).unwrap();
        let back = istft(&s, samples.len()).unwrap();
        let err = back.samples().iter().zip(&samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-6, "round trip error {err}");
    }

    #[test]
    fn snapshot_is_isolated_from_updates(seed in any::<u64>(), delta in prop::collection::vec(-0.1..0.1f64, 1633)) {
        let mut model = SeparatorModel::init(SeparatorConfig::default(), seed).unwrap();
        let snap = model.snapshot(0);
        let before = snap.model().params().to_vec();
        for (p, d) in model.params_mut().iter_mut().zip(&delta) {
            *p += d;
        }
        prop_assert_eq!(snap.model().params(), &before[..]);
        let log_mag = Array2::from_shape_fn((9, 6), |(f, t)| ((f * 7 + t * 3) % 5) as f64 * 0.3);
        let features = build_features(&log_mag, 5, 8);
        let query = vec![0.1; 16];
        let acts = snap.forward_features(&features, &query).unwrap();
        prop_assert!(!model.owns(&acts) || delta.iter().all(|d| *d == 0.0));
    }
}
