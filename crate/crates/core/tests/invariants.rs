use proptest::prelude::*;

use mechgeo::geometry::{
    angular_distance, average_ranks, participation_ratio, spearman_rho, spectrum, symmetric_kl,
    symmetric_kl_with, KlConvention, SpectrumRoute,
};
use mechgeo::interventions::{apply_intervention, compute_steering_vector, InterventionMode, NormTarget};
use mechgeo::trace::{trace_from_bytes, trace_to_bytes, ActivationTrace, TokenSelector, TraceHeader, TraceSequence};
use mechgeo::{Error, Matrix};

fn matrix(max_n: usize, max_d: usize) -> impl Strategy<Value = Matrix> {
    (2..=max_n, 1..=max_d).prop_flat_map(|(n, d)| {
        prop::collection::vec(-8i32..=8, n * d).prop_map(move |v| {
            Matrix::new(n, d, v.into_iter().map(|x| x as f32 * 0.375).collect()).unwrap()
        })
    })
}

fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..10.0, k).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pr_routes_agree(m in matrix(24, 24), normalize in any::<bool>(), center in any::<bool>()) {
        prop_assume!(!normalize || m.iter_rows().all(|r| r.iter().any(|&v| v != 0.0)));
        let g = spectrum(&m, normalize, center, SpectrumRoute::Gram);
        let c = spectrum(&m, normalize, center, SpectrumRoute::Covariance);
        match (g, c) {
            (Ok(g), Ok(c)) => prop_assert!(close(g.participation_ratio, c.participation_ratio, 1e-9)),
            (Err(_), Err(_)) => {}
            (g, c) => prop_assert!(false, "routes disagree on definedness: {g:?} vs {c:?}"),
        }
    }

    #[test]
    fn pr_lies_between_one_and_rank(m in matrix(24, 24)) {
        if let Ok(s) = participation_ratio(&m, false, true) {
            let bound = (m.rows() - 1).min(m.cols()) as f64;
            prop_assert!(s.participation_ratio >= 1.0 - 1e-12);
            prop_assert!(s.participation_ratio <= bound + 1e-9);
            prop_assert!(s.participation_ratio <= s.positive_rank() as f64 + 1e-9);
        }
    }

    #[test]
    fn pr_invariant_under_signed_permutation(
        m in matrix(16, 16),
        seed in any::<u64>(),
    ) {
        let d = m.cols();
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..d).collect();
            let mut s = seed;
            for i in (1..d).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                p.swap(i, (s >> 33) as usize % (i + 1));
            }
            p
        };
        let rows: Vec<Vec<f32>> = m
            .iter_rows()
            .map(|r| perm.iter().enumerate().map(|(k, &j)| if (seed >> (k % 64)) & 1 == 1 { -r[j] } else { r[j] }).collect())
            .collect();
        let q = Matrix::from_rows(&rows).unwrap();
        for center in [false, true] {
            let a = participation_ratio(&m, false, center).ok().map(|s| s.participation_ratio);
            let b = participation_ratio(&q, false, center).ok().map(|s| s.participation_ratio);
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!(close(a, b, 1e-9)),
                (a, b) => prop_assert_eq!(a.is_some(), b.is_some()),
            }
        }
    }

    #[test]
    fn normalized_pr_ignores_row_scale(m in matrix(16, 16), scales in prop::collection::vec(-3i32..=3, 16)) {
        prop_assume!(m.iter_rows().all(|r| r.iter().any(|&v| v != 0.0)));
        let rows: Vec<Vec<f32>> = m
            .iter_rows()
            .zip(&scales)
            .map(|(r, &k)| r.iter().map(|v| v * 2f32.powi(k)).collect())
            .collect();
        let q = Matrix::from_rows(&rows).unwrap();
        let a = participation_ratio(&m, true, true).ok().map(|s| s.participation_ratio);
        let b = participation_ratio(&q, true, true).ok().map(|s| s.participation_ratio);
        match (a, b) {
            (Some(a), Some(b)) => prop_assert!(close(a, b, 1e-9)),
            (a, b) => prop_assert_eq!(a.is_some(), b.is_some()),
        }
    }

    #[test]
    fn angular_triangle_inequality(
        v in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 8), 3),
    ) {
        prop_assume!(v.iter().all(|x| x.iter().map(|a| a * a).sum::<f32>() > 1e-3));
        let d = |i: usize, j: usize| angular_distance(&v[i], &v[j]).unwrap();
        prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-9);
        prop_assert!((d(0, 1) - d(1, 0)).abs() == 0.0);
        prop_assert!((0.0..=std::f64::consts::PI).contains(&d(0, 1)));
    }

    #[test]
    fn symmetric_kl_is_nonnegative_and_symmetric(
        (p, q) in (2usize..20).prop_flat_map(|k| (distribution(k), distribution(k))),
    ) {
        let a = symmetric_kl(&p, &q).unwrap();
        let b = symmetric_kl(&q, &p).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!(close(a, b, 1e-12));
        prop_assert_eq!(symmetric_kl_with(&p, &q, KlConvention::Halved).unwrap(), a / 2.0);
    }

    #[test]
    fn spearman_ignores_monotone_transforms(
        pairs in prop::collection::vec((-20i32..20, -20i32..20), 3..40),
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let cubed: Vec<f64> = x.iter().map(|v| v * v * v + 7.0).collect();
        let r = spearman_rho(&x, &y).unwrap();
        prop_assert_eq!(average_ranks(&x), average_ranks(&cubed));
        prop_assert_eq!(r, spearman_rho(&cubed, &y).unwrap());
        if let Some(r) = r {
            let flipped: Vec<f64> = y.iter().map(|v| -v).collect();
            prop_assert!((spearman_rho(&x, &flipped).unwrap().unwrap() + r).abs() < 1e-12);
        }
    }

    #[test]
    fn ranks_sum_to_triangular_number(x in prop::collection::vec(-5i32..5, 1..50)) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        let n = x.len() as f64;
        prop_assert_eq!(average_ranks(&x).iter().sum::<f64>(), n * (n + 1.0) / 2.0);
    }

    #[test]
    fn interventions_keep_their_invariant(
        h in prop::collection::vec(-10.0f32..10.0, 16),
        target in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 16), 1..5),
    ) {
        let norm = |x: &[f32]| x.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        prop_assume!(norm(&h) > 1e-3 && target.iter().all(|r| norm(r) > 1e-3));
        let t = Matrix::from_rows(&target).unwrap();
        let src = Matrix::from_rows(&[h.clone()]).unwrap();

        if let Ok(sv) = compute_steering_vector(&src, &t, 1, InterventionMode::AngularSnap, NormTarget::MemberMean, ("s", "t")) {
            let out = apply_intervention(&h, &sv).unwrap();
            prop_assert!(close(norm(&out), norm(&h), 1e-6));
        }
        let sv = compute_steering_vector(&src, &t, 1, InterventionMode::NormRescale, NormTarget::MemberMean, ("s", "t")).unwrap();
        let out = apply_intervention(&h, &sv).unwrap();
        let mean_norm = target.iter().map(|r| norm(r)).sum::<f64>() / target.len() as f64;
        prop_assert!(close(norm(&out), mean_norm, 1e-6));
        let cos = out.iter().zip(&h).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / (norm(&out) * norm(&h));
        prop_assert!(cos >= 1.0 - 1e-9);

        // moving a state by the centroid difference lands on the target centroid
        let sv = compute_steering_vector(&src, &t, 1, InterventionMode::Additive, NormTarget::MemberMean, ("s", "t")).unwrap();
        let out = apply_intervention(&h, &sv).unwrap();
        for j in 0..16 {
            let c = target.iter().map(|r| r[j] as f64).sum::<f64>() / target.len() as f64;
            prop_assert!((out[j] as f64 - c).abs() < 1e-4);
        }
    }

    #[test]
    fn trace_bytes_round_trip(
        n_seq in 1usize..6,
        d in 1usize..5,
        n_layers in 0usize..4,
        payload_seed in any::<u32>(),
        cut in 1usize..64,
    ) {
        let layers: Vec<usize> = (0..=n_layers).collect();
        let selectors = vec![TokenSelector::Last, TokenSelector::FourthFromEnd];
        let sequences = (0..n_seq)
            .map(|i| TraceSequence { id: format!("s{i}"), tokens: vec![7; 4 + i], positions: vec![3 + i, i] })
            .collect();
        let header = TraceHeader {
            model_name: "p".into(),
            n_layers,
            d_model: d,
            dtype: "f32".into(),
            layers: layers.clone(),
            selectors,
            sequences,
            payload_bytes: 0,
        };
        let n = n_seq * layers.len() * 2 * d;
        let payload: Vec<f32> = (0..n as u32).map(|i| f32::from_bits(payload_seed.wrapping_mul(2654435761).wrapping_add(i.wrapping_mul(40503)))).collect();
        let t = ActivationTrace::new(header, payload).unwrap();
        let bytes = trace_to_bytes(&t).unwrap();
        let back = trace_from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.header, &t.header);
        prop_assert!(back.payload.iter().zip(&t.payload).all(|(a, b)| a.to_bits() == b.to_bits()));

        let short = &bytes[..bytes.len() - cut.min(bytes.len())];
        prop_assert!(trace_from_bytes(short).is_err());
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        prop_assert!(matches!(trace_from_bytes(&long), Err(Error::PayloadMismatch(_))));
    }
}
