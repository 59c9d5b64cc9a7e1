mod common;

use depulse::ar::{build_prediction_matrix, partition_predictor, partitioned_predictor, ArModel};
use depulse::detector::{detect_pulses_traced, DetectorConfig};
use depulse::inference::{
    gp_tail_posterior, marginal_loglik_full, marginal_loglik_simplified, simplified_operators, x1_posterior,
    BlockLikelihood, DiscontinuityParams, GpTailSolver,
};
use depulse::partition::SegmentPartition;
use depulse::pipeline::{fade_out_tail, restore_signal, RestoreConfig};
use depulse::pulse::{fit_gp_hyperparams, gram_matrix, GpFitOptions, GpHyper, GpTail, ShapeTailParams};
use depulse::sampler::{
    gp_tail_block_step, mh_location_step, quantile_sorted, ChainState, SamplerContext, TailModelKind, TailState,
};
use depulse::signal::{extract_excerpt, quantize, read_wav, replace_excerpt, write_wav, Signal};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

/// Stable AR coefficients built from reflection coefficients.
fn stable_ar(refl: &[f64]) -> Vec<f64> {
    let mut a: Vec<f64> = Vec::new();
    for &k in refl {
        let prev = a.clone();
        a.push(k);
        for i in 0..prev.len() {
            a[i] = prev[i] - k * prev[prev.len() - 1 - i];
        }
    }
    a
}

fn ar_strategy(max_p: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-0.9..-0.05f64, 0.05..0.9f64], 1..=max_p).prop_map(|r| stable_ar(&r))
}

/// Block, model and partition with room for P samples of pre-context.
fn block_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, SegmentPartition)> {
    (ar_strategy(4), 20usize..60).prop_flat_map(|(a, n)| {
        let p = a.len();
        (Just(a), prop::collection::vec(-1.0..1.0f64, n), p..n - 6, 1usize..5)
            .prop_map(move |(a, y, n0, m)| (a, y, SegmentPartition::new(n0, m, n).unwrap()))
    })
}

proptest! {
    #![proptest_config(cfg(24))]

    #[test]
    fn wav_round_trip_is_exact_on_quantized_samples(ints in prop::collection::vec(any::<i16>(), 1..400)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.wav");
        let sig = Signal::new(ints.iter().map(|&i| i as f64 / 32768.0).collect(), 22_050).unwrap();
        write_wav(&path, &sig).unwrap();
        let back: Signal<f64> = read_wav(&path).unwrap();
        let raw: Vec<i16> = back.samples().iter().map(|&x| quantize(x)).collect();
        prop_assert_eq!(raw, ints);
        prop_assert_eq!(back.sample_rate_hz(), 22_050);
    }

    #[test]
    fn excerpt_round_trip_is_bit_identical(
        x in prop::collection::vec(-1.0..1.0f64, 10..300),
        a in 0.0..1.0f64,
        b in 0.0..1.0f64,
    ) {
        let sig = Signal::new(x, 44_100).unwrap();
        let start = (a * (sig.len() - 1) as f64) as usize;
        let len = 1 + (b * (sig.len() - start - 1) as f64) as usize;
        let e = extract_excerpt(&sig, start, len).unwrap();
        prop_assert_eq!(replace_excerpt(&sig, &e).unwrap(), sig);
    }

    #[test]
    fn prediction_rows_have_order_plus_one_nonzeros(a in ar_strategy(8), extra in 1usize..30) {
        let p = a.len();
        let model = ArModel::new(a, 1.0).unwrap();
        let m = build_prediction_matrix(&model, p + extra).unwrap();
        prop_assert_eq!(m.nrows(), extra);
        for r in m.row_iter() {
            prop_assert_eq!(r.iter().filter(|v| **v != 0.0).count(), p + 1);
        }
    }

    #[test]
    fn quadratic_form_equals_residual_energy(a in ar_strategy(6), x in prop::collection::vec(-2.0..2.0f64, 40)) {
        let model = ArModel::new(a, 1.0).unwrap();
        let m = build_prediction_matrix(&model, x.len()).unwrap();
        let xv = DVector::from_column_slice(&x);
        let q = (&m * &xv).norm_squared();
        let direct: f64 = model.residuals(&x).iter().map(|e| e * e).sum();
        prop_assert!((q - direct).abs() <= 1e-10 * direct.max(1e-300));
    }

    #[test]
    fn partitioning_keeps_columns_and_zeroes_only_tail_coefficients((a, y, part) in block_strategy()) {
        let p = a.len();
        let n = y.len();
        let model = ArModel::new(a, 1.0).unwrap();
        let full = build_prediction_matrix(&model, n).unwrap();
        let i0: Vec<usize> = part.i0().collect();
        let i1: Vec<usize> = part.i1().collect();
        let i2: Vec<usize> = part.i2().collect();
        let pp = partition_predictor(&full, &i0, &i1, &i2).unwrap();
        prop_assert_eq!(pp.a0.ncols() + pp.a1.ncols() + pp.a2.ncols(), n);
        let re = pp.reassemble();
        for c in 0..n {
            for r in 0..full.nrows() {
                let expect = if c >= part.tail_start() && r + p != c { 0.0 } else { full[(r, c)] };
                prop_assert_eq!(re[(r, c)], expect);
            }
        }
    }

    #[test]
    fn instantaneous_frequency_decreases_within_bounds(
        tau_f in 0.001..0.5f64,
        f_min in 1.0..100.0f64,
        span in 0.0..200.0f64,
    ) {
        let p = ShapeTailParams { v_t: 0.3, tau_m: 0.07, tau_f, f_max: f_min + span, f_min, phi: 0.0 };
        let f: Vec<f64> = (0..2000).step_by(7).map(|m| p.frequency_at(m, 44_100.0)).collect();
        prop_assert!(f.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(f.iter().all(|&v| v >= f_min - 1e-12 && v <= p.f_max + 1e-12));
    }

    #[test]
    fn gram_matrix_is_toeplitz_and_psd(sf in 0.01..10.0f64, sl in 0.5..400.0f64, n in 2usize..60) {
        let h = GpHyper::new(sf, sl, 1e-3).unwrap();
        let g = gram_matrix(n, &h, 0.0);
        for i in 1..n {
            for j in 1..n {
                prop_assert_eq!(g[(i, j)], g[(i - 1, j - 1)]);
            }
        }
        let min_eig = g.symmetric_eigenvalues().min();
        prop_assert!(min_eig >= -1e-8 * sf, "min eigenvalue {}", min_eig);
    }

    #[test]
    fn delta_mu_peaks_at_one_and_detections_are_sorted(seed in 0u64..1000) {
        let (_, deg, _) = common::reference_fixture(seed);
        let (dets, trace) = detect_pulses_traced(&deg, &DetectorConfig::default()).unwrap();
        let max = trace.delta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((max - 1.0).abs() < 1e-12);
        for w in dets.windows(2) {
            prop_assert!(w[0].n0 + w[0].m <= w[1].n0);
        }
    }

    #[test]
    fn detector_is_invariant_to_positive_scaling(seed in 0u64..1000, k in 0.05..0.95f64) {
        let (_, deg, _) = common::reference_fixture(seed);
        let scaled = deg.with_samples(deg.samples().iter().map(|x| x * k).collect()).unwrap();
        let cfg = DetectorConfig::default();
        let (d1, t1) = detect_pulses_traced(&deg, &cfg).unwrap();
        let (d2, t2) = detect_pulses_traced(&scaled, &cfg).unwrap();
        let pos = |d: &[depulse::detector::Detection]| d.iter().map(|d| (d.n0, d.m)).collect::<Vec<_>>();
        prop_assert_eq!(pos(&d1), pos(&d2));
        for (a, b) in t1.delta.iter().zip(&t2.delta) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn x1_posterior_mean_depends_only_on_variance_ratio(
        (a, y, part) in block_strategy(),
        se in 0.05..2.0f64,
        ratio in 0.5..50.0f64,
        k in 0.1..10.0f64,
    ) {
        let v = vec![0.1; part.tail_len()];
        let model = ArModel::new(a, se).unwrap();
        let pp = partitioned_predictor(&model, part).unwrap();
        let mean = |s: f64| {
            let dp = DiscontinuityParams::new(part.n0, part.m, s * se * ratio).unwrap();
            x1_posterior(&y, &pp, &dp, &v, s * se).unwrap().mean
        };
        let (m1, m2) = (mean(1.0), mean(k));
        prop_assert!((&m1 - &m2).amax() <= 1e-8 * (1.0 + m1.amax()));
    }

    #[test]
    fn gp_posterior_mean_is_linear_in_observations(
        (a, y, part) in block_strategy(),
        z in prop::collection::vec(-1.0..1.0f64, 60),
        alpha in -2.0..2.0f64,
        beta in -2.0..2.0f64,
    ) {
        let model = ArModel::new(a, 0.3).unwrap();
        let pp = partitioned_predictor(&model, part).unwrap();
        let blocks = simplified_operators(&pp, 0.3).unwrap().blocks();
        let c = gram_matrix(part.tail_len(), &GpHyper::new(0.5, 9.0, 1e-3).unwrap(), 0.0);
        let (n0, t) = (part.n0, part.tail_start());
        let w = &z[..y.len()];
        let mean = |y0: &[f64], y2: &[f64]| gp_tail_posterior(&blocks, &c, y0, y2).unwrap().mean;
        let comb: Vec<f64> = y.iter().zip(w).map(|(p, q)| alpha * p + beta * q).collect();
        let lhs = mean(&comb[..n0], &comb[t..]);
        let rhs = mean(&y[..n0], &y[t..]) * alpha + mean(&w[..n0], &w[t..]) * beta;
        prop_assert!((&lhs - &rhs).amax() <= 1e-8 * (1.0 + rhs.amax()));
    }

    #[test]
    fn quantiles_agree_with_sorting(mut x in prop::collection::vec(-1e3..1e3f64, 1..200), q in 0.0..1.0f64) {
        x.sort_by(f64::total_cmp);
        let v = quantile_sorted(&x, q);
        prop_assert!(v >= x[0] && v <= x[x.len() - 1]);
        prop_assert_eq!(quantile_sorted(&x, 0.0), x[0]);
        prop_assert_eq!(quantile_sorted(&x, 1.0), x[x.len() - 1]);
        let h = (x.len() - 1) as f64 * q;
        if h == h.floor() {
            prop_assert_eq!(v, x[h as usize]);
        }
    }

    #[test]
    fn fade_matches_closed_form_ramp(v in prop::collection::vec(-1.0..1.0f64, 0..80), n in 0usize..100) {
        let out = fade_out_tail(&v, n);
        let nf = n.min(v.len());
        let start = v.len() - nf;
        for (i, (&a, &b)) in v.iter().zip(&out).enumerate() {
            let expect = if i < start { a } else { a * ((nf - (i - start) - 1) as f64 / nf as f64) };
            prop_assert_eq!(b, expect);
        }
        if nf > 0 {
            prop_assert_eq!(*out.last().unwrap(), 0.0);
        }
        // Twice equals the squared ramp.
        let twice = fade_out_tail(&out, n);
        for (i, (&a, &b)) in v.iter().zip(&twice).enumerate() {
            let r = if i < start { 1.0 } else { (nf - (i - start) - 1) as f64 / nf as f64 };
            prop_assert!((b - a * r * r).abs() <= 1e-15);
        }
    }
}

proptest! {
    #![proptest_config(cfg(8))]

    #[test]
    fn gp_fit_does_not_lose_evidence(seed in 0u64..500) {
        let (_, deg, pulse) = common::reference_fixture(seed);
        let start = pulse.n0 + pulse.m;
        let y2 = &deg.samples()[start..start + 1500];
        let fit = fit_gp_hyperparams::<f64>(y2, &GpFitOptions::default()).unwrap();
        prop_assert!(fit.loglik >= fit.initial_loglik);
    }

    #[test]
    fn location_moves_stay_in_bounds_and_gp_step_keeps_hyperparameters(seed in 0u64..500) {
        let y = common::ar_fixture(400, seed).into_samples();
        let model = ArModel::new(vec![0.3, -0.1], 4e-4).unwrap();
        let hyper = GpHyper::new(1e-3, 50.0, 1e-4).unwrap();
        let mut ctx = SamplerContext {
            lik: BlockLikelihood::new(&model, &y),
            sample_rate: 44_100.0,
            min_n0: 100,
            gp: Some(GpTailSolver::new(&model, &y, hyper)),
        };
        let part = SegmentPartition::new(102, 4, y.len()).unwrap();
        let mut state = ChainState {
            n0: part.n0,
            m: part.m,
            sigma_d2: 0.01,
            tail: TailState::Gp { tail: GpTail { v_t: vec![0.0; part.tail_len()], hyper }, start: part.tail_start() },
            x1: vec![0.0; part.m],
        };
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for _ in 0..40 {
            mh_location_step(&mut state, &ctx, 10, &mut rng, None).unwrap();
            prop_assert!(state.n0 >= 100 && state.m >= 1 && state.n0 + state.m < y.len());
            prop_assert_eq!(state.x1.len(), state.m);
            gp_tail_block_step(&mut state, &mut ctx, &mut rng).unwrap();
            let TailState::Gp { tail, .. } = &state.tail else { unreachable!() };
            prop_assert_eq!(tail.hyper, hyper);
        }
    }

    #[test]
    fn flat_target_accepts_every_in_bounds_proposal(seed in 0u64..500) {
        let y = common::ar_fixture(60, seed).into_samples();
        let model = ArModel::new(vec![0.3], 1e-3).unwrap();
        let ctx = SamplerContext { lik: BlockLikelihood::new(&model, &y), sample_rate: 44_100.0, min_n0: 5, gp: None };
        let mut state = ChainState {
            n0: 8,
            m: 3,
            sigma_d2: 0.1,
            tail: TailState::Shape(common::reference_tail()),
            x1: vec![0.0; 3],
        };
        let flat = |_: SegmentPartition| Ok(0.0);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (mut inb, mut acc) = (0, 0);
        for _ in 0..300 {
            let mv = mh_location_step(&mut state, &ctx, 10, &mut rng, Some(&flat)).unwrap();
            inb += mv.in_bounds as usize;
            acc += mv.accepted as usize;
        }
        prop_assert_eq!(inb, acc);
        prop_assert!(acc > 0);
    }

    #[test]
    fn simplified_path_agrees_on_tail_ordering_for_tiny_bursts((a, y, part) in block_strategy(), shift in 0.05..0.5f64) {
        // sigma_d2 / sigma_e2 >= 1e6: burst samples carry no information.
        let se = 0.05;
        let model = ArModel::new(a, se).unwrap();
        let pp = partitioned_predictor(&model, part).unwrap();
        let dp = DiscontinuityParams::new(part.n0, part.m, se * 1e7).unwrap();
        let v1 = vec![0.0; part.tail_len()];
        let v2: Vec<f64> = (0..part.tail_len()).map(|i| shift * (i as f64 * 0.3).cos()).collect();
        let full = |v: &[f64]| marginal_loglik_full(&y, &pp, &dp, v, se).unwrap();
        let simp = |v: &[f64]| marginal_loglik_simplified(&y, &pp, se, v).unwrap();
        let (df, ds) = (full(&v1) - full(&v2), simp(&v1) - simp(&v2));
        prop_assume!(ds.abs() > 1e-6);
        prop_assert_eq!(df > 0.0, ds > 0.0);
    }
}

proptest! {
    #![proptest_config(cfg(3))]

    #[test]
    fn restoration_touches_only_the_pulse_region(seed in 0u64..100) {
        let (_, deg, _) = common::reference_fixture(seed);
        let dets = depulse::detector::detect_pulses(&deg, &DetectorConfig::default()).unwrap();
        let mut rc = RestoreConfig::for_model(TailModelKind::Gp);
        rc.sampler.iterations = 20;
        rc.sampler.burn_in = 10;
        rc.sampler.seed = seed;
        let (out, report) = restore_signal(&deg, &dets, &rc).unwrap();
        let mut touched = vec![false; deg.len()];
        for p in &report.pulses {
            let r = p.result.as_ref().unwrap();
            let (start, len) = depulse::pipeline::excerpt_start(deg.len(), p.detection.n0, &rc);
            prop_assert_eq!(start, r.excerpt_start);
            touched[r.n0..start + len].iter_mut().for_each(|t| *t = true);
        }
        for (i, (a, b)) in deg.samples().iter().zip(out.samples()).enumerate() {
            if !touched[i] {
                prop_assert_eq!(a.to_bits(), b.to_bits(), "sample {} changed", i);
            }
        }
    }
}
