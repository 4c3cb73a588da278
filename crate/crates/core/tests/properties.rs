use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cvep_core::containers::{decode_epochs, encode_epochs, EpochSet};
use cvep_core::decoder::{match_trial, TemplateBank};
use cvep_core::metrics::{itr, mutual_information, mutual_information_between, periodogram, SnrReport};
use cvep_core::preprocess::{filterbank, FilterBankSpec};
use cvep_core::stimulus::{anneal_subset, generate_wn_pool, AnnealSchedule};
use cvep_core::tdca::{fit_tdca, TdcaModel};
use cvep_core::transfer::{build_transfer_templates, fit_weights, OverlapPolicy, SourceSubject};
use cvep_core::trf::{
    build_design, convolve_trace, fit_trf, retained_rank, BankSpec, LagWindow, RankRule, Trf, TrfFitOptions,
};

fn names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("C{i}")).collect()
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Two or three classes with class-specific waveforms along random
/// patterns plus unit noise.
fn labelled_set(seed: u64, n_classes: usize, per_class: usize, dims: usize, n: usize) -> EpochSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern: Vec<f64> = (0..dims).map(|_| gauss(&mut rng)).collect();
    let mut trials = Vec::new();
    let mut labels = Vec::new();
    for r in 0..per_class {
        for k in 0..n_classes {
            let f = 6.0 + 3.0 * k as f64;
            let t = DMatrix::from_fn(n, dims, |i, c| {
                2.0 * pattern[c] * (2.0 * std::f64::consts::PI * f * i as f64 / 250.0).sin()
                    + 0.5 * (((i * 31 + c * 17 + r * 7 + k) % 13) as f64 - 6.0) / 6.0
            });
            trials.push(t.map(|v| v + 0.3 * gauss(&mut rng)));
            labels.push(k);
        }
    }
    EpochSet::new(trials, labels, 250.0, names(dims)).unwrap()
}

fn cos_abs(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b).abs() / (a.norm() * b.norm())
}

fn wave(n: usize, f: f64, phase: f64) -> DVector<f64> {
    DVector::from_fn(n, |i, _| (2.0 * std::f64::consts::PI * f * i as f64 / 250.0 + phase).sin())
}

fn source(id: usize, resp: &[DVector<f64>]) -> SourceSubject {
    let m: BTreeMap<usize, DMatrix<f64>> =
        resp.iter().enumerate().map(|(k, r)| (k, DMatrix::from_column_slice(r.len(), 1, r.as_slice()))).collect();
    SourceSubject::new(id, m.clone(), m, DVector::from_element(1, 1.0), 250.0).unwrap()
}

fn target(resp: &[DVector<f64>]) -> EpochSet {
    let trials = resp.iter().map(|r| DMatrix::from_column_slice(r.len(), 1, r.as_slice())).collect();
    EpochSet::new(trials, (0..resp.len()).collect(), 250.0, vec!["Oz".into()]).unwrap()
}

fn spec1() -> BankSpec {
    BankSpec { filterbank: FilterBankSpec::standard(2), n_shifts: 2, fb_weights: vec![1.0, 0.5] }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn epoch_serialization_round_trips(
        values in prop::collection::vec(-1e4f32..1e4, 2 * 5 * 3),
        fs in prop::sample::select(vec![250.0, 256.0, 1000.0]),
    ) {
        let trials: Vec<DMatrix<f64>> =
            values.chunks(15).map(|c| DMatrix::from_iterator(5, 3, c.iter().map(|v| *v as f64))).collect();
        let e = EpochSet::new(trials, vec![4, 1], fs, names(3)).unwrap();
        let back = decode_epochs(&encode_epochs(&e).unwrap()[..]).unwrap();
        prop_assert_eq!(back, e);
    }

    #[test]
    fn class_mean_ignores_trial_order(seed in 0u64..1000, rot in 1usize..9) {
        let e = labelled_set(seed, 3, 3, 2, 20);
        let order: Vec<usize> = (0..e.n_trials()).map(|i| (i + rot) % e.n_trials()).collect();
        let p = e.select(&order).unwrap();
        for k in 0..3 {
            let d = (e.class_mean(k).unwrap() - p.class_mean(k).unwrap()).amax();
            prop_assert!(d < 1e-12);
        }
    }

    #[test]
    fn filterbank_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = labelled_set(seed, 1, 1, 2, 300);
        let y = labelled_set(seed + 1, 1, 1, 2, 300);
        let mix = x.map_trials(250.0, names(2), |t| t * a).unwrap();
        let mix = EpochSet::new(vec![mix.trial(0) + y.trial(0) * b], vec![0], 250.0, names(2)).unwrap();
        let spec = FilterBankSpec::standard(3);
        let (fx, fy, fm) = (filterbank(&x, &spec).unwrap(), filterbank(&y, &spec).unwrap(), filterbank(&mix, &spec).unwrap());
        for i in 0..3 {
            let expect = fx[i].trial(0) * a + fy[i].trial(0) * b;
            prop_assert!((fm[i].trial(0) - expect).amax() < 1e-9);
        }
    }

    #[test]
    fn zero_phase_filtering_has_no_lag(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 1000;
        let tones: Vec<(f64, f64)> = (0..6).map(|_| (rng.random_range(15.0..70.0), rng.random_range(0.0..6.3))).collect();
        let x: Vec<f64> = (0..n)
            .map(|i| tones.iter().map(|(f, ph)| (2.0 * std::f64::consts::PI * f * i as f64 / 250.0 + ph).sin()).sum())
            .collect();
        let e = EpochSet::new(vec![DMatrix::from_column_slice(n, 1, &x)], vec![0], 250.0, names(1)).unwrap();
        let y = filterbank(&e, &FilterBankSpec::single(8.0, 90.0)).unwrap().remove(0);
        let y = y.trial(0);
        let xc = |lag: i64| -> f64 {
            (100..n as i64 - 100).map(|i| x[i as usize] * y[((i + lag) as usize, 0)]).sum()
        };
        let best = (-20..=20).max_by(|a, b| xc(*a).total_cmp(&xc(*b))).unwrap();
        prop_assert_eq!(best, 0);
    }

    #[test]
    fn tdca_ignores_scale_and_channel_offset(
        seed in 0u64..1000,
        c in prop::sample::select(vec![1e-3, 0.5, 7.0, 1e3]),
        offset in prop::collection::vec(-50.0f64..50.0, 3),
    ) {
        let e = labelled_set(seed, 3, 4, 3, 40);
        let base = fit_tdca(&e, 1, 1e-6).unwrap().filter();
        let off = DMatrix::from_fn(40, 3, |_, j| offset[j]);
        let moved = e.map_trials(250.0, names(3), |t| t * c + &off).unwrap();
        let m = fit_tdca(&moved, 1, 1e-6).unwrap();
        prop_assert!(1.0 - cos_abs(&base, &m.filter()) < 1e-8);
    }

    #[test]
    fn tdca_ignores_trial_order(seed in 0u64..1000, rot in 1usize..12) {
        let e = labelled_set(seed, 3, 4, 3, 40);
        let order: Vec<usize> = (0..e.n_trials()).map(|i| (i + rot) % e.n_trials()).collect();
        let a = fit_tdca(&e, 2, 1e-6).unwrap();
        let b = fit_tdca(&e.select(&order).unwrap(), 2, 1e-6).unwrap();
        prop_assert!((a.filters - b.filters).amax() < 1e-10);
    }

    #[test]
    fn trf_fit_is_scale_equivariant(seed in 0u64..1000, c in 0.01f64..100.0, alpha in 0.3f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let window = LagWindow::new(0.0, 0.1, 250.0).unwrap();
        let traces: Vec<Vec<f64>> = (0..3).map(|_| (0..200).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let design = build_design(&traces, window).unwrap();
        let y: Vec<f64> = (0..600).map(|_| gauss(&mut rng)).collect();
        let opts = TrfFitOptions { alpha, rule: RankRule::Below };
        let h = fit_trf(&design, &y, &opts).unwrap();
        let yc: Vec<f64> = y.iter().map(|v| v * c).collect();
        let hc = fit_trf(&design, &yc, &opts).unwrap();
        let scale = h.taps.iter().fold(0.0f64, |m, v| m.max(v.abs())) * c;
        for (a, b) in h.taps.iter().zip(&hc.taps) {
            prop_assert!((a * c - b).abs() <= 1e-9 * scale.max(1.0));
        }
    }

    #[test]
    fn reconstruction_is_bilinear(
        h1 in prop::collection::vec(-1.0f64..1.0, 11),
        h2 in prop::collection::vec(-1.0f64..1.0, 11),
        s1 in prop::collection::vec(-1.0f64..1.0, 60),
        s2 in prop::collection::vec(-1.0f64..1.0, 60),
        a in -2.0f64..2.0,
    ) {
        let w = LagWindow::new(-0.008, 0.032, 250.0).unwrap();
        let trf = |h: &[f64]| Trf::from_taps(h.to_vec(), w, false).unwrap();
        let hs: Vec<f64> = h1.iter().zip(&h2).map(|(x, y)| x + a * y).collect();
        let ss: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| x + a * y).collect();
        let (r1, r2) = (convolve_trace(&trf(&h1), &s1), convolve_trace(&trf(&h2), &s1));
        for ((x, y), z) in r1.iter().zip(&r2).zip(convolve_trace(&trf(&hs), &s1)) {
            prop_assert!((x + a * y - z).abs() < 1e-12);
        }
        let q = convolve_trace(&trf(&h1), &s2);
        for ((x, y), z) in r1.iter().zip(&q).zip(convolve_trace(&trf(&h1), &ss)) {
            prop_assert!((x + a * y - z).abs() < 1e-12);
        }
    }

    #[test]
    fn retained_rank_is_monotone_in_alpha(
        mut spectrum in prop::collection::vec(0.0f64..100.0, 1..40),
        a in 0.001f64..1.5,
        b in 0.001f64..1.5,
    ) {
        spectrum.sort_by(|x, y| y.total_cmp(x));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        for rule in [RankRule::Below, RankRule::AtLeast] {
            let (m_lo, m_hi) = (retained_rank(&spectrum, lo, rule), retained_rank(&spectrum, hi, rule));
            prop_assert!(m_lo <= m_hi);
            prop_assert!((1..=spectrum.len()).contains(&m_lo));
        }
    }

    #[test]
    fn transfer_weights_follow_sources(
        phases in prop::collection::vec(0.0f64..6.3, 6),
        mix in prop::collection::vec(-2.0f64..2.0, 3),
        c in prop::sample::select(vec![0.01, 0.3, 4.0, 250.0]),
    ) {
        let n = 250;
        let srcs: Vec<SourceSubject> = (0..3)
            .map(|j| source(j + 1, &[wave(n, 9.0 + j as f64 * 4.0, phases[2 * j]), wave(n, 31.0 - j as f64 * 3.0, phases[2 * j + 1])]))
            .collect();
        let tgt: Vec<DVector<f64>> = (0..2)
            .map(|k| {
                (0..3).fold(DVector::zeros(n), |acc, j| {
                    let r = &srcs[j].calib_responses[&k];
                    acc + DVector::from_column_slice(r.as_slice()) * mix[j]
                })
            })
            .collect();
        let w = fit_weights(&target(&tgt), &DVector::from_element(1, 1.0), &srcs, None, OverlapPolicy::Refuse).unwrap();
        let rev: Vec<SourceSubject> = srcs.iter().rev().cloned().collect();
        let wr = fit_weights(&target(&tgt), &DVector::from_element(1, 1.0), &rev, None, OverlapPolicy::Refuse).unwrap();
        for j in 0..3 {
            prop_assert!((w.weights[j] - wr.weights[2 - j]).abs() < 1e-8);
        }

        let mut scaled = srcs.clone();
        scaled[1] = scaled[1].scaled(c);
        let ws = fit_weights(&target(&tgt), &DVector::from_element(1, 1.0), &scaled, None, OverlapPolicy::Refuse).unwrap();
        prop_assert!((ws.weights[1] * c - w.weights[1]).abs() < 1e-8 * w.weights[1].abs().max(1.0));
        let spec = BankSpec { filterbank: FilterBankSpec::single(8.0, 90.0), n_shifts: 0, fb_weights: vec![1.0] };
        let a = build_transfer_templates(&w, &srcs, &[0, 1], n, &spec).unwrap();
        let b = build_transfer_templates(&ws, &scaled, &[0, 1], n, &spec).unwrap();
        for (x, y) in a.templates.iter().zip(&b.templates) {
            prop_assert!((&x[0] - &y[0]).amax() < 1e-8);
        }
    }

    #[test]
    fn decoding_ignores_trial_scale(seed in 0u64..1000, c in prop::sample::select(vec![1e-4, 0.2, 3.0, 1e4])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 250;
        let broadband: Vec<DMatrix<f64>> =
            (0..4).map(|_| DMatrix::from_fn(n, 1, |_, _| gauss(&mut rng))).collect();
        let spec = spec1();
        let bank = TemplateBank::from_broadband(vec![0, 1, 2, 3], &broadband, 250.0, spec.filterbank, spec.n_shifts, spec.fb_weights).unwrap();
        let model = TdcaModel::from_filters(DMatrix::from_element(2, 1, 0.5f64.sqrt())).unwrap();
        let k = rng.random_range(0..4);
        let trial = DMatrix::from_fn(n, 2, |i, _| broadband[k][(i, 0)] + 0.8 * gauss(&mut rng));
        let a = match_trial(&trial, &model, &bank).unwrap();
        let b = match_trial(&(&trial * c), &model, &bank).unwrap();
        prop_assert_eq!(a.predicted_class, b.predicted_class);
        prop_assert_eq!(a.best_shift, b.best_shift);
        prop_assert!((a.scores - b.scores).amax() < 1e-9);
    }

    #[test]
    fn itr_monotone_in_accuracy_and_inverse_in_time(m in 2usize..200, p in 0.0f64..1.0, q in 0.0f64..1.0, t in 0.1f64..10.0) {
        let floor = 1.0 / m as f64;
        let (lo, hi) = (p.min(q).max(floor), p.max(q).max(floor));
        prop_assert!(itr(m, lo, t).unwrap() <= itr(m, hi, t).unwrap() + 1e-9);
        prop_assert!((itr(m, p, t).unwrap() * t - itr(m, p, 2.0 * t).unwrap() * 2.0 * t).abs() < 1e-9);
        let perfect = itr(m, 1.0, t).unwrap();
        prop_assert!((perfect - (m as f64).log2() * 60.0 / t).abs() < 1e-9 * perfect);
    }

    #[test]
    fn periodogram_satisfies_parseval(x in prop::collection::vec(-10.0f64..10.0, 8..400), fs in 10.0f64..1000.0) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let power = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let (_, psd) = periodogram(&x, fs);
        let total = psd.iter().sum::<f64>() * fs / n;
        prop_assert!((total - power).abs() <= 1e-6 * power.max(1e-12));
    }

    #[test]
    fn mutual_information_is_additive(snr in prop::collection::vec(0.0f64..20.0, 126), split in 0.5f64..124.5) {
        let freqs: Vec<f64> = (0..126).map(|i| i as f64).collect();
        let r = SnrReport { freqs_hz: freqs, snr, mutual_info_bits_per_s: 0.0, k_hz: 125.0 };
        let whole = mutual_information(&r, 125.0).unwrap();
        let parts = mutual_information_between(&r, 0.0, split).unwrap() + mutual_information_between(&r, split, 125.0).unwrap();
        prop_assert!((whole - parts).abs() <= 1e-9 * whole.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn annealing_never_loses_separation(seed in 0u64..1000, k in 2usize..12) {
        let pool = generate_wn_pool(150, 60, seed).unwrap();
        let schedule = AnnealSchedule { iters_per_temp: 20, ..AnnealSchedule::with_seed(seed) };
        let sel = anneal_subset(&pool, k, &schedule).unwrap();
        prop_assert!(sel.objective >= sel.initial_objective);
        prop_assert!(sel.indices.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn white_noise_frames_are_uniform() {
    let pool = generate_wn_pool(1000, 180, 3).unwrap();
    let mut bins = [0usize; 10];
    let mut total = 0;
    for s in pool.sequences() {
        for v in s.frames() {
            bins[((v * 10.0) as usize).min(9)] += 1;
            total += 1;
        }
    }
    let expect = total as f64 / 10.0;
    let sigma = (total as f64 * 0.1 * 0.9).sqrt();
    assert!(total >= 100_000);
    for b in bins {
        assert!((b as f64 - expect).abs() < 5.0 * sigma, "{bins:?}");
    }
}
