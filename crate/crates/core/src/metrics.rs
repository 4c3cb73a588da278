//! Accuracy, information transfer rate, spectral SNR and mutual
//! information, and the large-target template sweep.

use nalgebra::DMatrix;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::containers::{Codebook, EpochSet};
use crate::decoder::match_filtered;
use crate::error::{Error, Result};
use crate::preprocess::filter_columns;
use crate::tdca::TdcaModel;
use crate::trf::{build_linear_templates, BankSpec, Trf};

/// Bits per minute for `m` targets at accuracy `p` and `t_s` seconds per
/// selection.
pub fn itr(m: usize, p: f64, t_s: f64) -> Result<f64> {
    if m < 2 {
        return Err(Error::arg(format!("ITR needs at least 2 targets, got {m}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg(format!("accuracy {p} outside [0, 1]")));
    }
    if !(t_s > 0.0 && t_s.is_finite()) {
        return Err(Error::arg("selection time must be positive"));
    }
    let mf = m as f64;
    let xlog = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * y.log2() };
    let bits = mf.log2() + xlog(p, p) + xlog(1.0 - p, (1.0 - p) / (mf - 1.0));
    Ok(bits.max(0.0) * 60.0 / t_s)
}

/// One-sided periodogram of the mean-removed signal, rectangular window.
/// Scaled so that `sum(psd) * fs / n` equals the mean-removed power.
pub fn periodogram(x: &[f64], fs: f64) -> (Vec<f64>, Vec<f64>) {
    let spec = one_sided_spectrum(x);
    let n = x.len();
    let c = 1.0 / (fs * n as f64);
    let last = n / 2;
    let psd = spec
        .iter()
        .enumerate()
        .map(|(k, z)| {
            let interior = k != 0 && !(n % 2 == 0 && k == last);
            z.norm_sqr() * c * if interior { 2.0 } else { 1.0 }
        })
        .collect();
    (bin_freqs(n, fs), psd)
}

fn bin_freqs(n: usize, fs: f64) -> Vec<f64> {
    (0..=n / 2).map(|k| k as f64 * fs / n as f64).collect()
}

fn one_sided_spectrum(x: &[f64]) -> Vec<Complex<f64>> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf.truncate(n / 2 + 1);
    buf
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    pub freqs_hz: Vec<f64>,
    /// Non-negative; `f64::INFINITY` where the noise estimate is zero.
    pub snr: Vec<f64>,
    pub mutual_info_bits_per_s: f64,
    pub k_hz: f64,
}

/// Per-frequency ratio of the trial-mean spectrum to the summed residual
/// spectra, for one component of single-class trials.
pub fn snr_spectrum(trials: &EpochSet, component: usize, k_hz: f64) -> Result<SnrReport> {
    if trials.n_trials() < 2 {
        return Err(Error::NoNoiseEstimate);
    }
    if component >= trials.n_channels() {
        return Err(Error::arg(format!("component {component} out of range")));
    }
    let fs = trials.fs_hz();
    let n = trials.n_samples();
    let series: Vec<Vec<f64>> = trials.trials().iter().map(|t| t.column(component).iter().copied().collect()).collect();
    let mean: Vec<f64> = (0..n).map(|i| series.iter().map(|s| s[i]).sum::<f64>() / series.len() as f64).collect();
    let (freqs, signal) = periodogram(&mean, fs);
    let mut noise = vec![0.0; signal.len()];
    for s in &series {
        let resid: Vec<f64> = s.iter().zip(&mean).map(|(a, b)| a - b).collect();
        let (_, p) = periodogram(&resid, fs);
        noise.iter_mut().zip(p).for_each(|(acc, v)| *acc += v);
    }
    let mut warned = false;
    let snr: Vec<f64> = signal
        .iter()
        .zip(&noise)
        .map(|(s, nz)| {
            if *s <= 0.0 {
                0.0
            } else if *nz <= 0.0 {
                warned = true;
                f64::INFINITY
            } else {
                s / nz
            }
        })
        .collect();
    if warned {
        log::warn!("noise spectrum is zero at some frequencies; SNR reported as infinite");
    }
    let mut report = SnrReport { freqs_hz: freqs, snr, mutual_info_bits_per_s: 0.0, k_hz };
    report.mutual_info_bits_per_s = mutual_information(&report, k_hz)?;
    Ok(report)
}

/// Trapezoid integral of `log2(1 + SNR)` from 0 to `k_hz`.
pub fn mutual_information(report: &SnrReport, k_hz: f64) -> Result<f64> {
    mutual_information_between(report, 0.0, k_hz)
}

/// Trapezoid integral of `log2(1 + SNR)` over `[lo, hi]`, with linear
/// interpolation at endpoints that fall between bins.
pub fn mutual_information_between(report: &SnrReport, lo: f64, hi: f64) -> Result<f64> {
    let f = &report.freqs_hz;
    let top = f.last().copied().unwrap_or(0.0);
    if !(lo >= 0.0 && lo <= hi && hi <= top + 1e-9) {
        return Err(Error::arg(format!("integration range [{lo}, {hi}] outside [0, {top}] Hz")));
    }
    let y: Vec<f64> = report.snr.iter().map(|s| (1.0 + s).log2()).collect();
    let interp = |x: f64| -> f64 {
        let i = f.partition_point(|v| *v <= x).clamp(1, f.len() - 1);
        let (x0, x1) = (f[i - 1], f[i]);
        let w = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
        if w == 0.0 {
            y[i - 1]
        } else if w == 1.0 {
            y[i]
        } else {
            y[i - 1] + w * (y[i] - y[i - 1])
        }
    };
    if f.len() < 2 || hi == lo {
        return Ok(0.0);
    }
    let mut pts: Vec<(f64, f64)> = vec![(lo, interp(lo))];
    pts.extend(f.iter().zip(&y).filter(|(x, _)| **x > lo && **x < hi).map(|(x, v)| (*x, *v)));
    pts.push((hi, interp(hi)));
    let total: f64 = pts.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum();
    if total.is_infinite() {
        log::warn!("infinite SNR in integration range; mutual information is infinite");
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub classes: Vec<usize>,
    /// Rows are true classes, columns predicted classes.
    pub counts: DMatrix<f64>,
    /// Trials without a prediction count as errors.
    pub accuracy: f64,
    pub n_undecided: usize,
}

impl Confusion {
    pub fn row_normalized(&self) -> DMatrix<f64> {
        let mut m = self.counts.clone();
        for mut row in m.row_iter_mut() {
            let s = row.sum();
            if s > 0.0 {
                row /= s;
            }
        }
        m
    }
}

pub fn confusion_and_accuracy(labels: &[usize], predictions: &[Option<usize>]) -> Result<Confusion> {
    if labels.len() != predictions.len() {
        return Err(Error::arg("labels and predictions differ in length"));
    }
    if labels.is_empty() {
        return Err(Error::arg("no trials to score"));
    }
    let mut classes: Vec<usize> = labels.iter().copied().chain(predictions.iter().flatten().copied()).collect();
    classes.sort_unstable();
    classes.dedup();
    let pos = |c: usize| classes.binary_search(&c).expect("class listed");
    let mut counts = DMatrix::zeros(classes.len(), classes.len());
    let mut hits = 0usize;
    let mut undecided = 0usize;
    for (l, p) in labels.iter().zip(predictions) {
        match p {
            Some(p) => {
                counts[(pos(*l), pos(*p))] += 1.0;
                hits += usize::from(l == p);
            }
            None => undecided += 1,
        }
    }
    Ok(Confusion { accuracy: hits as f64 / labels.len() as f64, classes, counts, n_undecided: undecided })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_templates: usize,
    pub accuracy: f64,
    pub itr_bpm: f64,
}

/// Decode trials whose labels are pool class ids against templates for the
/// first `n` pool codes, for every `n` in `n_list`. Selection time for the
/// ITR is the trial duration plus `gaze_shift_s`.
pub fn large_target_sweep(
    epochs: &EpochSet,
    model: &TdcaModel,
    trfs: &[Trf],
    pool: &Codebook,
    n_list: &[usize],
    spec: &BankSpec,
    gaze_shift_s: f64,
) -> Result<Vec<SweepPoint>> {
    let n_max = n_list.iter().copied().max().ok_or_else(|| Error::arg("empty template-count list"))?;
    if n_max > pool.len() {
        return Err(Error::arg(format!("{n_max} templates requested from a pool of {}", pool.len())));
    }
    let ids: Vec<usize> = pool.sequences().iter().map(|s| s.class_id()).collect();
    let true_pos: Vec<usize> = epochs
        .labels()
        .iter()
        .map(|l| ids.iter().position(|c| c == l).ok_or_else(|| Error::arg(format!("true code {l} absent from pool"))))
        .collect::<Result<_>>()?;
    let n_min = n_list.iter().copied().min().unwrap_or(0);
    if let Some(p) = true_pos.iter().find(|p| **p >= n_min) {
        return Err(Error::arg(format!("true code at pool position {p} outside the {n_min}-code prefix")));
    }
    let best = class_best_scores(epochs, model, trfs, pool, n_max, spec)?;
    let t_sel = epochs.n_samples() as f64 / epochs.fs_hz() + gaze_shift_s;
    n_list
        .iter()
        .map(|&n| {
            let hits = best
                .iter()
                .zip(&true_pos)
                .filter(|(row, &t)| {
                    let pred = (0..n).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                    pred == t
                })
                .count();
            let acc = hits as f64 / best.len().max(1) as f64;
            Ok(SweepPoint { n_templates: n, accuracy: acc, itr_bpm: itr(n, acc, t_sel)? })
        })
        .collect()
}

/// Per trial, the best score over shifts for each of the first `n` pool
/// codes, built in chunks to bound memory.
fn class_best_scores(
    epochs: &EpochSet,
    model: &TdcaModel,
    trfs: &[Trf],
    pool: &Codebook,
    n: usize,
    spec: &BankSpec,
) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 1000;
    let filters = spec.filterbank.design(epochs.fs_hz())?;
    let bands: Vec<Vec<DMatrix<f64>>> = epochs
        .trials()
        .par_iter()
        .map(|t| {
            let src = model.apply(t)?;
            Ok(filters.iter().map(|f| filter_columns(&src, |c| f.apply(c))).collect())
        })
        .collect::<Result<_>>()?;
    let mut best = vec![Vec::with_capacity(n); epochs.n_trials()];
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let bank = build_linear_templates(trfs, &pool.subset(&idx)?, epochs.n_samples(), spec)?;
        for (row, b) in best.iter_mut().zip(&bands) {
            let r = match_filtered(b, &bank, spec.n_shifts, false)?;
            row.extend((0..idx.len()).map(|c| r.max_score(c)));
        }
        start += CHUNK;
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn itr_closed_forms() {
        assert!((itr(40, 1.0, 2.5).unwrap() - 127.73).abs() < 0.005);
        assert!((itr(40, 0.945, 1.25).unwrap() - 226.75).abs() < 0.005);
        assert!(itr(40, 1.0 / 40.0, 3.0).unwrap().abs() < 1e-12);
        assert_eq!(itr(40, 1.0, 2.0).unwrap(), 40f64.log2() * 60.0 / 2.0);
        assert!(itr(1, 1.0, 1.0).is_err());
        assert!(itr(4, 0.0, 1.0).unwrap() > 0.0);
        let a = itr(40, 0.8, 1.0).unwrap();
        assert!((itr(40, 0.8, 2.0).unwrap() - a / 2.0).abs() < 1e-12);
    }

    #[test]
    fn parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Normal::new(0.3, 2.0).unwrap();
        for n in [255usize, 256] {
            let x: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
            let mean = x.iter().sum::<f64>() / n as f64;
            let power = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let fs = 250.0;
            let (f, p) = periodogram(&x, fs);
            let integral = p.iter().sum::<f64>() * (f[1] - f[0]);
            assert!((integral - power).abs() < 1e-6 * power);
        }
    }

    fn epochs(series: Vec<Vec<f64>>, fs: f64) -> EpochSet {
        let n = series[0].len();
        let trials = series.into_iter().map(|s| DMatrix::from_column_slice(n, 1, &s)).collect::<Vec<_>>();
        let k = trials.len();
        EpochSet::new(trials, vec![0; k], fs, vec!["S1".into()]).unwrap()
    }

    #[test]
    fn snr_degenerate_cases() {
        let s: Vec<f64> = (0..100).map(|i| (i as f64 * 0.3).sin()).collect();
        let same = snr_spectrum(&epochs(vec![s.clone(), s.clone()], 100.0), 0, 50.0).unwrap();
        assert!(same.snr.iter().any(|v| v.is_infinite()));
        assert!(same.mutual_info_bits_per_s.is_infinite());
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let anti = snr_spectrum(&epochs(vec![s.clone(), neg], 100.0), 0, 50.0).unwrap();
        assert!(anti.snr.iter().all(|v| *v == 0.0));
        assert_eq!(anti.mutual_info_bits_per_s, 0.0);
        assert!(matches!(snr_spectrum(&epochs(vec![s], 100.0), 0, 50.0), Err(Error::NoNoiseEstimate)));
    }

    #[test]
    fn snr_of_tone_in_white_noise() {
        let (fs, n, trials, amp, sigma) = (250.0, 500usize, 10usize, 0.5, 1.0);
        let k = 40usize;
        let f0 = k as f64 * fs / n as f64;
        let analytic =
            (amp * amp * n as f64 / 4.0 + sigma * sigma / trials as f64) / ((trials - 1) as f64 * sigma * sigma);
        let mut est: Vec<f64> = (0..20u64)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let d = Normal::new(0.0, sigma).unwrap();
                let series = (0..trials)
                    .map(|_| {
                        (0..n)
                            .map(|t| amp * (2.0 * std::f64::consts::PI * f0 * t as f64 / fs).cos() + d.sample(&mut rng))
                            .collect()
                    })
                    .collect();
                snr_spectrum(&epochs(series, fs), 0, 125.0).unwrap().snr[k]
            })
            .collect();
        est.sort_by(f64::total_cmp);
        let median = 0.5 * (est[9] + est[10]);
        assert!((median / analytic - 1.0).abs() < 0.25, "{median} vs {analytic}");
    }

    fn flat(snr: f64, top: f64, bins: usize) -> SnrReport {
        let freqs = (0..=bins).map(|i| i as f64 * top / bins as f64).collect();
        SnrReport { freqs_hz: freqs, snr: vec![snr; bins + 1], mutual_info_bits_per_s: 0.0, k_hz: top }
    }

    #[test]
    fn mutual_information_closed_form_and_additivity() {
        let r = flat(1.0, 125.0, 375);
        assert!((mutual_information(&r, 125.0).unwrap() - 125.0).abs() < 1e-9);
        assert_eq!(mutual_information(&flat(0.0, 125.0, 375), 125.0).unwrap(), 0.0);
        let mut varied = flat(0.0, 125.0, 375);
        varied.snr = (0..=375).map(|i| ((i * 17) % 23) as f64 / 5.0).collect();
        let whole = mutual_information(&varied, 125.0).unwrap();
        let half = mutual_information(&varied, 62.5).unwrap();
        let split = mutual_information_between(&varied, 0.0, 40.1).unwrap()
            + mutual_information_between(&varied, 40.1, 125.0).unwrap();
        assert!(half <= whole);
        assert!((split - whole).abs() < 1e-9 * whole);
        assert!(mutual_information(&varied, 130.0).is_err());
    }

    #[test]
    fn confusion_cases() {
        let c = confusion_and_accuracy(&[0, 1, 2], &[Some(0), Some(1), Some(2)]).unwrap();
        assert_eq!(c.accuracy, 1.0);
        assert_eq!(c.counts, DMatrix::identity(3, 3));
        assert!(confusion_and_accuracy(&[], &[]).is_err());
        assert!(confusion_and_accuracy(&[0], &[]).is_err());
        let h = confusion_and_accuracy(&[0, 0, 1, 1], &[Some(0), Some(1), Some(1), Some(0)]).unwrap();
        assert_eq!(h.accuracy, 0.5);
        assert_eq!(h.row_normalized(), DMatrix::from_element(2, 2, 0.5));
        let u = confusion_and_accuracy(&[0, 1], &[Some(0), None]).unwrap();
        assert_eq!((u.accuracy, u.n_undecided), (0.5, 1));
    }
}
