//! Temporal response function estimation by truncated-eigenspectrum least
//! squares, and template synthesis by convolving a response function with
//! stimulus sequences.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::containers::{Codebook, EpochSet};
use crate::decoder::TemplateBank;
use crate::error::{Error, Result};
use crate::filter::{butterworth, BandKind};
use crate::preprocess::{stimulus_trace, FilterBankSpec};

/// Lags `tau_min..=tau_max` at `fs_hz`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagWindow {
    pub tau_min_s: f64,
    pub tau_max_s: f64,
    pub fs_hz: f64,
}

impl LagWindow {
    pub fn new(tau_min_s: f64, tau_max_s: f64, fs_hz: f64) -> Result<Self> {
        if !(tau_min_s.is_finite() && tau_max_s.is_finite() && tau_min_s <= tau_max_s) {
            return Err(Error::arg(format!("lag window [{tau_min_s}, {tau_max_s}] s is invalid")));
        }
        if !(fs_hz > 0.0 && fs_hz.is_finite()) {
            return Err(Error::arg("sampling rate must be positive"));
        }
        Ok(Self { tau_min_s, tau_max_s, fs_hz })
    }

    pub fn n_lags(&self) -> usize {
        ((self.tau_max_s - self.tau_min_s) * self.fs_hz).round() as usize + 1
    }

    /// First lag in samples.
    pub fn first_lag(&self) -> i64 {
        (self.tau_min_s * self.fs_hz).round() as i64
    }

    pub fn lag_times_s(&self) -> Vec<f64> {
        (0..self.n_lags()).map(|j| (self.first_lag() + j as i64) as f64 / self.fs_hz).collect()
    }
}

/// Stacked per-class lag matrices; row `t` of a block holds `s(t - tau)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedDesign {
    pub matrix: DMatrix<f64>,
    pub n_per_class: usize,
    pub window: LagWindow,
}

impl LaggedDesign {
    pub fn n_classes(&self) -> usize {
        self.matrix.nrows() / self.n_per_class.max(1)
    }
}

/// Lagged design from stimulus traces already at the EEG rate, one per
/// class, all of equal length. Samples outside a trace are zero.
pub fn build_design(traces: &[Vec<f64>], window: LagWindow) -> Result<LaggedDesign> {
    let n = traces.first().map_or(0, |t| t.len());
    if traces.is_empty() || n == 0 {
        return Err(Error::arg("no stimulus traces"));
    }
    if traces.iter().any(|t| t.len() != n) {
        return Err(Error::arg("stimulus traces differ in length"));
    }
    let l = window.n_lags();
    if l > n {
        return Err(Error::arg(format!("{l} lags exceed {n} samples per class")));
    }
    let first = window.first_lag();
    let mut matrix = DMatrix::zeros(n * traces.len(), l);
    for (k, s) in traces.iter().enumerate() {
        for j in 0..l {
            let lag = first + j as i64;
            let mut col = matrix.column_mut(j);
            for t in 0..n {
                let src = t as i64 - lag;
                if src >= 0 && (src as usize) < n {
                    col[k * n + t] = s[src as usize];
                }
            }
        }
    }
    Ok(LaggedDesign { matrix, n_per_class: n, window })
}

/// Design for the given classes of a codebook, stimulus optionally
/// mean-centred.
pub fn design_from_codebook(
    codebook: &Codebook,
    class_ids: &[usize],
    n_samples: usize,
    window: LagWindow,
    center: bool,
) -> Result<LaggedDesign> {
    let traces = class_ids
        .iter()
        .map(|&k| {
            let seq = codebook.get(k).ok_or_else(|| Error::MissingData(format!("class {k} not in codebook")))?;
            stimulus_trace(seq, window.fs_hz, n_samples, center)
        })
        .collect::<Result<Vec<_>>>()?;
    build_design(&traces, window)
}

/// How many eigen-directions to keep for a cumulative-energy threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankRule {
    /// Largest count whose cumulative fraction stays strictly below alpha.
    #[default]
    Below,
    /// Smallest count whose cumulative fraction reaches alpha.
    AtLeast,
}

/// Retained rank for a descending eigen-spectrum. Always in `1..=len`;
/// `alpha >= 1` keeps every direction.
pub fn retained_rank(eigenvalues: &[f64], alpha: f64, rule: RankRule) -> usize {
    let n = eigenvalues.len();
    if n == 0 {
        return 0;
    }
    if alpha >= 1.0 {
        return n;
    }
    let total: f64 = eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return 1;
    }
    let mut cum = 0.0;
    let mut m = 0;
    for (i, v) in eigenvalues.iter().enumerate() {
        cum += v.max(0.0);
        let frac = cum / total;
        match rule {
            RankRule::Below => {
                if frac < alpha {
                    m = i + 1;
                } else {
                    break;
                }
            }
            RankRule::AtLeast => {
                if frac >= alpha {
                    m = i + 1;
                    break;
                }
            }
        }
    }
    if rule == RankRule::AtLeast && m == 0 {
        m = n;
    }
    m.max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrfFitOptions {
    pub alpha: f64,
    pub rule: RankRule,
}

impl Default for TrfFitOptions {
    fn default() -> Self {
        Self { alpha: 0.9, rule: RankRule::Below }
    }
}

/// Impulse response from stimulus to source activity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trf {
    pub taps: Vec<f64>,
    pub tau_min_s: f64,
    pub tau_max_s: f64,
    pub fs_hz: f64,
    pub retained_rank: Option<usize>,
    pub alpha: Option<f64>,
    pub eigen_spectrum: Vec<f64>,
    /// Whether stimuli are mean-centred before convolution.
    pub stimulus_centered: bool,
}

impl Trf {
    /// Response function with no fit metadata.
    pub fn from_taps(taps: Vec<f64>, window: LagWindow, stimulus_centered: bool) -> Result<Self> {
        if taps.len() != window.n_lags() {
            return Err(Error::arg(format!("{} taps for a {}-lag window", taps.len(), window.n_lags())));
        }
        Ok(Self {
            taps,
            tau_min_s: window.tau_min_s,
            tau_max_s: window.tau_max_s,
            fs_hz: window.fs_hz,
            retained_rank: None,
            alpha: None,
            eigen_spectrum: Vec::new(),
            stimulus_centered,
        })
    }

    pub fn window(&self) -> LagWindow {
        LagWindow { tau_min_s: self.tau_min_s, tau_max_s: self.tau_max_s, fs_hz: self.fs_hz }
    }

    pub fn validate(&self) -> Result<()> {
        let w = LagWindow::new(self.tau_min_s, self.tau_max_s, self.fs_hz)?;
        if self.taps.len() != w.n_lags() {
            return Err(Error::invariant("tap count does not match lag window"));
        }
        if let Some(m) = self.retained_rank {
            if m == 0 || m > self.taps.len() {
                return Err(Error::invariant(format!("retained rank {m} outside 1..={}", self.taps.len())));
            }
        }
        if self.eigen_spectrum.windows(2).any(|w| w[0] < w[1]) || self.eigen_spectrum.iter().any(|v| *v < 0.0) {
            return Err(Error::invariant("eigen-spectrum must be non-negative and non-increasing"));
        }
        if !self.taps.iter().all(|v| v.is_finite()) {
            return Err(Error::invariant("non-finite tap"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        t.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(t)
    }
}

/// Least-squares response function restricted to the leading
/// eigen-directions of the design covariance.
pub fn fit_trf(design: &LaggedDesign, response: &[f64], opts: &TrfFitOptions) -> Result<Trf> {
    if response.len() != design.matrix.nrows() {
        return Err(Error::arg(format!(
            "response has {} samples, design has {} rows",
            response.len(),
            design.matrix.nrows()
        )));
    }
    if !(opts.alpha > 0.0 && opts.alpha.is_finite()) {
        return Err(Error::arg("alpha must be positive"));
    }
    let s = &design.matrix;
    if s.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroDesign);
    }
    let c = s.tr_mul(s);
    let eig = SymmetricEigen::new(c);
    let l = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let spectrum: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let m = retained_rank(&spectrum, opts.alpha, opts.rule);

    let rhs = s.tr_mul(&DVector::from_column_slice(response));
    let floor = spectrum[0] * 1e-14;
    let mut h = DVector::zeros(l);
    for &i in order.iter().take(m) {
        let lam = eig.eigenvalues[i];
        if lam <= floor {
            continue;
        }
        let u = eig.eigenvectors.column(i);
        h.axpy(u.dot(&rhs) / lam, &u, 1.0);
    }
    Ok(Trf {
        taps: h.as_slice().to_vec(),
        tau_min_s: design.window.tau_min_s,
        tau_max_s: design.window.tau_max_s,
        fs_hz: design.window.fs_hz,
        retained_rank: Some(m),
        alpha: Some(opts.alpha),
        eigen_spectrum: spectrum,
        stimulus_centered: false,
    })
}

/// Fit from single-component source epochs: the response is the
/// concatenation of class means in ascending class order.
pub fn fit_trf_from_sources(
    sources: &EpochSet,
    component: usize,
    codebook: &Codebook,
    window: LagWindow,
    center: bool,
    opts: &TrfFitOptions,
) -> Result<Trf> {
    if component >= sources.n_channels() {
        return Err(Error::arg(format!("component {component} out of range")));
    }
    if (sources.fs_hz() - window.fs_hz).abs() > 1e-9 {
        return Err(Error::arg("source rate differs from lag window rate"));
    }
    let classes = sources.classes();
    if classes.is_empty() {
        return Err(Error::arg("no source trials"));
    }
    let n = sources.n_samples();
    let mut response = Vec::with_capacity(n * classes.len());
    for &k in &classes {
        let mean = sources.class_mean(k).expect("class present");
        response.extend(mean.column(component).iter());
    }
    let design = design_from_codebook(codebook, &classes, n, window, center)?;
    let mut trf = fit_trf(&design, &response, opts)?;
    trf.stimulus_centered = center;
    Ok(trf)
}

/// Convolve the response function with a stimulus trace at its rate:
/// `r(t) = sum_tau h(tau) s(t - tau)`, zero history and zero future.
pub fn convolve_trace(trf: &Trf, trace: &[f64]) -> Vec<f64> {
    let n = trace.len() as i64;
    let first = trf.window().first_lag();
    (0..n)
        .map(|t| {
            trf.taps
                .iter()
                .enumerate()
                .map(|(j, h)| {
                    let src = t - first - j as i64;
                    if (0..n).contains(&src) {
                        h * trace[src as usize]
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

pub fn reconstruct_response(
    trf: &Trf,
    seq: &crate::containers::StimulusSequence,
    n_samples: usize,
) -> Result<Vec<f64>> {
    let trace = stimulus_trace(seq, trf.fs_hz, n_samples, trf.stimulus_centered)?;
    Ok(convolve_trace(trf, &trace))
}

/// Broadband predicted responses (`n_samples x components`) for every
/// codebook class; one response function per component.
pub fn predicted_responses(trfs: &[Trf], codebook: &Codebook, n_samples: usize) -> Result<Vec<DMatrix<f64>>> {
    if trfs.is_empty() {
        return Err(Error::arg("no response functions"));
    }
    codebook
        .sequences()
        .par_iter()
        .map(|seq| {
            let cols = trfs.iter().map(|t| reconstruct_response(t, seq, n_samples)).collect::<Result<Vec<_>>>()?;
            Ok(DMatrix::from_fn(n_samples, cols.len(), |i, c| cols[c][i]))
        })
        .collect()
}

/// Parameters shared by all template banks.
#[derive(Debug, Clone, PartialEq)]
pub struct BankSpec {
    pub filterbank: FilterBankSpec,
    pub n_shifts: usize,
    pub fb_weights: Vec<f64>,
}

pub fn build_linear_templates(
    trfs: &[Trf],
    codebook: &Codebook,
    n_samples: usize,
    spec: &BankSpec,
) -> Result<TemplateBank> {
    let responses = predicted_responses(trfs, codebook, n_samples)?;
    let ids = codebook.sequences().iter().map(|s| s.class_id()).collect();
    TemplateBank::from_broadband(
        ids,
        &responses,
        trfs[0].fs_hz,
        spec.filterbank.clone(),
        spec.n_shifts,
        spec.fb_weights.clone(),
    )
}

/// Response function band-passed (zero phase) after zero-padding by `pad_s`
/// on both sides; the returned lag window is widened accordingly.
pub fn bandpass_trf(trf: &Trf, band: (f64, f64), pad_s: f64) -> Result<Trf> {
    let pad = (pad_s * trf.fs_hz).round() as usize;
    let mut padded = vec![0.0; trf.taps.len() + 2 * pad];
    padded[pad..pad + trf.taps.len()].copy_from_slice(&trf.taps);
    let sos = butterworth(4, BandKind::BandPass(band.0, band.1), trf.fs_hz)?;
    let taps = sos.filtfilt(&padded);
    let widen = pad as f64 / trf.fs_hz;
    Ok(Trf {
        taps,
        tau_min_s: trf.tau_min_s - widen,
        tau_max_s: trf.tau_max_s + widen,
        retained_rank: None,
        alpha: None,
        eigen_spectrum: Vec::new(),
        ..trf.clone()
    })
}

pub const SSVEP_BAND_HZ: (f64, f64) = (8.0, 15.8);

/// Templates for periodic codes: the band-passed response function
/// convolved with each sequence.
pub fn reconstruct_ssvep_templates(
    trfs: &[Trf],
    codebook: &Codebook,
    n_samples: usize,
    band: (f64, f64),
    spec: &BankSpec,
) -> Result<TemplateBank> {
    let filtered = trfs.iter().map(|t| bandpass_trf(t, band, 0.5)).collect::<Result<Vec<_>>>()?;
    build_linear_templates(&filtered, codebook, n_samples, spec)
}

/// Tap-wise mean; fit metadata is cleared.
pub fn average_trf(trfs: &[Trf]) -> Result<Trf> {
    let first = trfs.first().ok_or_else(|| Error::arg("no response functions to average"))?;
    for t in trfs {
        if t.taps.len() != first.taps.len()
            || t.fs_hz != first.fs_hz
            || t.tau_min_s != first.tau_min_s
            || t.stimulus_centered != first.stimulus_centered
        {
            return Err(Error::arg("response functions differ in lag window, rate or centring"));
        }
    }
    let n = trfs.len() as f64;
    let taps = (0..first.taps.len()).map(|j| trfs.iter().map(|t| t.taps[j]).sum::<f64>() / n).collect();
    Ok(Trf { taps, retained_rank: None, alpha: None, eigen_spectrum: Vec::new(), ..first.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::containers::{CodeKind, StimulusSequence};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_traces(k: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k).map(|_| (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()).collect()
    }

    #[test]
    fn lag_counts() {
        assert_eq!(LagWindow::new(0.0, 0.5, 250.0).unwrap().n_lags(), 126);
        assert_eq!(LagWindow::new(-0.1, 0.5, 250.0).unwrap().first_lag(), -25);
        assert!(LagWindow::new(0.5, 0.0, 250.0).is_err());
    }

    #[test]
    fn impulse_design() {
        let w = LagWindow::new(0.0, 2.0, 1.0).unwrap();
        let mut s = vec![0.0; 6];
        s[0] = 1.0;
        let d = build_design(&[s], w).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = d.matrix.column(j).iter().copied().collect();
            assert_eq!(col.iter().position(|v| *v == 1.0), Some(j));
            assert_eq!(col.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn shift_structure_and_stacking() {
        let traces = random_traces(2, 40, 1);
        let d = build_design(&traces, LagWindow::new(0.0, 4.0, 1.0).unwrap()).unwrap();
        assert_eq!(d.matrix.nrows(), 80);
        assert_eq!(d.n_classes(), 2);
        for k in 0..2 {
            for t in 0..40 {
                let expect = if t >= 2 { d.matrix[(k * 40 + t - 2, 0)] } else { 0.0 };
                assert_eq!(d.matrix[(k * 40 + t, 2)], expect);
            }
        }
        assert!(build_design(&traces, LagWindow::new(0.0, 50.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn rank_rule_examples() {
        assert_eq!(retained_rank(&[8.0, 2.0], 0.9, RankRule::Below), 1);
        assert_eq!(retained_rank(&[8.0, 2.0], 0.9, RankRule::AtLeast), 2);
        assert_eq!(retained_rank(&[8.0, 2.0], 0.5, RankRule::Below), 1);
        assert_eq!(retained_rank(&[8.0, 2.0], 0.5, RankRule::AtLeast), 1);
        assert_eq!(retained_rank(&[8.0, 2.0], 1.0, RankRule::Below), 2);
        assert_eq!(retained_rank(&[1.0, 1.0, 1.0, 1.0], 0.6, RankRule::Below), 2);
    }

    #[test]
    fn exact_recovery_and_scale() {
        let traces = random_traces(4, 300, 2);
        let w = LagWindow::new(0.0, 20.0, 1.0).unwrap();
        let d = build_design(&traces, w).unwrap();
        let h0: Vec<f64> = (0..21).map(|i| (i as f64 * 0.7).sin()).collect();
        let r = (&d.matrix * DVector::from_vec(h0.clone())).as_slice().to_vec();
        let opts = TrfFitOptions { alpha: 1.0, ..Default::default() };
        let trf = fit_trf(&d, &r, &opts).unwrap();
        assert_eq!(trf.retained_rank, Some(21));
        for (a, b) in trf.taps.iter().zip(&h0) {
            assert!((a - b).abs() < 1e-8);
        }
        let r3: Vec<f64> = r.iter().map(|v| -3.0 * v).collect();
        let t3 = fit_trf(&d, &r3, &TrfFitOptions::default()).unwrap();
        let t1 = fit_trf(&d, &r, &TrfFitOptions::default()).unwrap();
        for (a, b) in t3.taps.iter().zip(&t1.taps) {
            assert!((a + 3.0 * b).abs() < 1e-9 * (1.0 + b.abs()));
        }
        trf.validate().unwrap();
    }

    #[test]
    fn zero_design_rejected() {
        let d = build_design(&[vec![0.0; 10]], LagWindow::new(0.0, 2.0, 1.0).unwrap()).unwrap();
        assert!(matches!(fit_trf(&d, &[0.0; 10], &TrfFitOptions::default()), Err(Error::ZeroDesign)));
        assert!(fit_trf(&d, &[0.0; 9], &TrfFitOptions::default()).is_err());
    }

    fn seq(frames: Vec<f64>) -> StimulusSequence {
        StimulusSequence::new(0, frames, 60.0).unwrap()
    }

    #[test]
    fn reconstruction_examples() {
        let w = LagWindow::new(0.0, 4.0 / 60.0, 60.0).unwrap();
        let s = seq((0..30).map(|i| ((i * 7) % 5) as f64 / 4.0).collect());
        let mut delta = vec![0.0; w.n_lags()];
        delta[0] = 1.0;
        let id = Trf::from_taps(delta, w, false).unwrap();
        assert_eq!(reconstruct_response(&id, &s, 30).unwrap(), s.frames());
        let zero = Trf::from_taps(vec![0.0; 5], w, false).unwrap();
        assert!(reconstruct_response(&zero, &s, 30).unwrap().iter().all(|v| *v == 0.0));
        let h = Trf::from_taps(vec![1.0, -2.0, 0.5, 3.0, 0.25], w, false).unwrap();
        let mut imp = vec![0.0; 30];
        imp[0] = 1.0;
        let out = reconstruct_response(&h, &seq(imp), 30).unwrap();
        assert_eq!(&out[..5], &h.taps[..]);
        assert!(out[5..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn convolution_is_bilinear() {
        let w = LagWindow::new(0.0, 3.0, 1.0).unwrap();
        let tr = random_traces(2, 20, 5);
        let a = Trf::from_taps(vec![0.3, -1.0, 2.0, 0.1], w, false).unwrap();
        let b = Trf::from_taps(vec![1.5, 0.0, -0.2, 0.7], w, false).unwrap();
        let ab = Trf::from_taps(a.taps.iter().zip(&b.taps).map(|(x, y)| 2.0 * x - y).collect(), w, false).unwrap();
        let lhs = convolve_trace(&ab, &tr[0]);
        let (ya, yb) = (convolve_trace(&a, &tr[0]), convolve_trace(&b, &tr[0]));
        for i in 0..20 {
            assert!((lhs[i] - (2.0 * ya[i] - yb[i])).abs() < 1e-12);
        }
        let mix: Vec<f64> = tr[0].iter().zip(&tr[1]).map(|(x, y)| x + 3.0 * y).collect();
        let lhs = convolve_trace(&a, &mix);
        let (y0, y1) = (convolve_trace(&a, &tr[0]), convolve_trace(&a, &tr[1]));
        for i in 0..20 {
            assert!((lhs[i] - (y0[i] + 3.0 * y1[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_lags_read_the_future() {
        let w = LagWindow::new(-1.0, 0.0, 1.0).unwrap();
        let h = Trf::from_taps(vec![1.0, 0.0], w, false).unwrap();
        assert_eq!(convolve_trace(&h, &[1.0, 2.0, 3.0]), vec![2.0, 3.0, 0.0]);
    }

    #[test]
    fn averaging() {
        let w = LagWindow::new(0.0, 2.0, 1.0).unwrap();
        let mut h = Trf::from_taps(vec![1.0, 2.0, -1.0], w, true).unwrap();
        h.retained_rank = Some(2);
        let neg = Trf { taps: h.taps.iter().map(|v| -v).collect(), ..h.clone() };
        assert!(average_trf(&[h.clone(), neg]).unwrap().taps.iter().all(|v| *v == 0.0));
        let one = average_trf(&[h.clone()]).unwrap();
        assert_eq!(one.taps, h.taps);
        assert_eq!(one.retained_rank, None);
        assert_eq!(average_trf(&[h.clone(), h.clone(), h.clone()]).unwrap().taps, h.taps);
        let other = Trf::from_taps(vec![0.0; 4], LagWindow::new(0.0, 3.0, 1.0).unwrap(), true).unwrap();
        assert!(matches!(average_trf(&[h, other]), Err(Error::Argument(_))));
    }

    #[test]
    fn ssvep_templates_peak_at_code_frequency() {
        let fs = 250.0;
        let w = LagWindow::new(0.0, 0.5, fs).unwrap();
        let mut delta = vec![0.0; w.n_lags()];
        delta[0] = 1.0;
        let trf = Trf::from_taps(delta, w, true).unwrap();
        let spec = crate::stimulus::JfpmSpec::default();
        let cb = crate::stimulus::generate_jfpm(&spec, 600).unwrap();
        assert_eq!(cb.kind(), CodeKind::Jfpm);
        let bank_spec = BankSpec { filterbank: FilterBankSpec::single(6.0, 90.0), n_shifts: 0, fb_weights: vec![1.0] };
        let n = 2500;
        let bank = reconstruct_ssvep_templates(&[trf], &cb, n, SSVEP_BAND_HZ, &bank_spec).unwrap();
        for (i, tpl) in bank.templates.iter().enumerate().step_by(7) {
            let x = tpl[0].column(0);
            let f_peak = (1..n / 2)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (t, v) in x.iter().enumerate() {
                        let ph = 2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                        re += v * ph.cos();
                        im -= v * ph.sin();
                    }
                    (k as f64 * fs / n as f64, re * re + im * im)
                })
                .filter(|(f, _)| *f < 40.0)
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            assert!((f_peak - spec.frequency(i)).abs() <= 0.1 + 1e-9, "class {i}: {f_peak}");
        }
    }

    #[test]
    fn json_round_trip() {
        let w = LagWindow::new(0.0, 2.0, 1.0).unwrap();
        let t = Trf::from_taps(vec![0.1, 0.2, 0.3], w, true).unwrap();
        assert_eq!(Trf::from_json(&t.to_json().unwrap()).unwrap(), t);
    }
}
