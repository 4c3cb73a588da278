//! Forward simulator: multichannel recordings from known spatial patterns,
//! response functions, a squared nonlinearity and structured noise.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::containers::{Codebook, EpochSet, StimulusSequence};
use crate::error::{Error, Result};
use crate::preprocess::stimulus_trace;
use crate::seed::rng_for;
use crate::trf::{convolve_trace, LagWindow, Trf};

const LOBES: [(f64, f64, f64); 3] = [(-0.6, 0.060, 0.015), (1.0, 0.100, 0.015), (-0.7, 0.180, 0.025)];

fn lobes_at(t: f64) -> f64 {
    LOBES.iter().map(|&(a, mu, sd)| a * (-0.5 * ((t - mu) / sd).powi(2)).exp()).sum()
}

fn lobes_peak() -> f64 {
    (0..=3000).map(|i| lobes_at(i as f64 * 1e-4).abs()).fold(0.0, f64::max)
}

/// Prototype response (peak magnitude 1) at time `t` seconds, scaled by
/// `amplitude` and delayed by `latency_s`.
pub fn prototype_at(t: f64, amplitude: f64, latency_s: f64) -> f64 {
    amplitude * lobes_at(t - latency_s) / lobes_peak()
}

/// Prototype sampled on a lag window that covers 0 to 0.3 s.
pub fn prototype_trf(window: LagWindow) -> Result<Vec<f64>> {
    jittered_trf(window, 1.0, 0.0)
}

fn jittered_trf(window: LagWindow, amplitude: f64, latency_s: f64) -> Result<Vec<f64>> {
    if window.tau_min_s > 0.0 || window.tau_max_s < 0.3 {
        return Err(Error::arg("lag window must cover 0 to 0.3 s"));
    }
    let peak = lobes_peak();
    Ok(window.lag_times_s().iter().map(|&t| amplitude * lobes_at(t - latency_s) / peak).collect())
}

/// Noise component gains, each the RMS of a unit-variance process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub white: f64,
    /// Spectrum falling as `1/sqrt(f)` in amplitude.
    pub pink: f64,
    pub alpha: f64,
    pub alpha_hz: f64,
    pub alpha_width_hz: f64,
    /// 50 Hz line interference.
    pub line: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { white: 1.0, pink: 1.0, alpha: 0.7, alpha_hz: 10.0, alpha_width_hz: 1.0, line: 0.0 }
    }
}

impl NoiseSpec {
    pub fn silent() -> Self {
        Self { white: 0.0, pink: 0.0, alpha: 0.0, line: 0.0, ..Self::default() }
    }

    /// Expected power per channel.
    pub fn power(&self) -> f64 {
        self.white.powi(2) + self.pink.powi(2) + self.alpha.powi(2) + self.line.powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        let gains = [self.white, self.pink, self.alpha, self.line];
        if gains.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::arg("noise gains must be finite and non-negative"));
        }
        if !(self.alpha_hz > 0.0 && self.alpha_width_hz > 0.0) {
            return Err(Error::arg("alpha peak needs positive frequency and width"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualSubject {
    pub subject_id: usize,
    pub trf: Trf,
    pub pattern: Vec<f64>,
    pub nonlinearity_gain: f64,
    pub noise: NoiseSpec,
    pub seed: u64,
    pub channel_names: Vec<String>,
}

impl VirtualSubject {
    pub fn validate(&self) -> Result<()> {
        self.trf.validate()?;
        self.noise.validate()?;
        if self.pattern.is_empty() || self.pattern.iter().all(|v| *v == 0.0) {
            return Err(Error::arg("spatial pattern must be nonzero"));
        }
        if self.pattern.len() != self.channel_names.len() {
            return Err(Error::arg("pattern and channel names differ in length"));
        }
        if !(self.nonlinearity_gain >= 0.0 && self.nonlinearity_gain.is_finite()) {
            return Err(Error::arg("nonlinearity gain must be non-negative"));
        }
        Ok(())
    }

    /// Clean source for a stimulus trace: linear response plus the
    /// squared term.
    pub fn source(&self, trace: &[f64]) -> Vec<f64> {
        let lin = convolve_trace(&self.trf, trace);
        let g = self.nonlinearity_gain;
        lin.into_iter().map(|y| y + g * y * y).collect()
    }

    fn strongest_gain_sq(&self) -> f64 {
        self.pattern.iter().map(|p| p * p).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub n_trials_per_class: usize,
    pub duration_s: f64,
    pub fs_hz: f64,
    /// Noise scaled so the strongest channel has this signal-to-noise
    /// power ratio; `None` uses the absolute noise gains.
    pub snr_db: Option<f64>,
}

impl SimOptions {
    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.fs_hz).round() as usize
    }
}

struct NoiseGen {
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    pink_mask: Vec<f64>,
    alpha_mask: Vec<f64>,
    fs: f64,
}

impl NoiseGen {
    fn new(n: usize, fs: f64, spec: &NoiseSpec) -> Self {
        let mut planner = FftPlanner::new();
        let freq = |k: usize| (k.min(n - k)) as f64 * fs / n as f64;
        let normalise = |mut m: Vec<f64>| {
            let p = m.iter().map(|v| v * v).sum::<f64>() / n as f64;
            if p > 0.0 {
                m.iter_mut().for_each(|v| *v /= p.sqrt());
            }
            m
        };
        let pink = (0..n).map(|k| if k == 0 { 0.0 } else { 1.0 / freq(k).sqrt() }).collect();
        let alpha = (0..n).map(|k| (-0.5 * ((freq(k) - spec.alpha_hz) / spec.alpha_width_hz).powi(2)).exp()).collect();
        Self {
            fft: planner.plan_fft_forward(n),
            ifft: planner.plan_fft_inverse(n),
            pink_mask: normalise(pink),
            alpha_mask: normalise(alpha),
            fs,
        }
    }

    fn shaped<R: Rng>(&self, rng: &mut R, mask: &[f64]) -> Vec<f64> {
        let n = mask.len();
        let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(StandardNormal.sample(rng), 0.0)).collect();
        self.fft.process(&mut buf);
        buf.iter_mut().zip(mask).for_each(|(c, m)| *c *= m);
        self.ifft.process(&mut buf);
        buf.iter().map(|c| c.re / n as f64).collect()
    }

    /// One channel of noise with unit-RMS components scaled by `spec`.
    fn channel<R: Rng>(&self, rng: &mut R, spec: &NoiseSpec, scale: f64) -> Vec<f64> {
        let n = self.pink_mask.len();
        let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let pink = self.shaped(rng, &self.pink_mask);
        let alpha = self.shaped(rng, &self.alpha_mask);
        let phase = rng.random_range(0.0..2.0 * PI);
        (0..n)
            .map(|t| {
                let line = 2f64.sqrt() * (2.0 * PI * 50.0 * t as f64 / self.fs + phase).sin();
                scale * (spec.white * white[t] + spec.pink * pink[t] + spec.alpha * alpha[t] + spec.line * line)
            })
            .collect()
    }
}

/// Noise amplitude scale for a target SNR given the clean sources.
fn noise_scale(subject: &VirtualSubject, sources: &[Vec<f64>], snr_db: Option<f64>) -> f64 {
    let Some(db) = snr_db else { return 1.0 };
    let n: usize = sources.iter().map(|s| s.len()).sum();
    let src_power = sources.iter().flatten().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
    let signal = src_power * subject.strongest_gain_sq();
    let noise = subject.noise.power();
    if noise == 0.0 {
        return 0.0;
    }
    (signal / 10f64.powf(db / 10.0) / noise).sqrt()
}

/// Trials in block-major order: every class once, then repeated.
pub fn simulate_epochs(subject: &VirtualSubject, codebook: &Codebook, opts: &SimOptions) -> Result<EpochSet> {
    subject.validate()?;
    if (subject.trf.fs_hz - opts.fs_hz).abs() > 1e-9 {
        return Err(Error::arg("subject response function rate differs from simulation rate"));
    }
    let n = opts.n_samples();
    if n < 2 {
        return Err(Error::arg("simulated trials need at least 2 samples"));
    }
    let sources = codebook
        .sequences()
        .iter()
        .map(|seq| Ok(subject.source(&stimulus_trace(seq, opts.fs_hz, n, true)?)))
        .collect::<Result<Vec<_>>>()?;
    let scale = noise_scale(subject, &sources, opts.snr_db);
    let gen = NoiseGen::new(n, opts.fs_hz, &subject.noise);
    let ids: Vec<usize> = codebook.sequences().iter().map(|s| s.class_id()).collect();
    let jobs: Vec<(usize, usize)> =
        (0..opts.n_trials_per_class).flat_map(|r| (0..ids.len()).map(move |k| (r, k))).collect();
    let trials = jobs
        .par_iter()
        .map(|&(r, k)| {
            let mut rng = rng_for(subject.seed, &[0x5452, ids[k] as u64, r as u64]);
            mix(subject, &sources[k], &gen, &mut rng, scale)
        })
        .collect();
    let labels = jobs.iter().map(|&(_, k)| ids[k]).collect();
    EpochSet::new(trials, labels, opts.fs_hz, subject.channel_names.clone())
}

fn mix<R: Rng>(subject: &VirtualSubject, source: &[f64], gen: &NoiseGen, rng: &mut R, scale: f64) -> DMatrix<f64> {
    let n = source.len();
    let mut out = DMatrix::zeros(n, subject.pattern.len());
    for (c, p) in subject.pattern.iter().enumerate() {
        let noise = if scale > 0.0 { gen.channel(rng, &subject.noise, scale) } else { vec![0.0; n] };
        let mut col = out.column_mut(c);
        for t in 0..n {
            col[t] = p * source[t] + noise[t];
        }
    }
    out
}

/// Continuous recording with one stimulus starting at `onset` samples;
/// the stimulus contrast is zero outside its presentation.
pub fn simulate_continuous(
    subject: &VirtualSubject,
    seq: &StimulusSequence,
    onset: usize,
    total_samples: usize,
    fs_hz: f64,
    snr_db: Option<f64>,
    stream: u64,
) -> Result<DMatrix<f64>> {
    subject.validate()?;
    let len = total_samples.saturating_sub(onset);
    let stim = stimulus_trace(seq, fs_hz, (seq.duration_s() * fs_hz).round() as usize, true)?;
    let mut trace = vec![0.0; total_samples];
    for (i, v) in stim.iter().take(len).enumerate() {
        trace[onset + i] = *v;
    }
    let source = subject.source(&trace);
    let active = &source[onset..(onset + stim.len()).min(total_samples)];
    let scale = noise_scale(subject, &[active.to_vec()], snr_db);
    let gen = NoiseGen::new(total_samples, fs_hz, &subject.noise);
    let mut rng = rng_for(subject.seed, &[0x434F, stream]);
    Ok(mix(subject, &source, &gen, &mut rng, scale))
}

pub const OCCIPITAL_CHANNELS: [(&str, f64); 9] = [
    ("Pz", 0.4),
    ("PO5", 0.6),
    ("PO3", 0.7),
    ("POz", 0.8),
    ("PO4", 0.7),
    ("PO6", 0.6),
    ("O1", 0.9),
    ("Oz", 1.0),
    ("O2", 0.9),
];

/// Names and weights of an occipital-weighted montage; extra channels get
/// weight 0.2.
pub fn montage(n_channels: usize) -> (Vec<String>, Vec<f64>) {
    (0..n_channels)
        .map(|i| match OCCIPITAL_CHANNELS.get(i) {
            Some(&(name, w)) => (name.to_string(), w),
            None => (format!("C{}", i + 1), 0.2),
        })
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationSpec {
    pub n_subjects: usize,
    pub n_channels: usize,
    /// Multiplicative amplitude range.
    pub amplitude_range: (f64, f64),
    pub latency_range_s: (f64, f64),
    /// Standard deviation of additive per-channel pattern jitter.
    pub pattern_jitter: f64,
    pub nonlinearity_gain: f64,
    pub noise: NoiseSpec,
    pub tau_min_s: f64,
    pub tau_max_s: f64,
    pub fs_hz: f64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self {
            n_subjects: 10,
            n_channels: 9,
            amplitude_range: (0.7, 1.3),
            latency_range_s: (-0.02, 0.02),
            pattern_jitter: 0.2,
            nonlinearity_gain: 0.1,
            noise: NoiseSpec::default(),
            tau_min_s: 0.0,
            tau_max_s: 0.5,
            fs_hz: 250.0,
        }
    }
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_channels == 0 {
            return Err(Error::arg("population needs subjects and channels"));
        }
        let (a0, a1) = self.amplitude_range;
        let (l0, l1) = self.latency_range_s;
        if ![a0, a1, l0, l1, self.pattern_jitter].iter().all(|v| v.is_finite()) || a0 > a1 || l0 > l1 {
            return Err(Error::arg("jitter ranges must be finite and ordered"));
        }
        if a0 <= 0.0 || self.pattern_jitter < 0.0 {
            return Err(Error::arg("amplitudes must be positive and pattern jitter non-negative"));
        }
        self.noise.validate()?;
        self.window().map(|_| ())
    }

    pub fn window(&self) -> Result<LagWindow> {
        LagWindow::new(self.tau_min_s, self.tau_max_s, self.fs_hz)
    }
}

fn draw<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn make_population(spec: &PopulationSpec, seed: u64) -> Result<Vec<VirtualSubject>> {
    spec.validate()?;
    let window = spec.window()?;
    let (names, base) = montage(spec.n_channels);
    (0..spec.n_subjects)
        .map(|i| {
            let mut rng = rng_for(seed, &[0x5055, i as u64]);
            let amp = draw(&mut rng, spec.amplitude_range);
            let lat = draw(&mut rng, spec.latency_range_s);
            let taps = jittered_trf(window, amp, lat)?;
            let pattern: Vec<f64> = base
                .iter()
                .map(|w| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    w + spec.pattern_jitter * z
                })
                .collect();
            Ok(VirtualSubject {
                subject_id: i,
                trf: Trf::from_taps(taps, window, true)?,
                pattern,
                nonlinearity_gain: spec.nonlinearity_gain,
                noise: spec.noise,
                seed: rng.random(),
                channel_names: names.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::containers::CodeKind;
    use crate::stimulus::generate_wn_pool;

    fn window() -> LagWindow {
        LagWindow::new(0.0, 0.5, 250.0).unwrap()
    }

    fn subject(pattern: Vec<f64>, noise: NoiseSpec, g: f64) -> VirtualSubject {
        let names = (0..pattern.len()).map(|i| format!("C{i}")).collect();
        VirtualSubject {
            subject_id: 0,
            trf: Trf::from_taps(prototype_trf(window()).unwrap(), window(), true).unwrap(),
            pattern,
            nonlinearity_gain: g,
            noise,
            seed: 5,
            channel_names: names,
        }
    }

    #[test]
    fn prototype_shape() {
        let w = window();
        let h = prototype_trf(w).unwrap();
        let peak = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 1e-3);
        let extrema: Vec<(usize, f64)> = (1..h.len() - 1)
            .filter(|&i| {
                let is_max = h[i] > h[i - 1] && h[i] >= h[i + 1];
                let is_min = h[i] < h[i - 1] && h[i] <= h[i + 1];
                (is_max || is_min) && h[i].abs() > 0.1
            })
            .map(|i| (i, h[i]))
            .collect();
        assert_eq!(extrema.len(), 3, "{extrema:?}");
        assert!(extrema[0].1 < 0.0 && extrema[1].1 > 0.0 && extrema[2].1 < 0.0);
        assert!((extrema[1].0 as i64 - 25).abs() <= 1);

        let fine = LagWindow::new(-0.2, 0.6, 2000.0).unwrap();
        let hf = prototype_trf(fine).unwrap();
        let (mut inside, mut total) = (0.0, 0.0);
        for (t, v) in fine.lag_times_s().iter().zip(&hf) {
            total += v * v;
            if (0.0..=0.3).contains(t) {
                inside += v * v;
            }
        }
        assert!(1.0 - inside / total < 0.01);
        assert!(prototype_trf(LagWindow::new(0.0, 0.2, 250.0).unwrap()).is_err());
    }

    fn codebook() -> Codebook {
        generate_wn_pool(4, 60, 3).unwrap()
    }

    #[test]
    fn noiseless_forward_model() {
        let s = subject(vec![1.0, 0.0, 0.0], NoiseSpec::silent(), 0.0);
        let cb = codebook();
        let opts = SimOptions { n_trials_per_class: 2, duration_s: 1.0, fs_hz: 250.0, snr_db: None };
        let e = simulate_epochs(&s, &cb, &opts).unwrap();
        assert_eq!(e.n_trials(), 8);
        assert_eq!(e.labels()[..4], [0, 1, 2, 3]);
        for (t, &l) in e.trials().iter().zip(e.labels()) {
            let trace = stimulus_trace(cb.get(l).unwrap(), 250.0, 250, true).unwrap();
            let expect = convolve_trace(&s.trf, &trace);
            for i in 0..250 {
                assert_eq!(t[(i, 0)], expect[i]);
                assert_eq!(t[(i, 1)], 0.0);
            }
        }
        assert_eq!(cb.kind(), CodeKind::Wn);
    }

    #[test]
    fn doubling_pattern_doubles_signal() {
        let cb = codebook();
        let opts = SimOptions { n_trials_per_class: 1, duration_s: 1.0, fs_hz: 250.0, snr_db: None };
        let a = simulate_epochs(&subject(vec![1.0, 0.5], NoiseSpec::default(), 0.1), &cb, &opts).unwrap();
        let b = simulate_epochs(&subject(vec![2.0, 1.0], NoiseSpec::default(), 0.1), &cb, &opts).unwrap();
        let clean = simulate_epochs(&subject(vec![1.0, 0.5], NoiseSpec::silent(), 0.1), &cb, &opts).unwrap();
        for ((ta, tb), tc) in a.trials().iter().zip(b.trials()).zip(clean.trials()) {
            assert!(((tb - ta) - tc).amax() < 1e-12);
        }
        assert!(simulate_epochs(&subject(vec![0.0, 0.0], NoiseSpec::default(), 0.1), &cb, &opts).is_err());
    }

    #[test]
    fn snr_scaling_hits_target() {
        let cb = generate_wn_pool(10, 180, 4).unwrap();
        let s = subject(vec![1.0, 0.5], NoiseSpec::default(), 0.0);
        let clean = simulate_epochs(
            &VirtualSubject { noise: NoiseSpec::silent(), ..s.clone() },
            &cb,
            &SimOptions { n_trials_per_class: 4, duration_s: 3.0, fs_hz: 250.0, snr_db: None },
        )
        .unwrap();
        let noisy = simulate_epochs(
            &s,
            &cb,
            &SimOptions { n_trials_per_class: 4, duration_s: 3.0, fs_hz: 250.0, snr_db: Some(0.0) },
        )
        .unwrap();
        let (mut ps, mut pn, mut cross) = (0.0, 0.0, 0.0);
        for (c, x) in clean.trials().iter().zip(noisy.trials()) {
            let noise = x - c;
            ps += c.column(0).norm_squared();
            pn += noise.column(0).norm_squared();
            cross += c.column(0).dot(&noise.column(0));
        }
        let ratio = ps / pn;
        assert!((ratio - 1.0).abs() < 0.15, "{ratio}");
        assert!((cross / (ps * pn).sqrt()).abs() < 0.05);
    }

    #[test]
    fn deterministic() {
        let cb = codebook();
        let s = subject(vec![1.0, 0.3], NoiseSpec::default(), 0.1);
        let opts = SimOptions { n_trials_per_class: 2, duration_s: 0.5, fs_hz: 250.0, snr_db: Some(-5.0) };
        assert_eq!(simulate_epochs(&s, &cb, &opts).unwrap(), simulate_epochs(&s, &cb, &opts).unwrap());
    }

    #[test]
    fn population_jitter() {
        let zero = PopulationSpec {
            n_subjects: 3,
            amplitude_range: (1.0, 1.0),
            latency_range_s: (0.0, 0.0),
            pattern_jitter: 0.0,
            ..Default::default()
        };
        let pop = make_population(&zero, 1).unwrap();
        assert!(pop.windows(2).all(|w| w[0].trf == w[1].trf && w[0].pattern == w[1].pattern));

        let spec = PopulationSpec { n_subjects: 20, latency_range_s: (-0.02, 0.02), ..Default::default() };
        let proto = prototype_trf(spec.window().unwrap()).unwrap();
        let fs = spec.fs_hz;
        for a in make_population(&spec, 2).unwrap() {
            let xc = |l: i64| -> f64 {
                (0..proto.len() as i64)
                    .filter(|t| t - l >= 0 && ((t - l) as usize) < proto.len())
                    .map(|t| a.trf.taps[t as usize] * proto[(t - l) as usize])
                    .sum()
            };
            let lag = (-30i64..=30).max_by(|&x, &y| xc(x).total_cmp(&xc(y))).unwrap();
            assert!((lag as f64 / fs).abs() <= 0.02 + 0.5 / fs, "{lag}");
        }
    }

    #[test]
    fn continuous_recording_places_onset() {
        let s = subject(vec![1.0], NoiseSpec::silent(), 0.0);
        let seq = generate_wn_pool(1, 60, 9).unwrap().sequences()[0].clone();
        let x = simulate_continuous(&s, &seq, 100, 600, 250.0, None, 0).unwrap();
        assert!(x.rows(0, 100).iter().all(|v| *v == 0.0));
        let trace = stimulus_trace(&seq, 250.0, 250, true).unwrap();
        let expect = convolve_trace(&s.trf, &trace);
        for i in 0..250 {
            assert!((x[(100 + i, 0)] - expect[i]).abs() < 1e-12);
        }
    }
}
