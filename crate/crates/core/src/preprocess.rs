//! Resampling, line-noise removal, filter-bank decomposition and
//! display-frame to EEG-sample alignment.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::containers::{EpochSet, StimulusSequence};
use crate::error::{Error, Result};
use crate::filter::{butterworth, notch, BandKind, Sos};

pub const NOTCH_Q: f64 = 35.0;
pub const LINE_HZ: f64 = 50.0;

/// Sub-band decomposition used by the template matcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBankSpec {
    pub band_edges: Vec<(f64, f64)>,
    pub filter_order: usize,
    pub zero_phase: bool,
}

impl FilterBankSpec {
    /// Bands `(8 n, 90)` Hz for `n = 1..=n_bands`, order 4, zero phase.
    pub fn standard(n_bands: usize) -> Self {
        Self { band_edges: (1..=n_bands).map(|n| (8.0 * n as f64, 90.0)).collect(), filter_order: 4, zero_phase: true }
    }

    pub fn single(low_hz: f64, high_hz: f64) -> Self {
        Self { band_edges: vec![(low_hz, high_hz)], filter_order: 4, zero_phase: true }
    }

    pub fn n_bands(&self) -> usize {
        self.band_edges.len()
    }

    pub fn validate(&self, fs: f64) -> Result<()> {
        if self.band_edges.is_empty() {
            return Err(Error::arg("filter bank has no bands"));
        }
        if self.filter_order == 0 {
            return Err(Error::arg("filter order must be positive"));
        }
        for &(lo, hi) in &self.band_edges {
            if !(0.0 < lo && lo < hi && hi < fs / 2.0) {
                return Err(Error::arg(format!("band ({lo}, {hi}) Hz invalid at fs = {fs} Hz")));
            }
        }
        Ok(())
    }

    pub fn design(&self, fs: f64) -> Result<Vec<BandFilter>> {
        self.validate(fs)?;
        self.band_edges
            .iter()
            .map(|&(lo, hi)| {
                Ok(BandFilter {
                    sos: butterworth(self.filter_order, BandKind::BandPass(lo, hi), fs)?,
                    zero_phase: self.zero_phase,
                })
            })
            .collect()
    }
}

/// One designed sub-band filter.
#[derive(Debug, Clone)]
pub struct BandFilter {
    pub sos: Sos,
    pub zero_phase: bool,
}

impl BandFilter {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        if self.zero_phase {
            self.sos.filtfilt(x)
        } else {
            self.sos.filter_steady(x)
        }
    }

    /// Filter every column of a `time x channel` matrix.
    pub fn apply_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        filter_columns(m, |c| self.apply(c))
    }
}

pub(crate) fn filter_columns<F: Fn(&[f64]) -> Vec<f64>>(m: &DMatrix<f64>, f: F) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    let mut out = DMatrix::zeros(rows, cols);
    let src = m.as_slice();
    let dst = out.as_mut_slice();
    for c in 0..cols {
        let y = f(&src[c * rows..(c + 1) * rows]);
        dst[c * rows..(c + 1) * rows].copy_from_slice(&y);
    }
    out
}

/// Anti-alias (8th-order zero-phase Butterworth at 0.4 x the new rate) and
/// keep every `factor`-th sample.
pub fn downsample(epochs: &EpochSet, factor: f64) -> Result<EpochSet> {
    if !(factor >= 1.0 && factor.fract() == 0.0) {
        return Err(Error::arg(format!("downsampling factor {factor} is not a positive integer")));
    }
    let fs = epochs.fs_hz();
    let new_fs = fs / factor;
    if (new_fs - new_fs.round()).abs() > 1e-9 {
        return Err(Error::arg(format!("{fs} Hz is not divisible by {factor}")));
    }
    if factor == 1.0 {
        return Ok(epochs.clone());
    }
    let step = factor as usize;
    let lp = butterworth(8, BandKind::LowPass(0.4 * new_fs), fs)?;
    epochs.map_trials(new_fs, epochs.channel_names().to_vec(), |t| {
        let filtered = filter_columns(t, |c| lp.filtfilt(c));
        let n_out = filtered.nrows().div_ceil(step);
        DMatrix::from_fn(n_out, filtered.ncols(), |i, c| filtered[(i * step, c)])
    })
}

/// Zero-phase 50 Hz notch (Q = 35).
pub fn notch_50hz(epochs: &EpochSet) -> Result<EpochSet> {
    let fs = epochs.fs_hz();
    if fs <= 2.0 * LINE_HZ {
        return Err(Error::arg(format!("notch at {LINE_HZ} Hz needs fs above {} Hz", 2.0 * LINE_HZ)));
    }
    let sos = notch(LINE_HZ, NOTCH_Q, fs)?;
    epochs.map_trials(fs, epochs.channel_names().to_vec(), |t| filter_columns(t, |c| sos.filtfilt(c)))
}

/// One band-filtered copy of `epochs` per filter-bank band.
pub fn filterbank(epochs: &EpochSet, spec: &FilterBankSpec) -> Result<Vec<EpochSet>> {
    let bands = spec.design(epochs.fs_hz())?;
    bands
        .iter()
        .map(|b| epochs.map_trials(epochs.fs_hz(), epochs.channel_names().to_vec(), |t| b.apply_columns(t)))
        .collect()
}

/// A stimulus resampled to the EEG rate.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusTrace {
    pub values: Vec<f64>,
    /// Trailing samples past the end of the stimulus, filled with zeros.
    pub n_padded: usize,
}

/// Zero-order hold of display frames at `fs_hz`: sample `i` carries frame
/// `floor(i * frame_rate / fs)`.
pub fn frames_to_samples(seq: &StimulusSequence, fs_hz: f64, n_samples: usize) -> Result<StimulusTrace> {
    let rate = seq.frame_rate_hz();
    if fs_hz < rate {
        return Err(Error::arg(format!("EEG rate {fs_hz} Hz below frame rate {rate} Hz")));
    }
    let frames = seq.frames();
    let mut n_padded = 0;
    let values = (0..n_samples)
        .map(|i| {
            let idx = (i as f64 * rate / fs_hz + 1e-9).floor() as usize;
            frames.get(idx).copied().unwrap_or_else(|| {
                n_padded += 1;
                0.0
            })
        })
        .collect();
    if n_padded > 0 {
        log::warn!("stimulus {} zero-padded by {n_padded} samples", seq.class_id());
    }
    Ok(StimulusTrace { values, n_padded })
}

/// Stimulus at the EEG rate, optionally as contrast about its mean.
pub fn stimulus_trace(seq: &StimulusSequence, fs_hz: f64, n_samples: usize, center: bool) -> Result<Vec<f64>> {
    let mut v = frames_to_samples(seq, fs_hz, n_samples)?.values;
    if center && !v.is_empty() {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mean);
    }
    Ok(v)
}
