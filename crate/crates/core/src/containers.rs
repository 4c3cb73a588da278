//! Shared data model and the on-disk formats for epochs, codebooks and run
//! configuration.
//!
//! The `.cvep` epoch container is a single header line followed by a raw
//! payload:
//!
//! ```text
//! CVEP1 {"n_trials":..,"n_channels":..,"n_samples":..,"fs_hz":..,"labels":[..],"channel_names":[..],"byte_order":"LE"}\n
//! <n_trials * n_channels * n_samples little-endian f32, trial-major, channel-major, time-minor>
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EPOCH_MAGIC: &str = "CVEP1";

/// One code: the per-frame luminance of a single target, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusSequence {
    class_id: usize,
    frames: Vec<f64>,
    frame_rate_hz: f64,
}

impl StimulusSequence {
    pub fn new(class_id: usize, frames: Vec<f64>, frame_rate_hz: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invariant("stimulus sequence has no frames"));
        }
        if !(frame_rate_hz > 0.0 && frame_rate_hz.is_finite()) {
            return Err(Error::invariant(format!("frame rate must be positive, got {frame_rate_hz}")));
        }
        if let Some(bad) = frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invariant(format!("frame value {bad} outside [0, 1]")));
        }
        Ok(Self { class_id, frames, frame_rate_hz })
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.frames.len() as f64 / self.frame_rate_hz
    }

    pub(crate) fn with_class_id(&self, class_id: usize) -> Self {
        Self { class_id, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CodeKind {
    Wn,
    Jfpm,
}

/// Assignment of classes to cells of a `rows x cols` speller grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    /// `cell_of_class[c]` is the row-major cell index that shows class `c`.
    pub cell_of_class: Vec<usize>,
}

impl GridLayout {
    pub fn identity(rows: usize, cols: usize) -> Self {
        Self { rows, cols, cell_of_class: (0..rows * cols).collect() }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.rows * self.cols != n_classes || self.cell_of_class.len() != n_classes {
            return Err(Error::invariant(format!(
                "layout {}x{} does not hold {} classes",
                self.rows, self.cols, n_classes
            )));
        }
        let cells: BTreeSet<_> = self.cell_of_class.iter().copied().collect();
        if cells.len() != n_classes || cells.iter().any(|&c| c >= n_classes) {
            return Err(Error::invariant("layout is not a permutation of the grid cells"));
        }
        Ok(())
    }

    /// Inverse map: which class sits in each cell.
    pub fn class_of_cell(&self) -> Vec<usize> {
        let mut out = vec![0; self.cell_of_class.len()];
        for (class, &cell) in self.cell_of_class.iter().enumerate() {
            out[cell] = class;
        }
        out
    }
}

/// An ordered set of codes sharing length and frame rate, class ids `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Codebook {
    sequences: Vec<StimulusSequence>,
    kind: CodeKind,
    layout: Option<GridLayout>,
}

impl Codebook {
    pub fn new(sequences: Vec<StimulusSequence>, kind: CodeKind, layout: Option<GridLayout>) -> Result<Self> {
        let first = sequences.first().ok_or_else(|| Error::invariant("codebook has no sequences"))?;
        let (len, rate) = (first.len(), first.frame_rate_hz());
        for (i, s) in sequences.iter().enumerate() {
            if s.len() != len || s.frame_rate_hz() != rate {
                return Err(Error::invariant(format!(
                    "sequence {i} has {} frames at {} Hz, expected {len} at {rate} Hz",
                    s.len(),
                    s.frame_rate_hz()
                )));
            }
        }
        let mut ids: Vec<usize> = sequences.iter().map(|s| s.class_id()).collect();
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(i, &id)| i != id) {
            return Err(Error::invariant("class ids must be unique and contiguous from 0"));
        }
        let mut sequences = sequences;
        sequences.sort_by_key(|s| s.class_id());
        if let Some(layout) = &layout {
            layout.validate(sequences.len())?;
        }
        Ok(Self { sequences, kind, layout })
    }

    pub fn sequences(&self) -> &[StimulusSequence] {
        &self.sequences
    }

    pub fn get(&self, class_id: usize) -> Option<&StimulusSequence> {
        self.sequences.get(class_id)
    }

    pub fn kind(&self) -> CodeKind {
        self.kind
    }

    pub fn layout(&self) -> Option<&GridLayout> {
        self.layout.as_ref()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn n_frames(&self) -> usize {
        self.sequences[0].len()
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.sequences[0].frame_rate_hz()
    }

    pub fn with_layout(&self, layout: GridLayout) -> Result<Self> {
        Self::new(self.sequences.clone(), self.kind, Some(layout))
    }

    /// New codebook made of the given classes, relabelled `0..indices.len()`.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let seqs = indices
            .iter()
            .enumerate()
            .map(|(new_id, &i)| {
                self.sequences
                    .get(i)
                    .map(|s| s.with_class_id(new_id))
                    .ok_or_else(|| Error::arg(format!("class {i} not in codebook of {}", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(seqs, self.kind, None)
    }
}

#[derive(Deserialize)]
struct CodebookFile {
    sequences: Vec<StimulusSequence>,
    kind: CodeKind,
    layout: Option<GridLayout>,
}

pub fn write_codebook(path: impl AsRef<Path>, codebook: &Codebook) -> Result<()> {
    let json = serde_json::to_string_pretty(codebook)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn read_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    let text = fs::read_to_string(path)?;
    codebook_from_json(&text)
}

pub fn codebook_from_json(text: &str) -> Result<Codebook> {
    let raw: CodebookFile = serde_json::from_str(text)?;
    let sequences = raw
        .sequences
        .into_iter()
        .map(|s| StimulusSequence::new(s.class_id, s.frames, s.frame_rate_hz))
        .collect::<Result<Vec<_>>>()?;
    Codebook::new(sequences, raw.kind, raw.layout)
}

/// Labelled EEG trials. Each trial is stored `n_samples x n_channels`, so a
/// channel is a contiguous column.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    trials: Vec<DMatrix<f64>>,
    labels: Vec<usize>,
    fs_hz: f64,
    channel_names: Vec<String>,
}

impl EpochSet {
    pub fn new(trials: Vec<DMatrix<f64>>, labels: Vec<usize>, fs_hz: f64, channel_names: Vec<String>) -> Result<Self> {
        if labels.len() != trials.len() {
            return Err(Error::invariant(format!("{} labels for {} trials", labels.len(), trials.len())));
        }
        if !(fs_hz > 0.0 && fs_hz.is_finite()) {
            return Err(Error::invariant(format!("sampling rate must be positive, got {fs_hz}")));
        }
        if let Some(first) = trials.first() {
            let shape = first.shape();
            if trials.iter().any(|t| t.shape() != shape) {
                return Err(Error::invariant("trials differ in shape"));
            }
            if shape.1 != channel_names.len() {
                return Err(Error::invariant(format!(
                    "{} channel names for {} channels",
                    channel_names.len(),
                    shape.1
                )));
            }
            if trials.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
                return Err(Error::invariant("non-finite sample in epochs"));
            }
        }
        Ok(Self { trials, labels, fs_hz, channel_names })
    }

    /// Epoch set with no trials.
    pub fn empty(fs_hz: f64, channel_names: Vec<String>) -> Result<Self> {
        Self::new(Vec::new(), Vec::new(), fs_hz, channel_names)
    }

    pub fn trials(&self) -> &[DMatrix<f64>] {
        &self.trials
    }

    pub fn trial(&self, i: usize) -> &DMatrix<f64> {
        &self.trials[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn fs_hz(&self) -> f64 {
        self.fs_hz
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn n_trials(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn n_samples(&self) -> usize {
        self.trials.first().map_or(0, |t| t.nrows())
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.labels.iter().copied().collect();
        set.into_iter().collect()
    }

    /// Average over the trials carrying `label`, or `None` if there are none.
    pub fn class_mean(&self, label: usize) -> Option<DMatrix<f64>> {
        let mut acc: Option<DMatrix<f64>> = None;
        let mut count = 0usize;
        for (t, &l) in self.trials.iter().zip(&self.labels) {
            if l == label {
                count += 1;
                match acc.as_mut() {
                    Some(a) => *a += t,
                    None => acc = Some(t.clone()),
                }
            }
        }
        acc.map(|a| a / count as f64)
    }

    /// Trials at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut trials = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let t = self
                .trials
                .get(i)
                .ok_or_else(|| Error::arg(format!("trial {i} out of range ({})", self.n_trials())))?;
            trials.push(t.clone());
            labels.push(self.labels[i]);
        }
        Ok(Self { trials, labels, fs_hz: self.fs_hz, channel_names: self.channel_names.clone() })
    }

    /// Keep samples `start..start + len` of every trial.
    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.n_samples() || len == 0 {
            return Err(Error::arg(format!("crop {start}+{len} exceeds trial length {}", self.n_samples())));
        }
        let trials = self.trials.iter().map(|t| t.rows(start, len).into_owned()).collect();
        Ok(Self { trials, labels: self.labels.clone(), fs_hz: self.fs_hz, channel_names: self.channel_names.clone() })
    }

    /// Same labels and channels with transformed trial data.
    pub fn map_trials<F>(&self, fs_hz: f64, channel_names: Vec<String>, f: F) -> Result<Self>
    where
        F: Fn(&DMatrix<f64>) -> DMatrix<f64> + Sync + Send,
    {
        use rayon::prelude::*;
        let trials: Vec<DMatrix<f64>> = self.trials.par_iter().map(f).collect();
        Self::new(trials, self.labels.clone(), fs_hz, channel_names)
    }

    pub fn concat(&self, other: &EpochSet) -> Result<Self> {
        if self.fs_hz != other.fs_hz || self.channel_names != other.channel_names {
            return Err(Error::arg("cannot concatenate epoch sets with different rate or channels"));
        }
        let mut trials = self.trials.clone();
        trials.extend(other.trials.iter().cloned());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self::new(trials, labels, self.fs_hz, self.channel_names.clone())
    }
}

#[derive(Serialize, Deserialize)]
struct EpochHeader {
    n_trials: usize,
    n_channels: usize,
    n_samples: usize,
    fs_hz: f64,
    labels: Vec<usize>,
    channel_names: Vec<String>,
    byte_order: String,
}

/// Serialize epochs. Samples are stored as `f32`, so values that are not
/// exactly representable in single precision are rounded.
pub fn write_epochs(path: impl AsRef<Path>, epochs: &EpochSet) -> Result<()> {
    let bytes = encode_epochs(epochs)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn encode_epochs(epochs: &EpochSet) -> Result<Vec<u8>> {
    let header = EpochHeader {
        n_trials: epochs.n_trials(),
        n_channels: epochs.n_channels(),
        n_samples: epochs.n_samples(),
        fs_hz: epochs.fs_hz,
        labels: epochs.labels.clone(),
        channel_names: epochs.channel_names.clone(),
        byte_order: "LE".to_string(),
    };
    let mut out = Vec::with_capacity(64 + 4 * header.n_trials * header.n_channels * header.n_samples);
    out.extend_from_slice(EPOCH_MAGIC.as_bytes());
    out.push(b' ');
    out.extend_from_slice(serde_json::to_string(&header)?.as_bytes());
    out.push(b'\n');
    // column-major storage of (time x channel) is exactly channel-major, time-minor
    for trial in &epochs.trials {
        for &v in trial.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_epochs(path: impl AsRef<Path>) -> Result<EpochSet> {
    let file = fs::File::open(path)?;
    decode_epochs(BufReader::new(file))
}

pub fn decode_epochs<R: Read>(reader: R) -> Result<EpochSet> {
    let mut reader = BufReader::new(reader);
    let mut magic = [0u8; 5];
    reader.read_exact(&mut magic).map_err(|_| Error::Format("file too short for magic".into()))?;
    if magic != *EPOCH_MAGIC.as_bytes() {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("header line is not terminated".into()));
    }
    let text = std::str::from_utf8(&line).map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let header: EpochHeader =
        serde_json::from_str(text.trim()).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.byte_order != "LE" {
        return Err(Error::Format(format!("unsupported byte order {}", header.byte_order)));
    }
    let per_trial = header
        .n_channels
        .checked_mul(header.n_samples)
        .ok_or_else(|| Error::CorruptPayload("dimension overflow".into()))?;
    let expected = per_trial
        .checked_mul(header.n_trials)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::CorruptPayload("dimension overflow".into()))?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(Error::CorruptPayload(format!(
            "header claims {} floats, payload holds {} bytes",
            expected / 4,
            payload.len()
        )));
    }
    let values: Vec<f64> =
        payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    let trials = if per_trial == 0 {
        vec![DMatrix::zeros(header.n_samples, header.n_channels); header.n_trials]
    } else {
        values
            .chunks_exact(per_trial)
            .map(|c| DMatrix::from_column_slice(header.n_samples, header.n_channels, c))
            .collect()
    };
    EpochSet::new(trials, header.labels, header.fs_hz, header.channel_names)
        .map_err(|e| Error::CorruptPayload(e.to_string()))
}

/// Parameters shared by the decoding stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub fs_hz: f64,
    pub n_filterbanks: usize,
    pub fb_weight_a: f64,
    pub fb_weight_b: f64,
    pub n_shifts: usize,
    pub tau_min_s: f64,
    pub tau_max_s: f64,
    pub svd_alpha: f64,
    pub n_spatial_components: usize,
    pub ridge_eps: f64,
    pub gaze_shift_s: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fs_hz: 250.0,
            n_filterbanks: 5,
            fb_weight_a: 1.25,
            fb_weight_b: 0.25,
            n_shifts: 2,
            tau_min_s: 0.0,
            tau_max_s: 0.5,
            svd_alpha: 0.9,
            n_spatial_components: 1,
            ridge_eps: 1e-6,
            gaze_shift_s: 0.5,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min_s < self.tau_max_s) {
            return Err(Error::invariant("tau_min_s must be below tau_max_s"));
        }
        if self.n_filterbanks < 1 {
            return Err(Error::invariant("at least one filter bank is required"));
        }
        if !(self.svd_alpha > 0.0 && self.svd_alpha <= 1.0) {
            return Err(Error::invariant(format!("svd_alpha {} outside (0, 1]", self.svd_alpha)));
        }
        if !(self.fs_hz > 0.0) {
            return Err(Error::invariant("fs_hz must be positive"));
        }
        if self.n_spatial_components < 1 {
            return Err(Error::invariant("n_spatial_components must be at least 1"));
        }
        if self.gaze_shift_s < 0.0 {
            return Err(Error::invariant("gaze_shift_s must be non-negative"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
