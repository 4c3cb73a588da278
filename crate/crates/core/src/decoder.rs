//! Filter-bank template matching with shift tolerance, and onset detection
//! by scanning template alignment.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::containers::EpochSet;
use crate::error::{Error, Result};
use crate::preprocess::{filter_columns, BandFilter, FilterBankSpec};
use crate::tdca::TdcaModel;

/// Sub-band weights `n^-a + b` for `n = 1..=n_bands`.
pub fn fb_weights(n_bands: usize, a: f64, b: f64) -> Vec<f64> {
    (1..=n_bands).map(|n| (n as f64).powf(-a) + b).collect()
}

/// Per-class expected source time courses, one band-filtered copy per
/// filter-bank band. Each template is `time x components`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateBank {
    pub class_ids: Vec<usize>,
    /// Indexed `[class][band]`.
    pub templates: Vec<Vec<DMatrix<f64>>>,
    pub fs_hz: f64,
    pub n_shifts: usize,
    pub fb_weights: Vec<f64>,
    pub filterbank: FilterBankSpec,
}

impl TemplateBank {
    /// Band-filter broadband templates (`time x components`, one per class).
    pub fn from_broadband(
        class_ids: Vec<usize>,
        broadband: &[DMatrix<f64>],
        fs_hz: f64,
        filterbank: FilterBankSpec,
        n_shifts: usize,
        fb_weights: Vec<f64>,
    ) -> Result<Self> {
        if class_ids.len() != broadband.len() {
            return Err(Error::arg("one broadband template per class id required"));
        }
        let bands = filterbank.design(fs_hz)?;
        let templates = broadband.par_iter().map(|t| bands.iter().map(|b| b.apply_columns(t)).collect()).collect();
        let bank = Self { class_ids, templates, fs_hz, n_shifts, fb_weights, filterbank };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_ids.is_empty() {
            return Err(Error::arg("template bank is empty"));
        }
        if self.class_ids.len() != self.templates.len() {
            return Err(Error::invariant("class id count differs from template count"));
        }
        let mut ids = self.class_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.class_ids.len() {
            return Err(Error::invariant("duplicate class ids in template bank"));
        }
        let nb = self.filterbank.n_bands();
        if self.fb_weights.len() != nb {
            return Err(Error::invariant(format!("{} weights for {nb} bands", self.fb_weights.len())));
        }
        if !self.fb_weights.iter().all(|w| *w > 0.0 && w.is_finite()) {
            return Err(Error::invariant("filter-bank weights must be positive"));
        }
        let shape = self.templates[0].first().map(|t| t.shape());
        for per_class in &self.templates {
            if per_class.len() != nb {
                return Err(Error::invariant("template band count differs from filter bank"));
            }
            if per_class.iter().any(|t| Some(t.shape()) != shape) {
                return Err(Error::invariant("templates differ in shape"));
            }
        }
        if shape.is_some_and(|(n, c)| n == 0 || c == 0) {
            return Err(Error::invariant("templates are empty"));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn n_bands(&self) -> usize {
        self.fb_weights.len()
    }

    pub fn n_samples(&self) -> usize {
        self.templates[0][0].nrows()
    }

    pub fn n_components(&self) -> usize {
        self.templates[0][0].ncols()
    }

    /// Keep only the listed classes, in the given order.
    pub fn select_classes(&self, class_ids: &[usize]) -> Result<Self> {
        let templates = class_ids
            .iter()
            .map(|id| {
                self.class_ids
                    .iter()
                    .position(|c| c == id)
                    .map(|i| self.templates[i].clone())
                    .ok_or_else(|| Error::MissingData(format!("class {id} not in template bank")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { class_ids: class_ids.to_vec(), templates, ..self.clone() })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let bank: Self = serde_json::from_str(s)?;
        bank.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(bank)
    }
}

/// Outcome of matching one trial against a bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub predicted_class: usize,
    /// Positive when the trial lags the template.
    pub best_shift: i64,
    /// `n_classes x (2 n_shifts + 1)`; column `j` is shift `j - n_shifts`.
    pub scores: DMatrix<f64>,
    /// Pearson correlations indexed `[band][component]`, each shaped like
    /// `scores`. Empty when not requested.
    pub band_corr: Vec<Vec<DMatrix<f64>>>,
}

impl DecodeResult {
    fn n_shifts(&self) -> usize {
        self.scores.ncols() / 2
    }

    /// Best (class index, shift) among the first `n` classes.
    pub fn best_in_prefix(&self, n: usize) -> (usize, i64) {
        best_of(&self.scores, n.min(self.scores.nrows()), self.n_shifts())
    }

    pub fn max_score(&self, class_index: usize) -> f64 {
        self.scores.row(class_index).max()
    }
}

/// Shift order used for tie-breaking: 0, -1, +1, -2, +2, ...
fn shift_order(n_shifts: usize) -> impl Iterator<Item = i64> {
    std::iter::once(0).chain((1..=n_shifts as i64).flat_map(|s| [-s, s]))
}

fn best_of(scores: &DMatrix<f64>, n_classes: usize, n_shifts: usize) -> (usize, i64) {
    let mut best = (0usize, 0i64, f64::NEG_INFINITY);
    for c in 0..n_classes {
        for l in shift_order(n_shifts) {
            let v = scores[(c, (l + n_shifts as i64) as usize)];
            if v > best.2 {
                best = (c, l, v);
            }
        }
    }
    (best.0, best.1)
}

/// Mean-removed samples with running sums for overlap statistics.
struct Series {
    data: Vec<f64>,
    prefix: Vec<f64>,
    prefix_sq: Vec<f64>,
}

impl Series {
    fn new(v: &[f64]) -> Self {
        let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let data: Vec<f64> = v.iter().map(|x| x - mean).collect();
        let mut prefix = Vec::with_capacity(data.len() + 1);
        let mut prefix_sq = Vec::with_capacity(data.len() + 1);
        let (mut s, mut q) = (0.0, 0.0);
        prefix.push(0.0);
        prefix_sq.push(0.0);
        for x in &data {
            s += x;
            q += x * x;
            prefix.push(s);
            prefix_sq.push(q);
        }
        Self { data, prefix, prefix_sq }
    }

    fn sums(&self, a: usize, b: usize) -> (f64, f64) {
        (self.prefix[b] - self.prefix[a], self.prefix_sq[b] - self.prefix_sq[a])
    }
}

fn centered_ss(m: f64, s: f64, q: f64) -> Option<f64> {
    let v = m * q - s * s;
    (q > 0.0 && v > 1e-12 * m * q).then_some(v)
}

/// Pearson correlation of `x[t]` with `y[t - shift]` over their overlap.
fn pearson_shifted(x: &Series, y: &Series, shift: i64) -> Result<f64> {
    let (nx, ny) = (x.data.len() as i64, y.data.len() as i64);
    let t0 = shift.max(0);
    let t1 = nx.min(ny + shift);
    if t1 - t0 < 2 {
        return Err(Error::DegenerateCorrelation(format!("overlap at shift {shift} shorter than 2 samples")));
    }
    let (t0u, t1u) = (t0 as usize, t1 as usize);
    let (y0, y1) = ((t0 - shift) as usize, (t1 - shift) as usize);
    let m = (t1 - t0) as f64;
    let (sx, qx) = x.sums(t0u, t1u);
    let (sy, qy) = y.sums(y0, y1);
    let sxy: f64 = x.data[t0u..t1u].iter().zip(&y.data[y0..y1]).map(|(a, b)| a * b).sum();
    let vx = centered_ss(m, sx, qx).ok_or_else(|| Error::DegenerateCorrelation("trial has zero variance".into()))?;
    let vy = centered_ss(m, sy, qy).ok_or_else(|| Error::DegenerateCorrelation("template has zero variance".into()))?;
    Ok(((m * sxy - sx * sy) / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Spatial filter, filter bank and template bank bundled for repeated use.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub model: TdcaModel,
    pub bank: TemplateBank,
    bands: Vec<BandFilter>,
    pub keep_band_corr: bool,
}

impl Decoder {
    pub fn new(model: TdcaModel, bank: TemplateBank) -> Result<Self> {
        bank.validate()?;
        if model.n_components() != bank.n_components() {
            return Err(Error::arg(format!(
                "spatial model has {} components, templates have {}",
                model.n_components(),
                bank.n_components()
            )));
        }
        let bands = bank.filterbank.design(bank.fs_hz)?;
        Ok(Self { model, bank, bands, keep_band_corr: true })
    }

    /// Sub-band sources of a raw `time x channels` trial.
    pub fn band_sources(&self, trial: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        let sources = self.model.apply(trial)?;
        Ok(self.bands.iter().map(|b| b.apply_columns(&sources)).collect())
    }

    pub fn match_trial(&self, trial: &DMatrix<f64>) -> Result<DecodeResult> {
        let min_len = self.bank.n_samples().saturating_sub(self.bank.n_shifts);
        if trial.nrows() < min_len {
            return Err(Error::arg(format!("trial of {} samples shorter than {min_len}", trial.nrows())));
        }
        let bands = self.band_sources(trial)?;
        self.match_band_sources(&bands, self.bank.n_shifts)
    }

    /// Score already band-filtered sources (`[band]`, each `time x components`).
    pub fn match_band_sources(&self, bands: &[DMatrix<f64>], n_shifts: usize) -> Result<DecodeResult> {
        match_filtered(bands, &self.bank, n_shifts, self.keep_band_corr)
    }

    pub fn decode(&self, epochs: &EpochSet) -> BatchDecode {
        let results: Vec<std::result::Result<DecodeResult, String>> =
            epochs.trials().par_iter().map(|t| self.match_trial(t).map_err(|e| e.to_string())).collect();
        let accuracy = (!results.is_empty()).then(|| {
            let hits = results
                .iter()
                .zip(epochs.labels())
                .filter(|(r, l)| r.as_ref().is_ok_and(|r| r.predicted_class == **l))
                .count();
            hits as f64 / results.len() as f64
        });
        BatchDecode { results, accuracy }
    }
}

/// Score band-filtered sources (`[band]`, each `time x components`) against
/// every template; `keep` retains the per-band correlations.
pub fn match_filtered(
    bands: &[DMatrix<f64>],
    bank: &TemplateBank,
    n_shifts: usize,
    keep: bool,
) -> Result<DecodeResult> {
    let nb = bank.n_bands();
    let nc = bank.n_components();
    if bands.len() != nb || bands.iter().any(|b| b.ncols() != nc) {
        return Err(Error::arg("band sources do not match the template bank"));
    }
    let ns = 2 * n_shifts + 1;
    let trial: Vec<Vec<Series>> =
        bands.iter().map(|b| b.column_iter().map(|c| Series::new(c.as_slice())).collect()).collect();
    let per_class: Vec<Vec<f64>> = bank
        .templates
        .par_iter()
        .map(|tpl| {
            let mut out = vec![0.0; ns + if keep { nb * nc * ns } else { 0 }];
            for (bi, (band, w)) in tpl.iter().zip(&bank.fb_weights).enumerate() {
                for ci in 0..nc {
                    let y = Series::new(band.column(ci).as_slice());
                    for j in 0..ns {
                        let r = pearson_shifted(&trial[bi][ci], &y, j as i64 - n_shifts as i64)?;
                        out[j] += w * r * r;
                        if keep {
                            out[ns + (bi * nc + ci) * ns + j] = r;
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let n_classes = per_class.len();
    let scores = DMatrix::from_fn(n_classes, ns, |c, j| per_class[c][j]);
    let band_corr = if keep {
        (0..nb)
            .map(|bi| {
                (0..nc)
                    .map(|ci| DMatrix::from_fn(n_classes, ns, |c, j| per_class[c][ns + (bi * nc + ci) * ns + j]))
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };
    let (idx, shift) = best_of(&scores, n_classes, n_shifts);
    Ok(DecodeResult { predicted_class: bank.class_ids[idx], best_shift: shift, scores, band_corr })
}

pub fn match_trial(trial: &DMatrix<f64>, model: &TdcaModel, bank: &TemplateBank) -> Result<DecodeResult> {
    Decoder::new(model.clone(), bank.clone())?.match_trial(trial)
}

/// Per-trial outcomes; failed trials carry their error message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchDecode {
    pub results: Vec<std::result::Result<DecodeResult, String>>,
    /// Fraction of trials whose prediction equals the epoch label; failed
    /// trials count as misses.
    pub accuracy: Option<f64>,
}

impl BatchDecode {
    pub fn predictions(&self) -> Vec<Option<usize>> {
        self.results.iter().map(|r| r.as_ref().ok().map(|d| d.predicted_class)).collect()
    }
}

pub fn batch_decode(epochs: &EpochSet, model: &TdcaModel, bank: &TemplateBank) -> Result<BatchDecode> {
    Ok(Decoder::new(model.clone(), bank.clone())?.decode(epochs))
}

/// How class scores are turned into a significance value during the scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnsetOptions {
    pub range_ms: (f64, f64),
    /// Cube-root transform of scores before the t fit.
    pub cube_root: bool,
    /// Correct the p-value for taking the maximum over all classes.
    pub sidak: bool,
    /// Further correct for the number of scanned shifts, so the curve
    /// reports a family-wise error over the whole scan.
    pub scan_correction: bool,
}

impl Default for OnsetOptions {
    fn default() -> Self {
        Self { range_ms: (-100.0, 100.0), cube_root: true, sidak: true, scan_correction: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnsetScan {
    pub shifts_samples: Vec<i64>,
    pub shifts_ms: Vec<f64>,
    pub type1_error: Vec<f64>,
    pub t_stat: Vec<f64>,
    pub best_class: Vec<usize>,
    pub detected_shift_ms: f64,
    pub detected_class: usize,
}

impl OnsetScan {
    pub fn min_error(&self) -> f64 {
        self.type1_error.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Significance of the largest score against a t fit to the others:
/// returns (t statistic, one-sided p-value).
pub fn max_score_significance(scores: &[f64], opts: &OnsetOptions) -> Result<(f64, f64)> {
    let n = scores.len();
    if n < 3 {
        return Err(Error::InsufficientClasses(n));
    }
    let v: Vec<f64> = if opts.cube_root { scores.iter().map(|s| s.cbrt()).collect() } else { scores.to_vec() };
    let imax = (0..n).fold(0, |b, i| if v[i] > v[b] { i } else { b });
    let others: Vec<f64> = v.iter().enumerate().filter(|(i, _)| *i != imax).map(|(_, x)| *x).collect();
    let k = others.len() as f64;
    let mean = others.iter().sum::<f64>() / k;
    let var = others.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    let diff = v[imax] - mean;
    if diff <= 0.0 {
        return Ok((0.0, 1.0));
    }
    if var <= 0.0 {
        return Ok((f64::INFINITY, 0.0));
    }
    let t = diff / (var * (1.0 + 1.0 / k)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 2) as f64).map_err(|e| Error::arg(e.to_string()))?;
    let mut p = dist.sf(t);
    if opts.sidak {
        p = sidak(p, n);
    }
    Ok((t, p.clamp(0.0, 1.0)))
}

/// Family-wise error of `m` independent tests at level `p`.
fn sidak(p: f64, m: usize) -> f64 {
    -(m as f64 * (-p).ln_1p()).exp_m1()
}

/// Scan template alignment around `center` in a continuous source
/// recording (`time x components`). Each candidate window starts at
/// `center + shift`.
pub fn onset_scan(
    sources: &DMatrix<f64>,
    bank: &TemplateBank,
    center: usize,
    opts: &OnsetOptions,
) -> Result<OnsetScan> {
    if bank.n_classes() < 3 {
        return Err(Error::InsufficientClasses(bank.n_classes()));
    }
    if sources.ncols() != bank.n_components() {
        return Err(Error::arg("source components do not match the template bank"));
    }
    let fs = bank.fs_hz;
    let lo = (opts.range_ms.0 * fs / 1000.0).round() as i64;
    let hi = (opts.range_ms.1 * fs / 1000.0).round() as i64;
    if lo > hi {
        return Err(Error::arg("empty shift range"));
    }
    let len = bank.n_samples() as i64;
    if center as i64 + lo < 0 || center as i64 + hi + len > sources.nrows() as i64 {
        return Err(Error::arg("recording too short for template length plus scan range"));
    }
    let filters = bank.filterbank.design(fs)?;
    let bands: Vec<DMatrix<f64>> = filters.iter().map(|f| filter_columns(sources, |c| f.apply(c))).collect();

    let shifts: Vec<i64> = (lo..=hi).collect();
    let n_shifts = shifts.len();
    let rows: Vec<(f64, f64, usize)> = shifts
        .par_iter()
        .map(|&s| {
            let start = (center as i64 + s) as usize;
            let window: Vec<DMatrix<f64>> = bands.iter().map(|b| b.rows(start, len as usize).into_owned()).collect();
            let r = match_filtered(&window, bank, 0, false)?;
            let col: Vec<f64> = r.scores.column(0).iter().copied().collect();
            let (t, mut p) = max_score_significance(&col, opts)?;
            if opts.scan_correction {
                p = sidak(p, n_shifts);
            }
            Ok((t, p, r.predicted_class))
        })
        .collect::<Result<_>>()?;

    let mut best = 0usize;
    for i in 1..shifts.len() {
        let (ti, tb) = (rows[i].0, rows[best].0);
        if ti > tb || (ti == tb && shifts[i].abs() < shifts[best].abs()) {
            best = i;
        }
    }
    let to_ms = |s: i64| s as f64 * 1000.0 / fs;
    Ok(OnsetScan {
        shifts_ms: shifts.iter().map(|&s| to_ms(s)).collect(),
        type1_error: rows.iter().map(|r| r.1).collect(),
        t_stat: rows.iter().map(|r| r.0).collect(),
        best_class: rows.iter().map(|r| r.2).collect(),
        detected_shift_ms: to_ms(shifts[best]),
        detected_class: rows[best].2,
        shifts_samples: shifts,
    })
}
