//! Cross-subject templates: least-squares weights that map source
//! subjects' filtered responses onto the target's calibration responses.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::containers::EpochSet;
use crate::decoder::{Decoder, TemplateBank};
use crate::error::{Error, Result};
use crate::tdca::{fit_tdca, TdcaModel};
use crate::trf::BankSpec;

/// Class-mean recordings (`time x channels`) of one source subject under
/// the calibration and test codebooks, with its unit-norm spatial filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSubject {
    pub subject_id: usize,
    pub calib_responses: BTreeMap<usize, DMatrix<f64>>,
    pub test_responses: BTreeMap<usize, DMatrix<f64>>,
    pub filter: DVector<f64>,
    pub fs_hz: f64,
}

fn class_means(e: &EpochSet) -> BTreeMap<usize, DMatrix<f64>> {
    e.classes().into_iter().map(|k| (k, e.class_mean(k).expect("class present"))).collect()
}

impl SourceSubject {
    pub fn new(
        subject_id: usize,
        calib_responses: BTreeMap<usize, DMatrix<f64>>,
        test_responses: BTreeMap<usize, DMatrix<f64>>,
        filter: DVector<f64>,
        fs_hz: f64,
    ) -> Result<Self> {
        let norm = filter.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::arg("source filter must be nonzero"));
        }
        let nch = filter.len();
        if calib_responses.values().chain(test_responses.values()).any(|m| m.ncols() != nch) {
            return Err(Error::arg("source responses and filter differ in channel count"));
        }
        Ok(Self { subject_id, calib_responses, test_responses, filter: filter / norm, fs_hz })
    }

    /// Class means of both sessions with a filter fitted on calibration.
    pub fn from_epochs(subject_id: usize, calib: &EpochSet, test: &EpochSet, ridge_eps: f64) -> Result<Self> {
        if calib.fs_hz() != test.fs_hz() {
            return Err(Error::arg("calibration and test sessions differ in rate"));
        }
        let model = fit_tdca(calib, 1, ridge_eps)?;
        Self::new(subject_id, class_means(calib), class_means(test), model.filter(), calib.fs_hz())
    }

    fn filtered(&self, responses: &BTreeMap<usize, DMatrix<f64>>, class: usize, n: usize) -> Result<DVector<f64>> {
        let m = responses.get(&class).ok_or_else(|| {
            Error::MissingData(format!("source {} has no response for class {class}", self.subject_id))
        })?;
        if m.nrows() < n {
            return Err(Error::MissingData(format!(
                "source {} class {class} has {} samples, {n} needed",
                self.subject_id,
                m.nrows()
            )));
        }
        Ok(m.rows(0, n) * &self.filter)
    }

    /// Rescale stored responses, e.g. to model amplifier gain.
    pub fn scaled(&self, c: f64) -> Self {
        let s = |m: &BTreeMap<usize, DMatrix<f64>>| m.iter().map(|(k, v)| (*k, v * c)).collect();
        Self { calib_responses: s(&self.calib_responses), test_responses: s(&self.test_responses), ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferWeights {
    pub weights: Vec<f64>,
    pub subject_ids: Vec<usize>,
    /// Ridge added to the normal equations; zero when they were well posed.
    pub ridge: f64,
}

/// Whether a source with the target's id may be used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverlapPolicy {
    #[default]
    Refuse,
    Allow,
}

pub fn fit_weights(
    target_calib: &EpochSet,
    target_filter: &DVector<f64>,
    sources: &[SourceSubject],
    target_id: Option<usize>,
    policy: OverlapPolicy,
) -> Result<TransferWeights> {
    if sources.is_empty() {
        return Err(Error::arg("no source subjects"));
    }
    if let Some(id) = target_id {
        if policy == OverlapPolicy::Refuse && sources.iter().any(|s| s.subject_id == id) {
            return Err(Error::arg(format!("target subject {id} is among the sources")));
        }
    }
    if target_filter.len() != target_calib.n_channels() {
        return Err(Error::arg("target filter and calibration data differ in channel count"));
    }
    let classes = target_calib.classes();
    if classes.is_empty() {
        return Err(Error::arg("target calibration data is empty"));
    }
    for s in sources {
        if s.fs_hz != target_calib.fs_hz() {
            return Err(Error::arg(format!("source {} differs in rate", s.subject_id)));
        }
        if classes.iter().any(|k| !s.calib_responses.contains_key(k)) {
            return Err(Error::arg(format!("source {} lacks target calibration classes", s.subject_id)));
        }
    }
    let n = target_calib.n_samples();
    let mut b = Vec::with_capacity(n * classes.len());
    for &k in &classes {
        let mean = target_calib.class_mean(k).expect("class present");
        b.extend((mean * target_filter).iter());
    }
    let cols = sources
        .iter()
        .map(|s| {
            let mut col = Vec::with_capacity(b.len());
            for &k in &classes {
                col.extend(s.filtered(&s.calib_responses, k, n)?.iter());
            }
            Ok(col)
        })
        .collect::<Result<Vec<_>>>()?;
    let a = DMatrix::from_fn(b.len(), sources.len(), |i, j| cols[j][i]);
    let (weights, ridge) = solve_normal(&a, &DVector::from_vec(b));
    Ok(TransferWeights {
        weights: weights.as_slice().to_vec(),
        subject_ids: sources.iter().map(|s| s.subject_id).collect(),
        ridge,
    })
}

fn solve_normal(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, f64) {
    let n = a.ncols();
    let ata = a.tr_mul(a);
    let atb = a.tr_mul(b);
    let ev = SymmetricEigen::new(ata.clone()).eigenvalues;
    let max = ev.amax();
    if max == 0.0 {
        return (DVector::zeros(n), 0.0);
    }
    let ridge = if ev.min() <= 1e-12 * max { 1e-8 * ata.trace() / n as f64 } else { 0.0 };
    let reg = ata + DMatrix::identity(n, n) * ridge;
    let w = reg.cholesky().map(|c| c.solve(&atb)).unwrap_or_else(|| DVector::zeros(n));
    (w, ridge)
}

/// Weighted mean of source filtered test responses, one template per class.
pub fn build_transfer_templates(
    weights: &TransferWeights,
    sources: &[SourceSubject],
    test_classes: &[usize],
    n_samples: usize,
    spec: &BankSpec,
) -> Result<TemplateBank> {
    if weights.weights.len() != sources.len() {
        return Err(Error::arg("weight count differs from source count"));
    }
    let fs = sources.first().map(|s| s.fs_hz).ok_or_else(|| Error::arg("no source subjects"))?;
    let nsub = sources.len() as f64;
    let broadband = test_classes
        .par_iter()
        .map(|&k| {
            let mut acc = DVector::zeros(n_samples);
            for (s, w) in sources.iter().zip(&weights.weights) {
                acc.axpy(*w / nsub, &s.filtered(&s.test_responses, k, n_samples)?, 1.0);
            }
            Ok(DMatrix::from_column_slice(n_samples, 1, acc.as_slice()))
        })
        .collect::<Result<Vec<_>>>()?;
    TemplateBank::from_broadband(
        test_classes.to_vec(),
        &broadband,
        fs,
        spec.filterbank.clone(),
        spec.n_shifts,
        spec.fb_weights.clone(),
    )
}

/// One subject's data for cross-subject evaluation.
#[derive(Debug, Clone)]
pub struct SubjectSession {
    pub source: SourceSubject,
    pub model: TdcaModel,
    pub test: EpochSet,
}

impl SubjectSession {
    pub fn from_epochs(subject_id: usize, calib: &EpochSet, test: &EpochSet, ridge_eps: f64) -> Result<Self> {
        let model = fit_tdca(calib, 1, ridge_eps)?;
        let source =
            SourceSubject::new(subject_id, class_means(calib), class_means(test), model.filter(), calib.fs_hz())?;
        Ok(Self { source, model, test: test.clone() })
    }

    /// Templates from this subject's own filtered test class means.
    pub fn own_templates(&self, spec: &BankSpec) -> Result<TemplateBank> {
        let w = TransferWeights { weights: vec![1.0], subject_ids: vec![self.source.subject_id], ridge: 0.0 };
        let classes: Vec<usize> = self.source.test_responses.keys().copied().collect();
        build_transfer_templates(&w, std::slice::from_ref(&self.source), &classes, self.test.n_samples(), spec)
    }
}

/// Entry `(i, j)`: accuracy on subject `i`'s test trials using subject
/// `j`'s templates and subject `i`'s spatial filter.
pub fn leave_one_out_transfer(subjects: &[SubjectSession], spec: &BankSpec) -> Result<DMatrix<f64>> {
    if subjects.len() < 2 {
        return Err(Error::arg("cross-subject evaluation needs at least 2 subjects"));
    }
    let banks = subjects.iter().map(|s| s.own_templates(spec)).collect::<Result<Vec<_>>>()?;
    let n = subjects.len();
    let mut out = DMatrix::zeros(n, n);
    for (i, s) in subjects.iter().enumerate() {
        for (j, bank) in banks.iter().enumerate() {
            let mut dec = Decoder::new(s.model.clone(), bank.clone())?;
            dec.keep_band_corr = false;
            out[(i, j)] = dec.decode(&s.test).accuracy.unwrap_or(0.0);
        }
    }
    Ok(out)
}
