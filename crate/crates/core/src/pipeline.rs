//! Simulated experiment protocol: code design, calibration, template
//! construction and scoring for the linear-modelling and transfer
//! methods, and the calibration-time sweep.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::containers::{Codebook, EpochSet, RunConfig};
use crate::decoder::{fb_weights, Decoder, TemplateBank};
use crate::error::{Error, Result};
use crate::metrics::itr;
use crate::preprocess::FilterBankSpec;
use crate::seed::rng_for;
use crate::stimulus::{anneal_subset, generate_wn_pool, AnnealSchedule};
use crate::synth::{make_population, simulate_epochs, PopulationSpec, SimOptions, VirtualSubject};
use crate::tdca::{fit_tdca_with, spatial_filter, TdcaModel, TdcaOptions};
use crate::transfer::{build_transfer_templates, fit_weights, OverlapPolicy, SourceSubject, TransferWeights};
use crate::trf::{build_linear_templates, fit_trf_from_sources, BankSpec, LagWindow, Trf, TrfFitOptions};

pub const CALIBRATION_DURATIONS_S: [f64; 7] = [9.0, 18.0, 27.0, 36.0, 45.0, 54.0, 60.0];

/// Everything needed to re-derive one simulated session from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    pub run: RunConfig,
    pub population: PopulationSpec,
    pub target_subject: usize,
    pub snr_db: Option<f64>,
    pub pool_size: usize,
    pub code_frames: usize,
    /// Its seed is combined with the run seed.
    pub anneal: AnnealSchedule,
    pub calib_classes: usize,
    pub calib_trials_per_class: usize,
    pub calib_trial_s: f64,
    pub test_classes: usize,
    pub test_trials_per_class: usize,
    pub linear_window_s: f64,
    pub transfer_window_s: f64,
    pub source_test_trials_per_class: usize,
    pub transfer: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            population: PopulationSpec::default(),
            target_subject: 0,
            snr_db: Some(0.0),
            pool_size: 10_000,
            code_frames: 180,
            anneal: AnnealSchedule::default(),
            calib_classes: 20,
            calib_trials_per_class: 4,
            calib_trial_s: 3.0,
            test_classes: 40,
            test_trials_per_class: 5,
            linear_window_s: 2.0,
            transfer_window_s: 0.75,
            source_test_trials_per_class: 5,
            transfer: true,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.population.validate()?;
        if self.population.fs_hz != self.run.fs_hz {
            return Err(Error::invariant("population and run sampling rates differ"));
        }
        if self.target_subject >= self.population.n_subjects {
            return Err(Error::invariant(format!(
                "target subject {} outside a population of {}",
                self.target_subject, self.population.n_subjects
            )));
        }
        if self.transfer && self.population.n_subjects < 2 {
            return Err(Error::invariant("transfer needs at least one source subject"));
        }
        if self.calib_classes < 2 || self.test_classes < 2 {
            return Err(Error::invariant("calibration and test need at least two classes each"));
        }
        if self.pool_size < self.calib_classes + self.test_classes {
            return Err(Error::invariant("pool too small for disjoint calibration and test codes"));
        }
        if self.calib_trials_per_class == 0 || self.test_trials_per_class == 0 || self.source_test_trials_per_class == 0
        {
            return Err(Error::invariant("trial counts must be positive"));
        }
        let code_s = self.code_frames as f64 / crate::stimulus::DISPLAY_RATE_HZ;
        for (name, w) in [
            ("calib_trial_s", self.calib_trial_s),
            ("linear_window_s", self.linear_window_s),
            ("transfer_window_s", self.transfer_window_s),
        ] {
            if !(w > 0.0 && w <= code_s + 1e-9) {
                return Err(Error::invariant(format!("{name} = {w} must lie in (0, {code_s}] s")));
            }
        }
        self.anneal.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Protocol = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut p = self.clone();
        p.run.seed = seed;
        p
    }

    fn test_duration_s(&self) -> f64 {
        if self.transfer {
            self.linear_window_s.max(self.transfer_window_s)
        } else {
            self.linear_window_s
        }
    }

    fn samples(&self, seconds: f64) -> usize {
        (seconds * self.run.fs_hz).round() as usize
    }

    fn sim(&self, n_trials_per_class: usize, duration_s: f64) -> SimOptions {
        SimOptions { n_trials_per_class, duration_s, fs_hz: self.run.fs_hz, snr_db: self.snr_db }
    }
}

fn derive(seed: u64, tag: u64) -> u64 {
    rng_for(seed, &[0x5049, tag]).random()
}

fn reseeded(subject: &VirtualSubject, tag: u64) -> VirtualSubject {
    VirtualSubject { seed: derive(subject.seed, tag), ..subject.clone() }
}

/// Disjoint calibration and test codebooks drawn from one white-noise pool.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Design {
    pub calibration: Codebook,
    pub test: Codebook,
    pub test_min_distance: f64,
}

/// Test codes are annealed for separation; calibration codes are the
/// first unselected pool entries.
pub fn design_codebooks(p: &Protocol) -> Result<Design> {
    let pool = generate_wn_pool(p.pool_size, p.code_frames, derive(p.run.seed, 1))?;
    let schedule = AnnealSchedule { seed: p.anneal.seed ^ derive(p.run.seed, 2), ..p.anneal };
    let sel = anneal_subset(&pool, p.test_classes, &schedule)?;
    let test = pool.subset(&sel.indices)?;
    let rest: Vec<usize> =
        (0..pool.len()).filter(|i| sel.indices.binary_search(i).is_err()).take(p.calib_classes).collect();
    let calibration = pool.subset(&rest)?;
    Ok(Design { calibration, test, test_min_distance: sel.objective })
}

#[derive(Debug, Clone)]
pub struct SubjectData {
    pub calib: EpochSet,
    pub test: EpochSet,
}

pub fn simulate_target(p: &Protocol, subject: &VirtualSubject, design: &Design) -> Result<SubjectData> {
    let calib = simulate_calibration(p, subject, design)?;
    let test =
        simulate_epochs(&reseeded(subject, 11), &design.test, &p.sim(p.test_trials_per_class, p.test_duration_s()))?;
    Ok(SubjectData { calib, test })
}

fn simulate_calibration(p: &Protocol, subject: &VirtualSubject, design: &Design) -> Result<EpochSet> {
    simulate_epochs(&reseeded(subject, 10), &design.calibration, &p.sim(p.calib_trials_per_class, p.calib_trial_s))
}

fn as_source(p: &Protocol, subject: &VirtualSubject, calib: &EpochSet, design: &Design) -> Result<SourceSubject> {
    let test = simulate_epochs(
        &reseeded(subject, 21),
        &design.test,
        &p.sim(p.source_test_trials_per_class, p.transfer_window_s),
    )?;
    SourceSubject::from_epochs(subject.subject_id, calib, &test, p.run.ridge_eps)
}

/// Source subjects for a target, excluding `exclude`. A subject's
/// calibration session is the same whether it serves as target or source.
pub fn simulate_sources(
    p: &Protocol,
    population: &[VirtualSubject],
    design: &Design,
    exclude: usize,
) -> Result<Vec<SourceSubject>> {
    population
        .iter()
        .filter(|s| s.subject_id != exclude)
        .map(|s| as_source(p, s, &simulate_calibration(p, s, design)?, design))
        .collect()
}

pub fn bank_spec(run: &RunConfig) -> BankSpec {
    BankSpec {
        filterbank: FilterBankSpec::standard(run.n_filterbanks),
        n_shifts: run.n_shifts,
        fb_weights: fb_weights(run.n_filterbanks, run.fb_weight_a, run.fb_weight_b),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub model: TdcaModel,
    /// One per spatial component.
    pub trfs: Vec<Trf>,
}

pub fn fit_linear(calib: &EpochSet, codebook: &Codebook, run: &RunConfig) -> Result<LinearFit> {
    let opts = TdcaOptions { n_components: run.n_spatial_components, ridge_eps: run.ridge_eps, delays: 0 };
    let model = fit_tdca_with(calib, &opts)?;
    let sources = spatial_filter(calib, &model)?;
    let window = LagWindow::new(run.tau_min_s, run.tau_max_s, run.fs_hz)?;
    let fit_opts = TrfFitOptions { alpha: run.svd_alpha, ..TrfFitOptions::default() };
    let trfs = (0..model.n_components())
        .map(|c| fit_trf_from_sources(&sources, c, codebook, window, true, &fit_opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(LinearFit { model, trfs })
}

pub fn linear_templates(fit: &LinearFit, test: &Codebook, n_samples: usize, run: &RunConfig) -> Result<TemplateBank> {
    build_linear_templates(&fit.trfs, test, n_samples, &bank_spec(run))
}

pub fn transfer_templates(
    calib: &EpochSet,
    model: &TdcaModel,
    sources: &[SourceSubject],
    target_id: usize,
    test: &Codebook,
    n_samples: usize,
    run: &RunConfig,
) -> Result<(TemplateBank, TransferWeights)> {
    let weights = fit_weights(calib, &model.filter(), sources, Some(target_id), OverlapPolicy::Refuse)?;
    let ids: Vec<usize> = test.sequences().iter().map(|s| s.class_id()).collect();
    let bank = build_transfer_templates(&weights, sources, &ids, n_samples, &bank_spec(run))?;
    Ok((bank, weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub accuracy: f64,
    pub itr_bpm: f64,
    pub window_s: f64,
    pub n_classes: usize,
}

/// Decode `test` cropped to the template length; ITR charges the gaze
/// shift on top of the window.
pub fn evaluate(model: &TdcaModel, bank: TemplateBank, test: &EpochSet, run: &RunConfig) -> Result<MethodScore> {
    let n = bank.n_samples();
    let n_classes = bank.n_classes();
    let window_s = n as f64 / run.fs_hz;
    let test = test.crop(0, n)?;
    let out = Decoder::new(model.clone(), bank)?.decode(&test);
    let accuracy = out.accuracy.ok_or_else(|| Error::MissingData("no test trials decoded".into()))?;
    Ok(MethodScore { accuracy, itr_bpm: itr(n_classes, accuracy, window_s + run.gaze_shift_s)?, window_s, n_classes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOutcome {
    pub seed: u64,
    pub linear: MethodScore,
    pub transfer: Option<MethodScore>,
    pub trf_correlation: f64,
    pub retained_rank: Option<usize>,
    pub test_min_distance: f64,
}

/// Pearson correlation; zero when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// One full session: design, simulate, calibrate, decode.
pub fn run_protocol(p: &Protocol) -> Result<ProtocolOutcome> {
    p.validate()?;
    let design = design_codebooks(p)?;
    let population = make_population(&p.population, p.run.seed)?;
    let target = &population[p.target_subject];
    let data = simulate_target(p, target, &design)?;
    let fit = fit_linear(&data.calib, &design.calibration, &p.run)?;
    let n_lin = p.samples(p.linear_window_s);
    let linear = evaluate(&fit.model, linear_templates(&fit, &design.test, n_lin, &p.run)?, &data.test, &p.run)?;
    let transfer = if p.transfer {
        let sources = simulate_sources(p, &population, &design, target.subject_id)?;
        let n_tr = p.samples(p.transfer_window_s);
        let (bank, _) =
            transfer_templates(&data.calib, &fit.model, &sources, target.subject_id, &design.test, n_tr, &p.run)?;
        Some(evaluate(&fit.model, bank, &data.test, &p.run)?)
    } else {
        None
    };
    Ok(ProtocolOutcome {
        seed: p.run.seed,
        linear,
        transfer,
        trf_correlation: pearson(&fit.trfs[0].taps, &target.trf.taps),
        retained_rank: fit.trfs[0].retained_rank,
        test_min_distance: design.test_min_distance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectComparison {
    pub subject_id: usize,
    pub linear: MethodScore,
    pub transfer: MethodScore,
}

/// Each subject in turn as target with the rest as sources. Both methods
/// decode the same test trials at the transfer window.
pub fn compare_methods(p: &Protocol) -> Result<Vec<SubjectComparison>> {
    p.validate()?;
    if !p.transfer {
        return Err(Error::invariant("method comparison needs transfer enabled"));
    }
    let design = design_codebooks(p)?;
    let population = make_population(&p.population, p.run.seed)?;
    let data = population.iter().map(|s| simulate_target(p, s, &design)).collect::<Result<Vec<_>>>()?;
    let sources =
        population.iter().zip(&data).map(|(s, d)| as_source(p, s, &d.calib, &design)).collect::<Result<Vec<_>>>()?;
    let n = p.samples(p.transfer_window_s);
    population
        .iter()
        .zip(&data)
        .map(|(s, d)| {
            let fit = fit_linear(&d.calib, &design.calibration, &p.run)?;
            let linear = evaluate(&fit.model, linear_templates(&fit, &design.test, n, &p.run)?, &d.test, &p.run)?;
            let others: Vec<SourceSubject> = sources.iter().filter(|x| x.subject_id != s.subject_id).cloned().collect();
            let (bank, _) = transfer_templates(&d.calib, &fit.model, &others, s.subject_id, &design.test, n, &p.run)?;
            let transfer = evaluate(&fit.model, bank, &d.test, &p.run)?;
            Ok(SubjectComparison { subject_id: s.subject_id, linear, transfer })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub duration_s: f64,
    pub n_trials: usize,
    pub linear: MethodScore,
    pub transfer: Option<MethodScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

/// Number of leading calibration trials that make up `duration_s`.
pub fn trials_for_duration(p: &Protocol, duration_s: f64) -> Result<usize> {
    let available = p.calib_classes * p.calib_trials_per_class;
    let k = (duration_s / p.calib_trial_s).round();
    if !(duration_s > 0.0) || (k * p.calib_trial_s - duration_s).abs() > 1e-6 {
        return Err(Error::arg(format!("{duration_s} s is not a whole number of {} s trials", p.calib_trial_s)));
    }
    let k = k as usize;
    if k > available {
        return Err(Error::arg(format!("{duration_s} s needs {k} calibration trials but only {available} exist")));
    }
    Ok(k)
}

/// Accuracy and ITR when calibration is cut to the leading trials of
/// the session. One seed per call; test data and sources are shared
/// across durations.
pub fn calibration_sweep(p: &Protocol, durations_s: &[f64]) -> Result<CalibrationCurve> {
    p.validate()?;
    let counts = durations_s.iter().map(|&d| trials_for_duration(p, d)).collect::<Result<Vec<_>>>()?;
    let design = design_codebooks(p)?;
    let population = make_population(&p.population, p.run.seed)?;
    let target = &population[p.target_subject];
    let data = simulate_target(p, target, &design)?;
    let sources = if p.transfer { simulate_sources(p, &population, &design, target.subject_id)? } else { Vec::new() };
    let rows = durations_s
        .iter()
        .zip(counts)
        .map(|(&duration_s, k)| {
            let calib = data.calib.select(&(0..k).collect::<Vec<_>>())?;
            let fit = fit_linear(&calib, &design.calibration, &p.run)?;
            let linear = evaluate(
                &fit.model,
                linear_templates(&fit, &design.test, p.samples(p.linear_window_s), &p.run)?,
                &data.test,
                &p.run,
            )?;
            let transfer = if p.transfer {
                let (bank, _) = transfer_templates(
                    &calib,
                    &fit.model,
                    &sources,
                    target.subject_id,
                    &design.test,
                    p.samples(p.transfer_window_s),
                    &p.run,
                )?;
                Some(evaluate(&fit.model, bank, &data.test, &p.run)?)
            } else {
                None
            };
            Ok(SweepRow { duration_s, n_trials: k, linear, transfer })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationCurve { seed: p.run.seed, rows })
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per-duration medians over an ensemble of curves with equal durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub durations_s: Vec<f64>,
    pub linear_accuracy: Vec<f64>,
    pub linear_itr_bpm: Vec<f64>,
    pub transfer_accuracy: Option<Vec<f64>>,
    pub transfer_itr_bpm: Option<Vec<f64>>,
}

pub fn summarize(curves: &[CalibrationCurve]) -> Result<SweepSummary> {
    let first = curves.first().ok_or_else(|| Error::arg("no curves to summarise"))?;
    let durations_s: Vec<f64> = first.rows.iter().map(|r| r.duration_s).collect();
    if curves.iter().any(|c| c.rows.iter().map(|r| r.duration_s).ne(durations_s.iter().copied())) {
        return Err(Error::arg("curves cover different durations"));
    }
    let col = |f: &dyn Fn(&SweepRow) -> Option<f64>| -> Option<Vec<f64>> {
        (0..durations_s.len())
            .map(|i| curves.iter().map(|c| f(&c.rows[i])).collect::<Option<Vec<_>>>().map(|v| median(&v)))
            .collect()
    };
    Ok(SweepSummary {
        linear_accuracy: col(&|r| Some(r.linear.accuracy)).unwrap_or_default(),
        linear_itr_bpm: col(&|r| Some(r.linear.itr_bpm)).unwrap_or_default(),
        transfer_accuracy: col(&|r| r.transfer.map(|t| t.accuracy)),
        transfer_itr_bpm: col(&|r| r.transfer.map(|t| t.itr_bpm)),
        durations_s,
    })
}

impl SweepSummary {
    pub fn table(&self) -> String {
        let mut out = String::from("duration_s  linear_acc  linear_itr  transfer_acc  transfer_itr\n");
        for (i, d) in self.durations_s.iter().enumerate() {
            let t = |v: &Option<Vec<f64>>| v.as_ref().map_or("-".to_string(), |v| format!("{:.4}", v[i]));
            let _ = writeln!(
                out,
                "{:>10.1}  {:>10.4}  {:>10.2}  {:>12}  {:>12}",
                d,
                self.linear_accuracy[i],
                self.linear_itr_bpm[i],
                t(&self.transfer_accuracy),
                t(&self.transfer_itr_bpm)
            );
        }
        out
    }
}
