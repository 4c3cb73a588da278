//! Single-stage subcommands. Each reads its inputs from files and writes
//! one primary artifact through [`Writer`].

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cvep_core::containers::{read_codebook, read_epochs, Codebook, EpochSet, RunConfig};
use cvep_core::decoder::{onset_scan, Decoder, OnsetOptions, TemplateBank};
use cvep_core::metrics::{confusion_and_accuracy, itr, Confusion};
use cvep_core::pipeline::{bank_spec, calibration_sweep, summarize, CalibrationCurve, SweepSummary};
use cvep_core::preprocess::{downsample, notch_50hz};
use cvep_core::stimulus::{anneal_subset, generate_jfpm, generate_wn_pool, optimize_layout, AnnealSchedule, JfpmSpec};
use cvep_core::synth::{make_population, simulate_continuous, simulate_epochs, PopulationSpec, SimOptions};
use cvep_core::tdca::{fit_tdca_with, spatial_filter, TdcaModel, TdcaOptions};
use cvep_core::transfer::{build_transfer_templates, fit_weights, OverlapPolicy, SourceSubject};
use cvep_core::trf::{build_linear_templates, fit_trf_from_sources, LagWindow, Trf, TrfFitOptions};
use serde::{Deserialize, Serialize};

use crate::artifact::Writer;
use crate::workspace::PipelineConfig;

pub struct Ctx {
    pub run: RunConfig,
    pub writer: Writer,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    read_codebook(path).with_context(|| format!("reading codebook {}", path.display()))
}

pub fn load_epochs(path: &Path) -> Result<EpochSet> {
    read_epochs(path).with_context(|| format!("reading epochs {}", path.display()))
}

pub fn load_model(path: &Path) -> Result<TdcaModel> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(TdcaModel::from_json(&text)?)
}

pub fn load_bank(path: &Path) -> Result<TemplateBank> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(TemplateBank::from_json(&text)?)
}

pub fn load_trfs(path: &Path) -> Result<Vec<Trf>> {
    let trfs: Vec<Trf> = read_json(path)?;
    for t in &trfs {
        t.validate()?;
    }
    Ok(trfs)
}

fn samples(seconds: f64, fs: f64) -> usize {
    (seconds * fs).round() as usize
}

pub struct DesignArgs {
    pub pool_size: usize,
    pub select: usize,
    pub frames: usize,
    pub layout: Option<(usize, usize)>,
    pub jfpm: bool,
    pub calibration: usize,
    pub calibration_out: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn design(ctx: &Ctx, a: &DesignArgs) -> Result<()> {
    let schedule = AnnealSchedule::with_seed(ctx.run.seed);
    let mut test = if a.jfpm {
        generate_jfpm(&JfpmSpec { n_targets: a.select, ..JfpmSpec::default() }, a.frames)?
    } else {
        let pool = generate_wn_pool(a.pool_size, a.frames, ctx.run.seed)?;
        let sel = anneal_subset(&pool, a.select, &schedule)?;
        log::info!("min pairwise distance {:.4} (start {:.4})", sel.objective, sel.initial_objective);
        if let Some(path) = &a.calibration_out {
            let rest: Vec<usize> =
                (0..pool.len()).filter(|i| sel.indices.binary_search(i).is_err()).take(a.calibration).collect();
            if rest.len() < a.calibration {
                bail!("pool of {} cannot provide {} extra calibration codes", a.pool_size, a.calibration);
            }
            ctx.writer.json(path, &pool.subset(&rest)?)?;
        }
        pool.subset(&sel.indices)?
    };
    if let Some((rows, cols)) = a.layout {
        test = optimize_layout(&test, rows, cols, &schedule)?;
    }
    ctx.writer.json(&a.out, &test)?;
    Ok(())
}

pub struct SimulateArgs {
    pub population: Option<PathBuf>,
    pub codebook: PathBuf,
    pub trials: usize,
    pub duration_s: f64,
    pub snr_db: Option<f64>,
    pub subjects: Option<Vec<usize>>,
    pub continuous: Option<ContinuousArgs>,
    pub out_dir: PathBuf,
}

pub struct ContinuousArgs {
    pub class: usize,
    pub onset_s: f64,
    pub total_s: f64,
}

pub fn simulate(ctx: &Ctx, a: &SimulateArgs) -> Result<()> {
    let spec: PopulationSpec = match &a.population {
        Some(p) => read_json(p)?,
        None => PopulationSpec { fs_hz: ctx.run.fs_hz, ..PopulationSpec::default() },
    };
    let codebook = load_codebook(&a.codebook)?;
    let population = make_population(&spec, ctx.run.seed)?;
    ctx.writer.json(&a.out_dir.join("population.json"), &population)?;
    let ids: Vec<usize> = a.subjects.clone().unwrap_or_else(|| (0..population.len()).collect());
    for id in ids {
        let subject = population.get(id).with_context(|| format!("no subject {id} in population"))?;
        let path = a.out_dir.join(format!("subject_{id:02}.cvep"));
        let epochs = match &a.continuous {
            None => simulate_epochs(
                subject,
                &codebook,
                &SimOptions {
                    n_trials_per_class: a.trials,
                    duration_s: a.duration_s,
                    fs_hz: spec.fs_hz,
                    snr_db: a.snr_db,
                },
            )?,
            Some(c) => {
                let seq = codebook.get(c.class).with_context(|| format!("class {} not in codebook", c.class))?;
                let rec = simulate_continuous(
                    subject,
                    seq,
                    samples(c.onset_s, spec.fs_hz),
                    samples(c.total_s, spec.fs_hz),
                    spec.fs_hz,
                    a.snr_db,
                    0,
                )?;
                EpochSet::new(vec![rec], vec![c.class], spec.fs_hz, subject.channel_names.clone())?
            }
        };
        ctx.writer.epochs(&path, &epochs)?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

pub fn preprocess(ctx: &Ctx, input: &Path, factor: Option<f64>, notch: bool, out: &Path) -> Result<()> {
    let mut e = load_epochs(input)?;
    if notch {
        e = notch_50hz(&e)?;
    }
    if let Some(f) = factor {
        e = downsample(&e, f)?;
    }
    ctx.writer.epochs(out, &e)?;
    Ok(())
}

pub fn fit_spatial(ctx: &Ctx, input: &Path, out: &Path) -> Result<()> {
    let e = load_epochs(input)?;
    let opts = TdcaOptions { n_components: ctx.run.n_spatial_components, ridge_eps: ctx.run.ridge_eps, delays: 0 };
    let model = fit_tdca_with(&e, &opts)?;
    log::info!("generalised eigenvalues {:?}", model.eigenvalues);
    ctx.writer.bytes(out, model.to_json()?.as_bytes())?;
    Ok(())
}

pub fn fit_trf(ctx: &Ctx, input: &Path, model: &Path, codebook: &Path, out: &Path) -> Result<()> {
    let e = load_epochs(input)?;
    let model = load_model(model)?;
    let codebook = load_codebook(codebook)?;
    let sources = spatial_filter(&e, &model)?;
    let window = LagWindow::new(ctx.run.tau_min_s, ctx.run.tau_max_s, ctx.run.fs_hz)?;
    let opts = TrfFitOptions { alpha: ctx.run.svd_alpha, ..TrfFitOptions::default() };
    let trfs = (0..model.n_components())
        .map(|c| fit_trf_from_sources(&sources, c, &codebook, window, true, &opts))
        .collect::<cvep_core::Result<Vec<_>>>()?;
    ctx.writer.json(out, &trfs)?;
    Ok(())
}

/// `id:calib.cvep:test.cvep`.
pub fn parse_source(s: &str) -> Result<(usize, PathBuf, PathBuf)> {
    let parts: Vec<&str> = s.splitn(3, ':').collect();
    if parts.len() != 3 {
        bail!("source must look like id:calib.cvep:test.cvep, got {s}");
    }
    Ok((parts[0].parse().context("source id")?, parts[1].into(), parts[2].into()))
}

pub struct TransferArgs {
    pub target: PathBuf,
    pub target_id: Option<usize>,
    pub model: PathBuf,
    pub sources: Vec<String>,
    pub codebook: PathBuf,
    pub duration_s: f64,
    pub weights_out: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn fit_transfer(ctx: &Ctx, a: &TransferArgs) -> Result<()> {
    let target = load_epochs(&a.target)?;
    let model = load_model(&a.model)?;
    let codebook = load_codebook(&a.codebook)?;
    let sources = a
        .sources
        .iter()
        .map(|s| {
            let (id, calib, test) = parse_source(s)?;
            Ok(SourceSubject::from_epochs(id, &load_epochs(&calib)?, &load_epochs(&test)?, ctx.run.ridge_eps)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = fit_weights(&target, &model.filter(), &sources, a.target_id, OverlapPolicy::Refuse)?;
    let ids: Vec<usize> = codebook.sequences().iter().map(|s| s.class_id()).collect();
    let n = samples(a.duration_s, ctx.run.fs_hz);
    let bank = build_transfer_templates(&weights, &sources, &ids, n, &bank_spec(&ctx.run))?;
    if let Some(w) = &a.weights_out {
        ctx.writer.json(w, &weights)?;
    }
    ctx.writer.bytes(&a.out, bank.to_json()?.as_bytes())?;
    Ok(())
}

/// Labels and predictions of one decode run; failed trials have `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub labels: Vec<usize>,
    pub predictions: Vec<Option<usize>>,
    pub best_shift: Vec<Option<i64>>,
    pub failures: Vec<Option<String>>,
    pub n_classes: usize,
    pub window_s: f64,
}

pub fn decode_epochs(model: TdcaModel, bank: TemplateBank, test: &EpochSet) -> Result<Predictions> {
    let n = bank.n_samples();
    let (n_classes, window_s) = (bank.n_classes(), n as f64 / bank.fs_hz);
    if test.n_samples() < n {
        bail!("test trials have {} samples but templates need {n}", test.n_samples());
    }
    let test = test.crop(0, n)?;
    let out = Decoder::new(model, bank)?.decode(&test);
    Ok(Predictions {
        labels: test.labels().to_vec(),
        predictions: out.predictions(),
        best_shift: out.results.iter().map(|r| r.as_ref().ok().map(|d| d.best_shift)).collect(),
        failures: out.results.iter().map(|r| r.as_ref().err().cloned()).collect(),
        n_classes,
        window_s,
    })
}

pub enum TemplateSource {
    Bank(PathBuf),
    Trf { trf: PathBuf, codebook: PathBuf, duration_s: Option<f64> },
}

pub fn decode(ctx: &Ctx, input: &Path, model: &Path, templates: &TemplateSource, out: &Path) -> Result<()> {
    let test = load_epochs(input)?;
    let model = load_model(model)?;
    let bank = match templates {
        TemplateSource::Bank(p) => load_bank(p)?,
        TemplateSource::Trf { trf, codebook, duration_s } => {
            let n = duration_s.map_or(test.n_samples(), |d| samples(d, ctx.run.fs_hz));
            build_linear_templates(&load_trfs(trf)?, &load_codebook(codebook)?, n, &bank_spec(&ctx.run))?
        }
    };
    let p = decode_epochs(model, bank, &test)?;
    let failed = p.failures.iter().flatten().count();
    if failed > 0 {
        log::warn!("{failed} trials could not be decoded");
    }
    ctx.writer.json(out, &p)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub itr_bpm: f64,
    pub n_classes: usize,
    pub window_s: f64,
    pub gaze_shift_s: f64,
    pub n_undecided: usize,
    pub confusion: Confusion,
}

pub fn evaluate(p: &Predictions, gaze_shift_s: f64) -> Result<Evaluation> {
    let confusion = confusion_and_accuracy(&p.labels, &p.predictions)?;
    Ok(Evaluation {
        accuracy: confusion.accuracy,
        itr_bpm: itr(p.n_classes, confusion.accuracy, p.window_s + gaze_shift_s)?,
        n_classes: p.n_classes,
        window_s: p.window_s,
        gaze_shift_s,
        n_undecided: confusion.n_undecided,
        confusion,
    })
}

pub fn eval(ctx: &Ctx, input: &Path, out: Option<&Path>) -> Result<()> {
    let e = evaluate(&read_json(input)?, ctx.run.gaze_shift_s)?;
    println!(
        "accuracy {:.4}  itr {:.2} bits/min  ({} classes, {:.3} s + {:.3} s)",
        e.accuracy, e.itr_bpm, e.n_classes, e.window_s, e.gaze_shift_s
    );
    if let Some(out) = out {
        ctx.writer.json(out, &e)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub curves: Vec<CalibrationCurve>,
    pub summary: SweepSummary,
}

pub fn sweep(ctx: &Ctx, cfg: &PipelineConfig, seeds: &[u64], durations: &[f64], out: &Path) -> Result<()> {
    let curves = seeds
        .iter()
        .map(|&s| {
            log::info!("sweep seed {s}");
            calibration_sweep(&cfg.protocol.with_seed(s), durations)
        })
        .collect::<cvep_core::Result<Vec<_>>>()?;
    let summary = summarize(&curves)?;
    let table = summary.table();
    print!("{table}");
    ctx.writer.json(out, &SweepOutput { curves, summary })?;
    ctx.writer.bytes(&out.with_extension("txt"), table.as_bytes())?;
    Ok(())
}

pub struct OnsetArgs {
    pub input: PathBuf,
    pub trial: usize,
    pub model: PathBuf,
    pub bank: PathBuf,
    pub center_s: f64,
    pub range_ms: (f64, f64),
    pub out: PathBuf,
}

pub fn onset(ctx: &Ctx, a: &OnsetArgs) -> Result<()> {
    let e = load_epochs(&a.input)?;
    if a.trial >= e.n_trials() {
        bail!("trial {} not in a recording of {} trials", a.trial, e.n_trials());
    }
    let model = load_model(&a.model)?;
    let bank = load_bank(&a.bank)?;
    let sources = model.apply(e.trial(a.trial))?;
    let opts = OnsetOptions { range_ms: a.range_ms, ..OnsetOptions::default() };
    let scan = onset_scan(&sources, &bank, samples(a.center_s, e.fs_hz()), &opts)?;
    println!(
        "detected shift {:+.1} ms, class {}, min type-I error {:.3e}",
        scan.detected_shift_ms,
        scan.detected_class,
        scan.min_error()
    );
    ctx.writer.json(&a.out, &scan)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_spec_parses() {
        let (id, c, t) = parse_source("3:a.cvep:b/c.cvep").unwrap();
        assert_eq!((id, c, t), (3, PathBuf::from("a.cvep"), PathBuf::from("b/c.cvep")));
        assert!(parse_source("3:a.cvep").is_err());
    }

    #[test]
    fn evaluation_matches_itr() {
        let p = Predictions {
            labels: vec![0, 1, 2, 3],
            predictions: vec![Some(0), Some(1), Some(2), None],
            best_shift: vec![Some(0), Some(0), Some(0), None],
            failures: vec![None, None, None, Some("x".into())],
            n_classes: 4,
            window_s: 1.0,
        };
        let e = evaluate(&p, 0.5).unwrap();
        assert_eq!(e.accuracy, 0.75);
        assert_eq!(e.n_undecided, 1);
        assert!((e.itr_bpm - itr(4, 0.75, 1.5).unwrap()).abs() < 1e-12);
    }
}
