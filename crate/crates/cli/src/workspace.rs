//! Config-driven pipeline over a workspace directory. Stages run in
//! order; a stage whose inputs, config and outputs are unchanged since
//! its last run is skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cvep_core::containers::EpochSet;
use cvep_core::pipeline::{design_codebooks, pearson, simulate_sources, simulate_target, Design, Protocol};
use cvep_core::stimulus::min_pairwise_distance;
use cvep_core::synth::{make_population, VirtualSubject};
use cvep_core::transfer::{build_transfer_templates, fit_weights, OverlapPolicy, SourceSubject};
use cvep_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::artifact::{hash_file, hash_json, sha256_hex, CliError, Provenance, Writer};
use crate::commands::{self, read_json, Ctx, Evaluation, Predictions, TemplateSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Relative paths are resolved against the config file's directory.
    pub workspace: PathBuf,
    /// Both or neither; absent codebooks are designed from the protocol.
    pub calibration_codebook: Option<PathBuf>,
    pub test_codebook: Option<PathBuf>,
    pub protocol: Protocol,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            workspace: PathBuf::from("workspace"),
            calibration_codebook: None,
            test_codebook: None,
            protocol: Protocol::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(CoreError::from)
            .with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        cfg.workspace = resolve(&cfg.workspace);
        cfg.calibration_codebook = cfg.calibration_codebook.as_deref().map(resolve);
        cfg.test_codebook = cfg.test_codebook.as_deref().map(resolve);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        if self.calibration_codebook.is_some() != self.test_codebook.is_some() {
            return Err(CoreError::InvariantViolation("give both codebooks or neither".into()).into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageManifest {
    stage: String,
    key: String,
    config_hash: String,
    seed: u64,
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub key: String,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub linear: Evaluation,
    pub transfer: Option<Evaluation>,
    pub trf_correlation: f64,
    pub retained_rank: Option<usize>,
    pub test_min_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub metrics: Metrics,
}

struct Runner {
    ws: PathBuf,
    protocol: Protocol,
    config_hash: String,
    force: bool,
    records: Vec<StageRecord>,
}

impl Runner {
    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.ws).unwrap_or(p).to_string_lossy().into_owned()
    }

    fn ctx(&self, stage: &str) -> Ctx {
        Ctx {
            run: self.protocol.run.clone(),
            writer: Writer {
                provenance: Provenance {
                    command: format!("run:{stage}"),
                    config_hash: self.config_hash.clone(),
                    seed: self.protocol.run.seed,
                },
                force: self.force,
            },
        }
    }

    fn stage(
        &mut self,
        name: &str,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        body: impl FnOnce(&Ctx) -> Result<()>,
    ) -> Result<()> {
        let mut key_parts = vec![name.to_string(), self.config_hash.clone()];
        for input in inputs {
            if !input.exists() {
                return Err(CliError::MissingInput { stage: name.into(), path: input.clone() }.into());
            }
            key_parts.push(hash_file(input)?);
        }
        let key = sha256_hex(key_parts.join("\n").as_bytes());
        let manifest_path = self.ws.join(".stages").join(format!("{name}.json"));
        if !self.force {
            if let Ok(m) = read_json::<StageManifest>(&manifest_path) {
                let intact = m.key == key
                    && outputs
                        .iter()
                        .all(|o| m.outputs.get(&self.rel(o)).is_some_and(|h| hash_file(o).ok().as_ref() == Some(h)));
                if intact {
                    log::info!("stage {name}: cached");
                    self.records.push(StageRecord { name: name.into(), key, outputs: m.outputs });
                    return Ok(());
                }
            }
        }
        log::info!("stage {name}: running");
        body(&self.ctx(name)).with_context(|| format!("stage {name}"))?;
        let mut hashes = BTreeMap::new();
        for o in outputs {
            hashes.insert(
                self.rel(o),
                hash_file(o).with_context(|| format!("stage {name} did not write {}", o.display()))?,
            );
        }
        let manifest = StageManifest {
            stage: name.into(),
            key: key.clone(),
            config_hash: self.config_hash.clone(),
            seed: self.protocol.run.seed,
            outputs: hashes.clone(),
        };
        fs::create_dir_all(self.ws.join(".stages"))?;
        fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
        self.records.push(StageRecord { name: name.into(), key, outputs: hashes });
        Ok(())
    }
}

fn class_means_set(means: &BTreeMap<usize, nalgebra::DMatrix<f64>>, fs: f64, names: &[String]) -> Result<EpochSet> {
    Ok(EpochSet::new(means.values().cloned().collect(), means.keys().copied().collect(), fs, names.to_vec())?)
}

fn means_of(e: &EpochSet) -> BTreeMap<usize, nalgebra::DMatrix<f64>> {
    e.labels().iter().copied().zip(e.trials().iter().cloned()).collect()
}

#[derive(Serialize, Deserialize)]
struct SourceIndex {
    subject_id: usize,
    filter: Vec<f64>,
    calib: String,
    test: String,
}

fn write_sources(ctx: &Ctx, dir: &Path, sources: &[SourceSubject], names: &[String]) -> Result<()> {
    let mut index = Vec::new();
    for s in sources {
        let calib = format!("source_{:02}_calib.cvep", s.subject_id);
        let test = format!("source_{:02}_test.cvep", s.subject_id);
        ctx.writer.epochs(&dir.join(&calib), &class_means_set(&s.calib_responses, s.fs_hz, names)?)?;
        ctx.writer.epochs(&dir.join(&test), &class_means_set(&s.test_responses, s.fs_hz, names)?)?;
        index.push(SourceIndex { subject_id: s.subject_id, filter: s.filter.iter().copied().collect(), calib, test });
    }
    ctx.writer.json(&dir.join("sources.json"), &index)?;
    Ok(())
}

fn read_sources(dir: &Path) -> Result<Vec<SourceSubject>> {
    let index: Vec<SourceIndex> = read_json(&dir.join("sources.json"))?;
    index
        .into_iter()
        .map(|i| {
            let calib = commands::load_epochs(&dir.join(&i.calib))?;
            let test = commands::load_epochs(&dir.join(&i.test))?;
            Ok(SourceSubject::new(
                i.subject_id,
                means_of(&calib),
                means_of(&test),
                nalgebra::DVector::from_vec(i.filter),
                calib.fs_hz(),
            )?)
        })
        .collect()
}

fn samples(p: &Protocol, s: f64) -> usize {
    (s * p.run.fs_hz).round() as usize
}

/// Run every stage, write `report.json` into the workspace and return it.
pub fn run_pipeline(cfg: &PipelineConfig, force: bool) -> Result<Report> {
    cfg.validate()?;
    let p = cfg.protocol.clone();
    let config_hash = hash_json(&(&p, cfg.calibration_codebook.is_some()))?;
    let ws = cfg.workspace.clone();
    fs::create_dir_all(&ws).with_context(|| format!("creating workspace {}", ws.display()))?;
    let mut r =
        Runner { ws: ws.clone(), protocol: p.clone(), config_hash: config_hash.clone(), force, records: Vec::new() };

    let calib_cb = ws.join("design/calibration_codebook.json");
    let test_cb = ws.join("design/test_codebook.json");
    let given: Vec<PathBuf> = cfg.calibration_codebook.iter().chain(&cfg.test_codebook).cloned().collect();
    r.stage("design", &given, &[calib_cb.clone(), test_cb.clone()], |ctx| {
        let (calibration, test) = match (&cfg.calibration_codebook, &cfg.test_codebook) {
            (Some(c), Some(t)) => (commands::load_codebook(c)?, commands::load_codebook(t)?),
            _ => {
                let d = design_codebooks(&p)?;
                (d.calibration, d.test)
            }
        };
        ctx.writer.json(&calib_cb, &calibration)?;
        ctx.writer.json(&test_cb, &test)?;
        Ok(())
    })?;

    let sim = ws.join("simulate");
    let population_path = sim.join("population.json");
    let calib_path = sim.join("calib.cvep");
    let test_path = sim.join("test.cvep");
    let mut sim_outputs = vec![population_path.clone(), calib_path.clone(), test_path.clone()];
    if p.transfer {
        sim_outputs.push(sim.join("sources.json"));
    }
    r.stage("simulate", &[calib_cb.clone(), test_cb.clone()], &sim_outputs, |ctx| {
        let calibration = commands::load_codebook(&calib_cb)?;
        let test = commands::load_codebook(&test_cb)?;
        let test_min_distance = min_pairwise_distance(&test.sequences().iter().collect::<Vec<_>>());
        let design = Design { calibration, test, test_min_distance };
        let population = make_population(&p.population, p.run.seed)?;
        let target = &population[p.target_subject];
        let data = simulate_target(&p, target, &design)?;
        ctx.writer.json(&population_path, &population)?;
        ctx.writer.epochs(&calib_path, &data.calib)?;
        ctx.writer.epochs(&test_path, &data.test)?;
        if p.transfer {
            let sources = simulate_sources(&p, &population, &design, target.subject_id)?;
            write_sources(ctx, &sim, &sources, &target.channel_names)?;
        }
        Ok(())
    })?;

    let cal = ws.join("calibrate");
    let model_path = cal.join("model.json");
    let trf_path = cal.join("trf.json");
    r.stage("fit-spatial", &[calib_path.clone()], &[model_path.clone()], |ctx| {
        commands::fit_spatial(ctx, &calib_path, &model_path)
    })?;
    r.stage("fit-trf", &[calib_path.clone(), model_path.clone(), calib_cb.clone()], &[trf_path.clone()], |ctx| {
        commands::fit_trf(ctx, &calib_path, &model_path, &calib_cb, &trf_path)
    })?;

    let tpl = ws.join("templates");
    let linear_bank = tpl.join("linear_bank.json");
    let transfer_bank = tpl.join("transfer_bank.json");
    let weights_path = tpl.join("transfer_weights.json");
    let mut tpl_inputs = vec![trf_path.clone(), test_cb.clone()];
    let mut tpl_outputs = vec![linear_bank.clone()];
    if p.transfer {
        tpl_inputs.extend([calib_path.clone(), model_path.clone(), sim.join("sources.json")]);
        tpl_outputs.extend([transfer_bank.clone(), weights_path.clone()]);
    }
    r.stage("templates", &tpl_inputs, &tpl_outputs, |ctx| {
        let test = commands::load_codebook(&test_cb)?;
        let spec = cvep_core::pipeline::bank_spec(&p.run);
        let trfs = commands::load_trfs(&trf_path)?;
        let bank = cvep_core::trf::build_linear_templates(&trfs, &test, samples(&p, p.linear_window_s), &spec)?;
        ctx.writer.bytes(&linear_bank, bank.to_json()?.as_bytes())?;
        if p.transfer {
            let calib = commands::load_epochs(&calib_path)?;
            let model = commands::load_model(&model_path)?;
            let sources = read_sources(&sim)?;
            let w = fit_weights(&calib, &model.filter(), &sources, Some(p.target_subject), OverlapPolicy::Refuse)?;
            let ids: Vec<usize> = test.sequences().iter().map(|s| s.class_id()).collect();
            let bank = build_transfer_templates(&w, &sources, &ids, samples(&p, p.transfer_window_s), &spec)?;
            ctx.writer.json(&weights_path, &w)?;
            ctx.writer.bytes(&transfer_bank, bank.to_json()?.as_bytes())?;
        }
        Ok(())
    })?;

    let dec = ws.join("decode");
    let lin_pred = dec.join("linear.json");
    let tr_pred = dec.join("transfer.json");
    r.stage(
        "decode-linear",
        &[test_path.clone(), model_path.clone(), linear_bank.clone()],
        &[lin_pred.clone()],
        |ctx| commands::decode(ctx, &test_path, &model_path, &TemplateSource::Bank(linear_bank.clone()), &lin_pred),
    )?;
    if p.transfer {
        r.stage(
            "decode-transfer",
            &[test_path.clone(), model_path.clone(), transfer_bank.clone()],
            &[tr_pred.clone()],
            |ctx| {
                commands::decode(ctx, &test_path, &model_path, &TemplateSource::Bank(transfer_bank.clone()), &tr_pred)
            },
        )?;
    }

    let metrics_path = ws.join("evaluate/metrics.json");
    let mut eval_inputs = vec![lin_pred.clone(), trf_path.clone(), population_path.clone(), test_cb.clone()];
    if p.transfer {
        eval_inputs.push(tr_pred.clone());
    }
    r.stage("evaluate", &eval_inputs, &[metrics_path.clone()], |ctx| {
        let gaze = p.run.gaze_shift_s;
        let linear = commands::evaluate(&read_json::<Predictions>(&lin_pred)?, gaze)?;
        let transfer = if p.transfer { Some(commands::evaluate(&read_json(&tr_pred)?, gaze)?) } else { None };
        let trfs = commands::load_trfs(&trf_path)?;
        let population: Vec<VirtualSubject> = read_json(&population_path)?;
        let test = commands::load_codebook(&test_cb)?;
        let metrics = Metrics {
            linear,
            transfer,
            trf_correlation: pearson(&trfs[0].taps, &population[p.target_subject].trf.taps),
            retained_rank: trfs[0].retained_rank,
            test_min_distance: min_pairwise_distance(&test.sequences().iter().collect::<Vec<_>>()),
        };
        ctx.writer.json(&metrics_path, &metrics)?;
        Ok(())
    })?;

    let report =
        Report { config_hash, seed: p.run.seed, stages: r.records.clone(), metrics: read_json(&metrics_path)? };
    r.ctx("report").writer.json(&ws.join("report.json"), &report)?;
    Ok(report)
}
