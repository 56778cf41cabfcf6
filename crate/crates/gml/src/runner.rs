//! End-to-end experiment orchestration: generate data, train by method,
//! evaluate, persist artifacts, and compare finished runs.
//!
//! The on-disk layout under `out_dir/{method}/` is a public contract; the
//! comparison command reads only these files and needs no manifest:
//!
//! ```text
//! out_dir/
//!   gml/
//!     config.json            full config snapshot after defaults
//!     data/{site}.gmld       every generated dataset, participants and held-out
//!     checkpoints/{site}.gmlw  one per site model (or global.gmlw)
//!     events.jsonl           the complete event log
//!     report.{csv,json}      site-model evaluation
//!     ensemble_report.{csv,json}  bagging ensemble (site-model methods only)
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::baselines::{run_fedavg, run_individual, run_pooled};
use crate::config::{AggregationWeights, ExperimentConfig, WeightRule};
use crate::error::{GmlError, Result};
use crate::gossip::{communication_totals, run_gml, CommTotals, EventLog, SiteState};
use crate::metrics::{mean_dsc_ensemble, mean_dsc_model, EvalReport, EvalRow, Split};
use crate::model::{checkpoint_write, ModelWeights};
use crate::rng::Rng;
use crate::synth::{dataset_write, generate_site, split_dataset, Case, Dataset};

/// Training strategy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Gml,
    Fedavg,
    Pooled,
    Individual,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Gml, Method::Fedavg, Method::Pooled, Method::Individual];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gml => "gml",
            Method::Fedavg => "fedavg",
            Method::Pooled => "pooled",
            Method::Individual => "individual",
        }
    }

    /// Whether the method produces one model per site (vs one global model).
    pub fn is_site_model(self) -> bool {
        matches!(self, Method::Gml | Method::Individual)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = GmlError;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| GmlError::InvalidConfig {
                field: "method".into(),
                reason: format!("unknown method {s:?}"),
            })
    }
}

/// One participant site's generated data, already split.
#[derive(Debug, Clone)]
pub struct SiteData {
    pub full: Dataset,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SiteData {
    pub fn site_id(&self) -> &str {
        &self.full.site_id
    }
}

/// Everything the training phase consumes.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub participants: Vec<SiteData>,
    /// Held-out sites are never split: all their cases are test data.
    pub held_out: Vec<Dataset>,
}

/// Generates and splits all sites' data from config-derived seed streams.
///
/// Each site draws from its own stream, so adding or reordering sites never
/// perturbs another site's cases.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let mut participants = Vec::with_capacity(cfg.sites.len());
    for spec in &cfg.sites {
        let mut gen_rng = Rng::derive(cfg.seed, &format!("data/site/{}", spec.site_id));
        let full = generate_site(spec, cfg.image_extent, &mut gen_rng)?;
        let mut split_rng = Rng::derive(cfg.seed, &format!("split/site/{}", spec.site_id));
        let (train, val, test) = split_dataset(&full, &cfg.split, &mut split_rng)?;
        log::info!(
            "site {}: {} cases (train {}, val {}, test {})",
            spec.site_id,
            full.len(),
            train.len(),
            val.len(),
            test.len()
        );
        participants.push(SiteData {
            full,
            train,
            val,
            test,
        });
    }
    let mut held_out = Vec::with_capacity(cfg.held_out_sites.len());
    for spec in &cfg.held_out_sites {
        let mut gen_rng = Rng::derive(cfg.seed, &format!("data/site/{}", spec.site_id));
        let d = generate_site(spec, cfg.image_extent, &mut gen_rng)?;
        log::info!("held-out site {}: {} cases", spec.site_id, d.len());
        held_out.push(d);
    }
    Ok(PreparedData {
        participants,
        held_out,
    })
}

/// In-memory result of one training run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// `(site_id, final model)` per site, or a single `("global", model)`.
    pub site_models: Vec<(String, ModelWeights)>,
    pub events: EventLog,
    pub report: EvalReport,
    /// Present for site-model methods only.
    pub ensemble_report: Option<EvalReport>,
}

fn init_model(cfg: &ExperimentConfig, label: &str) -> Result<ModelWeights> {
    let mut rng = Rng::derive(cfg.seed, label);
    ModelWeights::init(cfg.model.arch, &mut rng)
}

fn site_states(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    mut init: impl FnMut(&str) -> Result<ModelWeights>,
) -> Result<Vec<SiteState>> {
    let n_params = cfg.model.arch.param_count();
    data.participants
        .iter()
        .map(|sd| {
            SiteState::new(
                sd.train.clone(),
                sd.val.clone(),
                init(sd.site_id())?,
                cfg.model.make_opt(n_params),
            )
        })
        .collect()
}

/// Runs one method end to end in memory: no filesystem access.
pub fn run_experiment(cfg: &ExperimentConfig, method: Method) -> Result<RunOutput> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    run_with_data(cfg, method, &data)
}

fn run_with_data(cfg: &ExperimentConfig, method: Method, data: &PreparedData) -> Result<RunOutput> {
    log::info!("training method {method} for {} rounds", cfg.schedule.total_rounds);
    let (site_models, events) = match method {
        Method::Gml => {
            let sites = site_states(cfg, data, |id| init_model(cfg, &format!("init/site/{id}")))?;
            let protocol_rng = Rng::derive(cfg.seed, "protocol");
            let (sites, events) = run_gml(sites, &cfg.schedule, &cfg.loss, &protocol_rng)?;
            (final_models(data, sites), events)
        }
        Method::Individual => {
            let sites = site_states(cfg, data, |id| init_model(cfg, &format!("init/site/{id}")))?;
            let (sites, events) = run_individual(sites, &cfg.schedule, &cfg.loss)?;
            (final_models(data, sites), events)
        }
        Method::Fedavg => {
            let shared = init_model(cfg, "init/global")?;
            let sites = site_states(cfg, data, |_| Ok(shared.clone()))?;
            let (global, events) = run_fedavg(sites, &cfg.schedule, &cfg.loss)?;
            (vec![("global".to_string(), global)], events)
        }
        Method::Pooled => {
            let model = init_model(cfg, "init/global")?;
            let opt = cfg.model.make_opt(cfg.model.arch.param_count());
            let union: Vec<Case> = data
                .participants
                .iter()
                .flat_map(|sd| sd.train.cases.iter().cloned())
                .collect();
            let pool_rng = Rng::derive(cfg.seed, "pooled/shuffle");
            let (global, events) =
                run_pooled(&union, &cfg.schedule, &cfg.loss, model, opt, &pool_rng)?;
            (vec![("global".to_string(), global)], events)
        }
    };
    let (report, ensemble_report) = evaluate(cfg, method, data, &site_models)?;
    log::info!(
        "{method}: aggregated local-test DSC {:.4}",
        report.aggregated_dsc
    );
    Ok(RunOutput {
        site_models,
        events,
        report,
        ensemble_report,
    })
}

fn final_models(data: &PreparedData, sites: Vec<SiteState>) -> Vec<(String, ModelWeights)> {
    data.participants
        .iter()
        .zip(sites)
        .map(|(sd, st)| (sd.site_id().to_string(), st.model))
        .collect()
}

/// Per-site aggregation weights from config: local-test case counts or the
/// explicit list.
fn local_weights(cfg: &ExperimentConfig, data: &PreparedData) -> Vec<f64> {
    match &cfg.eval.aggregation_weights {
        AggregationWeights::Named(WeightRule::TestCounts) => data
            .participants
            .iter()
            .map(|sd| sd.test.len() as f64)
            .collect(),
        AggregationWeights::Explicit(w) => w.clone(),
    }
}

fn evaluate(
    cfg: &ExperimentConfig,
    method: Method,
    data: &PreparedData,
    site_models: &[(String, ModelWeights)],
) -> Result<(EvalReport, Option<EvalReport>)> {
    let thr = cfg.eval.threshold;
    let weights = local_weights(cfg, data);
    let held_union: Vec<Case> = data
        .held_out
        .iter()
        .flat_map(|d| d.cases.iter().cloned())
        .collect();

    if method.is_site_model() {
        // Site-model report: each site's own model on its local test, then on
        // the pooled held-out cases; both aggregates use the configured
        // per-site weights so the two columns are comparable.
        let mut rows = Vec::new();
        for (sd, (id, model)) in data.participants.iter().zip(site_models) {
            debug_assert_eq!(sd.site_id(), id);
            rows.push(EvalRow {
                site_id: id.clone(),
                split: Split::LocalTest,
                n_cases: sd.test.len(),
                mean_dsc: mean_dsc_model(model, &sd.test.cases, thr)?,
            });
        }
        if !held_union.is_empty() {
            for (id, model) in site_models {
                rows.push(EvalRow {
                    site_id: id.clone(),
                    split: Split::OutOfSample,
                    n_cases: held_union.len(),
                    mean_dsc: mean_dsc_model(model, &held_union, thr)?,
                });
            }
        }
        let report = EvalReport::new(method.as_str(), rows, &weights, Some(&weights))?;

        // Ensemble report: the bagged predictor on each site's local test and
        // each held-out site separately.
        let models: Vec<ModelWeights> = site_models.iter().map(|(_, m)| m.clone()).collect();
        let mut rows = Vec::new();
        for sd in &data.participants {
            rows.push(EvalRow {
                site_id: sd.site_id().to_string(),
                split: Split::LocalTest,
                n_cases: sd.test.len(),
                mean_dsc: mean_dsc_ensemble(&models, &sd.test.cases, thr)?,
            });
        }
        for d in &data.held_out {
            rows.push(EvalRow {
                site_id: d.site_id.clone(),
                split: Split::OutOfSample,
                n_cases: d.len(),
                mean_dsc: mean_dsc_ensemble(&models, &d.cases, thr)?,
            });
        }
        let ensemble = EvalReport::new(&format!("{method}-ensemble"), rows, &weights, None)?;
        Ok((report, Some(ensemble)))
    } else {
        // Global-model report: the single model on each site's local test and
        // each held-out site.
        let (_, global) = &site_models[0];
        let mut rows = Vec::new();
        for sd in &data.participants {
            rows.push(EvalRow {
                site_id: sd.site_id().to_string(),
                split: Split::LocalTest,
                n_cases: sd.test.len(),
                mean_dsc: mean_dsc_model(global, &sd.test.cases, thr)?,
            });
        }
        for d in &data.held_out {
            rows.push(EvalRow {
                site_id: d.site_id.clone(),
                split: Split::OutOfSample,
                n_cases: d.len(),
                mean_dsc: mean_dsc_model(global, &d.cases, thr)?,
            });
        }
        let report = EvalReport::new(method.as_str(), rows, &weights, None)?;
        Ok((report, None))
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| GmlError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| GmlError::io(path, e))
}

/// Writes every generated dataset (participants and held-out) under
/// `out_dir/data/`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let dir = out_dir.join("data");
    create_dir(&dir)?;
    let mut paths = Vec::new();
    for d in data.participants.iter().map(|sd| &sd.full).chain(&data.held_out) {
        let path = dir.join(format!("{}.gmld", d.site_id));
        dataset_write(d, &path)?;
        log::info!("wrote {}", path.display());
        paths.push(path);
    }
    Ok(paths)
}

/// Runs one method and persists the full artifact tree under
/// `out_dir/{method}/`. Any existing tree for that method is replaced; on
/// failure the partial tree is removed.
pub fn cmd_run(cfg: &ExperimentConfig, method: Method, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let out = run_with_data(cfg, method, &data)?;
    let dir = out_dir.join(method.as_str());
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| GmlError::io(&dir, e))?;
    }
    let write = |out: &RunOutput| -> Result<()> {
        create_dir(&dir.join("data"))?;
        create_dir(&dir.join("checkpoints"))?;
        write_bytes(&dir.join("config.json"), cfg.to_json().as_bytes())?;
        for d in data.participants.iter().map(|sd| &sd.full).chain(&data.held_out) {
            dataset_write(d, &dir.join("data").join(format!("{}.gmld", d.site_id)))?;
        }
        for (id, model) in &out.site_models {
            let bytes = checkpoint_write(model)?;
            write_bytes(&dir.join("checkpoints").join(format!("{id}.gmlw")), &bytes)?;
        }
        out.events.write_jsonl(&dir.join("events.jsonl"))?;
        write_bytes(&dir.join("report.csv"), out.report.to_csv().as_bytes())?;
        write_bytes(&dir.join("report.json"), out.report.to_json()?.as_bytes())?;
        if let Some(e) = &out.ensemble_report {
            write_bytes(&dir.join("ensemble_report.csv"), e.to_csv().as_bytes())?;
            write_bytes(&dir.join("ensemble_report.json"), e.to_json()?.as_bytes())?;
        }
        Ok(())
    };
    if let Err(e) = write(&out) {
        let _ = fs::remove_dir_all(&dir);
        return Err(e);
    }
    log::info!("run artifacts in {}", dir.display());
    Ok(dir)
}

/// One completed run found on disk.
#[derive(Debug)]
struct RunArtifacts {
    dir: PathBuf,
    method: Method,
    report: EvalReport,
    ensemble: Option<EvalReport>,
    totals: CommTotals,
}

fn load_run(dir: &Path, method: Method) -> Result<RunArtifacts> {
    let mdir = dir.join(method.as_str());
    let report_path = mdir.join("report.json");
    let text = fs::read_to_string(&report_path).map_err(|e| GmlError::io(&report_path, e))?;
    let report = EvalReport::from_json(&text)?;
    let events_path = mdir.join("events.jsonl");
    if !events_path.exists() {
        return Err(GmlError::MissingArtifact(events_path));
    }
    let events = EventLog::read_jsonl(&events_path)?;
    let epath = mdir.join("ensemble_report.json");
    let ensemble = if epath.exists() {
        let text = fs::read_to_string(&epath).map_err(|e| GmlError::io(&epath, e))?;
        Some(EvalReport::from_json(&text)?)
    } else {
        None
    };
    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        method,
        report,
        ensemble,
        totals: communication_totals(&events),
    })
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// Scans each directory for completed runs and renders the comparison
/// tables: per-site local DSC, local vs out-of-sample aggregates,
/// global/ensemble models, and communication totals with the GML:FedAvg
/// message ratio.
pub fn cmd_compare(dirs: &[PathBuf]) -> Result<String> {
    let mut runs = Vec::new();
    for dir in dirs {
        let before = runs.len();
        for method in Method::ALL {
            let mdir = dir.join(method.as_str());
            if mdir.is_dir() {
                runs.push(load_run(dir, method)?);
            }
        }
        if runs.len() == before {
            return Err(GmlError::MissingArtifact(dir.join("<method>/report.json")));
        }
    }
    if runs.len() < 2 {
        return Err(GmlError::MissingArtifact(
            dirs.first().cloned().unwrap_or_default().join("<second run>"),
        ));
    }

    let mut site_order: Vec<String> = Vec::new();
    for r in &runs {
        for row in &r.report.rows {
            if row.split == Split::LocalTest && !site_order.contains(&row.site_id) {
                site_order.push(row.site_id.clone());
            }
        }
    }

    let mut s = String::new();

    s.push_str("# site models on local test\n");
    s.push_str(&format!("dir,method,{},aggregate\n", site_order.join(",")));
    for r in &runs {
        let mut cells = Vec::new();
        for site in &site_order {
            let v = r
                .report
                .rows
                .iter()
                .find(|row| row.split == Split::LocalTest && &row.site_id == site)
                .map(|row| fmt4(row.mean_dsc))
                .unwrap_or_default();
            cells.push(v);
        }
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.dir.display(),
            r.method,
            cells.join(","),
            fmt4(r.report.aggregated_dsc)
        ));
    }

    s.push_str("\n# local test vs out-of-sample (aggregated)\n");
    s.push_str("dir,method,local_test,out_of_sample\n");
    for r in &runs {
        let oos = r
            .report
            .aggregated_out_of_sample
            .map(fmt4)
            .unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.dir.display(),
            r.method,
            fmt4(r.report.aggregated_dsc),
            oos
        ));
    }

    s.push_str("\n# global and ensemble models\n");
    s.push_str("dir,model,local_test,out_of_sample\n");
    for r in &runs {
        let rep = r.ensemble.as_ref().unwrap_or(&r.report);
        let oos = rep.aggregated_out_of_sample.map(fmt4).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.dir.display(),
            rep.method,
            fmt4(rep.aggregated_dsc),
            oos
        ));
    }

    s.push_str("\n# communication\n");
    s.push_str("dir,method,messages,bytes\n");
    for r in &runs {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.dir.display(),
            r.method,
            r.totals.messages,
            r.totals.bytes
        ));
    }
    let gml_msgs: Option<usize> = runs
        .iter()
        .find(|r| r.method == Method::Gml)
        .map(|r| r.totals.messages);
    let fed_msgs: Option<usize> = runs
        .iter()
        .find(|r| r.method == Method::Fedavg)
        .map(|r| r.totals.messages);
    if let (Some(g), Some(f)) = (gml_msgs, fed_msgs) {
        if f > 0 {
            s.push_str(&format!(
                "gml_to_fedavg_message_ratio,{}\n",
                fmt4(g as f64 / f as f64)
            ));
        }
    }
    Ok(s)
}
