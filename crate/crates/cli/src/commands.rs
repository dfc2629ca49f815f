use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use adaptive2::admm::{ForwardOptions, ModelKind, ModelState};
use adaptive2::data::Dataset;
use adaptive2::diffcore::{Graph, Tensor};
use adaptive2::dmm::{histogram, usage_entropy};
use adaptive2::evalprof::{cost_report, matched_mlp_config, pca_project, render_table, CostReport, MetricsReport, ProjectionExport, Stage};
use adaptive2::features::{FeatureRecord, FeatureSchema};
use adaptive2::trainer::{evaluate, load_model, predict_all, save_model, train, TrainHistory};
use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, RunConfig, Splits};
use crate::manifest::ExperimentManifest;

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const HISTORY: &str = "history.csv";
pub const METRICS: &str = "metrics.json";
pub const MANIFEST: &str = "manifest.json";
pub const FLOPS_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub validation: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<MetricsReport>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

pub struct TrainOutcome {
    pub model: ModelState,
    pub history: TrainHistory,
    pub metrics: RunMetrics,
    pub manifest: ExperimentManifest,
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn to_json(value: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(value).expect("serializable")
}

/// Trains on the configured data and writes checkpoint, history, metrics and
/// manifest into `dir`.
fn train_into(cfg: &RunConfig, splits: &Splits, dir: &Path) -> anyhow::Result<TrainOutcome> {
    create_dir(dir)?;
    let model = ModelState::build(cfg.model.clone(), &splits.schema, cfg.training.seed)?;
    log::info!("training {} parameters on {} samples", model.params.len(), splits.train.len());
    let (model, history) = train(model, &splits.train, &splits.val, &cfg.training)?;
    let bs = cfg.training.eval_batch_size;
    let metrics = RunMetrics {
        validation: evaluate(&model, &splits.val, bs)?,
        test: if splits.test.is_empty() { None } else { Some(evaluate(&model, &splits.test, bs)?) },
        best_epoch: history.best_epoch,
        epochs_run: history.epochs.len(),
    };
    let mut manifest = ExperimentManifest::new("train", cfg, to_json(&metrics));
    save_model(&dir.join(CHECKPOINT), &model, serde_json::json!({ "config_hash": manifest.config_hash }))?;
    history.write_csv(&dir.join(HISTORY))?;
    std::fs::write(dir.join(METRICS), serde_json::to_string_pretty(&metrics)?)?;
    manifest.files = [CHECKPOINT, HISTORY, METRICS].map(PathBuf::from).to_vec();
    manifest.write(dir, MANIFEST)?;
    Ok(TrainOutcome {
        model,
        history,
        metrics,
        manifest,
    })
}

pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<TrainOutcome> {
    let splits = cfg.splits()?;
    let out = train_into(cfg, &splits, &cfg.output_dir)?;
    let v = &out.metrics.validation;
    println!(
        "trained {} epochs (best {}); validation auc {:.4}, logloss {:.4}",
        out.metrics.epochs_run, out.metrics.best_epoch, v.auc, v.logloss
    );
    if let (Some(nmi), Some(acc)) = (v.nmi, v.cluster_accuracy) {
        println!("domain recovery: nmi {nmi:.4}, cluster accuracy {acc:.4}");
    }
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(out)
}

fn checkpoint_path(cfg: &RunConfig, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint.map_or_else(|| cfg.output_dir.join(CHECKPOINT), Path::to_path_buf)
}

/// Loads a checkpoint whose schema must match the configured data.
fn load_matching(path: &Path, schema: &FeatureSchema) -> anyhow::Result<ModelState> {
    let (model, _) = load_model(path).map_err(|e| ConfigError(format!("checkpoint {}: {e}", path.display())))?;
    if model.net.schema.fingerprint() != schema.fingerprint() {
        return Err(ConfigError(format!("checkpoint {}: its feature schema does not match the configured data", path.display())).into());
    }
    Ok(model)
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>, split_name: &str) -> anyhow::Result<MetricsReport> {
    let splits = cfg.splits()?;
    let data = splits.get(split_name)?;
    let path = checkpoint_path(cfg, checkpoint);
    let model = load_matching(&path, &splits.schema)?;
    let report = evaluate(&model, &data, cfg.training.eval_batch_size)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let name = format!("eval_{split_name}.json");
    std::fs::write(dir.join(&name), &json)?;
    let mut manifest = ExperimentManifest::new("evaluate", cfg, to_json(&report));
    manifest.files = vec![PathBuf::from(name)];
    manifest.write(dir, "manifest-evaluate.json")?;
    Ok(report)
}

/// Per-sample features at `stage` and the routed domain index, in eval mode.
pub fn stage_features(model: &ModelState, records: &[FeatureRecord], stage: Stage, batch_size: usize) -> anyhow::Result<(Tensor, Vec<usize>)> {
    let (mut data, mut k, mut cols) = (Vec::new(), Vec::with_capacity(records.len()), 0);
    for chunk in records.chunks(batch_size.max(1)) {
        let batch: Vec<&FeatureRecord> = chunk.iter().collect();
        let mut g = Graph::new(&model.params);
        let out = model.forward(&mut g, &batch, &mut ForwardOptions::eval())?;
        let x = match stage {
            Stage::PreEncoder => g.value(out.z).clone(),
            Stage::PostEncoder => match &out.dmm {
                Some(d) => d.assignment.z_e.clone(),
                None => return Err(ConfigError("--stage post needs a model with a domain miner".into()).into()),
            },
        };
        cols = x.cols();
        data.extend_from_slice(x.data());
        k.extend(out.route);
    }
    Ok((Tensor::new(vec![k.len(), cols], data)?, k))
}

pub struct ExportOutcome {
    pub domains: PathBuf,
    pub projection: PathBuf,
    pub rows: usize,
}

pub fn cmd_export_domains(cfg: &RunConfig, checkpoint: Option<&Path>, stage: Stage, split_name: &str) -> anyhow::Result<ExportOutcome> {
    let splits = cfg.splits()?;
    let data: Dataset = splits.get(split_name)?;
    let model = load_matching(&checkpoint_path(cfg, checkpoint), &splits.schema)?;
    if model.net.config.kind != ModelKind::Adaptive {
        return Err(ConfigError("export-domains needs an adaptive model; this checkpoint is a plain mlp".into()).into());
    }
    let (x, k) = stage_features(&model, &data.records, stage, cfg.training.eval_batch_size)?;
    let coords = pca_project(&x, 2)?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let domains = format!("domains_{}.csv", stage.tag());
    let projection = format!("projection_{}.csv", stage.tag());
    let mut text = String::from("sample_id,k\n");
    for (r, k) in data.records.iter().zip(&k) {
        let _ = writeln!(text, "{},{k}", r.id);
    }
    std::fs::write(dir.join(&domains), text)?;
    ProjectionExport::new(stage, coords, k.clone(), data.truth())?.write_csv(&dir.join(&projection))?;
    let hist = histogram(&k, model.net.domains())?;
    let mut manifest = ExperimentManifest::new("export-domains", cfg, serde_json::json!({ "samples": k.len(), "usage": hist }));
    manifest.files = vec![PathBuf::from(&domains), PathBuf::from(&projection)];
    manifest.write(dir, "manifest-export-domains.json")?;
    println!("wrote {} rows to {} and {}", k.len(), domains, projection);
    Ok(ExportOutcome {
        domains: dir.join(domains),
        projection: dir.join(projection),
        rows: k.len(),
    })
}

/// Cost of the configured model and of the plain MLP matched to its FLOPs.
pub fn profile_reports(model: &ModelState, batch: usize) -> anyhow::Result<Vec<CostReport>> {
    let cfg = &model.net.config;
    let schema = &model.net.schema;
    let name = match cfg.kind {
        ModelKind::Adaptive => "adaptive2",
        ModelKind::Mlp => "mlp",
    };
    let mut reports = vec![cost_report(name, model, batch)];
    if cfg.kind == ModelKind::Adaptive {
        let mlp_cfg = matched_mlp_config(cfg, schema, FLOPS_TOLERANCE)?;
        let mlp = ModelState::build(mlp_cfg.clone(), schema, 0)?;
        reports.push(cost_report(&format!("mlp (flops-matched, H={})", mlp_cfg.hidden), &mlp, batch));
    }
    Ok(reports)
}

pub enum ProfileSource<'a> {
    Config(&'a RunConfig),
    Checkpoint(&'a Path),
}

pub fn cmd_profile(source: ProfileSource<'_>, batch: usize, json: bool) -> anyhow::Result<Vec<CostReport>> {
    let model = match source {
        ProfileSource::Config(cfg) => ModelState::build(cfg.model.clone(), &cfg.schema()?, 0)?,
        ProfileSource::Checkpoint(path) => load_model(path).map_err(|e| ConfigError(format!("checkpoint {}: {e}", path.display())))?.0,
    };
    let reports = profile_reports(&model, batch)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
    } else {
        let rows: Vec<(&CostReport, Option<f64>)> = reports.iter().map(|r| (r, None)).collect();
        print!("{}", render_table(&rows));
        println!("{}", reports[0].convention);
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub val_auc: f64,
    pub nmi: Option<f64>,
    pub usage_entropy: f64,
    pub best: bool,
}

fn sweep_one(cfg: &RunConfig, splits: &Splits, m: usize) -> anyhow::Result<SweepRow> {
    let mut run = cfg.clone();
    run.model.dmm.m = m;
    run.output_dir = cfg.output_dir.join(format!("m{m}"));
    run.validate()?;
    let out = train_into(&run, splits, &run.output_dir)?;
    let (_, route) = predict_all(&out.model, &splits.val.records, run.training.eval_batch_size)?;
    Ok(SweepRow {
        m,
        val_auc: out.metrics.validation.auc,
        nmi: out.metrics.validation.nmi,
        usage_entropy: usage_entropy(&histogram(&route, m)?),
        best: false,
    })
}

/// One training run per `m` with the base seed; the best validation AUC is
/// marked. `parallel` runs that many at once.
pub fn cmd_sweep_m(cfg: &RunConfig, m_values: &[usize], parallel: usize) -> anyhow::Result<Vec<SweepRow>> {
    if m_values.is_empty() || m_values.contains(&0) {
        return Err(ConfigError("--m-values: need a non-empty list of positive integers".into()).into());
    }
    let splits = cfg.splits()?;
    let mut rows = Vec::with_capacity(m_values.len());
    for group in m_values.chunks(parallel.max(1)) {
        let results: Vec<anyhow::Result<SweepRow>> = std::thread::scope(|s| {
            let handles: Vec<_> = group.iter().map(|&m| {
                let splits = &splits;
                s.spawn(move || sweep_one(cfg, splits, m))
            }).collect();
            handles.into_iter().map(|h| h.join().expect("sweep run panicked")).collect()
        });
        for r in results {
            rows.push(r?);
        }
    }
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.val_auc > rows[b].val_auc { i } else { b });
    rows[best].best = true;

    let mut csv = String::from("m,val_auc,nmi,usage_entropy,best\n");
    let mut table = format!("{:>4} {:>8} {:>8} {:>14}\n", "m", "val_auc", "nmi", "usage_entropy");
    for r in &rows {
        let nmi = r.nmi.map_or_else(String::new, |v| format!("{v:e}"));
        let _ = writeln!(csv, "{},{:e},{},{:e},{}", r.m, r.val_auc, nmi, r.usage_entropy, r.best);
        let nmi = r.nmi.map_or_else(|| "-".into(), |v| format!("{v:.4}"));
        let mark = if r.best { " *" } else { "" };
        let _ = writeln!(table, "{:>4} {:>8.4} {:>8} {:>14.4}{mark}", r.m, r.val_auc, nmi, r.usage_entropy);
    }
    print!("{table}");
    let dir = &cfg.output_dir;
    std::fs::write(dir.join("sweep.csv"), csv)?;
    let mut manifest = ExperimentManifest::new("sweep-m", cfg, to_json(&rows));
    manifest.files.push("sweep.csv".into());
    for r in &rows {
        for f in [CHECKPOINT, HISTORY, METRICS, MANIFEST] {
            manifest.files.push(Path::new(&format!("m{}", r.m)).join(f));
        }
    }
    manifest.write(dir, "manifest-sweep-m.json")?;
    Ok(rows)
}
