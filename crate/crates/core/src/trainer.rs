//! Co-training of the domain miner and the main network, early stopping,
//! evaluation and training artifacts.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::admm::{ForwardOptions, ForwardOutput, ModelConfig, ModelKind, ModelState};
use crate::data::Dataset;
use crate::diffcore::{adamw_step, load_checkpoint, save_checkpoint, BnMode, Graph, OptimizerConfig, ParamStore, Var};
use crate::error::{Error, Result};
use crate::evalprof::{auc, cluster_accuracy, logloss, nmi, MetricsReport, MAX_MATCH_CLUSTERS};
use crate::features::{FeatureRecord, FeatureSchema};
use crate::layers::apply_buffer_updates;

/// Which terms enter the summed loss. Both are on in normal training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossTerms {
    pub dmm: bool,
    pub task: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms { dmm: true, task: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub patience: usize,
    pub deterministic: bool,
    /// Applied to the shared and specific outputs only.
    pub dropout: f64,
    /// Route every sample to domain 0 for this many initial batches.
    pub dmm_warmup_batches: usize,
    pub loss_terms: LossTerms,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 256,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            patience: 1,
            deterministic: true,
            dropout: 0.0,
            dmm_warmup_batches: 0,
            loss_terms: LossTerms::default(),
            eval_batch_size: 4096,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("training.epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("training.batch_size must be >= 2".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("training.eval_batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("training.dropout must be in [0, 1)".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dmm: f64,
    pub task: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(dmm: f64, task: f64) -> Self {
        LossBreakdown {
            dmm,
            task,
            total: total_loss(dmm, task),
        }
    }
}

/// `L = L_d + L_task`.
pub fn total_loss(dmm: f64, task: f64) -> f64 {
    dmm + task
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_auc: f64,
    pub val_logloss: f64,
    /// Codebook usage over the epoch's batches (empty without a miner).
    pub usage: Vec<usize>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Loss components of the very first training batch.
    pub first_batch: LossBreakdown,
    /// Loss components of every batch, in order.
    pub batch_losses: Vec<LossBreakdown>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn val_aucs(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_auc).collect()
    }

    /// History without wall-clock times, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainHistory {
        let mut h = self.clone();
        h.epochs.iter_mut().for_each(|e| e.wall_time_secs = 0.0);
        h
    }

    /// CSV with columns `epoch, L_d, L_task, L, val_auc, val_logloss`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "L_d", "L_task", "L", "val_auc", "val_logloss"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:e}", e.loss.dmm),
                format!("{:e}", e.loss.task),
                format!("{:e}", e.loss.total),
                format!("{:e}", e.val_auc),
                format!("{:e}", e.val_logloss),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EarlyStop {
    Continue,
    /// Stop; the 1-based epoch with the best validation AUC.
    Stop { best_epoch: usize },
}

/// Best epoch (1-based, earliest among ties) of a non-empty AUC series.
pub fn best_epoch(aucs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &a) in aucs.iter().enumerate() {
        if a > aucs[best] {
            best = i;
        }
    }
    best + 1
}

/// Stops once the best AUC is `patience` epochs old (at least one).
pub fn early_stop(aucs: &[f64], patience: usize) -> EarlyStop {
    if aucs.is_empty() {
        return EarlyStop::Continue;
    }
    let best = best_epoch(aucs);
    let since = aucs.len() - best;
    if since > 0 && since >= patience {
        EarlyStop::Stop { best_epoch: best }
    } else {
        EarlyStop::Continue
    }
}

fn task_targets(batch: &[&FeatureRecord]) -> Vec<f64> {
    batch.iter().map(|r| r.label).collect()
}

struct BatchLoss {
    parts: LossBreakdown,
    total: Option<Var>,
}

fn batch_loss(g: &mut Graph<'_>, out: &ForwardOutput, batch: &[&FeatureRecord], terms: &LossTerms) -> Result<BatchLoss> {
    let task = g.bce(out.prob, &task_targets(batch))?;
    let dmm = out.dmm.as_ref().map(|d| d.loss);
    let dmm_value = dmm.map_or(0.0, |v| g.value(v).item());
    let task_value = g.value(task).item();
    let mut total = None;
    if terms.task {
        total = Some(task);
    }
    if let (true, Some(d)) = (terms.dmm, dmm) {
        total = Some(match total {
            Some(t) => g.add(d, t)?,
            None => d,
        });
    }
    Ok(BatchLoss {
        parts: LossBreakdown::new(
            if terms.dmm { dmm_value } else { 0.0 },
            if terms.task { task_value } else { 0.0 },
        ),
        total,
    })
}

/// Runs the co-training loop and returns the model restored to its best
/// validation epoch together with the history.
pub fn train(mut model: ModelState, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<(ModelState, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Contract("validation split is empty".into()));
    }
    if !cfg.deterministic {
        log::info!("non-deterministic mode requested; training still runs single-threaded");
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0d20_f00d);
    let mut dmm_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0de_b00c);

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut global_batch = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut sums = (0.0, 0.0, 0usize);
        let mut usage = vec![0usize; model.net.dmm.as_ref().map_or(0, |d| d.m())];

        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&FeatureRecord> = chunk.iter().map(|&i| &train_set.records[i]).collect();
            maybe_seed_codebook(&mut model, &batch, cfg, &mut dmm_rng)?;

            let route_override = (global_batch < cfg.dmm_warmup_batches).then_some(0);
            let (parts, grads, updates, assignment) = {
                let mut g = Graph::new(&model.params);
                let mut opts = ForwardOptions {
                    mode: BnMode::Train,
                    dropout: cfg.dropout,
                    rng: Some(&mut dropout_rng),
                    route_override,
                };
                let out = model.forward(&mut g, &batch, &mut opts)?;
                let loss = batch_loss(&mut g, &out, &batch, &cfg.loss_terms)?;
                if !loss.parts.total.is_finite() || !loss.parts.dmm.is_finite() || !loss.parts.task.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b + 1,
                        dmm_loss: loss.parts.dmm,
                        task_loss: loss.parts.task,
                    });
                }
                let grads = match loss.total {
                    Some(t) => Some(g.backward(t)?),
                    None => None,
                };
                let assignment = out.dmm.as_ref().map(|d| d.assignment.clone());
                (loss.parts, grads, g.take_buffer_updates(), assignment)
            };
            apply_buffer_updates(&mut model.params, updates);
            if let Some(grads) = grads.filter(|g| !g.params.is_empty()) {
                model.params.set_grads(grads.params);
                adamw_step(&mut model.params, &cfg.optimizer)?;
            }
            if let (Some(dmm), Some(a)) = (model.net.dmm.as_ref(), assignment) {
                let hist = dmm.usage_stats(&mut model.params, &a.k, &a.z_e, &mut dmm_rng)?;
                usage.iter_mut().zip(hist).for_each(|(u, h)| *u += h);
            }

            if history.batch_losses.is_empty() {
                history.first_batch = parts;
            }
            history.batch_losses.push(parts);
            sums.0 += parts.dmm;
            sums.1 += parts.task;
            sums.2 += 1;
            global_batch += 1;
        }

        let n = sums.2.max(1) as f64;
        let report = evaluate(&model, val_set, cfg.eval_batch_size)?;
        history.epochs.push(EpochRecord {
            epoch,
            loss: LossBreakdown::new(sums.0 / n, sums.1 / n),
            val_auc: report.auc,
            val_logloss: report.logloss,
            usage,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: L_d={:.5} L_task={:.5} val_auc={:.5} val_logloss={:.5}",
            sums.0 / n,
            sums.1 / n,
            report.auc,
            report.logloss
        );
        if best.as_ref().is_none_or(|(a, _)| report.auc > *a) {
            best = Some((report.auc, model.params.clone()));
        }
        if let EarlyStop::Stop { .. } = early_stop(&history.val_aucs(), cfg.patience) {
            history.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    history.best_epoch = best_epoch(&history.val_aucs());
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, history))
}

/// Seeds the codebook from the first batch's encoder outputs, once.
fn maybe_seed_codebook(model: &mut ModelState, batch: &[&FeatureRecord], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let Some(dmm) = model.net.dmm.as_ref() else {
        return Ok(());
    };
    if !cfg.loss_terms.dmm || dmm.is_ready(&model.params) {
        return Ok(());
    }
    let z_e = {
        let mut g = Graph::new(&model.params);
        let embedded = model.net.embeddings.embed(&mut g, batch)?;
        let z = model.net.projection.forward(&mut g, &embedded, BnMode::Train)?;
        let z = g.stop_gradient(z);
        let z_e = dmm.encode(&mut g, z, BnMode::Train)?;
        g.value(z_e).clone()
    };
    let dmm = dmm.clone();
    dmm.seed_codebook(&mut model.params, &z_e, rng)
}

/// AUC and LogLoss over a split in eval mode; NMI and cluster accuracy of
/// the mined assignments when the split carries truth domains.
pub fn evaluate(model: &ModelState, split: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let (probs, route) = predict_all(model, &split.records, batch_size)?;
    let labels = split.labels();
    let mut report = MetricsReport {
        auc: auc(&probs, &labels)?,
        logloss: logloss(&probs, &labels)?,
        nmi: None,
        cluster_accuracy: None,
        samples: split.len(),
    };
    if let (Some(truth), true) = (split.truth(), model.net.config.kind == ModelKind::Adaptive) {
        report.nmi = Some(nmi(&route, &truth)?);
        if model.net.domains() <= MAX_MATCH_CLUSTERS {
            report.cluster_accuracy = Some(cluster_accuracy(&route, &truth)?);
        }
    }
    Ok(report)
}

/// Eval-mode probabilities and routes for every record.
pub fn predict_all(model: &ModelState, records: &[FeatureRecord], batch_size: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut probs = Vec::with_capacity(records.len());
    let mut route = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let batch: Vec<&FeatureRecord> = chunk.iter().collect();
        let (p, r) = model.predict_batch(&batch)?;
        probs.extend(p);
        route.extend(r);
    }
    Ok((probs, route))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    schema: FeatureSchema,
    schema_fingerprint: u64,
    #[serde(default)]
    note: serde_json::Value,
}

/// Checkpoint with the architecture and schema in its metadata block.
pub fn save_model(path: &Path, model: &ModelState, note: serde_json::Value) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.net.config.clone(),
        schema: model.net.schema.clone(),
        schema_fingerprint: model.net.schema.fingerprint(),
        note,
    };
    save_checkpoint(path, &model.params, &serde_json::to_string(&meta)?)
}

/// Rebuilds the network from the checkpoint metadata and loads its values.
pub fn load_model(path: &Path) -> Result<(ModelState, serde_json::Value)> {
    let (store, meta) = load_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&meta)?;
    if meta.schema.fingerprint() != meta.schema_fingerprint {
        return Err(Error::Format("checkpoint schema fingerprint does not match its schema".into()));
    }
    let mut model = ModelState::build(meta.model, &meta.schema, 0)?;
    model.params.load_values_from(&store)?;
    Ok((model, meta.note))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admm::ModelConfig;
    use crate::data::{generate_synthetic, split, SplitSpec, SyntheticConfig};
    use crate::diffcore::{finite_diff_check_params, ParamKind};
    use crate::dmm::DmmConfig;

    fn small_data(samples: usize) -> (Dataset, Dataset, Dataset) {
        let ds = generate_synthetic(&SyntheticConfig {
            domains: 2,
            fields: 4,
            vocab: 10,
            samples,
            seed: 4,
            embedding_dim: 4,
            ..Default::default()
        })
        .unwrap();
        split(&ds, &SplitSpec::default()).unwrap()
    }

    fn small_model(schema: &FeatureSchema) -> ModelState {
        let cfg = ModelConfig {
            hidden: 8,
            fusion_layers: 2,
            dmm: DmmConfig {
                m: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        ModelState::build(cfg, schema, 3).unwrap()
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(0.3, 0.4) - 0.7).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.55), 0.55);
        let parts = LossBreakdown::new(0.3, 0.4);
        assert_eq!(parts.total, parts.dmm + parts.task);
    }

    #[test]
    fn early_stop_examples() {
        let aucs = [0.70, 0.71, 0.705, 0.704];
        assert_eq!(early_stop(&aucs[..3], 2), EarlyStop::Continue);
        assert_eq!(early_stop(&aucs, 2), EarlyStop::Stop { best_epoch: 2 });
        let rising = [0.5, 0.6, 0.7, 0.8];
        for n in 1..=4 {
            assert_eq!(early_stop(&rising[..n], 1), EarlyStop::Continue);
        }
        assert_eq!(early_stop(&[0.7, 0.7], 0), EarlyStop::Stop { best_epoch: 1 });
        assert_eq!(early_stop(&[0.7], 0), EarlyStop::Continue);
    }

    #[test]
    fn shared_weight_gradient_ignores_dmm_loss() {
        let (tr, _, _) = small_data(64);
        let mut model = small_model(&tr.schema);
        let batch: Vec<&FeatureRecord> = tr.records.iter().take(16).collect();
        let shared_w = model.net.layers[0].shared.dense.w;
        let grad_of = |params: &ParamStore, terms: &LossTerms| {
            let mut g = Graph::new(params);
            let out = model.net.forward(&mut g, &batch, &mut ForwardOptions::train()).unwrap();
            let loss = batch_loss(&mut g, &out, &batch, terms).unwrap();
            g.backward(loss.total.unwrap()).unwrap().param(shared_w).cloned().unwrap()
        };
        let both = grad_of(&model.params, &LossTerms::default());
        let task_only = grad_of(&model.params, &LossTerms { dmm: false, task: true });
        assert_eq!(both, task_only);

        // The task-only gradient itself agrees with finite differences.
        let net = model.net.clone();
        let err = finite_diff_check_params(&mut model.params, &[shared_w], 12, 1e-5, |p| {
            let mut g = Graph::new(p);
            let out = net.forward(&mut g, &batch, &mut ForwardOptions::train())?;
            let loss = batch_loss(&mut g, &out, &batch, &LossTerms { dmm: false, task: true })?;
            let t = loss.total.unwrap();
            Ok((g.value(t).item(), g.backward(t)?))
        })
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn training_is_reproducible() {
        let (tr, va, _) = small_data(400);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 32,
            patience: 5,
            ..Default::default()
        };
        let (m1, h1) = train(small_model(&tr.schema), &tr, &va, &cfg).unwrap();
        let (m2, h2) = train(small_model(&tr.schema), &tr, &va, &cfg).unwrap();
        assert_eq!(h1.without_timing(), h2.without_timing());
        assert!(m1.params.iter().zip(m2.params.iter()).all(|(a, b)| a.2 == b.2));
        assert_eq!(h1.epochs.len(), 2);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (tr, va, _) = small_data(200);
        let mut cfg = TrainConfig {
            epochs: 2,
            batch_size: 32,
            patience: 5,
            ..Default::default()
        };
        cfg.optimizer.learning_rate = 0.0;
        cfg.optimizer.weight_decay = 0.0;
        cfg.loss_terms.dmm = false;
        let model = small_model(&tr.schema);
        let before = model.params.clone();
        let (after, hist) = train(model, &tr, &va, &cfg).unwrap();
        assert_eq!(hist.epochs.len(), 2);
        for ((name, kind, a), (_, _, b)) in before.iter().zip(after.params.iter()) {
            if kind == ParamKind::Trainable {
                assert_eq!(a, b, "{name} moved");
            }
        }
    }

    #[test]
    fn dmm_loss_decreases_in_first_epoch() {
        let (tr, va, _) = small_data(1000);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 32,
            optimizer: OptimizerConfig {
                learning_rate: 3e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        let (_, hist) = train(small_model(&tr.schema), &tr, &va, &cfg).unwrap();
        assert!(hist.epochs[0].loss.dmm < hist.first_batch.dmm, "{hist:?}");
    }

    #[test]
    fn evaluation_examples() {
        let (tr, va, _) = small_data(200);
        let model = small_model(&tr.schema);
        let a = evaluate(&model, &va, 7).unwrap();
        let b = evaluate(&model, &va, 64).unwrap();
        assert_eq!(a, b);
        assert!(a.nmi.is_some() && a.cluster_accuracy.is_some());
        let empty = Dataset {
            records: Vec::new(),
            ..va.clone()
        };
        assert!(evaluate(&model, &empty, 8).is_err());

        let half = [0.5; 4];
        let labels = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(auc(&half, &labels).unwrap(), 0.5);
        assert!((logloss(&half, &labels).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(auc(&labels, &labels).unwrap(), 1.0);
    }

    #[test]
    fn checkpoint_restores_model() {
        let (tr, va, _) = small_data(100);
        let model = small_model(&tr.schema);
        let f = tempfile::NamedTempFile::new().unwrap();
        save_model(f.path(), &model, serde_json::json!({"epoch": 1})).unwrap();
        let (back, note) = load_model(f.path()).unwrap();
        assert_eq!(note["epoch"], 1);
        assert_eq!(evaluate(&model, &va, 64).unwrap(), evaluate(&back, &va, 64).unwrap());
    }
}
