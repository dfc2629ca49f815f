use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::admm::{ModelConfig, ModelKind, ModelState, RoutingMode};
use crate::diffcore::ParamKind;
use crate::error::{Error, Result};
use crate::features::FeatureSchema;

pub const DEFAULT_PROFILE_BATCH: usize = 4096;

pub const FLOPS_CONVENTION: &str = "forward pass only; dense in->out = 2*in*out per sample \
(one multiply-add = 2 FLOPs, bias folded in); batch norm, prelu, sigmoid, softmax, soft mixing \
and fusion add = 1 per element; quantization = 3*m*d_c per sample; embedding lookups = 0; \
hard routing counts one specific map per sample, soft routing counts all N";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub module: String,
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub batch_size: usize,
    pub flops: u64,
    pub params: u64,
    pub modules: Vec<ModuleCost>,
    pub convention: String,
}

impl CostReport {
    pub fn module(&self, name: &str) -> Option<&ModuleCost> {
        self.modules.iter().find(|m| m.module == name)
    }
}

fn dense(fan_in: usize, fan_out: usize) -> u64 {
    2 * (fan_in * fan_out) as u64
}

/// dense → batch norm → prelu.
fn block(fan_in: usize, fan_out: usize) -> u64 {
    dense(fan_in, fan_out) + 2 * fan_out as u64
}

/// Encoder/decoder stack of blocks.
fn mlp(fan_in: usize, widths: &[usize]) -> u64 {
    let mut w = fan_in;
    let mut total = 0;
    for &o in widths {
        total += block(w, o);
        w = o;
    }
    total
}

/// Per-sample forward FLOPs by module, from the architecture alone.
pub fn flops_per_sample(config: &ModelConfig, schema: &FeatureSchema) -> Vec<(String, u64)> {
    let h = config.hidden;
    let n = config.domains();
    let mut out = vec![("embeddings".to_string(), 0)];
    let mut proj = 0;
    let mut w = schema.embedded_width();
    for _ in 0..config.projection_blocks {
        proj += block(w, h);
        w = h;
    }
    out.push(("projection".into(), proj));
    let adaptive = config.kind == ModelKind::Adaptive;
    let soft = adaptive && config.routing.mode == RoutingMode::Soft;
    if config.has_miner() {
        let d_c = config.dmm.latent_width(h);
        out.push(("dmm.encoder".into(), mlp(h, &config.dmm.encoder_widths_for(h))));
        out.push(("dmm.quantize".into(), 3 * (n * d_c) as u64));
        out.push(("dmm.decoder".into(), mlp(d_c, &config.dmm.decoder_widths_for(h))));
        if soft {
            out.push(("routing.soft_weights".into(), 3 * (n * d_c) as u64 + n as u64));
        }
    }
    for l in 0..config.fusion_layers {
        out.push((format!("fusion.{l}.shared"), block(h, h)));
        if adaptive {
            let spec = if soft {
                n as u64 * dense(h, h) + (n * h) as u64
            } else {
                dense(h, h)
            };
            out.push((format!("fusion.{l}.specific"), spec));
            out.push((format!("fusion.{l}.fuse"), h as u64));
        }
    }
    out.push(("head".into(), dense(h, 1) + 1));
    out
}

/// Module of a stored parameter, by name.
fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["embed", ..] => "embeddings".into(),
        ["proj", ..] => "projection".into(),
        ["dmm", "enc", ..] => "dmm.encoder".into(),
        ["dmm", "dec", ..] => "dmm.decoder".into(),
        ["dmm", "codebook"] => "dmm.codebook".into(),
        ["fusion", l, "shared", ..] => format!("fusion.{l}.shared"),
        ["fusion", l, "spec", ..] => format!("fusion.{l}.specific"),
        [first, ..] => (*first).to_string(),
        [] => String::new(),
    }
}

/// Learnable scalars per module (buffers excluded).
pub fn count_params(model: &ModelState) -> Vec<(String, u64)> {
    let mut out: Vec<(String, u64)> = Vec::new();
    for (name, kind, value) in model.params.iter() {
        if kind != ParamKind::Trainable {
            continue;
        }
        let module = module_of(name);
        match out.iter_mut().find(|(m, _)| *m == module) {
            Some(entry) => entry.1 += value.len() as u64,
            None => out.push((module, value.len() as u64)),
        }
    }
    out
}

/// Forward FLOPs per module for a batch.
pub fn count_flops(model: &ModelState, batch_size: usize) -> Vec<(String, u64)> {
    flops_per_sample(&model.net.config, &model.net.schema)
        .into_iter()
        .map(|(m, f)| (m, f * batch_size as u64))
        .collect()
}

pub fn cost_report(name: &str, model: &ModelState, batch_size: usize) -> CostReport {
    let mut modules: Vec<ModuleCost> = count_flops(model, batch_size)
        .into_iter()
        .map(|(module, flops)| ModuleCost { module, flops, params: 0 })
        .collect();
    for (module, params) in count_params(model) {
        match modules.iter_mut().find(|m| m.module == module) {
            Some(m) => m.params = params,
            None => modules.push(ModuleCost { module, flops: 0, params }),
        }
    }
    CostReport {
        model: name.to_string(),
        batch_size,
        flops: modules.iter().map(|m| m.flops).sum(),
        params: modules.iter().map(|m| m.params).sum(),
        modules,
        convention: FLOPS_CONVENTION.to_string(),
    }
}

/// Plain-MLP configuration whose forward FLOPs match `config`'s within
/// `tolerance` (relative), found by scanning the hidden width.
pub fn matched_mlp_config(config: &ModelConfig, schema: &FeatureSchema, tolerance: f64) -> Result<ModelConfig> {
    let total = |c: &ModelConfig| -> u64 { flops_per_sample(c, schema).iter().map(|(_, f)| f).sum() };
    let target = total(config) as f64;
    let candidate = |h: usize| {
        let mut c = config.clone();
        c.kind = ModelKind::Mlp;
        c.hidden = h;
        c
    };
    let mut best: Option<(f64, ModelConfig)> = None;
    for h in 1..=16 * config.hidden.max(8) {
        let c = candidate(h);
        let flops = total(&c) as f64;
        let gap = (flops - target).abs() / target;
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, c));
        }
        if flops > target * (1.0 + tolerance) {
            break;
        }
    }
    match best {
        Some((gap, c)) if gap <= tolerance => Ok(c),
        Some((gap, _)) => Err(Error::Config(format!(
            "no plain MLP width matches the model's FLOPs within {:.1}% (closest {:.1}%)",
            tolerance * 100.0,
            gap * 100.0
        ))),
        None => Err(Error::Config("empty width search".into())),
    }
}

/// Aligned text table: model, FLOPs, params and, when known, AUC.
pub fn render_table(rows: &[(&CostReport, Option<f64>)]) -> String {
    let mut s = String::new();
    if let Some((first, _)) = rows.first() {
        let _ = writeln!(s, "batch size {}", first.batch_size);
    }
    let _ = writeln!(s, "{:<24} {:>18} {:>14} {:>8}", "model", "FLOPs", "params", "AUC");
    for (r, auc) in rows {
        let auc = auc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        let _ = writeln!(s, "{:<24} {:>18} {:>14} {:>8}", r.model, r.flops, r.params, auc);
    }
    s
}
