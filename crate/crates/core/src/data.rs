//! Synthetic multi-domain CTR generation, CSV ingestion and splitting.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::sigmoid;
use crate::error::{Error, Result};
use crate::features::{FeatureRecord, FeatureSchema, FieldRole, FieldSpec};

pub const TRUTH_COLUMN: &str = "truth_domain";
pub const LABEL_COLUMN: &str = "label";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// True domain count `K`.
    pub domains: usize,
    /// Field count `F`.
    pub fields: usize,
    /// Vocabulary size `V` per field.
    pub vocab: usize,
    /// Dirichlet concentration `c` of the per-domain field distributions.
    pub concentration: f64,
    /// Fields whose value distribution is shared by all domains and whose
    /// weights flip sign between even and odd domains.
    pub conflict_fields: Vec<usize>,
    /// Concentration of the shared distribution of conflict fields.
    pub conflict_concentration: f64,
    /// Standard deviation of the ordinary per-domain weights.
    pub weight_scale: f64,
    /// Standard deviation of the base weights of conflict fields.
    pub conflict_scale: f64,
    /// Standard deviation of the per-domain bias `b_d`.
    pub bias_scale: f64,
    pub samples: usize,
    pub seed: u64,
    /// Hash buckets per field; defaults to `16·V`.
    pub hash_buckets: Option<usize>,
    pub embedding_dim: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            domains: 4,
            fields: 8,
            vocab: 50,
            concentration: 0.05,
            conflict_fields: Vec::new(),
            conflict_concentration: 1.0,
            weight_scale: 0.5,
            conflict_scale: 1.5,
            bias_scale: 0.0,
            samples: 20_000,
            seed: 0,
            hash_buckets: None,
            embedding_dim: 16,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic.{m}")));
        if self.domains == 0 {
            return bad("domains must be >= 1");
        }
        if self.fields == 0 || self.vocab == 0 {
            return bad("fields and vocab must be >= 1");
        }
        if !(self.concentration > 0.0 && self.conflict_concentration > 0.0) {
            return bad("concentrations must be positive");
        }
        if ![self.weight_scale, self.conflict_scale, self.bias_scale]
            .iter()
            .all(|s| s.is_finite() && *s >= 0.0)
        {
            return bad("scales must be finite and non-negative");
        }
        if let Some(&f) = self.conflict_fields.iter().find(|&&f| f >= self.fields) {
            return Err(Error::Config(format!(
                "synthetic.conflict_fields: field {f} out of range"
            )));
        }
        if self.buckets() == 0 || self.embedding_dim == 0 {
            return bad("hash_buckets and embedding_dim must be >= 1");
        }
        Ok(())
    }

    pub fn buckets(&self) -> usize {
        self.hash_buckets.unwrap_or(16 * self.vocab)
    }

    /// Fields `f0..f{F-1}`, the first half user-side, the rest item-side.
    pub fn schema(&self) -> Result<FeatureSchema> {
        FeatureSchema::new(
            (0..self.fields)
                .map(|f| FieldSpec {
                    name: format!("f{f}"),
                    role: if f < self.fields.div_ceil(2) {
                        FieldRole::User
                    } else {
                        FieldRole::Item
                    },
                    hash_buckets: self.buckets(),
                    embedding_dim: self.embedding_dim,
                })
                .collect(),
        )
    }
}

/// The generative tables behind a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticModel {
    /// `probs[d][f][v]`.
    pub probs: Vec<Vec<Vec<f64>>>,
    /// `weights[d][f][v]`.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub bias: Vec<f64>,
}

impl SyntheticModel {
    pub fn sample<R: Rng>(cfg: &SyntheticConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (k, nf, v) = (cfg.domains, cfg.fields, cfg.vocab);
        let is_conflict = |f: usize| cfg.conflict_fields.contains(&f);
        let shared: Vec<Vec<f64>> = (0..nf)
            .map(|_| dirichlet(v, cfg.conflict_concentration, rng))
            .collect();
        let base = normal_table(nf, v, cfg.conflict_scale, rng)?;

        let mut probs = Vec::with_capacity(k);
        let mut weights = Vec::with_capacity(k);
        for d in 0..k {
            probs.push(
                (0..nf)
                    .map(|f| {
                        if is_conflict(f) {
                            shared[f].clone()
                        } else {
                            dirichlet(v, cfg.concentration, rng)
                        }
                    })
                    .collect::<Vec<_>>(),
            );
            let own = normal_table(nf, v, cfg.weight_scale, rng)?;
            let sign = if d % 2 == 0 { 1.0 } else { -1.0 };
            weights.push(
                (0..nf)
                    .map(|f| {
                        if is_conflict(f) {
                            base[f].iter().map(|w| sign * w).collect()
                        } else {
                            own[f].clone()
                        }
                    })
                    .collect::<Vec<_>>(),
            );
        }
        let bias_dist = Normal::new(0.0, cfg.bias_scale).map_err(|e| Error::Config(e.to_string()))?;
        let bias = (0..k).map(|_| bias_dist.sample(rng)).collect();
        Ok(SyntheticModel { probs, weights, bias })
    }

    pub fn logit(&self, domain: usize, values: &[usize]) -> f64 {
        self.bias[domain]
            + values
                .iter()
                .enumerate()
                .map(|(f, &v)| self.weights[domain][f][v])
                .sum::<f64>()
    }
}

fn dirichlet<R: Rng>(n: usize, c: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(c, 1.0).expect("positive concentration");
    let mut p: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 && total.is_finite() {
        p.iter_mut().for_each(|x| *x /= total);
    } else {
        let hot = rng.random_range(0..n);
        p.iter_mut().enumerate().for_each(|(i, x)| *x = f64::from(u8::from(i == hot)));
    }
    p
}

fn normal_table<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    Ok((0..rows)
        .map(|_| (0..cols).map(|_| dist.sample(rng)).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    Synthetic { seed: u64 },
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub records: Vec<FeatureRecord>,
    pub provenance: Provenance,
    /// Raw value indices per record, kept for synthetic data so it can be
    /// exported in ingestible form.
    pub raw_values: Option<Vec<Vec<usize>>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_truth(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.truth_domain.is_some())
    }

    pub fn truth(&self) -> Option<Vec<usize>> {
        self.records.iter().map(|r| r.truth_domain).collect()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.label).collect()
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            provenance: self.provenance.clone(),
            raw_values: self
                .raw_values
                .as_ref()
                .map(|raw| idx.iter().map(|&i| raw[i].clone()).collect()),
        }
    }
}

/// Draws a fresh generative model from the seed and samples the dataset.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = SyntheticModel::sample(cfg, &mut rng)?;
    generate_from(cfg, &model, &mut rng)
}

pub fn generate_from<R: Rng>(cfg: &SyntheticConfig, model: &SyntheticModel, rng: &mut R) -> Result<Dataset> {
    cfg.validate()?;
    let schema = cfg.schema()?;
    if model.probs.len() != cfg.domains || model.bias.len() != cfg.domains {
        return Err(Error::Config("synthetic model does not match the domain count".into()));
    }
    let samplers = model
        .probs
        .iter()
        .map(|fields| {
            fields
                .iter()
                .map(|p| WeightedIndex::new(p).map_err(|e| Error::Config(e.to_string())))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::with_capacity(cfg.samples);
    let mut raw_values = Vec::with_capacity(cfg.samples);
    for id in 0..cfg.samples {
        let d = rng.random_range(0..cfg.domains);
        let values: Vec<usize> = samplers[d].iter().map(|s| s.sample(rng)).collect();
        let p = sigmoid(model.logit(d, &values));
        let label = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
        let tokens: Vec<String> = values.iter().map(usize::to_string).collect();
        let mut rec = FeatureRecord::from_tokens(&schema, id as u64, &tokens, label)?;
        rec.truth_domain = Some(d);
        records.push(rec);
        raw_values.push(values);
    }
    Ok(Dataset {
        schema,
        records,
        provenance: Provenance::Synthetic { seed: cfg.seed },
        raw_values: Some(raw_values),
    })
}

/// Writes the field values, the label and the truth domain as CSV.
pub fn write_synthetic_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let raw = ds
        .raw_values
        .as_ref()
        .ok_or_else(|| Error::Contract("only synthetic datasets carry raw values".into()))?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = ds.schema.fields.iter().map(|f| f.name.as_str()).collect();
    header.extend([LABEL_COLUMN, TRUTH_COLUMN]);
    w.write_record(&header)?;
    for (rec, values) in ds.records.iter().zip(raw) {
        let mut row: Vec<String> = values.iter().map(usize::to_string).collect();
        row.push(format!("{}", rec.label as u8));
        row.push(rec.truth_domain.map(|d| d.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a headered CSV log. Schema fields are looked up by name; a
/// `truth_domain` column is picked up when present.
pub fn load_csv(
    path: &Path,
    schema: &FeatureSchema,
    label_column: &str,
    max_rows: Option<usize>,
) -> Result<Dataset> {
    schema.validate()?;
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Row {
            line: 1,
            message: format!("missing column {name}"),
        })
    };
    let field_cols = schema
        .fields
        .iter()
        .map(|f| column(&f.name))
        .collect::<Result<Vec<_>>>()?;
    let label_col = column(label_column)?;
    let truth_col = headers.iter().position(|h| h == TRUTH_COLUMN);

    let mut records = Vec::new();
    for row in reader.records() {
        if max_rows.is_some_and(|m| records.len() >= m) {
            break;
        }
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let cell = |c: usize| -> Result<&str> {
            row.get(c).ok_or_else(|| Error::Row {
                line,
                message: format!("missing value in column {}", &headers[c]),
            })
        };
        let label = match cell(label_col)?.trim() {
            "0" => 0.0,
            "1" => 1.0,
            other => {
                return Err(Error::Row {
                    line,
                    message: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        let tokens = field_cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>()?;
        let mut rec = FeatureRecord::from_tokens(schema, records.len() as u64, &tokens, label)?;
        if let Some(c) = truth_col {
            let raw = cell(c)?.trim();
            rec.truth_domain = Some(raw.parse().map_err(|_| Error::Row {
                line,
                message: format!("bad truth domain {raw:?}"),
            })?);
        }
        records.push(rec);
    }
    Ok(Dataset {
        schema: schema.clone(),
        records,
        provenance: Provenance::Csv {
            path: path.to_path_buf(),
        },
        raw_values: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must sum to 1".into()));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes for `n` records.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let alloc = |f: f64| ((n as f64 * f) + 1e-9).floor() as usize;
        let (val, test) = (alloc(self.val), alloc(self.test));
        (n - val - test, val, test)
    }
}

/// Seeded shuffle, then contiguous val/test/train slices.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    if ds.is_empty() {
        return Err(Error::Contract("cannot split an empty dataset".into()));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let (_, val, test) = spec.sizes(ds.len());
    let (v, rest) = idx.split_at(val);
    let (t, tr) = rest.split_at(test);
    Ok((ds.subset(tr), ds.subset(v), ds.subset(t)))
}
