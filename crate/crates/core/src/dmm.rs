//! Domain mining: a vector-quantized autoencoder over the gradient-stopped
//! projection `z`. The index of the nearest codebook vector is the sample's
//! latent domain.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BnMode, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{normal, FfnBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMetric {
    SquaredEuclidean,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmmConfig {
    /// Number of latent domains (codebook size).
    pub m: usize,
    /// Commitment cost.
    pub beta: f64,
    pub metric: QuantMetric,
    /// Output widths of the encoder layers; the last is the codebook width.
    /// Defaults to `[H, H/2, H/4]`.
    pub encoder_widths: Option<Vec<usize>>,
    /// Output widths of the decoder layers; the last must equal `H`.
    /// Defaults to `[H/2, H, H]`.
    pub decoder_widths: Option<Vec<usize>>,
    /// Feed the decoder `z_e + sg(z_q − z_e)` instead of `z_q`.
    pub straight_through: bool,
    /// Re-seed codes that go unselected for longer than `rebalance_patience` batches.
    pub usage_rebalance: bool,
    pub rebalance_patience: usize,
    /// Learning-rate multiplier for the codebook.
    pub codebook_lr_scale: f64,
}

impl Default for DmmConfig {
    fn default() -> Self {
        DmmConfig {
            m: 8,
            beta: 0.25,
            metric: QuantMetric::SquaredEuclidean,
            encoder_widths: None,
            decoder_widths: None,
            straight_through: true,
            usage_rebalance: false,
            rebalance_patience: 100,
            codebook_lr_scale: 100.0,
        }
    }
}

impl DmmConfig {
    pub fn encoder_widths_for(&self, hidden: usize) -> Vec<usize> {
        self.encoder_widths
            .clone()
            .unwrap_or_else(|| vec![hidden, (hidden / 2).max(1), (hidden / 4).max(1)])
    }

    pub fn decoder_widths_for(&self, hidden: usize) -> Vec<usize> {
        self.decoder_widths
            .clone()
            .unwrap_or_else(|| vec![(hidden / 2).max(1), hidden, hidden])
    }

    pub fn latent_width(&self, hidden: usize) -> usize {
        *self.encoder_widths_for(hidden).last().expect("non-empty widths")
    }

    pub fn validate(&self, hidden: usize) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("dmm.m must be >= 1".into()));
        }
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(Error::Config("dmm.beta must be >= 0".into()));
        }
        let enc = self.encoder_widths_for(hidden);
        let dec = self.decoder_widths_for(hidden);
        if enc.is_empty() || dec.is_empty() || enc.contains(&0) || dec.contains(&0) {
            return Err(Error::Config("dmm encoder/decoder widths must be non-empty and positive".into()));
        }
        if *dec.last().expect("non-empty") != hidden {
            return Err(Error::Config(format!(
                "dmm decoder must reconstruct width {hidden}, ends at {}",
                dec.last().expect("non-empty")
            )));
        }
        if !(self.codebook_lr_scale.is_finite() && self.codebook_lr_scale >= 0.0) {
            return Err(Error::Config("dmm.codebook_lr_scale must be finite and >= 0".into()));
        }
        if self.usage_rebalance && self.rebalance_patience == 0 {
            return Err(Error::Config("dmm.rebalance_patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-sample result of quantization.
#[derive(Clone, Debug)]
pub struct DomainAssignment {
    pub k: Vec<usize>,
    pub z_q: Tensor,
    pub z_e: Tensor,
}

/// Encoder or decoder: a stack of `dense → batch_norm → prelu` blocks.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub blocks: Vec<FfnBlock>,
}

impl Mlp {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, in_width: usize, widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut w = in_width;
        for (i, &o) in widths.iter().enumerate() {
            blocks.push(FfnBlock::new(store, &format!("{prefix}.{i}"), w, o, rng)?);
            w = o;
        }
        Ok(Mlp { blocks })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mode: BnMode) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, h, mode)?;
        }
        Ok(h)
    }

    pub fn in_width(&self) -> usize {
        self.blocks[0].dense.fan_in
    }
}

/// Parameter handles of the mining module. All values live in the store.
#[derive(Clone, Debug)]
pub struct DmmState {
    pub config: DmmConfig,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebook: ParamId,
    /// Buffer `[1]`: 1 once the codebook has been seeded from data.
    pub ready: ParamId,
    /// Buffer `[m]`: batches since each code was last selected.
    pub staleness: ParamId,
    pub hidden: usize,
}

/// Graph handles and values produced by one pass through the miner.
#[derive(Clone, Debug)]
pub struct DmmForward {
    pub z_e: Var,
    pub z_q: Var,
    pub z_hat: Var,
    pub assignment: DomainAssignment,
    pub reconstruction: Var,
    pub codebook_term: Var,
    pub commitment: Var,
    /// Total `L_d`.
    pub loss: Var,
}

impl DmmState {
    pub fn new<R: Rng>(store: &mut ParamStore, config: DmmConfig, hidden: usize, rng: &mut R) -> Result<Self> {
        config.validate(hidden)?;
        let enc = config.encoder_widths_for(hidden);
        let dec = config.decoder_widths_for(hidden);
        let d_c = *enc.last().expect("validated");
        let encoder = Mlp::new(store, "dmm.enc", hidden, &enc, rng)?;
        let decoder = Mlp::new(store, "dmm.dec", d_c, &dec, rng)?;
        let init = normal(rng, config.m * d_c, 1.0 / (d_c as f64).sqrt());
        let codebook = store.add("dmm.codebook", Tensor::matrix(config.m, d_c, init)?)?;
        store.set_lr_scale(codebook, config.codebook_lr_scale);
        let ready = store.add_buffer("dmm.codebook_ready", Tensor::scalar(0.0))?;
        let staleness = store.add_buffer("dmm.staleness", Tensor::zeros(&[config.m]))?;
        Ok(DmmState {
            config,
            encoder,
            decoder,
            codebook,
            ready,
            staleness,
            hidden,
        })
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    pub fn latent_width(&self) -> usize {
        self.config.latent_width(self.hidden)
    }

    pub fn is_ready(&self, store: &ParamStore) -> bool {
        store.value(self.ready).item() != 0.0
    }

    /// `z_e = Encoder(z)`; `z` must already be gradient-stopped.
    pub fn encode(&self, g: &mut Graph<'_>, z: Var, mode: BnMode) -> Result<Var> {
        let w = g.value(z).cols();
        if w != self.encoder.in_width() {
            return Err(Error::shape(
                "encode",
                format!("z has width {w}, encoder expects {}", self.encoder.in_width()),
            ));
        }
        self.encoder.forward(g, z, mode)
    }

    /// `ẑ` from the quantized latent. With straight-through enabled the decoder
    /// sees `z_q` in value while its gradient flows to `z_e`; otherwise the
    /// decoder input carries no gradient at all.
    pub fn decode(&self, g: &mut Graph<'_>, z_e: Var, z_q: Var, mode: BnMode) -> Result<Var> {
        let input = if self.config.straight_through {
            g.straight_through(z_e, z_q)?
        } else {
            g.stop_gradient(z_q)
        };
        self.decoder.forward(g, input, mode)
    }

    /// Full miner pass over `z` (stopped here), returning `L_d` and the assignment.
    pub fn forward(&self, g: &mut Graph<'_>, z: Var, mode: BnMode) -> Result<DmmForward> {
        let z = g.stop_gradient(z);
        let z_e = self.encode(g, z, mode)?;
        let codebook = g.param(self.codebook);
        let k = quantize(g.value(z_e), g.value(codebook), self.config.metric)?;
        let z_q = g.gather(codebook, &k)?;
        let z_hat = self.decode(g, z_e, z_q, mode)?;
        let terms = dmm_loss(g, z, z_hat, z_e, z_q, self.config.beta)?;
        let assignment = DomainAssignment {
            k,
            z_q: g.value(z_q).clone(),
            z_e: g.value(z_e).clone(),
        };
        Ok(DmmForward {
            z_e,
            z_q,
            z_hat,
            assignment,
            reconstruction: terms.reconstruction,
            codebook_term: terms.codebook,
            commitment: terms.commitment,
            loss: terms.total,
        })
    }

    /// Seeds the codebook with `m` distinct encoder outputs of `z_e`, drawn
    /// by D²-weighted sampling. Keeps the random initialization when the batch
    /// has fewer than `m` distinct rows. Marks the codebook ready either way.
    pub fn seed_codebook<R: Rng>(&self, store: &mut ParamStore, z_e: &Tensor, rng: &mut R) -> Result<()> {
        let m = self.m();
        if z_e.cols() != self.latent_width() {
            return Err(Error::shape("seed_codebook", "latent width mismatch"));
        }
        if let Some(rows) = dplusplus_rows(z_e, m, rng) {
            let cb = store.value_mut(self.codebook);
            for (j, &i) in rows.iter().enumerate() {
                cb.row_mut(j).copy_from_slice(z_e.row(i));
            }
        }
        *store.value_mut(self.ready) = Tensor::scalar(1.0);
        Ok(())
    }

    /// Batch code histogram and staleness bookkeeping; with rebalancing on,
    /// codes stale for more than the patience are reset to a random row of
    /// the batch's `z_e`.
    pub fn usage_stats<R: Rng>(
        &self,
        store: &mut ParamStore,
        assignment: &[usize],
        z_e: &Tensor,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let hist = histogram(assignment, self.m())?;
        let mut reset = Vec::new();
        {
            let stale = store.value_mut(self.staleness).data_mut();
            for (j, s) in stale.iter_mut().enumerate() {
                if hist[j] > 0 {
                    *s = 0.0;
                } else {
                    *s += 1.0;
                    if self.config.usage_rebalance && *s > self.config.rebalance_patience as f64 {
                        reset.push(j);
                        *s = 0.0;
                    }
                }
            }
        }
        for j in reset {
            let i = rng.random_range(0..z_e.rows());
            store.value_mut(self.codebook).row_mut(j).copy_from_slice(z_e.row(i));
        }
        Ok(hist)
    }
}

pub struct DmmLossTerms {
    pub reconstruction: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub total: Var,
}

/// `‖z − ẑ‖² + ‖sg(z_e) − e_k‖² + β‖z_e − sg(e_k)‖²`, each a batch mean.
pub fn dmm_loss(g: &mut Graph<'_>, z: Var, z_hat: Var, z_e: Var, e_k: Var, beta: f64) -> Result<DmmLossTerms> {
    let z = g.stop_gradient(z);
    let reconstruction = g.mse(z, z_hat)?;
    let ze_frozen = g.stop_gradient(z_e);
    let codebook = g.mse(ze_frozen, e_k)?;
    let ek_frozen = g.stop_gradient(e_k);
    let commit_raw = g.mse(z_e, ek_frozen)?;
    let commitment = g.scale(commit_raw, beta);
    let partial = g.add(reconstruction, codebook)?;
    let total = g.add(partial, commitment)?;
    Ok(DmmLossTerms {
        reconstruction,
        codebook,
        commitment,
        total,
    })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity, or `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Nearest code per row of `z_e`. Ties resolve to the lowest index. Under the
/// cosine metric a zero-norm latent falls back to squared Euclidean distance;
/// zero-norm codes score as least similar.
pub fn quantize(z_e: &Tensor, codebook: &Tensor, metric: QuantMetric) -> Result<Vec<usize>> {
    if z_e.cols() != codebook.cols() {
        return Err(Error::shape(
            "quantize",
            format!("z_e is {:?}, codebook is {:?}", z_e.shape(), codebook.shape()),
        ));
    }
    let m = codebook.rows();
    Ok((0..z_e.rows())
        .map(|i| {
            let x = z_e.row(i);
            let by_distance = || {
                let mut best = (0, f64::INFINITY);
                for j in 0..m {
                    let d = squared_distance(x, codebook.row(j));
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best.0
            };
            match metric {
                QuantMetric::SquaredEuclidean => by_distance(),
                QuantMetric::Cosine if norm(x) == 0.0 => by_distance(),
                QuantMetric::Cosine => {
                    let mut best = (0, f64::NEG_INFINITY);
                    for j in 0..m {
                        let s = cosine(x, codebook.row(j)).unwrap_or(f64::NEG_INFINITY);
                        if s > best.1 {
                            best = (j, s);
                        }
                    }
                    best.0
                }
            }
        })
        .collect())
}

pub fn histogram(assignment: &[usize], m: usize) -> Result<Vec<usize>> {
    let mut hist = vec![0; m];
    for &k in assignment {
        if k >= m {
            return Err(Error::Contract(format!("domain index {k} out of range for m = {m}")));
        }
        hist[k] += 1;
    }
    Ok(hist)
}

/// Shannon entropy (nats) of a code histogram.
pub fn usage_entropy(hist: &[usize]) -> f64 {
    let total: usize = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Picks `m` rows with pairwise-distinct values: the first uniformly, each
/// next one with probability proportional to its squared distance from the
/// closest pick so far.
fn dplusplus_rows<R: Rng>(x: &Tensor, m: usize, rng: &mut R) -> Option<Vec<usize>> {
    let n = x.rows();
    if n < m {
        return None;
    }
    let first = sample(rng, n, 1).index(0);
    let mut picks = vec![first];
    let mut nearest: Vec<f64> = (0..n).map(|i| squared_distance(x.row(i), x.row(first))).collect();
    while picks.len() < m {
        let total: f64 = nearest.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut target = rng.random_range(0.0..total);
        let mut chosen = None;
        for (i, &d) in nearest.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            if target < d {
                chosen = Some(i);
                break;
            }
            target -= d;
        }
        let chosen = chosen.or_else(|| nearest.iter().rposition(|&d| d > 0.0))?;
        picks.push(chosen);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(squared_distance(x.row(i), x.row(chosen)));
        }
    }
    Some(picks)
}
