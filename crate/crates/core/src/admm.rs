//! Stacked fusion layers (shared block plus routed domain-specific affine
//! maps), the prediction head, and the full model forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax_in_place, BnMode, Graph, ParamStore, Tensor, Var};
use crate::dmm::{cosine, DmmConfig, DmmForward, DmmState};
use crate::error::{Error, Result};
use crate::features::{hash_feature, EmbeddingTables, FeatureRecord, FeatureSchema, InputProjection};
use crate::layers::{Dense, FfnBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    Hard,
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    NegSquaredDistance,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    pub mode: RoutingMode,
    pub similarity: Similarity,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            mode: RoutingMode::Hard,
            similarity: Similarity::NegSquaredDistance,
        }
    }
}

/// Where the per-sample domain index comes from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DomainSource {
    /// Nearest codebook vector of the domain miner.
    Mined,
    /// Hashed value of a schema field modulo the domain count.
    Field { name: String },
    /// A fixed pseudo-random index per sample id.
    Random,
    /// The record's ground-truth domain (synthetic data only).
    Truth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Shared plus routed specific networks.
    Adaptive,
    /// Shared blocks only; the plain MLP baseline.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden width `H` of the projection and every fusion layer.
    pub hidden: usize,
    pub fusion_layers: usize,
    pub projection_blocks: usize,
    pub specific_bias: bool,
    pub routing: RoutingConfig,
    pub domain_source: DomainSource,
    /// Domain miner settings; `dmm.m` is also the number of specific networks.
    pub dmm: DmmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Adaptive,
            hidden: 64,
            fusion_layers: 3,
            projection_blocks: 1,
            specific_bias: true,
            routing: RoutingConfig::default(),
            domain_source: DomainSource::Mined,
            dmm: DmmConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn domains(&self) -> usize {
        self.dmm.m
    }

    /// Whether the model carries (and trains) a domain miner.
    pub fn has_miner(&self) -> bool {
        self.kind == ModelKind::Adaptive && self.domain_source == DomainSource::Mined
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("model.hidden must be >= 1".into()));
        }
        if self.fusion_layers == 0 {
            return Err(Error::Config("model.fusion_layers must be >= 1".into()));
        }
        if self.projection_blocks == 0 {
            return Err(Error::Config("model.projection_blocks must be >= 1".into()));
        }
        self.dmm.validate(self.hidden)?;
        if let DomainSource::Field { name } = &self.domain_source {
            if schema.field_index(name).is_none() {
                return Err(Error::Config(format!(
                    "model.domain_source names unknown field {name}"
                )));
            }
        }
        if self.kind == ModelKind::Adaptive
            && self.routing.mode == RoutingMode::Soft
            && self.domain_source != DomainSource::Mined
        {
            return Err(Error::Config(
                "soft routing needs mined domains (similarities to the codebook)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub shared: FfnBlock,
    pub specific: Vec<Dense>,
}

/// Parameter handles of the whole network; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub embeddings: EmbeddingTables,
    pub projection: InputProjection,
    pub dmm: Option<DmmState>,
    pub layers: Vec<FusionLayer>,
    pub head: Dense,
}

/// Network plus its parameter values.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub net: Network,
    pub params: ParamStore,
}

/// Knobs of a single forward pass.
pub struct ForwardOptions<'r> {
    pub mode: BnMode,
    pub dropout: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
    /// Replace every domain index (warm-up routing).
    pub route_override: Option<usize>,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        ForwardOptions {
            mode: BnMode::Eval,
            dropout: 0.0,
            rng: None,
            route_override: None,
        }
    }

    pub fn train() -> Self {
        ForwardOptions {
            mode: BnMode::Train,
            ..Self::eval()
        }
    }
}

/// Everything one forward pass produces.
pub struct ForwardOutput {
    pub embedded: Var,
    pub z: Var,
    pub dmm: Option<DmmForward>,
    /// Domain index used to route each sample at every fusion layer.
    pub route: Vec<usize>,
    /// Soft-routing weights, `batch × N`.
    pub alpha: Option<Tensor>,
    pub layer_outputs: Vec<Var>,
    pub logits: Var,
    pub prob: Var,
}

impl ModelState {
    pub fn build(config: ModelConfig, schema: &FeatureSchema, seed: u64) -> Result<Self> {
        schema.validate()?;
        config.validate(schema)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embeddings = EmbeddingTables::new(&mut params, schema, &mut rng)?;
        let h = config.hidden;
        let projection = InputProjection::new(
            &mut params,
            schema.embedded_width(),
            h,
            config.projection_blocks,
            &mut rng,
        )?;
        let dmm = if config.has_miner() {
            Some(DmmState::new(&mut params, config.dmm.clone(), h, &mut rng)?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(config.fusion_layers);
        for l in 0..config.fusion_layers {
            let shared = FfnBlock::new(&mut params, &format!("fusion.{l}.shared"), h, h, &mut rng)?;
            let specific = match config.kind {
                ModelKind::Adaptive => (0..config.domains())
                    .map(|j| {
                        Dense::new(
                            &mut params,
                            &format!("fusion.{l}.spec.{j}"),
                            h,
                            h,
                            config.specific_bias,
                            &mut rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
                ModelKind::Mlp => Vec::new(),
            };
            layers.push(FusionLayer { shared, specific });
        }
        let head = Dense::new(&mut params, "head", h, 1, true, &mut rng)?;
        Ok(ModelState {
            net: Network {
                config,
                schema: schema.clone(),
                embeddings,
                projection,
                dmm,
                layers,
                head,
            },
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Builds the graph for one batch.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        batch: &[&FeatureRecord],
        opts: &mut ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        self.net.forward(g, batch, opts)
    }

    /// Probabilities in eval mode, without touching any state.
    pub fn predict_batch(&self, batch: &[&FeatureRecord]) -> Result<(Vec<f64>, Vec<usize>)> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, batch, &mut ForwardOptions::eval())?;
        Ok((g.value(out.prob).data().to_vec(), out.route))
    }
}

impl Network {
    pub fn domains(&self) -> usize {
        self.config.domains()
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        batch: &[&FeatureRecord],
        opts: &mut ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let embedded = self.embeddings.embed(g, batch)?;
        let z = self.projection.forward(g, &embedded, opts.mode)?;

        let dmm = match &self.dmm {
            Some(d) => Some(d.forward(g, z, opts.mode)?),
            None => None,
        };
        let mut route = match (&self.config.domain_source, &dmm) {
            (DomainSource::Mined, Some(out)) => out.assignment.k.clone(),
            (DomainSource::Mined, None) => vec![0; batch.len()],
            (source, _) => external_route(source, &self.schema, batch, self.domains())?,
        };
        if let Some(k) = opts.route_override {
            if k >= self.domains() {
                return Err(Error::Contract(format!("route override {k} out of range")));
            }
            route.iter_mut().for_each(|r| *r = k);
        }
        let alpha = match (self.config.routing.mode, &dmm, self.config.kind) {
            (RoutingMode::Soft, Some(out), ModelKind::Adaptive) => {
                let cb = g.param(self.dmm.as_ref().expect("miner").codebook);
                let codebook = g.value(cb).clone();
                Some(soft_weights(&out.assignment.z_e, &codebook, self.config.routing.similarity)?)
            }
            _ => None,
        };

        let mut h = z;
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let shared = shared_forward(g, h, layer, opts.mode)?;
            let shared = dropout(g, shared, opts)?;
            h = if layer.specific.is_empty() {
                shared
            } else {
                let specific = match &alpha {
                    Some(a) => specific_soft(g, h, layer, a)?,
                    None => specific_hard(g, h, &route, layer)?,
                };
                let specific = dropout(g, specific, opts)?;
                fuse(g, shared, specific)?
            };
            layer_outputs.push(h);
        }
        let (logits, prob) = predict(g, h, &self.head)?;
        Ok(ForwardOutput {
            embedded: embedded.x,
            z,
            dmm,
            route,
            alpha,
            layer_outputs,
            logits,
            prob,
        })
    }
}

fn external_route(
    source: &DomainSource,
    schema: &FeatureSchema,
    batch: &[&FeatureRecord],
    n: usize,
) -> Result<Vec<usize>> {
    match source {
        DomainSource::Mined => unreachable!("handled by the caller"),
        DomainSource::Field { name } => {
            let f = schema
                .field_index(name)
                .ok_or_else(|| Error::Config(format!("unknown routing field {name}")))?;
            Ok(batch.iter().map(|r| r.rows[f] % n).collect())
        }
        DomainSource::Random => Ok(batch
            .iter()
            .map(|r| hash_feature(u32::MAX, &r.id.to_le_bytes(), n.max(2)) % n)
            .collect()),
        DomainSource::Truth => batch
            .iter()
            .map(|r| match r.truth_domain {
                Some(d) if d < n => Ok(d),
                Some(d) => Err(Error::Contract(format!(
                    "truth domain {d} of record {} exceeds the {n} specific networks",
                    r.id
                ))),
                None => Err(Error::Contract(format!(
                    "record {} has no truth domain to route by",
                    r.id
                ))),
            })
            .collect(),
    }
}

/// `O_sh = FFN(Z)`.
pub fn shared_forward(g: &mut Graph<'_>, z: Var, layer: &FusionLayer, mode: BnMode) -> Result<Var> {
    let w = g.value(z).cols();
    if w != layer.shared.dense.fan_in {
        return Err(Error::shape(
            "shared_forward",
            format!("Z has width {w}, shared block expects {}", layer.shared.dense.fan_in),
        ));
    }
    layer.shared.forward(g, z, mode)
}

/// `O_sp = W_k Z + b_k` per sample.
pub fn specific_hard(g: &mut Graph<'_>, z: Var, route: &[usize], layer: &FusionLayer) -> Result<Var> {
    let weights: Vec<Var> = layer.specific.iter().map(|d| g.param(d.w)).collect();
    let biases: Vec<Var> = layer
        .specific
        .iter()
        .filter_map(|d| d.b.map(|b| g.param(b)))
        .collect();
    g.routed_affine(z, &weights, &biases, route)
}

/// `O_sp = Σ_j α_j (W_j Z + b_j)` with constant weights `alpha`.
pub fn specific_soft(g: &mut Graph<'_>, z: Var, layer: &FusionLayer, alpha: &Tensor) -> Result<Var> {
    let mut parts = Vec::with_capacity(layer.specific.len());
    for d in &layer.specific {
        parts.push(d.forward(g, z)?);
    }
    g.mix(&parts, alpha)
}

/// Routing weights `softmax_j f(z_e, e_j)`. Cosine similarity falls back to
/// negative squared distance for a zero-norm latent.
pub fn soft_weights(z_e: &Tensor, codebook: &Tensor, similarity: Similarity) -> Result<Tensor> {
    if z_e.cols() != codebook.cols() {
        return Err(Error::shape("specific_soft", "latent and codebook widths differ"));
    }
    let (rows, m) = (z_e.rows(), codebook.rows());
    let mut out = Vec::with_capacity(rows * m);
    for i in 0..rows {
        let x = z_e.row(i);
        let neg_dist = |j: usize| -> f64 {
            -x.iter()
                .zip(codebook.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        let zero_norm = x.iter().all(|&v| v == 0.0);
        let mut row: Vec<f64> = (0..m)
            .map(|j| match similarity {
                Similarity::NegSquaredDistance => neg_dist(j),
                Similarity::Cosine if zero_norm => neg_dist(j),
                Similarity::Cosine => cosine(x, codebook.row(j)).unwrap_or(-1.0),
            })
            .collect();
        softmax_in_place(&mut row);
        out.extend(row);
    }
    Tensor::matrix(rows, m, out)
}

/// `O_fusion = O_sh + O_sp`.
pub fn fuse(g: &mut Graph<'_>, shared: Var, specific: Var) -> Result<Var> {
    g.add(shared, specific)
        .map_err(|_| Error::shape("fuse", "shared and specific outputs differ in shape"))
}

/// `Ŷ = sigmoid(O_fusion·θ + b)`; returns logits and probabilities.
pub fn predict(g: &mut Graph<'_>, h: Var, head: &Dense) -> Result<(Var, Var)> {
    let w = g.value(h).cols();
    if w != head.fan_in {
        return Err(Error::shape(
            "predict",
            format!("fusion output has width {w}, head expects {}", head.fan_in),
        ));
    }
    let logits = head.forward(g, h)?;
    let prob = g.sigmoid(logits);
    Ok((logits, prob))
}

fn dropout(g: &mut Graph<'_>, x: Var, opts: &mut ForwardOptions<'_>) -> Result<Var> {
    if opts.mode != BnMode::Train || opts.dropout <= 0.0 {
        return Ok(x);
    }
    let rng = opts
        .rng
        .as_deref_mut()
        .ok_or_else(|| Error::Config("dropout needs a random source".into()))?;
    let keep = 1.0 - opts.dropout;
    let shape = g.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, mask)
}
