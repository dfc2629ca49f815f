//! Hashed categorical features, per-field embedding tables and the input
//! projection that produces the representation `z`.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BnMode, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{normal, FfnBlock};

pub const DEFAULT_EMBEDDING_DIM: usize = 32;
/// Standard deviation of the embedding initialization.
pub const EMBEDDING_INIT_STD: f64 = 0.01;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_extend(FNV_OFFSET, bytes)
}

fn fnv1a64_extend(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Row index of a raw token: FNV-1a 64 over the field index (4 bytes,
/// little-endian) followed by the token bytes, modulo `buckets`.
pub fn hash_feature(field_index: u32, raw_token: &[u8], buckets: usize) -> usize {
    debug_assert!(buckets >= 2);
    let h = fnv1a64_extend(fnv1a64(&field_index.to_le_bytes()), raw_token);
    (h % buckets as u64) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldRole {
    User,
    Item,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub role: FieldRole,
    pub hash_buckets: usize,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
}

fn default_dim() -> usize {
    DEFAULT_EMBEDDING_DIM
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub fields: Vec<FieldSpec>,
}

impl FeatureSchema {
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self> {
        let s = FeatureSchema { fields };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(Error::Config("schema has no fields".into()));
        }
        for (i, f) in self.fields.iter().enumerate() {
            if self.fields[..i].iter().any(|o| o.name == f.name) {
                return Err(Error::Config(format!("duplicate field name {}", f.name)));
            }
            if f.hash_buckets < 2 {
                return Err(Error::Config(format!(
                    "field {}: hash_buckets must be >= 2",
                    f.name
                )));
            }
            if f.embedding_dim == 0 {
                return Err(Error::Config(format!("field {}: embedding_dim must be >= 1", f.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    /// Width of the concatenated embedding.
    pub fn embedded_width(&self) -> usize {
        self.fields.iter().map(|f| f.embedding_dim).sum()
    }

    /// Stable content hash, used to match checkpoints with data.
    pub fn fingerprint(&self) -> u64 {
        let canonical = serde_json::to_string(self).expect("schema serializes");
        fnv1a64(canonical.as_bytes())
    }

    /// Hashes raw tokens (one per field, schema order) into row indices.
    pub fn hash_tokens<T: AsRef<[u8]>>(&self, tokens: &[T]) -> Result<Vec<usize>> {
        if tokens.len() != self.fields.len() {
            return Err(Error::Contract(format!(
                "record has {} tokens, schema has {} fields",
                tokens.len(),
                self.fields.len()
            )));
        }
        Ok(tokens
            .iter()
            .zip(&self.fields)
            .enumerate()
            .map(|(i, (t, f))| hash_feature(i as u32, t.as_ref(), f.hash_buckets))
            .collect())
    }
}

/// One labelled example with its per-field row indices already hashed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: u64,
    pub rows: Vec<usize>,
    pub label: f64,
    pub truth_domain: Option<usize>,
}

impl FeatureRecord {
    pub fn from_tokens<T: AsRef<[u8]>>(
        schema: &FeatureSchema,
        id: u64,
        tokens: &[T],
        label: f64,
    ) -> Result<Self> {
        Ok(FeatureRecord {
            id,
            rows: schema.hash_tokens(tokens)?,
            label,
            truth_domain: None,
        })
    }

    pub fn conforms_to(&self, schema: &FeatureSchema) -> bool {
        self.rows.len() == schema.len()
            && self
                .rows
                .iter()
                .zip(&schema.fields)
                .all(|(&r, f)| r < f.hash_buckets)
    }
}

/// Concatenated field embeddings for a batch plus the column spans of the
/// user and item fields.
#[derive(Clone, Debug)]
pub struct EmbeddedInput {
    pub x: Var,
    pub user_spans: Vec<Range<usize>>,
    pub item_spans: Vec<Range<usize>>,
}

/// One `hash_buckets × d` table per schema field.
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub tables: Vec<ParamId>,
    schema: FeatureSchema,
}

impl EmbeddingTables {
    pub fn new<R: Rng>(store: &mut ParamStore, schema: &FeatureSchema, rng: &mut R) -> Result<Self> {
        schema.validate()?;
        let mut tables = Vec::with_capacity(schema.len());
        for f in &schema.fields {
            let values = normal(rng, f.hash_buckets * f.embedding_dim, EMBEDDING_INIT_STD);
            let t = Tensor::matrix(f.hash_buckets, f.embedding_dim, values)?;
            tables.push(store.add(format!("embed.{}", f.name), t)?);
        }
        Ok(EmbeddingTables {
            tables,
            schema: schema.clone(),
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    /// Looks up every record's rows and concatenates them in schema order.
    pub fn embed(&self, g: &mut Graph<'_>, batch: &[&FeatureRecord]) -> Result<EmbeddedInput> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if let Some(bad) = batch.iter().find(|r| !r.conforms_to(&self.schema)) {
            return Err(Error::Contract(format!(
                "record {} does not conform to the schema",
                bad.id
            )));
        }
        let mut parts = Vec::with_capacity(self.tables.len());
        let (mut user_spans, mut item_spans) = (Vec::new(), Vec::new());
        let mut offset = 0;
        for (i, (&table, f)) in self.tables.iter().zip(&self.schema.fields).enumerate() {
            let index: Vec<usize> = batch.iter().map(|r| r.rows[i]).collect();
            let t = g.param(table);
            parts.push(g.gather(t, &index)?);
            let span = offset..offset + f.embedding_dim;
            match f.role {
                FieldRole::User => user_spans.push(span),
                FieldRole::Item => item_spans.push(span),
            }
            offset += f.embedding_dim;
        }
        let x = g.concat_cols(&parts)?;
        Ok(EmbeddedInput {
            x,
            user_spans,
            item_spans,
        })
    }
}

/// Stack of `dense → batch_norm → prelu` blocks mapping the embedding to `z`.
#[derive(Clone, Debug)]
pub struct InputProjection {
    pub blocks: Vec<FfnBlock>,
    pub in_width: usize,
    pub out_width: usize,
}

impl InputProjection {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        in_width: usize,
        hidden: usize,
        blocks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::Config("projection needs at least one block".into()));
        }
        let mut out = Vec::with_capacity(blocks);
        let mut width = in_width;
        for b in 0..blocks {
            out.push(FfnBlock::new(store, &format!("proj.{b}"), width, hidden, rng)?);
            width = hidden;
        }
        Ok(InputProjection {
            blocks: out,
            in_width,
            out_width: hidden,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: &EmbeddedInput, mode: BnMode) -> Result<Var> {
        let w = g.value(x.x).cols();
        if w != self.in_width {
            return Err(Error::shape(
                "input_projection",
                format!("embedding width {w}, projection expects {}", self.in_width),
            ));
        }
        let mut h = x.x;
        for b in &self.blocks {
            h = b.forward(g, h, mode)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Textbook FNV-1a, written independently of the crate's implementation.
    fn reference_fnv(bytes: &[u8]) -> u64 {
        let mut hash: u64 = 14695981039346656037;
        for b in bytes {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(1099511628211);
        }
        hash
    }

    fn schema(dims: &[(FieldRole, usize)]) -> FeatureSchema {
        FeatureSchema::new(
            dims.iter()
                .enumerate()
                .map(|(i, &(role, d))| FieldSpec {
                    name: format!("f{i}"),
                    role,
                    hash_buckets: 10,
                    embedding_dim: d,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn fnv_of_single_byte() {
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(reference_fnv(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b""), FNV_OFFSET);
    }

    #[test]
    fn field_salt_changes_the_hashed_input() {
        for token in ["a", "banana", "12345", ""] {
            for field in [0u32, 1, 7] {
                let mut salted = field.to_le_bytes().to_vec();
                salted.extend_from_slice(token.as_bytes());
                let expect = (reference_fnv(&salted) % 1_000_003) as usize;
                assert_eq!(hash_feature(field, token.as_bytes(), 1_000_003), expect);
                assert_eq!(
                    hash_feature(field, token.as_bytes(), 97),
                    hash_feature(field, token.as_bytes(), 97)
                );
            }
        }
        assert_ne!(
            hash_feature(0, b"banana", 1 << 40),
            hash_feature(1, b"banana", 1 << 40)
        );
    }

    #[test]
    fn schema_validation() {
        let dup = FeatureSchema::new(vec![
            FieldSpec { name: "a".into(), role: FieldRole::User, hash_buckets: 4, embedding_dim: 2 },
            FieldSpec { name: "a".into(), role: FieldRole::Item, hash_buckets: 4, embedding_dim: 2 },
        ]);
        assert!(dup.is_err());
        let small = FeatureSchema::new(vec![FieldSpec {
            name: "a".into(),
            role: FieldRole::User,
            hash_buckets: 1,
            embedding_dim: 2,
        }]);
        assert!(small.is_err());
    }

    #[test]
    fn embedding_concatenates_in_schema_order() {
        let s = schema(&[(FieldRole::User, 4), (FieldRole::Item, 4)]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tables = EmbeddingTables::new(&mut store, &s, &mut rng).unwrap();
        *store.value_mut(tables.tables[1]) = Tensor::matrix(
            10,
            4,
            (0..40).map(|v| v as f64).collect(),
        )
        .unwrap();
        let rec = FeatureRecord { id: 0, rows: vec![3, 2], label: 1.0, truth_domain: None };
        let mut g = Graph::new(&store);
        let e = tables.embed(&mut g, &[&rec]).unwrap();
        let x = g.value(e.x);
        assert_eq!(x.shape(), &[1, 8]);
        assert_eq!(&x.data()[4..], &[8.0, 9.0, 10.0, 11.0]);
        assert_eq!(e.user_spans, vec![0..4]);
        assert_eq!(e.item_spans, vec![4..8]);
    }

    #[test]
    fn embedding_rejects_nonconforming_record() {
        let s = schema(&[(FieldRole::User, 2)]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tables = EmbeddingTables::new(&mut store, &s, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let bad = FeatureRecord { id: 9, rows: vec![10], label: 0.0, truth_domain: None };
        assert!(tables.embed(&mut g, &[&bad]).is_err());
        let short = FeatureRecord { id: 9, rows: vec![], label: 0.0, truth_domain: None };
        assert!(tables.embed(&mut g, &[&short]).is_err());
    }

    #[test]
    fn projection_shape_and_zero_propagation() {
        let s = schema(&[(FieldRole::User, 32), (FieldRole::Item, 32)]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tables = EmbeddingTables::new(&mut store, &s, &mut rng).unwrap();
        let proj = InputProjection::new(&mut store, 64, 64, 1, &mut rng).unwrap();
        let recs: Vec<FeatureRecord> = (0..5)
            .map(|i| FeatureRecord { id: i, rows: vec![i as usize, 9 - i as usize], label: 0.0, truth_domain: None })
            .collect();
        let refs: Vec<&FeatureRecord> = recs.iter().collect();
        {
            let mut g = Graph::new(&store);
            let e = tables.embed(&mut g, &refs).unwrap();
            let z = proj.forward(&mut g, &e, BnMode::Train).unwrap();
            assert_eq!(g.value(z).shape(), &[5, 64]);
        }
        let d = &proj.blocks[0].dense;
        *store.value_mut(d.w) = Tensor::zeros(&[64, 64]);
        *store.value_mut(d.b.unwrap()) = Tensor::zeros(&[64]);
        let mut g = Graph::new(&store);
        let e = tables.embed(&mut g, &refs).unwrap();
        let z = proj.forward(&mut g, &e, BnMode::Train).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_width_mismatch() {
        let s = schema(&[(FieldRole::User, 4)]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tables = EmbeddingTables::new(&mut store, &s, &mut rng).unwrap();
        let proj = InputProjection::new(&mut store, 8, 4, 1, &mut rng).unwrap();
        let recs = [FeatureRecord { id: 0, rows: vec![1], label: 0.0, truth_domain: None },
                    FeatureRecord { id: 1, rows: vec![2], label: 0.0, truth_domain: None }];
        let refs: Vec<&FeatureRecord> = recs.iter().collect();
        let mut g = Graph::new(&store);
        let e = tables.embed(&mut g, &refs).unwrap();
        assert!(matches!(proj.forward(&mut g, &e, BnMode::Train), Err(Error::Shape { .. })));
    }
}
