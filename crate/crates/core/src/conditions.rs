//! Condition schemas, condition vectors with explicit masked states, random
//! masking, and the trainable embedding that turns a (possibly masked) mixed
//! condition vector into the flat vector `e_y`.
//!
//! Categorical features embed through a per-feature lookup table whose last
//! row is the reserved mask token. Numerical features are min-max normalized
//! to [0,1] at ingestion and project through a per-feature affine map; a
//! masked numerical entry substitutes the sentinel value -1, which lies
//! outside the normalized range.

use crate::error::{Error, Result};
use crate::graph::{Arr, Graph, NodeId};
use crate::params::ParamStore;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Sentinel substituted for masked numerical conditions before projection.
pub const NUM_MASK_SENTINEL: f64 = -1.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CategoricalFeature {
    pub name: String,
    pub cardinality: usize,
    pub categories: Vec<String>,
    /// Optional CSV column override; defaults to the feature name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NumericalFeature {
    pub name: String,
    pub min: f64,
    pub max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
}

/// Declaration of the mixed categorical + numerical condition layout. The
/// JSON form of this type is the single source of truth shared by datasets,
/// checkpoints and the CLI.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConditionSchema {
    pub categorical_features: Vec<CategoricalFeature>,
    pub numerical_features: Vec<NumericalFeature>,
    /// Embedding dimension per categorical feature.
    pub d_cat: usize,
    /// Embedding dimension per numerical feature.
    pub d_num: usize,
}

impl ConditionSchema {
    pub fn k_cat(&self) -> usize {
        self.categorical_features.len()
    }

    pub fn k_num(&self) -> usize {
        self.numerical_features.len()
    }

    /// Width of the concatenated conditioning vector `e_y`.
    pub fn d_y(&self) -> usize {
        self.k_cat() * self.d_cat + self.k_num() * self.d_num
    }

    pub fn validate(&self) -> Result<()> {
        validate_schema(self)
    }

    /// Min-max normalize a raw numerical value into [0,1], clamping out-of-range
    /// inputs. Returns the normalized value and whether clamping occurred.
    pub fn normalize_numerical(&self, j: usize, raw: f64) -> Result<(f64, bool)> {
        let f = self
            .numerical_features
            .get(j)
            .ok_or(Error::IndexOutOfRange { index: j, limit: self.k_num() })?;
        if !raw.is_finite() {
            return Err(Error::NonFiniteValue(raw));
        }
        let v = (raw - f.min) / (f.max - f.min);
        let clamped = !(0.0..=1.0).contains(&v);
        Ok((v.clamp(0.0, 1.0), clamped))
    }

    pub fn denormalize_numerical(&self, j: usize, v: f64) -> f64 {
        let f = &self.numerical_features[j];
        f.min + v * (f.max - f.min)
    }
}

pub fn validate_schema(schema: &ConditionSchema) -> Result<()> {
    if schema.categorical_features.is_empty() && schema.numerical_features.is_empty() {
        return Err(Error::EmptyFeatureSet);
    }
    if schema.d_cat == 0 || schema.d_num == 0 {
        return Err(Error::Config("d_cat and d_num must be positive".into()));
    }
    for f in &schema.categorical_features {
        if f.cardinality == 0 {
            return Err(Error::Config(format!("feature {:?} has zero cardinality", f.name)));
        }
        if f.categories.len() != f.cardinality {
            return Err(Error::Config(format!(
                "feature {:?}: {} labels for cardinality {}",
                f.name,
                f.categories.len(),
                f.cardinality
            )));
        }
        for (i, label) in f.categories.iter().enumerate() {
            if f.categories[..i].contains(label) {
                return Err(Error::DuplicateCategory {
                    feature: f.name.clone(),
                    label: label.clone(),
                });
            }
        }
    }
    for f in &schema.numerical_features {
        if !(f.min < f.max) {
            return Err(Error::InvalidRange { feature: f.name.clone(), min: f.min, max: f.max });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CategoricalEntry {
    /// Category index in `[0, cardinality)`.
    Observed(usize),
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NumericalEntry {
    /// Normalized value in [0,1].
    Observed(f64),
    Masked,
}

/// One instance of conditioning data, aligned with a [`ConditionSchema`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector {
    pub categorical: Vec<CategoricalEntry>,
    pub numerical: Vec<NumericalEntry>,
}

impl ConditionVector {
    pub fn all_masked(schema: &ConditionSchema) -> Self {
        Self {
            categorical: vec![CategoricalEntry::Masked; schema.k_cat()],
            numerical: vec![NumericalEntry::Masked; schema.k_num()],
        }
    }

    pub fn validate_against(&self, schema: &ConditionSchema) -> Result<()> {
        if self.categorical.len() != schema.k_cat() || self.numerical.len() != schema.k_num() {
            return Err(Error::SchemaMismatch(format!(
                "got {} categorical / {} numerical entries, schema declares {} / {}",
                self.categorical.len(),
                self.numerical.len(),
                schema.k_cat(),
                schema.k_num()
            )));
        }
        for (i, e) in self.categorical.iter().enumerate() {
            if let CategoricalEntry::Observed(c) = e {
                let n = schema.categorical_features[i].cardinality;
                if *c >= n {
                    return Err(Error::SchemaMismatch(format!(
                        "categorical feature {i}: index {c} out of range (cardinality {n})"
                    )));
                }
            }
        }
        for (j, e) in self.numerical.iter().enumerate() {
            if let NumericalEntry::Observed(v) = e {
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue(*v));
                }
                if !(0.0..=1.0).contains(v) {
                    return Err(Error::SchemaMismatch(format!(
                        "numerical feature {j}: value {v} outside normalized [0,1]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn masked_count(&self) -> usize {
        self.categorical.iter().filter(|e| matches!(e, CategoricalEntry::Masked)).count()
            + self.numerical.iter().filter(|e| matches!(e, NumericalEntry::Masked)).count()
    }

    pub fn len(&self) -> usize {
        self.categorical.len() + self.numerical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Independently replace each entry with `Masked` at probability `p_t`.
/// Entries that are already masked stay masked; the input is not mutated.
pub fn mask_conditions(
    cv: &ConditionVector,
    p_t: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ConditionVector> {
    if !(0.0..=1.0).contains(&p_t) || !p_t.is_finite() {
        return Err(Error::InvalidProbability(p_t));
    }
    let categorical = cv
        .categorical
        .iter()
        .map(|e| if rng.gen::<f64>() < p_t { CategoricalEntry::Masked } else { *e })
        .collect();
    let numerical = cv
        .numerical
        .iter()
        .map(|e| if rng.gen::<f64>() < p_t { NumericalEntry::Masked } else { *e })
        .collect();
    Ok(ConditionVector { categorical, numerical })
}

/// Trainable embedding for mixed condition vectors. Parameters live in a
/// shared [`ParamStore`] so they train jointly with the downstream model.
#[derive(Debug, Clone)]
pub struct ConditionEmbedder {
    pub schema: ConditionSchema,
    /// One table handle per categorical feature; table `i` has `n_i + 1` rows,
    /// the last row being the reserved mask token.
    pub cat_tables: Vec<usize>,
    /// `(weight, bias)` handles per numerical feature, each of length `d_num`.
    pub num_projections: Vec<(usize, usize)>,
}

impl ConditionEmbedder {
    pub fn init(
        store: &mut ParamStore,
        schema: &ConditionSchema,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        schema.validate()?;
        let cat_tables = schema
            .categorical_features
            .iter()
            .enumerate()
            .map(|(i, f)| {
                store.register_uniform(
                    &format!("{prefix}.cat_table.{i}"),
                    &[f.cardinality + 1, schema.d_cat],
                    schema.d_cat,
                    rng,
                )
            })
            .collect();
        let num_projections = schema
            .numerical_features
            .iter()
            .enumerate()
            .map(|(j, _)| {
                let w = store.register_uniform(
                    &format!("{prefix}.num_w.{j}"),
                    &[1, schema.d_num],
                    schema.d_num,
                    rng,
                );
                let b = store.register_uniform(
                    &format!("{prefix}.num_b.{j}"),
                    &[schema.d_num],
                    schema.d_num,
                    rng,
                );
                (w, b)
            })
            .collect();
        Ok(Self { schema: schema.clone(), cat_tables, num_projections })
    }

    /// Row lookup for categorical feature `i`: observed entries select their
    /// category row, masked entries select the reserved last row.
    pub fn embed_categorical(
        &self,
        store: &ParamStore,
        i: usize,
        entry: CategoricalEntry,
    ) -> Result<Vec<f64>> {
        let &table = self
            .cat_tables
            .get(i)
            .ok_or(Error::IndexOutOfRange { index: i, limit: self.cat_tables.len() })?;
        let n = self.schema.categorical_features[i].cardinality;
        let row = match entry {
            CategoricalEntry::Observed(c) => {
                if c >= n {
                    return Err(Error::IndexOutOfRange { index: c, limit: n });
                }
                c
            }
            CategoricalEntry::Masked => n,
        };
        let t = store.value(table);
        Ok((0..self.schema.d_cat).map(|d| t[[row, d]]).collect())
    }

    /// Affine projection for numerical feature `j`; masked entries substitute
    /// the -1 sentinel before projecting.
    pub fn embed_numerical(
        &self,
        store: &ParamStore,
        j: usize,
        entry: NumericalEntry,
    ) -> Result<Vec<f64>> {
        let &(w, b) = self
            .num_projections
            .get(j)
            .ok_or(Error::IndexOutOfRange { index: j, limit: self.num_projections.len() })?;
        let v = match entry {
            NumericalEntry::Observed(v) => {
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue(v));
                }
                v
            }
            NumericalEntry::Masked => NUM_MASK_SENTINEL,
        };
        let wv = store.value(w);
        let bv = store.value(b);
        Ok((0..self.schema.d_num).map(|d| v * wv[[0, d]] + bv[[d]]).collect())
    }

    /// Concatenated embedding `e_y`: all categorical features in order, then
    /// all numerical features in order.
    pub fn embed(&self, store: &ParamStore, cv: &ConditionVector) -> Result<Vec<f64>> {
        cv.validate_against(&self.schema)?;
        let mut out = Vec::with_capacity(self.schema.d_y());
        for (i, e) in cv.categorical.iter().enumerate() {
            out.extend(self.embed_categorical(store, i, *e)?);
        }
        for (j, e) in cv.numerical.iter().enumerate() {
            out.extend(self.embed_numerical(store, j, *e)?);
        }
        Ok(out)
    }

    /// Graph version of [`Self::embed`] for a batch: returns a `[B, d_y]`
    /// node wired to the embedding parameters so gradients flow into them.
    pub fn embed_batch(
        &self,
        graph: &mut Graph,
        param_ids: &[NodeId],
        cvs: &[ConditionVector],
    ) -> Result<NodeId> {
        for cv in cvs {
            cv.validate_against(&self.schema)?;
        }
        let batch = cvs.len();
        let mut parts = Vec::new();
        for (i, &table) in self.cat_tables.iter().enumerate() {
            let n = self.schema.categorical_features[i].cardinality;
            let rows: Vec<usize> = cvs
                .iter()
                .map(|cv| match cv.categorical[i] {
                    CategoricalEntry::Observed(c) => c,
                    CategoricalEntry::Masked => n,
                })
                .collect();
            parts.push(graph.gather(param_ids[table], &rows));
        }
        for (j, &(w, b)) in self.num_projections.iter().enumerate() {
            let vals = Array2::from_shape_fn((batch, 1), |(bi, _)| match cvs[bi].numerical[j] {
                NumericalEntry::Observed(v) => v,
                NumericalEntry::Masked => NUM_MASK_SENTINEL,
            });
            let v = graph.leaf(Arr::from(vals.into_dyn()));
            parts.push(graph.linear(v, param_ids[w], param_ids[b]));
        }
        Ok(graph.concat_cols(&parts))
    }
}
