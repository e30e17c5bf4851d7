//! Signifier encoder φ and region encoder ψ.
//!
//! Both are small stand-in backbones followed by a two-layer projection head
//! and explicit row normalization onto the unit sphere. The backbone
//! outputs (`F_I`, `F_P`) are exposed separately because the matcher's
//! cross-modal projections consume them.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{CandidateRegion, ScenePointCloud};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

/// Per-point input width of ψ: centered xyz, rgb, normal.
pub const POINT_INPUT: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{modality:?} embedding row {row} is zero before normalization")]
    DegenerateEmbedding { modality: EmbeddingSource, row: usize },
    #[error("invalid signifier features: {0}")]
    InvalidSignifiers(String),
    #[error("invalid regions: {0}")]
    InvalidRegions(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    Signifier,
    Region,
}

/// Widths and switches of the two encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Widths of the human-part, object and interaction sub-vectors.
    pub sub_widths: [usize; 3],
    pub phi_hidden: usize,
    pub psi_hidden: usize,
    /// Width of `F_P`, including the action embedding.
    pub region_width: usize,
    pub action_vocab: usize,
    pub action_embedding: usize,
    /// Embedding width `d`.
    pub embed_dim: usize,
    pub normalize: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            sub_widths: [16, 16, 16],
            phi_hidden: 48,
            psi_hidden: 32,
            region_width: 32,
            action_vocab: 8,
            action_embedding: 8,
            embed_dim: 32,
            normalize: true,
        }
    }
}

impl EncoderConfig {
    /// `N_I`.
    pub fn signifier_width(&self) -> usize {
        self.sub_widths.iter().sum()
    }

    fn pooled_width(&self) -> usize {
        self.region_width - self.action_embedding
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidSignifiers(m.to_string()));
        if self.sub_widths.contains(&0) {
            return bad("sub-vector widths must be positive");
        }
        if self.region_width <= self.action_embedding {
            return bad("region width must exceed the action embedding width");
        }
        if [self.phi_hidden, self.psi_hidden, self.action_vocab, self.action_embedding, self.embed_dim]
            .contains(&0)
        {
            return bad("encoder widths must be positive");
        }
        Ok(())
    }
}

/// Stack of `n` signifier rows of width `N_I`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignifierFeatures {
    rows: Tensor,
    sub_widths: [usize; 3],
}

impl SignifierFeatures {
    pub fn new(rows: Tensor, sub_widths: [usize; 3]) -> Result<Self, EncoderError> {
        let width: usize = sub_widths.iter().sum();
        if rows.cols() != width {
            return Err(EncoderError::InvalidSignifiers(format!(
                "rows have width {} but sub-vectors sum to {width}",
                rows.cols()
            )));
        }
        if !rows.is_finite() {
            return Err(EncoderError::InvalidSignifiers("non-finite value".into()));
        }
        Ok(Self { rows, sub_widths })
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn count(&self) -> usize {
        self.rows.rows()
    }

    pub fn sub_widths(&self) -> [usize; 3] {
        self.sub_widths
    }

    /// `(b_H, b_O, b_I)` of row `i`.
    pub fn parts(&self, i: usize) -> (&[f64], &[f64], &[f64]) {
        let row = self.rows.row(i);
        let [h, o, _] = self.sub_widths;
        (&row[..h], &row[h..h + o], &row[h + o..])
    }
}

/// Unit-norm embeddings of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub vectors: Tensor,
    pub source: EmbeddingSource,
}

/// Hook applied to signifier rows before φ. The default leaves them unchanged.
pub type Augmentation = fn(&Tensor) -> Tensor;

pub fn no_augmentation(rows: &Tensor) -> Tensor {
    rows.clone()
}

fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let w = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    store.insert(format!("{name}.w"), Tensor::matrix(fan_in, fan_out, w));
    let bias = Normal::new(0.0, 0.01).expect("finite std");
    let b = (0..fan_out).map(|_| bias.sample(rng)).collect();
    store.insert(format!("{name}.b"), Tensor::matrix(1, fan_out, b));
}

/// Inserts freshly initialized `phi.*` and `psi.*` parameters.
pub fn init_params(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) {
    let n_i = cfg.signifier_width();
    init_linear(store, rng, "phi.backbone.l1", n_i, cfg.phi_hidden);
    init_linear(store, rng, "phi.backbone.l2", cfg.phi_hidden, n_i);
    init_linear(store, rng, "phi.head.l1", n_i, cfg.embed_dim);
    init_linear(store, rng, "phi.head.l2", cfg.embed_dim, cfg.embed_dim);

    init_linear(store, rng, "psi.point.l1", POINT_INPUT, cfg.psi_hidden);
    init_linear(store, rng, "psi.point.l2", cfg.psi_hidden, cfg.pooled_width());
    let normal = Normal::new(0.0, 1.0).expect("finite std");
    let emb = (0..cfg.action_vocab * cfg.action_embedding)
        .map(|_| normal.sample(rng))
        .collect();
    store.insert(
        "psi.action",
        Tensor::matrix(cfg.action_vocab, cfg.action_embedding, emb),
    );
    init_linear(store, rng, "psi.head.l1", cfg.region_width, cfg.embed_dim);
    init_linear(store, rng, "psi.head.l2", cfg.embed_dim, cfg.embed_dim);
}

/// Records parameter leaves on demand so each name maps to one node per graph.
pub struct ParamVars<'a> {
    store: &'a ParamStore,
    vars: Vec<(String, Var)>,
}

impl<'a> ParamVars<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: Vec::new(),
        }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var, TensorError> {
        if let Some((_, v)) = self.vars.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let v = g.param(self.store.get(name)?);
        self.vars.push((name.to_string(), v));
        Ok(v)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Every parameter recorded so far, in recording order.
    pub fn recorded(&self) -> &[(String, Var)] {
        &self.vars
    }

    /// Records all parameters under `prefix` and returns them in key order.
    pub fn all_with_prefix(&mut self, g: &mut Graph, prefix: &str) -> Result<Vec<Var>, TensorError> {
        let names: Vec<String> = self.store.with_prefix(prefix).map(|(n, _)| n.to_string()).collect();
        names.iter().map(|n| self.get(g, n)).collect()
    }
}

pub(crate) fn linear(
    g: &mut Graph,
    pv: &mut ParamVars,
    name: &str,
    x: Var,
) -> Result<Var, TensorError> {
    let w = pv.get(g, &format!("{name}.w"))?;
    let b = pv.get(g, &format!("{name}.b"))?;
    let h = g.matmul(x, w)?;
    g.add(h, b)
}

fn projection_head(
    g: &mut Graph,
    pv: &mut ParamVars,
    prefix: &str,
    features: Var,
    normalize: bool,
    source: EmbeddingSource,
) -> Result<Var, EncoderError> {
    let h = linear(g, pv, &format!("{prefix}.head.l1"), features)?;
    let h = g.relu(h);
    let out = linear(g, pv, &format!("{prefix}.head.l2"), h)?;
    let norms = g.l2_norm_rows(out);
    if let Some(row) = g.value(norms).data().iter().position(|&n| n < 1e-12) {
        return Err(EncoderError::DegenerateEmbedding { modality: source, row });
    }
    Ok(if normalize { g.div(out, norms)? } else { out })
}

/// Graph nodes of one φ pass.
#[derive(Debug, Clone, Copy)]
pub struct PhiVars {
    /// Backbone output `F_I` (`n × N_I`).
    pub features: Var,
    /// Embedding (`n × d`).
    pub embedding: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct PsiVars {
    /// Backbone output `F_P` (`m × N_P`).
    pub features: Var,
    pub embedding: Var,
}

pub fn phi_forward(
    g: &mut Graph,
    pv: &mut ParamVars,
    cfg: &EncoderConfig,
    signifiers: &SignifierFeatures,
    augment: Augmentation,
) -> Result<PhiVars, EncoderError> {
    if signifiers.rows().cols() != cfg.signifier_width() {
        return Err(EncoderError::InvalidSignifiers(format!(
            "expected width {}, got {}",
            cfg.signifier_width(),
            signifiers.rows().cols()
        )));
    }
    let x = g.constant(augment(signifiers.rows()));
    let h = linear(g, pv, "phi.backbone.l1", x)?;
    let h = g.relu(h);
    let h = linear(g, pv, "phi.backbone.l2", h)?;
    let features = g.relu(h);
    let embedding = projection_head(g, pv, "phi", features, cfg.normalize, EmbeddingSource::Signifier)?;
    Ok(PhiVars { features, embedding })
}

/// Per-point inputs of one region: centered coordinates followed by the
/// six point features.
pub fn region_point_inputs(region: &CandidateRegion, cloud: &ScenePointCloud) -> Result<Tensor, EncoderError> {
    let idx = &region.region_points;
    if idx.is_empty() {
        return Err(EncoderError::InvalidRegions("region without points".into()));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= cloud.len()) {
        return Err(EncoderError::InvalidRegions(format!("point index {bad} out of range")));
    }
    let mut centroid = [0.0; 3];
    for &i in idx {
        for (c, v) in centroid.iter_mut().zip(cloud.points[i]) {
            *c += v;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= idx.len() as f64);
    let mut data = Vec::with_capacity(idx.len() * POINT_INPUT);
    for &i in idx {
        let p = cloud.points[i];
        data.extend((0..3).map(|k| p[k] - centroid[k]));
        data.extend_from_slice(&cloud.features[i]);
    }
    Ok(Tensor::matrix(idx.len(), POINT_INPUT, data))
}

pub fn psi_forward(
    g: &mut Graph,
    pv: &mut ParamVars,
    cfg: &EncoderConfig,
    regions: &[CandidateRegion],
    cloud: &ScenePointCloud,
) -> Result<PsiVars, EncoderError> {
    if regions.is_empty() {
        return Err(EncoderError::InvalidRegions("no candidate regions".into()));
    }
    let mut pooled = Vec::with_capacity(regions.len());
    let mut onehot = vec![0.0; regions.len() * cfg.action_vocab];
    for (j, region) in regions.iter().enumerate() {
        if region.action_descriptor_id >= cfg.action_vocab {
            return Err(EncoderError::InvalidRegions(format!(
                "action id {} outside vocabulary of {}",
                region.action_descriptor_id, cfg.action_vocab
            )));
        }
        onehot[j * cfg.action_vocab + region.action_descriptor_id] = 1.0;
        let x = g.constant(region_point_inputs(region, cloud)?);
        let h = linear(g, pv, "psi.point.l1", x)?;
        let h = g.relu(h);
        let h = linear(g, pv, "psi.point.l2", h)?;
        let h = g.relu(h);
        pooled.push(g.max_pool_rows(h));
    }
    let pooled = g.concat_rows(&pooled)?;
    let onehot = g.constant(Tensor::matrix(regions.len(), cfg.action_vocab, onehot));
    let table = pv.get(g, "psi.action")?;
    let action = g.matmul(onehot, table)?;
    let features = g.concat_cols(&[pooled, action])?;
    let embedding = projection_head(g, pv, "psi", features, cfg.normalize, EmbeddingSource::Region)?;
    Ok(PsiVars { features, embedding })
}

/// φ on its own graph.
pub fn phi(
    store: &ParamStore,
    cfg: &EncoderConfig,
    signifiers: &SignifierFeatures,
) -> Result<EmbeddingBatch, EncoderError> {
    let mut g = Graph::new();
    let mut pv = ParamVars::new(store);
    let out = phi_forward(&mut g, &mut pv, cfg, signifiers, no_augmentation)?;
    Ok(EmbeddingBatch {
        vectors: g.value(out.embedding).clone(),
        source: EmbeddingSource::Signifier,
    })
}

/// ψ on its own graph.
pub fn psi(
    store: &ParamStore,
    cfg: &EncoderConfig,
    regions: &[CandidateRegion],
    cloud: &ScenePointCloud,
) -> Result<EmbeddingBatch, EncoderError> {
    let mut g = Graph::new();
    let mut pv = ParamVars::new(store);
    let out = psi_forward(&mut g, &mut pv, cfg, regions, cloud)?;
    Ok(EmbeddingBatch {
        vectors: g.value(out.embedding).clone(),
        source: EmbeddingSource::Region,
    })
}

/// Backbone outputs `(F_I, F_P)`.
pub fn raw_features(
    store: &ParamStore,
    cfg: &EncoderConfig,
    signifiers: &SignifierFeatures,
    regions: &[CandidateRegion],
    cloud: &ScenePointCloud,
) -> Result<(Tensor, Tensor), EncoderError> {
    let mut g = Graph::new();
    let mut pv = ParamVars::new(store);
    let p = phi_forward(&mut g, &mut pv, cfg, signifiers, no_augmentation)?;
    let q = psi_forward(&mut g, &mut pv, cfg, regions, cloud)?;
    Ok((g.value(p.features).clone(), g.value(q.features).clone()))
}
