//! Encoders, matcher and objective wired into one per-scene pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoders::{self, no_augmentation, EncoderConfig, EncoderError, ParamVars, SignifierFeatures};
use crate::geometry::{CandidateRegion, GeometryError, ScenePointCloud};
use crate::losses::{
    self, LossError, LossOptions, LossReport, LossTerms, LossToggles, LossWeights, PseudoTargets,
};
use crate::matcher::{self, AttentionVars, MatchState, MatcherConfig, MatcherError, PairVars};
use crate::metrics::{GroundTruth, Prediction};
use crate::synth::Sample;
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("sample: {0}")]
    Sample(String),
}

/// What the cross-modal attention consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatcherInput {
    /// Backbone outputs `F_I`, `F_P`.
    #[default]
    Features,
    /// Projection-head embeddings `φ`, `ψ`.
    Embeddings,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub matcher: MatcherConfig,
    pub weights: LossWeights,
    pub toggles: LossToggles,
    pub options: LossOptions,
    pub input: MatcherInput,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.matcher.validate()?;
        self.weights.validate()?;
        if self.encoder.action_vocab > self.matcher.pair_dim {
            return Err(LossError::Targets(format!(
                "{} actions need a pair width of at least as many",
                self.encoder.action_vocab
            ))
            .into());
        }
        Ok(())
    }

    fn matcher_widths(&self) -> (usize, usize) {
        match self.input {
            MatcherInput::Features => (self.encoder.signifier_width(), self.encoder.region_width),
            MatcherInput::Embeddings => (self.encoder.embed_dim, self.encoder.embed_dim),
        }
    }
}

/// Flat gradients keyed by parameter name.
pub type NamedGradients = Vec<(String, Vec<f64>)>;

/// A scene with everything the model needs precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub cloud: ScenePointCloud,
    pub regions: Vec<CandidateRegion>,
    pub signifiers: SignifierFeatures,
    pub gt_region: Vec<usize>,
    pub gt_assignment: Tensor,
    pub gt: Vec<GroundTruth>,
}

impl PreparedSample {
    pub fn new(sample: &Sample, sub_widths: [usize; 3]) -> Result<Self, ModelError> {
        if sample.gt_region.len() != sample.signifiers.rows() {
            return Err(ModelError::Sample(format!(
                "{} signifier rows but {} ground-truth indices",
                sample.signifiers.rows(),
                sample.gt_region.len()
            )));
        }
        let (grid, regions) = sample.scene.candidates()?;
        let gt = sample
            .gt_masks(grid)?
            .into_iter()
            .map(|(mask, action)| GroundTruth { mask, action })
            .collect();
        Ok(Self {
            cloud: sample.scene.cloud.clone(),
            regions,
            signifiers: SignifierFeatures::new(sample.signifiers.clone(), sub_widths)?,
            gt_region: sample.gt_region.clone(),
            gt_assignment: sample.gt_assignment(),
            gt,
        })
    }

    pub fn n(&self) -> usize {
        self.gt_region.len()
    }

    pub fn m(&self) -> usize {
        self.regions.len()
    }

    pub fn region_actions(&self) -> Vec<usize> {
        self.regions.iter().map(|r| r.action_descriptor_id).collect()
    }
}

/// Graph nodes of one full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub phi: Var,
    pub psi: Var,
    pub attention: AttentionVars,
    pub d: Var,
    pub pair: PairVars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoders::init_params(&mut params, &cfg.encoder, &mut rng);
        let (wi, wp) = cfg.matcher_widths();
        matcher::init_params(&mut params, &cfg.matcher, wi, wp, &mut rng)?;
        losses::init_heads(&mut params, cfg.encoder.embed_dim);
        Ok(Self { cfg, params })
    }

    pub fn forward(&self, g: &mut Graph, pv: &mut ParamVars, s: &PreparedSample) -> Result<ForwardVars, ModelError> {
        let enc = &self.cfg.encoder;
        let p = encoders::phi_forward(g, pv, enc, &s.signifiers, no_augmentation)?;
        let q = encoders::psi_forward(g, pv, enc, &s.regions, &s.cloud)?;
        let (fi, fp) = match self.cfg.input {
            MatcherInput::Features => (p.features, q.features),
            MatcherInput::Embeddings => (p.embedding, q.embedding),
        };
        let attention = matcher::cross_modal_attention(g, pv, &self.cfg.matcher, fi, fp)?;
        let (d, _) = matcher::dissimilarity(g, attention.w_m, attention.w_r)?;
        let pair = matcher::match2match(g, pv, &self.cfg.matcher, d)?;
        Ok(ForwardVars {
            phi: p.embedding,
            psi: q.embedding,
            attention,
            d,
            pair,
        })
    }

    /// The four loss nodes, weighted by the ground-truth assignment.
    pub fn loss_terms(
        &self,
        g: &mut Graph,
        pv: &mut ParamVars,
        s: &PreparedSample,
        f: &ForwardVars,
    ) -> Result<LossTerms, ModelError> {
        let w = &self.cfg.weights;
        let mut theta = pv.all_with_prefix(g, "phi.")?;
        theta.extend(pv.all_with_prefix(g, "psi.")?);
        let embed = losses::loss_embed(g, f.phi, f.psi, &theta, w.alpha, w.beta)?;

        let a = g.constant(s.gt_assignment.clone());
        let targets = PseudoTargets::synthetic(
            s.n(),
            &s.region_actions(),
            self.cfg.encoder.action_vocab,
            self.cfg.matcher.pair_dim,
        )?;
        let align = if self.cfg.options.scalar_align {
            let flat = g.reshape(f.pair.match_map, s.n() * s.m(), 1)?;
            let t = g.constant(targets.row_means());
            losses::loss_align(g, flat, t, a)?
        } else {
            let t = g.constant(targets.t);
            losses::loss_align(g, f.pair.m_ff, t, a)?
        };
        let g_ins = pv.get(g, "heads.g_ins")?;
        let g_r = pv.get(g, "heads.g_r")?;
        let bidir = losses::loss_bidir(g, f.phi, f.psi, g_ins, g_r, a)?;
        let dissim = losses::loss_dissim(
            g,
            f.attention.w_m,
            f.attention.w_r,
            a,
            self.cfg.options.clipped_dissim,
        )?;
        Ok(LossTerms {
            embed,
            align,
            bidir,
            dissim,
        })
    }

    /// Loss report and parameter gradients for one scene, gradients in
    /// parameter-name order.
    pub fn scene_gradients(&self, s: &PreparedSample) -> Result<(LossReport, NamedGradients), ModelError> {
        let mut g = Graph::new();
        let mut pv = ParamVars::new(&self.params);
        let f = self.forward(&mut g, &mut pv, s)?;
        let terms = self.loss_terms(&mut g, &mut pv, s, &f)?;
        let (total, report) = losses::loss_total(&mut g, &terms, &self.cfg.weights, &self.cfg.toggles)?;
        let grads = g.backward(total)?;
        let mut out: Vec<(String, Vec<f64>)> = pv
            .recorded()
            .iter()
            .map(|(name, v)| {
                let gv = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(*v).len()]);
                (name.clone(), gv)
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok((report, out))
    }

    /// Loss report only, without a backward pass.
    pub fn scene_loss(&self, s: &PreparedSample) -> Result<LossReport, ModelError> {
        let mut g = Graph::new();
        let mut pv = ParamVars::new(&self.params);
        let f = self.forward(&mut g, &mut pv, s)?;
        let terms = self.loss_terms(&mut g, &mut pv, s, &f)?;
        Ok(losses::loss_total(&mut g, &terms, &self.cfg.weights, &self.cfg.toggles)?.1)
    }

    pub fn match_state(&self, s: &PreparedSample) -> Result<MatchState, ModelError> {
        let mut g = Graph::new();
        let mut pv = ParamVars::new(&self.params);
        let f = self.forward(&mut g, &mut pv, s)?;
        Ok(MatchState::collect(
            &g,
            &f.attention,
            f.d,
            &f.pair,
            self.cfg.matcher.similarity_threshold,
        )?)
    }

    /// One prediction per retained signifier/region match.
    pub fn predict(&self, s: &PreparedSample) -> Result<(MatchState, Vec<Prediction>), ModelError> {
        let state = self.match_state(s)?;
        let preds = predictions_from(&state.assignment.probs, &state.assignment.matches, &s.regions);
        Ok((state, preds))
    }
}

pub fn predictions_from(probs: &Tensor, matches: &[Vec<usize>], regions: &[CandidateRegion]) -> Vec<Prediction> {
    let mut preds = Vec::new();
    for (i, set) in matches.iter().enumerate() {
        for &j in set {
            preds.push(Prediction {
                mask: regions[j].mask.clone(),
                confidence: probs.get(i, j),
                action: regions[j].action_descriptor_id,
            });
        }
    }
    preds
}
