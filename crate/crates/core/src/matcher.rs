//! Bidirectional cross-modal attention, the cosine dissimilarity matrix,
//! additive match-to-match attention over the flattened pair space, and the
//! soft-threshold assignment rule.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::encoders::ParamVars;
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatcherError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{which} row {row} has zero norm")]
    DegenerateFeature { which: &'static str, row: usize },
    #[error("matcher configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherConfig {
    /// Shared attention width `N_D`.
    pub shared_dim: usize,
    /// Pair embedding width `N_X`.
    pub pair_dim: usize,
    pub heads: usize,
    /// Pairs with dissimilarity below this are kept as extra matches.
    pub similarity_threshold: f64,
    /// Divide cross-modal logits by `sqrt(N_D)`. Off by default.
    pub scaled_attention: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            shared_dim: 32,
            pair_dim: 16,
            heads: 4,
            similarity_threshold: 0.2,
            scaled_attention: false,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<(), MatcherError> {
        if self.shared_dim == 0 || self.pair_dim == 0 || self.heads == 0 {
            return Err(MatcherError::Config("widths and head count must be positive".into()));
        }
        if !self.pair_dim.is_multiple_of(self.heads) {
            return Err(MatcherError::Config(format!(
                "head count {} does not divide pair width {}",
                self.heads, self.pair_dim
            )));
        }
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold < 1.0) {
            return Err(MatcherError::Config(format!(
                "similarity threshold {} outside (0, 1)",
                self.similarity_threshold
            )));
        }
        Ok(())
    }

    fn head_width(&self) -> usize {
        self.pair_dim / self.heads
    }
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

/// Inserts `matcher.*` parameters for signifier features of width
/// `signifier_width` and region features of width `region_width`.
///
/// The output projection is oriented so that the match map decreases with
/// dissimilarity.
pub fn init_params(
    store: &mut ParamStore,
    cfg: &MatcherConfig,
    signifier_width: usize,
    region_width: usize,
    rng: &mut impl Rng,
) -> Result<(), MatcherError> {
    cfg.validate()?;
    let nd = cfg.shared_dim;
    let nx = cfg.pair_dim;
    let si = 1.0 / (signifier_width as f64).sqrt();
    let sp = 1.0 / (region_width as f64).sqrt();
    store.insert("matcher.q_i", gaussian(rng, signifier_width, nd, si));
    store.insert("matcher.k_i", gaussian(rng, signifier_width, nd, si));
    store.insert("matcher.v_i", gaussian(rng, signifier_width, nd, si));
    store.insert("matcher.q_p", gaussian(rng, region_width, nd, sp));
    store.insert("matcher.k_p", gaussian(rng, region_width, nd, sp));
    store.insert("matcher.v_p", gaussian(rng, region_width, nd, sp));
    let sx = 1.0 / (nx as f64).sqrt();
    store.insert("matcher.x", gaussian(rng, 1, nx, 1.0));
    store.insert("matcher.ff_q", gaussian(rng, nx, nx, sx));
    store.insert("matcher.ff_k", gaussian(rng, nx, nx, sx));
    store.insert("matcher.ff_v", gaussian(rng, nx, nx, sx));
    store.insert("matcher.ff_wq", gaussian(rng, nx, 1, sx));
    store.insert("matcher.ff_wk", gaussian(rng, nx, 1, sx));
    let hw = cfg.head_width();
    for h in 0..cfg.heads {
        store.insert(
            format!("matcher.head{h}.mix"),
            gaussian(rng, hw, hw, 1.0 / (hw as f64).sqrt()),
        );
    }
    store.insert("matcher.out_w", gaussian(rng, nx, 1, sx));
    store.insert("matcher.out_b", Tensor::scalar(0.0));
    orient_output(store, cfg)
}

/// Flips `matcher.out_w` if the match map grows with dissimilarity.
pub fn orient_output(store: &mut ParamStore, cfg: &MatcherConfig) -> Result<(), MatcherError> {
    let mut g = Graph::new();
    let mut pv = ParamVars::new(store);
    let probe = g.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]));
    let out = match2match(&mut g, &mut pv, cfg, probe)?;
    let mm = g.value(out.match_map);
    if mm.get(0, 1) > mm.get(0, 0) {
        let w = store.get_mut("matcher.out_w")?;
        w.data_mut().iter_mut().for_each(|v| *v = -*v);
    }
    Ok(())
}

/// Graph nodes of the bidirectional cross-modal attention.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    /// `softmax(Q_I K_Pᵀ)`, `n × m`.
    pub signifier_attention: Var,
    /// `softmax(Q_P K_Iᵀ)`, `m × n`.
    pub region_attention: Var,
    /// Signifier-guided spatial features `W_M`, `n × N_D`.
    pub w_m: Var,
    /// 3D-context reasoning features `W_R`, `m × N_D`.
    pub w_r: Var,
}

pub fn cross_modal_attention(
    g: &mut Graph,
    pv: &mut ParamVars,
    cfg: &MatcherConfig,
    f_i: Var,
    f_p: Var,
) -> Result<AttentionVars, MatcherError> {
    let mut proj = |g: &mut Graph, x: Var, name: &str| -> Result<Var, MatcherError> {
        let w = pv.get(g, name)?;
        Ok(g.matmul(x, w)?)
    };
    let q_i = proj(g, f_i, "matcher.q_i")?;
    let k_i = proj(g, f_i, "matcher.k_i")?;
    let v_i = proj(g, f_i, "matcher.v_i")?;
    let q_p = proj(g, f_p, "matcher.q_p")?;
    let k_p = proj(g, f_p, "matcher.k_p")?;
    let v_p = proj(g, f_p, "matcher.v_p")?;

    let scale = if cfg.scaled_attention {
        1.0 / (cfg.shared_dim as f64).sqrt()
    } else {
        1.0
    };
    let attend = |g: &mut Graph, q: Var, k: Var, v: Var| -> Result<(Var, Var), MatcherError> {
        let kt = g.transpose(k);
        let mut logits = g.matmul(q, kt)?;
        if scale != 1.0 {
            logits = g.scale(logits, scale);
        }
        let weights = g.softmax_rows(logits);
        Ok((weights, g.matmul(weights, v)?))
    };
    let (signifier_attention, w_m) = attend(g, q_i, k_p, v_p)?;
    let (region_attention, w_r) = attend(g, q_p, k_i, v_i)?;
    Ok(AttentionVars {
        signifier_attention,
        region_attention,
        w_m,
        w_r,
    })
}

fn unit_rows(g: &mut Graph, x: Var, which: &'static str) -> Result<Var, MatcherError> {
    let norms = g.l2_norm_rows(x);
    if let Some(row) = g.value(norms).data().iter().position(|&n| n == 0.0) {
        return Err(MatcherError::DegenerateFeature { which, row });
    }
    Ok(g.div(x, norms)?)
}

/// Cosine similarity between every row of `a` and every row of `b`.
pub fn cosine_matrix(
    g: &mut Graph,
    a: Var,
    b: Var,
    names: (&'static str, &'static str),
) -> Result<Var, MatcherError> {
    let an = unit_rows(g, a, names.0)?;
    let bn = unit_rows(g, b, names.1)?;
    let bt = g.transpose(bn);
    Ok(g.matmul(an, bt)?)
}

/// `D = 1 − max(0, cos(W_M_i, W_R_j))`, returned with the cosine matrix.
pub fn dissimilarity(g: &mut Graph, w_m: Var, w_r: Var) -> Result<(Var, Var), MatcherError> {
    let cos = cosine_matrix(g, w_m, w_r, ("W_M", "W_R"))?;
    let clipped = g.relu(cos);
    let d = g.rsub_scalar(1.0, clipped);
    // rounding can push cos a hair above 1
    let d = g.relu(d);
    Ok((d, cos))
}

/// Graph nodes of the match-to-match stage.
#[derive(Debug, Clone, Copy)]
pub struct PairVars {
    /// Flattened pair embedding `X = vec(D)·W_X`, `L × N_X`.
    pub x: Var,
    pub query: Var,
    pub z: Var,
    /// Additive attention output `M`, `L × N_X`.
    pub m_ff: Var,
    /// Match map `ℳ`, reshaped to `n × m`.
    pub match_map: Var,
}

fn global_row(g: &mut Graph, x: Var, w: Var) -> Result<Var, TensorError> {
    let logits = g.matmul(x, w)?;
    let gate = g.sigmoid(logits);
    let gt = g.transpose(gate);
    g.matmul(gt, x)
}

pub fn match2match(
    g: &mut Graph,
    pv: &mut ParamVars,
    cfg: &MatcherConfig,
    d: Var,
) -> Result<PairVars, MatcherError> {
    cfg.validate()?;
    let (n, m) = (g.value(d).rows(), g.value(d).cols());
    let l = n * m;
    let flat = g.reshape(d, l, 1)?;
    let wx = pv.get(g, "matcher.x")?;
    let x = g.matmul(flat, wx)?;
    let wq = pv.get(g, "matcher.ff_q")?;
    let wk = pv.get(g, "matcher.ff_k")?;
    let wv = pv.get(g, "matcher.ff_v")?;
    let query = g.matmul(x, wq)?;
    let key = g.matmul(x, wk)?;
    let value = g.matmul(x, wv)?;

    let aq = pv.get(g, "matcher.ff_wq")?;
    let global_q = global_row(g, query, aq)?;
    let z = g.hadamard(key, global_q)?;
    let ak = pv.get(g, "matcher.ff_wk")?;
    let global_k = global_row(g, z, ak)?;
    let m_ff = g.hadamard(value, global_k)?;

    let hw = cfg.head_width();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let part = g.slice_cols(m_ff, h * hw, (h + 1) * hw)?;
        let mix = pv.get(g, &format!("matcher.head{h}.mix"))?;
        heads.push(g.matmul(part, mix)?);
    }
    let multi = g.concat_cols(&heads)?;
    let ow = pv.get(g, "matcher.out_w")?;
    let ob = pv.get(g, "matcher.out_b")?;
    let scores = g.matmul(multi, ow)?;
    let scores = g.add(scores, ob)?;
    let match_map = g.reshape(scores, n, m)?;
    Ok(PairVars {
        x,
        query,
        z,
        m_ff,
        match_map,
    })
}

/// Predicted assignment and the discrete match set of every signifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Row-stochastic `n × m` confidences.
    pub probs: Tensor,
    /// Per signifier: the argmax region plus every region with
    /// dissimilarity below the threshold, ascending.
    pub matches: Vec<Vec<usize>>,
}

pub fn assign(d: &Tensor, match_map: &Tensor, threshold: f64) -> Result<Assignment, MatcherError> {
    if d.shape() != match_map.shape() {
        return Err(MatcherError::Tensor(TensorError::Dimension {
            op: "assign",
            lhs: d.shape().to_vec(),
            rhs: match_map.shape().to_vec(),
        }));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MatcherError::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    let m = d.cols();
    let mut probs = match_map.clone();
    probs.requires_grad = false;
    probs.grad = None;
    for row in probs.data_mut().chunks_mut(m) {
        crate::tensor::softmax_in_place(row);
    }
    let matches = (0..d.rows())
        .map(|i| {
            let row = probs.row(i);
            let best = (1..m).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            let mut set: Vec<usize> = (0..m)
                .filter(|&j| j == best || d.get(i, j) < threshold)
                .collect();
            set.dedup();
            set
        })
        .collect();
    Ok(Assignment { probs, matches })
}

/// Every intermediate of one matcher pass, detached from the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchState {
    pub w_m: Tensor,
    pub w_r: Tensor,
    pub d: Tensor,
    pub x: Tensor,
    pub z: Tensor,
    pub m_ff: Tensor,
    pub match_map: Tensor,
    pub assignment: Assignment,
}

impl MatchState {
    pub fn compute(
        store: &ParamStore,
        cfg: &MatcherConfig,
        f_i: &Tensor,
        f_p: &Tensor,
    ) -> Result<Self, MatcherError> {
        let mut g = Graph::new();
        let mut pv = ParamVars::new(store);
        let fi = g.constant(f_i.clone());
        let fp = g.constant(f_p.clone());
        let att = cross_modal_attention(&mut g, &mut pv, cfg, fi, fp)?;
        let (d, _) = dissimilarity(&mut g, att.w_m, att.w_r)?;
        let pair = match2match(&mut g, &mut pv, cfg, d)?;
        Self::collect(&g, &att, d, &pair, cfg.similarity_threshold)
    }

    pub fn collect(
        g: &Graph,
        att: &AttentionVars,
        d: Var,
        pair: &PairVars,
        threshold: f64,
    ) -> Result<Self, MatcherError> {
        let assignment = assign(g.value(d), g.value(pair.match_map), threshold)?;
        Ok(Self {
            w_m: g.value(att.w_m).clone(),
            w_r: g.value(att.w_r).clone(),
            d: g.value(d).clone(),
            x: g.value(pair.x).clone(),
            z: g.value(pair.z).clone(),
            m_ff: g.value(pair.m_ff).clone(),
            match_map: g.value(pair.match_map).clone(),
            assignment,
        })
    }
}
