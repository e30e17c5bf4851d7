//! The four training objectives and their weighted total.
//!
//! Every pairwise term uses the row-major flattening `l = i·m + j`, the same
//! order the match-to-match stage uses for its `L = n·m` rows.

use std::fmt::Write as _;

use thiserror::Error;

use crate::matcher::MatcherError;
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error("pseudo targets: {0}")]
    Targets(String),
    #[error("unknown loss component {0:?}")]
    UnknownComponent(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1e-4,
            lambda: 1.0,
            gamma: 0.5,
            eta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("eta", self.eta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::Weights(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Which components enter the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    pub embed: bool,
    pub align: bool,
    pub bidir: bool,
    pub dissim: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl LossToggles {
    pub const fn all() -> Self {
        Self {
            embed: true,
            align: true,
            bidir: true,
            dissim: true,
        }
    }

    pub const fn none() -> Self {
        Self {
            embed: false,
            align: false,
            bidir: false,
            dissim: false,
        }
    }

    /// Parses a `+`- or `,`-separated component list such as `align+dissim`.
    pub fn parse(spec: &str) -> Result<Self, LossError> {
        let mut t = Self::none();
        for part in spec.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "embed" => t.embed = true,
                "align" => t.align = true,
                "bidir" => t.bidir = true,
                "dissim" => t.dissim = true,
                "all" => t = Self::all(),
                other => return Err(LossError::UnknownComponent(other.to_string())),
            }
        }
        Ok(t)
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.align, "align"),
            (self.dissim, "dissim"),
            (self.embed, "embed"),
            (self.bidir, "bidir"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join("+")
        }
    }

    /// The cumulative ladder align, +dissim, +embed, +bidir.
    pub fn ladder() -> Vec<Self> {
        let mut t = Self::none();
        let mut out = Vec::with_capacity(4);
        t.align = true;
        out.push(t);
        t.dissim = true;
        out.push(t);
        t.embed = true;
        out.push(t);
        t.bidir = true;
        out.push(t);
        out
    }
}

/// Variant switches for the alignment and dissimilarity losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossOptions {
    /// Use `1 − max(0, cos)` in the dissimilarity loss.
    pub clipped_dissim: bool,
    /// Align the scalar match map to the row mean of the targets instead of
    /// aligning the pair vectors.
    pub scalar_align: bool,
}

/// One target row per flattened signifier/region pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTargets {
    pub t: Tensor,
}

/// Weight on the region's own action in the synthetic provider.
pub const TARGET_PEAK: f64 = 0.8;

impl PseudoTargets {
    /// Synthetic provider: the vocabulary basis is the first `vocab` standard
    /// unit rows of width `width`, and row `(i, j)` mixes the basis row of
    /// region `j`'s action with the uniform average of all basis rows.
    pub fn synthetic(n: usize, region_actions: &[usize], vocab: usize, width: usize) -> Result<Self, LossError> {
        if vocab == 0 || vocab > width {
            return Err(LossError::Targets(format!(
                "vocabulary of {vocab} does not fit an orthonormal basis of width {width}"
            )));
        }
        if let Some(&a) = region_actions.iter().find(|&&a| a >= vocab) {
            return Err(LossError::Targets(format!("action {a} outside vocabulary of {vocab}")));
        }
        let m = region_actions.len();
        let mut t = Tensor::zeros(n * m, width);
        let uniform = (1.0 - TARGET_PEAK) / vocab as f64;
        for i in 0..n {
            for (j, &a) in region_actions.iter().enumerate() {
                let l = i * m + j;
                for c in 0..vocab {
                    t.set(l, c, uniform);
                }
                t.set(l, a, TARGET_PEAK + uniform);
            }
        }
        Ok(Self { t })
    }

    /// Per-pair mean of the target row, as an `L × 1` column.
    pub fn row_means(&self) -> Tensor {
        let w = self.t.cols() as f64;
        Tensor::matrix(
            self.t.rows(),
            1,
            (0..self.t.rows()).map(|l| self.t.row(l).iter().sum::<f64>() / w).collect(),
        )
    }
}

/// Inserts the two consistency heads as identity maps.
pub fn init_heads(store: &mut ParamStore, dim: usize) {
    store.insert("heads.g_ins", Tensor::eye(dim));
    store.insert("heads.g_r", Tensor::eye(dim));
}

/// One-hot selectors expanding `n` signifier rows and `m` region rows to
/// the `n·m` flattened pairs.
pub fn pair_selectors(n: usize, m: usize) -> (Tensor, Tensor) {
    let l = n * m;
    let mut si = Tensor::zeros(l, n);
    let mut sj = Tensor::zeros(l, m);
    for i in 0..n {
        for j in 0..m {
            si.set(i * m + j, i, 1.0);
            sj.set(i * m + j, j, 1.0);
        }
    }
    (si, sj)
}

fn flat_weights(g: &mut Graph, a: Var) -> Result<Var, TensorError> {
    let n = g.value(a).len();
    g.reshape(a, n, 1)
}

fn norm_penalty(g: &mut Graph, x: Var) -> Var {
    let norms = g.l2_norm_rows(x);
    let off = g.add_scalar(norms, -1.0);
    let sq = g.square(off);
    g.sum(sq)
}

/// `α·[Σ(‖φᵢ‖−1)² + Σ(‖ψⱼ‖−1)²] + β·Σ‖θ‖²_F`.
pub fn loss_embed(
    g: &mut Graph,
    phi: Var,
    psi: Var,
    params: &[Var],
    alpha: f64,
    beta: f64,
) -> Result<Var, LossError> {
    let a = norm_penalty(g, phi);
    let b = norm_penalty(g, psi);
    let norms = g.add(a, b)?;
    let mut total = g.scale(norms, alpha);
    if beta != 0.0 {
        for &p in params {
            let f = g.frobenius_sq(p);
            let f = g.scale(f, beta);
            total = g.add(total, f)?;
        }
    }
    Ok(total)
}

/// `Σ A_ij ‖M_ij − T_ij‖²` over the flattened pair rows.
pub fn loss_align(g: &mut Graph, m_ff: Var, targets: Var, a: Var) -> Result<Var, LossError> {
    let diff = g.sub(m_ff, targets)?;
    let sq = g.square(diff);
    let per_pair = g.sum_rows(sq);
    let w = flat_weights(g, a)?;
    let weighted = g.hadamard(per_pair, w)?;
    Ok(g.sum(weighted))
}

/// `Σ A_ij (‖φᵢ·G_ins − ψⱼ‖² + ‖ψⱼ·G_r − φᵢ‖²)`.
pub fn loss_bidir(
    g: &mut Graph,
    phi: Var,
    psi: Var,
    g_ins: Var,
    g_r: Var,
    a: Var,
) -> Result<Var, LossError> {
    let (n, m) = (g.value(a).rows(), g.value(a).cols());
    let (si, sj) = pair_selectors(n, m);
    let si = g.constant(si);
    let sj = g.constant(sj);
    let p = g.matmul(si, phi)?;
    let s = g.matmul(sj, psi)?;
    let fwd = g.matmul(p, g_ins)?;
    let fwd = g.sub(fwd, s)?;
    let fwd = g.square(fwd);
    let back = g.matmul(s, g_r)?;
    let back = g.sub(back, p)?;
    let back = g.square(back);
    let both = g.add(fwd, back)?;
    let per_pair = g.sum_rows(both);
    let w = flat_weights(g, a)?;
    let weighted = g.hadamard(per_pair, w)?;
    Ok(g.sum(weighted))
}

/// `Σ A_ij [1 − cos(W_M_i, W_R_j)]` over the pairs with positive weight.
pub fn loss_dissim(g: &mut Graph, w_m: Var, w_r: Var, a: Var, clipped: bool) -> Result<Var, LossError> {
    let av = g.value(a).clone();
    let (n, m) = (av.rows(), av.cols());
    let pairs: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, av.get(i, j)))
        .filter(|&(_, _, w)| w > 0.0)
        .collect();
    if pairs.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let k = pairs.len();
    let mut si = Tensor::zeros(k, n);
    let mut sj = Tensor::zeros(k, m);
    let mut wts = Tensor::zeros(k, 1);
    for (r, &(i, j, w)) in pairs.iter().enumerate() {
        si.set(r, i, 1.0);
        sj.set(r, j, 1.0);
        wts.set(r, 0, w);
    }
    let si = g.constant(si);
    let sj = g.constant(sj);
    let p = g.matmul(si, w_m)?;
    let s = g.matmul(sj, w_r)?;
    let pn = g.l2_norm_rows(p);
    let sn = g.l2_norm_rows(s);
    for (r, &(i, j, _)) in pairs.iter().enumerate() {
        if g.value(pn).get(r, 0) == 0.0 {
            return Err(MatcherError::DegenerateFeature { which: "W_M", row: i }.into());
        }
        if g.value(sn).get(r, 0) == 0.0 {
            return Err(MatcherError::DegenerateFeature { which: "W_R", row: j }.into());
        }
    }
    let dot = g.hadamard(p, s)?;
    let dot = g.sum_rows(dot);
    let denom = g.hadamard(pn, sn)?;
    let mut cos = g.div(dot, denom)?;
    if clipped {
        cos = g.relu(cos);
    }
    let d = g.rsub_scalar(1.0, cos);
    // keeps rounding at cos ≈ 1 from going negative
    let d = g.relu(d);
    let wv = g.constant(wts);
    let weighted = g.hadamard(d, wv)?;
    Ok(g.sum(weighted))
}

/// The four component nodes of one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub embed: Var,
    pub align: Var,
    pub bidir: Var,
    pub dissim: Var,
}

/// Raw component values, their weights and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub embed: f64,
    pub align: f64,
    pub bidir: f64,
    pub dissim: f64,
    pub total: f64,
    pub weights: LossWeights,
    pub toggles: LossToggles,
    pub grad_norm: f64,
    pub clipped: bool,
}

impl LossReport {
    pub fn from_values(values: [f64; 4], weights: LossWeights, toggles: LossToggles) -> Self {
        let [embed, align, bidir, dissim] = values;
        let mut total = 0.0;
        if toggles.embed {
            total += embed;
        }
        if toggles.align {
            total += weights.lambda * align;
        }
        if toggles.bidir {
            total += weights.gamma * bidir;
        }
        if toggles.dissim {
            total += weights.eta * dissim;
        }
        Self {
            step: 0,
            embed,
            align,
            bidir,
            dissim,
            total,
            weights,
            toggles,
            grad_norm: 0.0,
            clipped: false,
        }
    }

    /// Component-wise mean of per-scene reports, summed in slice order.
    pub fn mean(reports: &[LossReport]) -> Option<Self> {
        let first = reports.first()?;
        let k = reports.len() as f64;
        let mut out = *first;
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        out.embed = sum(|r| r.embed);
        out.align = sum(|r| r.align);
        out.bidir = sum(|r| r.bidir);
        out.dissim = sum(|r| r.dissim);
        out.total = sum(|r| r.total);
        Some(out)
    }

    pub const CSV_HEADER: &'static str =
        "step,embed,align,bidir,dissim,total,alpha,beta,lambda,gamma,eta,grad_norm,clipped";

    pub fn csv_row(&self) -> String {
        let w = &self.weights;
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e},{},{},{},{},{},{:e},{}",
            self.step,
            self.embed,
            self.align,
            self.bidir,
            self.dissim,
            self.total,
            w.alpha,
            w.beta,
            w.lambda,
            w.gamma,
            w.eta,
            self.grad_norm,
            u8::from(self.clipped)
        );
        s
    }
}

/// Weighted sum of the enabled components. Disabled ones are left out of
/// the graph entirely.
pub fn loss_total(
    g: &mut Graph,
    terms: &LossTerms,
    weights: &LossWeights,
    toggles: &LossToggles,
) -> Result<(Var, LossReport), LossError> {
    weights.validate()?;
    let mut total = g.constant(Tensor::scalar(0.0));
    for (on, var, w) in [
        (toggles.embed, terms.embed, 1.0),
        (toggles.align, terms.align, weights.lambda),
        (toggles.bidir, terms.bidir, weights.gamma),
        (toggles.dissim, terms.dissim, weights.eta),
    ] {
        if on {
            let t = g.scale(var, w);
            total = g.add(total, t)?;
        }
    }
    let values = [terms.embed, terms.align, terms.bidir, terms.dissim].map(|v| g.value(v).item());
    let mut report = LossReport::from_values(values, *weights, *toggles);
    report.total = g.value(total).item();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(g: &mut Graph, r: usize, cols: usize, v: Vec<f64>) -> Var {
        g.constant(Tensor::matrix(r, cols, v))
    }

    #[test]
    fn embed_cases() {
        let mut g = Graph::new();
        let phi = c(&mut g, 1, 2, vec![0.6, 0.8]);
        let psi = c(&mut g, 2, 2, vec![1.0, 0.0, 0.0, -1.0]);
        let l = loss_embed(&mut g, phi, psi, &[], 1.0, 0.0).unwrap();
        assert!(g.value(l).item().abs() < 1e-15);

        let two = c(&mut g, 1, 2, vec![2.0, 0.0]);
        let unit = c(&mut g, 1, 2, vec![0.0, 1.0]);
        let l = loss_embed(&mut g, two, unit, &[], 1.0, 0.0).unwrap();
        assert_eq!(g.value(l).item(), 1.0);

        let eye = g.param(&Tensor::eye(2));
        let l = loss_embed(&mut g, phi, psi, &[eye], 1.0, 1.0).unwrap();
        assert!((g.value(l).item() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn align_cases() {
        let mut g = Graph::new();
        let m = c(&mut g, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let a = c(&mut g, 1, 2, vec![0.3, 0.7]);
        let l = loss_align(&mut g, m, m, a).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let zero = c(&mut g, 1, 2, vec![0.0, 0.0]);
        let t = c(&mut g, 2, 2, vec![0.0; 4]);
        let l = loss_align(&mut g, m, t, zero).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let m1 = c(&mut g, 1, 2, vec![3.0, 4.0]);
        let t1 = c(&mut g, 1, 2, vec![0.0, 0.0]);
        let a1 = c(&mut g, 1, 1, vec![1.0]);
        let l = loss_align(&mut g, m1, t1, a1).unwrap();
        assert_eq!(g.value(l).item(), 25.0);
    }

    #[test]
    fn bidir_cases() {
        let mut g = Graph::new();
        let eye = c(&mut g, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let phi = c(&mut g, 2, 2, vec![0.6, 0.8, 1.0, 0.0]);
        let psi = c(&mut g, 2, 2, vec![1.0, 0.0, 0.6, 0.8]);
        // signifier 0 ↔ region 1, signifier 1 ↔ region 0
        let a = c(&mut g, 2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let l = loss_bidir(&mut g, phi, psi, eye, eye, a).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let zero = c(&mut g, 2, 2, vec![0.0; 4]);
        let l = loss_bidir(&mut g, phi, psi, eye, eye, zero).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        // φ = [1, 2], ψ = [0, 1], G_ins = [[2,0],[0,1]], G_r = [[0,1],[1,0]]
        let phi = c(&mut g, 1, 2, vec![1.0, 2.0]);
        let psi = c(&mut g, 1, 2, vec![0.0, 1.0]);
        let gi = c(&mut g, 2, 2, vec![2.0, 0.0, 0.0, 1.0]);
        let gr = c(&mut g, 2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let one = c(&mut g, 1, 1, vec![1.0]);
        let l = loss_bidir(&mut g, phi, psi, gi, gr, one).unwrap();
        // φG_ins − ψ = [2, 1]; ψG_r − φ = [1, 0] − [1, 2] = [0, −2]
        assert_eq!(g.value(l).item(), 5.0 + 4.0);
    }

    #[test]
    fn dissim_cases() {
        let run = |a: Vec<f64>, b: Vec<f64>, clipped: bool| {
            let mut g = Graph::new();
            let k = a.len();
            let av = c(&mut g, 1, k, a);
            let bv = c(&mut g, 1, k, b);
            let one = c(&mut g, 1, 1, vec![1.0]);
            loss_dissim(&mut g, av, bv, one, clipped).map(|l| g.value(l).item())
        };
        assert!(run(vec![0.3, -2.0, 1.1], vec![0.3, -2.0, 1.1], false).unwrap().abs() < 1e-10);
        assert!((run(vec![1.0, 2.0], vec![-1.0, -2.0], false).unwrap() - 2.0).abs() < 1e-12);
        assert!((run(vec![1.0, 2.0], vec![-1.0, -2.0], true).unwrap() - 1.0).abs() < 1e-12);
        assert!((run(vec![1.0, 0.0], vec![0.0, 5.0], false).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            run(vec![0.0, 0.0], vec![1.0, 0.0], false),
            Err(LossError::Matcher(MatcherError::DegenerateFeature { which: "W_M", row: 0 }))
        ));
    }

    #[test]
    fn unmatched_zero_rows_are_ignored() {
        let mut g = Graph::new();
        let wm = c(&mut g, 1, 2, vec![1.0, 1.0]);
        let wr = c(&mut g, 2, 2, vec![0.0, 0.0, 2.0, 2.0]);
        let a = c(&mut g, 1, 2, vec![0.0, 1.0]);
        let l = loss_dissim(&mut g, wm, wr, a, false).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn total_cases() {
        let w = LossWeights::default();
        let zero = LossReport::from_values([0.0; 4], w, LossToggles::all());
        assert_eq!(zero.total, 0.0);
        let ones = LossWeights {
            lambda: 1.0,
            gamma: 1.0,
            eta: 1.0,
            ..w
        };
        assert_eq!(LossReport::from_values([1.0; 4], ones, LossToggles::all()).total, 4.0);
        let only = LossToggles::parse("align").unwrap();
        let two = LossWeights { lambda: 2.0, ..w };
        assert_eq!(LossReport::from_values([5.0, 3.0, 7.0, 9.0], two, only).total, 6.0);

        let mut g = Graph::new();
        let terms = LossTerms {
            embed: g.constant(Tensor::scalar(5.0)),
            align: g.constant(Tensor::scalar(3.0)),
            bidir: g.constant(Tensor::scalar(7.0)),
            dissim: g.constant(Tensor::scalar(9.0)),
        };
        let (t, report) = loss_total(&mut g, &terms, &two, &only).unwrap();
        assert_eq!(g.value(t).item(), 6.0);
        assert_eq!(report.embed, 5.0);
        assert_eq!(report.weights.lambda, 2.0);
    }

    #[test]
    fn toggles_parse_and_ladder() {
        assert_eq!(LossToggles::parse("align+dissim").unwrap().label(), "align+dissim");
        assert_eq!(LossToggles::parse("all").unwrap(), LossToggles::all());
        assert!(LossToggles::parse("bogus").is_err());
        let labels: Vec<String> = LossToggles::ladder().iter().map(|t| t.label()).collect();
        assert_eq!(labels, ["align", "align+dissim", "align+dissim+embed", "align+dissim+embed+bidir"]);
    }

    #[test]
    fn synthetic_targets_are_convex() {
        let t = PseudoTargets::synthetic(2, &[0, 3, 3], 4, 6).unwrap();
        assert_eq!(t.t.shape(), &[6, 6]);
        for l in 0..6 {
            let row = t.t.row(l);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert!((t.t.get(1, 3) - 0.85).abs() < 1e-15);
        assert!(PseudoTargets::synthetic(1, &[0], 7, 6).is_err());
        assert!(PseudoTargets::synthetic(1, &[5], 4, 6).is_err());
    }

    #[test]
    fn weights_reject_negatives() {
        let w = LossWeights {
            gamma: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
