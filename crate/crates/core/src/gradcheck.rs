//! Central finite-difference verification of every parameter gradient.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{EncoderConfig, ParamVars};
use crate::losses::{self, LossToggles, LossWeights};
use crate::matcher::MatcherConfig;
use crate::model::{Model, ModelConfig, ModelError, PreparedSample};
use crate::synth::{generate, SynthConfig};
use crate::tensor::{Graph, Tensor, Var};

/// Parameter namespaces reported separately.
pub const GROUPS: [&str; 4] = ["phi", "psi", "matcher", "heads"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Embed,
    Align,
    Bidir,
    Dissim,
    Total,
    /// A fixed random linear functional of the match map.
    MatchMap,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::Embed,
        Objective::Align,
        Objective::Bidir,
        Objective::Dissim,
        Objective::Total,
        Objective::MatchMap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Embed => "embed",
            Objective::Align => "align",
            Objective::Bidir => "bidir",
            Objective::Dissim => "dissim",
            Objective::Total => "total",
            Objective::MatchMap => "match_map",
        }
    }
}

/// Toy widths for the check. `embed_dim` is `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub samples: usize,
    pub embed_dim: usize,
    pub max_regions: usize,
    pub max_signifiers: usize,
    pub tolerance: f64,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            samples: 5,
            embed_dim: 8,
            max_regions: 4,
            max_signifiers: 3,
            tolerance: 1e-4,
            step: 1e-6,
        }
    }
}

impl GradcheckConfig {
    pub fn model_config(&self) -> ModelConfig {
        let d = self.embed_dim;
        ModelConfig {
            encoder: EncoderConfig {
                sub_widths: [3, 3, 3],
                phi_hidden: 6,
                psi_hidden: 6,
                region_width: 7,
                action_vocab: 4,
                action_embedding: 3,
                embed_dim: d,
                normalize: true,
            },
            matcher: MatcherConfig {
                shared_dim: 5,
                pair_dim: 4,
                heads: 2,
                ..Default::default()
            },
            weights: LossWeights {
                beta: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            scene_count: self.samples,
            regions: (2.min(self.max_regions), self.max_regions),
            signifiers: (1, self.max_signifiers.min(self.max_regions)),
            actions: crate::synth::ACTION_NAMES[..4].iter().map(|s| s.to_string()).collect(),
            noise_std: 0.1,
            points_per_region: 5,
            sub_widths: [3, 3, 3],
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub objective: Objective,
    pub group: &'static str,
    /// `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)`, worst over
    /// samples; 0 when both vanish.
    pub rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<GroupResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupResult> {
        self.results.iter().filter(|r| !r.pass)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<10} {:<8} {:>12} result\n", "objective", "group", "rel_err");
        for r in &self.results {
            let _ = writeln!(
                out,
                "{:<10} {:<8} {:>12.3e} {}",
                r.objective.name(),
                format!("{}.*", r.group),
                r.rel_err,
                if r.pass { "pass" } else { "FAIL" }
            );
        }
        out
    }
}

fn objective_var(
    model: &Model,
    g: &mut Graph,
    pv: &mut ParamVars,
    s: &PreparedSample,
    obj: Objective,
    probe: &Tensor,
) -> Result<Var, ModelError> {
    let f = model.forward(g, pv, s)?;
    if obj == Objective::MatchMap {
        let w = g.constant(probe.clone());
        let h = g.hadamard(f.pair.match_map, w)?;
        return Ok(g.sum(h));
    }
    let terms = model.loss_terms(g, pv, s, &f)?;
    let toggles = match obj {
        Objective::Embed => LossToggles::parse("embed"),
        Objective::Align => LossToggles::parse("align"),
        Objective::Bidir => LossToggles::parse("bidir"),
        Objective::Dissim => LossToggles::parse("dissim"),
        _ => Ok(LossToggles::all()),
    }?;
    Ok(losses::loss_total(g, &terms, &model.cfg.weights, &toggles)?.0)
}

fn value(model: &Model, s: &PreparedSample, obj: Objective, probe: &Tensor) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let mut pv = ParamVars::new(&model.params);
    let v = objective_var(model, &mut g, &mut pv, s, obj, probe)?;
    Ok(g.value(v).item())
}

fn analytic(
    model: &Model,
    s: &PreparedSample,
    obj: Objective,
    probe: &Tensor,
) -> Result<Vec<(String, Vec<f64>)>, ModelError> {
    let mut g = Graph::new();
    let mut pv = ParamVars::new(&model.params);
    let v = objective_var(model, &mut g, &mut pv, s, obj, probe)?;
    let grads = g.backward(v)?;
    Ok(model
        .params
        .iter()
        .map(|(name, t)| {
            let gv = pv
                .recorded()
                .iter()
                .find(|(n, _)| n == name)
                .and_then(|(_, var)| grads.get(*var))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()]);
            (name.to_string(), gv)
        })
        .collect())
}

fn group_of(name: &str) -> &'static str {
    GROUPS
        .iter()
        .find(|g| name.strip_prefix(**g).is_some_and(|r| r.starts_with('.')))
        .copied()
        .unwrap_or("other")
}

/// Runs the check. `corrupt` names a group whose analytic gradient is
/// deliberately perturbed, for exercising the failure path.
pub fn run(cfg: &GradcheckConfig, corrupt: Option<&str>) -> Result<GradcheckReport, ModelError> {
    let mcfg = cfg.model_config();
    let samples = generate(&cfg.synth_config()).map_err(|e| ModelError::Sample(e.to_string()))?;
    let prepared: Vec<PreparedSample> = samples
        .iter()
        .map(|s| PreparedSample::new(s, mcfg.encoder.sub_widths))
        .collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = vec![[0.0f64; GROUPS.len()]; Objective::ALL.len()];
    for (k, s) in prepared.iter().enumerate() {
        let mut model = Model::init(mcfg.clone(), cfg.seed.wrapping_add(k as u64))?;
        let probe = Tensor::matrix(
            s.n(),
            s.m(),
            (0..s.n() * s.m()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        for (oi, &obj) in Objective::ALL.iter().enumerate() {
            let mut grads = analytic(&model, s, obj, &probe)?;
            if let Some(bad) = corrupt {
                for (name, g) in &mut grads {
                    if group_of(name) == bad {
                        g.iter_mut().for_each(|v| *v = *v * 1.5 + 1e-3);
                    }
                }
            }
            let mut diff = [0.0f64; GROUPS.len()];
            let mut scale = [0.0f64; GROUPS.len()];
            for (name, grad) in &grads {
                let Some(gi) = GROUPS.iter().position(|g| *g == group_of(name)) else {
                    continue;
                };
                for (e, &a) in grad.iter().enumerate() {
                    let orig = model.params.get(name)?.data()[e];
                    let h = cfg.step * orig.abs().max(1.0);
                    model.params.get_mut(name)?.data_mut()[e] = orig + h;
                    let up = value(&model, s, obj, &probe)?;
                    model.params.get_mut(name)?.data_mut()[e] = orig - h;
                    let down = value(&model, s, obj, &probe)?;
                    model.params.get_mut(name)?.data_mut()[e] = orig;
                    let num = (up - down) / (2.0 * h);
                    diff[gi] += (a - num).powi(2);
                    scale[gi] += a * a + num * num;
                }
            }
            for gi in 0..GROUPS.len() {
                let denom = scale[gi].sqrt();
                let err = if denom == 0.0 { 0.0 } else { diff[gi].sqrt() / denom };
                worst[oi][gi] = worst[oi][gi].max(err);
            }
        }
    }
    let mut results = Vec::new();
    for (oi, &objective) in Objective::ALL.iter().enumerate() {
        for (gi, &group) in GROUPS.iter().enumerate() {
            let rel_err = worst[oi][gi];
            results.push(GroupResult {
                objective,
                group,
                rel_err,
                pass: rel_err < cfg.tolerance,
            });
        }
    }
    Ok(GradcheckReport {
        results,
        tolerance: cfg.tolerance,
    })
}
