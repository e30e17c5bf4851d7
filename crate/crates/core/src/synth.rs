//! Procedural scenes with known signifier/region correspondences.
//!
//! Every matched signifier shares a latent code with its region: an action,
//! a surface color, a surface normal and a box size. The signifier row is a
//! fixed per-dataset linear embedding of that code plus Gaussian noise,
//! while the region's points carry the color and normal directly. Distractor
//! regions draw independent codes.

use std::io::Read as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{
    rasterize, read_actions, read_scene, write_actions, write_scene, GeometryError, RegionRecord, SceneRecord,
    ScenePointCloud, VoxelGrid, VoxelMask,
};
use crate::tensor::Tensor;

pub const ACTION_NAMES: [&str; 8] = ["open", "rotate", "push", "pull", "sit", "plug", "press", "grasp"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible configuration: {0}")]
    Infeasible(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("signifier file {path}: {detail}")]
    Sidecar { path: String, detail: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub scene_count: usize,
    /// Scenes written to the validation split by the directory writer.
    pub val_count: usize,
    pub regions: (usize, usize),
    pub signifiers: (usize, usize),
    pub actions: Vec<String>,
    pub noise_std: f64,
    pub distractor_rate: f64,
    pub points_per_region: usize,
    pub sub_widths: [usize; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            scene_count: 200,
            val_count: 50,
            regions: (2, 8),
            signifiers: (1, 4),
            actions: ACTION_NAMES.iter().map(|s| s.to_string()).collect(),
            noise_std: 0.05,
            distractor_rate: 0.25,
            points_per_region: 24,
            sub_widths: [16, 16, 16],
        }
    }
}

/// Regions are placed in distinct octants of the unit cube.
pub const MAX_REGIONS: usize = 8;

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (rlo, rhi) = self.regions;
        let (slo, shi) = self.signifiers;
        if rlo == 0 || rlo > rhi || slo == 0 || slo > shi {
            return Err(SynthError::Config(format!(
                "empty range: regions {rlo}..={rhi}, signifiers {slo}..={shi}"
            )));
        }
        if rhi > MAX_REGIONS {
            return Err(SynthError::Config(format!("at most {MAX_REGIONS} regions per scene")));
        }
        if rlo < slo {
            return Err(SynthError::Infeasible(format!(
                "scenes with {rlo} regions cannot host {slo} signifiers"
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(SynthError::Config(format!("noise_std = {}", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.distractor_rate) {
            return Err(SynthError::Config(format!("distractor_rate = {}", self.distractor_rate)));
        }
        if self.actions.is_empty() || self.points_per_region == 0 {
            return Err(SynthError::Config("empty vocabulary or empty regions".into()));
        }
        if self.sub_widths.contains(&0) {
            return Err(SynthError::Config("zero signifier sub-width".into()));
        }
        Ok(())
    }

    pub fn signifier_width(&self) -> usize {
        self.sub_widths.iter().sum()
    }

    /// Signifier and unmatched-region counts for a scene with `m` regions.
    pub fn counts(&self, m: usize) -> (usize, usize) {
        let unmatched = (self.distractor_rate * m as f64).floor() as usize;
        let n = (m - unmatched).clamp(self.signifiers.0, self.signifiers.1).min(m);
        (n, m - n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub action: usize,
    pub color: [f64; 3],
    pub normal: [f64; 3],
    pub size: [f64; 3],
}

impl LatentCode {
    fn draw(rng: &mut ChaCha8Rng, vocab: usize) -> Self {
        let action = rng.gen_range(0..vocab);
        let color = [rng.gen(), rng.gen(), rng.gen()];
        let normal = loop {
            let v: [f64; 3] = [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-6 {
                break [v[0] / n, v[1] / n, v[2] / n];
            }
        };
        let size = [rng.gen_range(0.15..0.4), rng.gen_range(0.15..0.4), rng.gen_range(0.15..0.4)];
        Self {
            action,
            color,
            normal,
            size,
        }
    }

    pub fn distance_sq(&self, other: &Self) -> f64 {
        let sq = |a: &[f64; 3], b: &[f64; 3]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let action = if self.action == other.action { 0.0 } else { 1.0 };
        action + sq(&self.color, &other.color) + sq(&self.normal, &other.normal) + sq(&self.size, &other.size)
    }
}

/// One scene with its signifier rows and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene: SceneRecord,
    /// `n × N_I` signifier feature rows.
    pub signifiers: Tensor,
    /// Ground-truth region index of every signifier.
    pub gt_region: Vec<usize>,
    /// Present only for freshly generated samples.
    pub latent: Option<Latents>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub signifiers: Vec<LatentCode>,
    pub regions: Vec<LatentCode>,
}

impl Sample {
    pub fn signifier_count(&self) -> usize {
        self.gt_region.len()
    }

    pub fn region_count(&self) -> usize {
        self.scene.regions.len()
    }

    /// Binary `n × m` assignment.
    pub fn gt_assignment(&self) -> Tensor {
        let mut a = Tensor::zeros(self.signifier_count(), self.region_count());
        for (i, &j) in self.gt_region.iter().enumerate() {
            a.set(i, j, 1.0);
        }
        a
    }

    /// Ground-truth affordance masks with their action ids, one per signifier.
    pub fn gt_masks(&self, grid: VoxelGrid) -> Result<Vec<(VoxelMask, usize)>, GeometryError> {
        self.gt_region
            .iter()
            .map(|&j| {
                let r = &self.scene.regions[j];
                let idx: Vec<usize> = r.point_indices.iter().map(|&p| p as usize).collect();
                Ok((rasterize(&self.scene.cloud, &idx, grid)?, r.action_id as usize))
            })
            .collect()
    }
}

/// Counter-keyed stream: the same `(seed, scene, entity)` always yields the
/// same numbers, independent of generation order.
fn keyed_rng(seed: u64, scene: u64, entity: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&scene.to_le_bytes());
    key[16..24].copy_from_slice(&entity.to_le_bytes());
    key[24..].copy_from_slice(b"afsynth\0");
    ChaCha8Rng::from_seed(key)
}

const DATASET_KEY: u64 = u64::MAX;
const SCENE_LAYOUT: u64 = 0;
const REGION_BASE: u64 = 1;
const SIGNIFIER_BASE: u64 = 1 << 16;

/// The three fixed linear maps from latent code to signifier sub-vectors.
struct Embeddings {
    human: Tensor,
    object: Tensor,
    interaction: Tensor,
}

impl Embeddings {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = keyed_rng(cfg.seed, DATASET_KEY, 0);
        let mut draw = |rows: usize, cols: usize| {
            let std = (1.0 / cols as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut rng)).collect())
        };
        let [h, o, i] = cfg.sub_widths;
        Self {
            human: draw(h, 3),
            object: draw(o, 3),
            interaction: draw(i, cfg.actions.len()),
        }
    }

    fn embed(&self, code: &LatentCode, vocab: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut onehot = vec![0.0; vocab];
        onehot[code.action] = 1.0;
        let mut out = Vec::new();
        for (m, x) in [
            (&self.human, &code.normal[..]),
            (&self.object, &code.color[..]),
            (&self.interaction, &onehot[..]),
        ] {
            for r in 0..m.rows() {
                let v: f64 = m.row(r).iter().zip(x).map(|(a, b)| a * b).sum();
                let eps: f64 = StandardNormal.sample(rng);
                out.push(v + noise * eps);
            }
        }
        out
    }
}

fn scene_sample(cfg: &SynthConfig, emb: &Embeddings, index: u64) -> Sample {
    let vocab = cfg.actions.len();
    let mut layout = keyed_rng(cfg.seed, index, SCENE_LAYOUT);
    let m = layout.gen_range(cfg.regions.0..=cfg.regions.1);
    let (n, _) = cfg.counts(m);
    let mut cells: Vec<usize> = (0..MAX_REGIONS).collect();
    for k in 0..m {
        let pick = layout.gen_range(k..MAX_REGIONS);
        cells.swap(k, pick);
    }
    let mut order: Vec<usize> = (0..m).collect();
    for k in 0..n {
        let pick = layout.gen_range(k..m);
        order.swap(k, pick);
    }
    // signifier i matches region order[i]
    let gt_region: Vec<usize> = order[..n].to_vec();

    let mut points = Vec::with_capacity(m * cfg.points_per_region);
    let mut features = Vec::with_capacity(points.capacity());
    let mut regions = Vec::with_capacity(m);
    let mut region_codes = Vec::with_capacity(m);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    for (j, &cell) in cells.iter().take(m).enumerate() {
        let mut rng = keyed_rng(cfg.seed, index, REGION_BASE + j as u64);
        let code = LatentCode::draw(&mut rng, vocab);
        let base = [(cell & 1) as f64 * 0.5, ((cell >> 1) & 1) as f64 * 0.5, ((cell >> 2) & 1) as f64 * 0.5];
        let lo: Vec<f64> = (0..3).map(|a| base[a] + rng.gen_range(0.0..(0.5 - code.size[a]))).collect();
        let start = points.len() as u32;
        for _ in 0..cfg.points_per_region {
            points.push([
                lo[0] + rng.gen::<f64>() * code.size[0],
                lo[1] + rng.gen::<f64>() * code.size[1],
                lo[2] + rng.gen::<f64>() * code.size[2],
            ]);
            let mut rgb = code.color;
            if cfg.noise_std > 0.0 {
                rgb.iter_mut().for_each(|c| *c += noise.sample(&mut rng));
            }
            features.push([rgb[0], rgb[1], rgb[2], code.normal[0], code.normal[1], code.normal[2]]);
        }
        regions.push(RegionRecord {
            action_id: code.action as u32,
            point_indices: (start..points.len() as u32).collect(),
            is_affordance: gt_region.contains(&j),
        });
        region_codes.push(code);
    }

    let width = cfg.signifier_width();
    let mut rows = Vec::with_capacity(n * width);
    let mut signifier_codes = Vec::with_capacity(n);
    for (i, &j) in gt_region.iter().enumerate() {
        let mut rng = keyed_rng(cfg.seed, index, SIGNIFIER_BASE + i as u64);
        let code = region_codes[j].clone();
        rows.extend(emb.embed(&code, vocab, cfg.noise_std, &mut rng));
        signifier_codes.push(code);
    }
    Sample {
        scene: SceneRecord {
            cloud: ScenePointCloud { points, features },
            regions,
        },
        signifiers: Tensor::matrix(n, width, rows),
        gt_region,
        latent: Some(Latents {
            signifiers: signifier_codes,
            regions: region_codes,
        }),
    }
}

/// Scenes `start..start + count` of the dataset defined by `cfg`.
pub fn generate_range(cfg: &SynthConfig, start: usize, count: usize) -> Result<Vec<Sample>, SynthError> {
    cfg.validate()?;
    let emb = Embeddings::new(cfg);
    Ok((start..start + count)
        .into_par_iter()
        .map(|k| scene_sample(cfg, &emb, k as u64))
        .collect())
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<Sample>, SynthError> {
    generate_range(cfg, 0, cfg.scene_count)
}

/// Training scenes followed by the disjoint validation scenes.
pub fn generate_splits(cfg: &SynthConfig) -> Result<(Vec<Sample>, Vec<Sample>), SynthError> {
    Ok((generate(cfg)?, generate_range(cfg, cfg.scene_count, cfg.val_count)?))
}

/// Assigns every signifier the region with the nearest latent code.
pub fn nearest_code_assignment(latent: &Latents) -> Vec<usize> {
    latent
        .signifiers
        .iter()
        .map(|s| {
            let mut best = 0;
            for (j, r) in latent.regions.iter().enumerate() {
                if s.distance_sq(r) < s.distance_sq(&latent.regions[best]) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub const SIGNIFIER_MAGIC: &[u8; 4] = b"AFSG";
pub const SIGNIFIER_VERSION: u32 = 1;

pub fn signifiers_to_bytes(rows: &Tensor, gt_region: &[usize]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SIGNIFIER_MAGIC);
    out.extend_from_slice(&SIGNIFIER_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(rows.cols() as u32).to_le_bytes());
    for v in rows.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &j in gt_region {
        out.extend_from_slice(&(j as u32).to_le_bytes());
    }
    out
}

pub fn signifiers_from_bytes(bytes: &[u8]) -> Result<(Tensor, Vec<usize>), String> {
    let mut cur = bytes;
    let mut word = [0u8; 4];
    let mut next_u32 = |cur: &mut &[u8]| -> Result<u32, String> {
        cur.read_exact(&mut word).map_err(|_| "unexpected end of data".to_string())?;
        Ok(u32::from_le_bytes(word))
    };
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| "unexpected end of data")?;
    if &magic != SIGNIFIER_MAGIC {
        return Err("bad magic".into());
    }
    let version = next_u32(&mut cur)?;
    if version != SIGNIFIER_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let n = next_u32(&mut cur)? as usize;
    let w = next_u32(&mut cur)? as usize;
    if n == 0 || w == 0 {
        return Err("empty signifier block".into());
    }
    if cur.len() != n * w * 8 + n * 4 {
        return Err(format!("expected {} payload bytes, found {}", n * w * 8 + n * 4, cur.len()));
    }
    let (vals, idx) = cur.split_at(n * w * 8);
    let data = vals
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let gt = idx
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    Ok((Tensor::matrix(n, w, data), gt))
}

fn scene_stem(k: usize) -> String {
    format!("scene_{k:04}")
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `scene_XXXX.bin` / `scene_XXXX.sig` pairs and `actions.txt`.
pub fn write_split(dir: &Path, samples: &[Sample], actions: &[String]) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    write_actions(&dir.join("actions.txt"), actions)?;
    for (k, s) in samples.iter().enumerate() {
        write_scene(&dir.join(format!("{}.bin", scene_stem(k))), &s.scene)?;
        let sig = dir.join(format!("{}.sig", scene_stem(k)));
        std::fs::write(&sig, signifiers_to_bytes(&s.signifiers, &s.gt_region)).map_err(io(&sig))?;
    }
    Ok(())
}

/// Reads every scene of a split directory in file-name order.
pub fn read_split(dir: &Path) -> Result<(Vec<Sample>, Vec<String>), SynthError> {
    let actions = read_actions(&dir.join("actions.txt"))?;
    let mut stems: Vec<String> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".bin").filter(|s| s.starts_with("scene_")).map(str::to_string)
        })
        .collect();
    stems.sort();
    let mut out = Vec::with_capacity(stems.len());
    for stem in stems {
        let scene = read_scene(&dir.join(format!("{stem}.bin")))?;
        let sig = dir.join(format!("{stem}.sig"));
        let bytes = std::fs::read(&sig).map_err(io(&sig))?;
        let (signifiers, gt_region) = signifiers_from_bytes(&bytes).map_err(|detail| SynthError::Sidecar {
            path: sig.display().to_string(),
            detail,
        })?;
        if let Some(&j) = gt_region.iter().find(|&&j| j >= scene.regions.len()) {
            return Err(SynthError::Sidecar {
                path: sig.display().to_string(),
                detail: format!("region index {j} out of range"),
            });
        }
        out.push(Sample {
            scene,
            signifiers,
            gt_region,
            latent: None,
        });
    }
    Ok((out, actions))
}
