//! Mask-level average precision over voxel IoU thresholds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::{voxel_iou, GeometryError, VoxelMask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("IoU threshold {0} outside (0, 1]")]
    Threshold(f64),
    #[error("invalid prediction {index}: {detail}")]
    Prediction { index: usize, detail: String },
    #[error("{preds} prediction scenes but {gts} ground-truth scenes")]
    SceneCount { preds: usize, gts: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask: VoxelMask,
    pub confidence: f64,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub mask: VoxelMask,
    pub action: usize,
}

/// `0.50, 0.55, …, 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    /// Let any prediction match any ground truth regardless of action.
    pub class_agnostic: bool,
    /// Average per-scene AP instead of pooling all scenes.
    pub macro_average: bool,
}

fn check_threshold(t: f64) -> Result<(), MetricsError> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(MetricsError::Threshold(t))
    }
}

fn check_predictions(preds: &[Prediction]) -> Result<(), MetricsError> {
    for (index, p) in preds.iter().enumerate() {
        if p.mask.is_empty() {
            return Err(MetricsError::Prediction {
                index,
                detail: "empty mask".into(),
            });
        }
        if !p.confidence.is_finite() {
            return Err(MetricsError::Prediction {
                index,
                detail: format!("confidence {}", p.confidence),
            });
        }
    }
    Ok(())
}

/// Area under the precision envelope of a ranked hit sequence.
fn envelope_ap(hits: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Ranked hit flags for predictions pooled over scenes. Ties in confidence
/// keep the input order; matching never crosses scenes.
fn ranked_hits(
    scenes: &[(&[Prediction], &[GroundTruth])],
    threshold: f64,
    class_agnostic: bool,
) -> Result<(Vec<bool>, usize), MetricsError> {
    let mut order: Vec<(usize, usize)> = Vec::new();
    let mut ious: Vec<Vec<Vec<f64>>> = Vec::with_capacity(scenes.len());
    for (s, (preds, gts)) in scenes.iter().enumerate() {
        check_predictions(preds)?;
        let mut table = Vec::with_capacity(preds.len());
        for (p, pred) in preds.iter().enumerate() {
            order.push((s, p));
            let row = gts
                .iter()
                .map(|gt| {
                    if class_agnostic || gt.action == pred.action {
                        voxel_iou(&pred.mask, &gt.mask)
                    } else {
                        Ok(f64::NEG_INFINITY)
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            table.push(row);
        }
        ious.push(table);
    }
    order.sort_by(|a, b| {
        let ca = scenes[a.0].0[a.1].confidence;
        let cb = scenes[b.0].0[b.1].confidence;
        cb.total_cmp(&ca)
    });
    let mut taken: Vec<Vec<bool>> = scenes.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let hits = order
        .iter()
        .map(|&(s, p)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &iou) in ious[s][p].iter().enumerate() {
                if !taken[s][g] && iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[s][g] = true;
                true
            } else {
                false
            }
        })
        .collect();
    let total = scenes.iter().map(|(_, g)| g.len()).sum();
    Ok((hits, total))
}

/// Class-agnostic AP of one scene's predictions against its masks.
pub fn average_precision(preds: &[Prediction], gts: &[VoxelMask], iou_threshold: f64) -> Result<f64, MetricsError> {
    check_threshold(iou_threshold)?;
    let gts: Vec<GroundTruth> = gts.iter().map(|m| GroundTruth { mask: m.clone(), action: 0 }).collect();
    let (hits, total) = ranked_hits(&[(preds, &gts)], iou_threshold, true)?;
    Ok(envelope_ap(&hits, total))
}

/// AP pooled over scenes, or `None` when there is no ground truth at all.
pub fn pooled_ap(
    scenes: &[(&[Prediction], &[GroundTruth])],
    iou_threshold: f64,
    class_agnostic: bool,
) -> Result<Option<f64>, MetricsError> {
    check_threshold(iou_threshold)?;
    let (hits, total) = ranked_hits(scenes, iou_threshold, class_agnostic)?;
    Ok((total > 0).then(|| envelope_ap(&hits, total)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApSummary {
    /// `(threshold, AP)` for 0.25 and then 0.50 through 0.95.
    pub ap_per_threshold: Vec<(f64, f64)>,
    pub map_25: f64,
    pub map_50: f64,
    pub map_50_95: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall: ApSummary,
    /// Actions with at least one ground truth; others are absent.
    pub per_action: BTreeMap<usize, ApSummary>,
}

fn summarize(f: impl Fn(f64) -> Result<Option<f64>, MetricsError>) -> Result<Option<ApSummary>, MetricsError> {
    let Some(map_25) = f(0.25)? else {
        return Ok(None);
    };
    let mut ap_per_threshold = vec![(0.25, map_25)];
    for t in coco_thresholds() {
        ap_per_threshold.push((t, f(t)?.unwrap_or(0.0)));
    }
    let map_50 = ap_per_threshold[1].1;
    let map_50_95 = ap_per_threshold[1..].iter().map(|(_, a)| a).sum::<f64>() / 10.0;
    Ok(Some(ApSummary {
        ap_per_threshold,
        map_25,
        map_50,
        map_50_95,
    }))
}

fn scene_average(
    scenes: &[(&[Prediction], &[GroundTruth])],
    t: f64,
    opts: EvalOptions,
) -> Result<Option<f64>, MetricsError> {
    if !opts.macro_average {
        return pooled_ap(scenes, t, opts.class_agnostic);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in scenes {
        if let Some(ap) = pooled_ap(std::slice::from_ref(s), t, opts.class_agnostic)? {
            sum += ap;
            count += 1;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// Full report over aligned per-scene prediction and ground-truth lists.
pub fn evaluate(
    preds: &[Vec<Prediction>],
    gts: &[Vec<GroundTruth>],
    opts: EvalOptions,
) -> Result<EvalReport, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::SceneCount {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    let scenes: Vec<(&[Prediction], &[GroundTruth])> =
        preds.iter().zip(gts).map(|(p, g)| (p.as_slice(), g.as_slice())).collect();
    let overall = summarize(|t| scene_average(&scenes, t, opts))?.unwrap_or(ApSummary {
        ap_per_threshold: std::iter::once(0.25).chain(coco_thresholds()).map(|t| (t, 0.0)).collect(),
        map_25: 0.0,
        map_50: 0.0,
        map_50_95: 0.0,
    });
    let actions: std::collections::BTreeSet<usize> = gts.iter().flatten().map(|g| g.action).collect();
    let mut per_action = BTreeMap::new();
    for a in actions {
        let filtered: Vec<(Vec<Prediction>, Vec<GroundTruth>)> = preds
            .iter()
            .zip(gts)
            .map(|(p, g)| {
                (
                    p.iter().filter(|x| x.action == a).cloned().collect(),
                    g.iter().filter(|x| x.action == a).cloned().collect(),
                )
            })
            .collect();
        let view: Vec<(&[Prediction], &[GroundTruth])> =
            filtered.iter().map(|(p, g)| (p.as_slice(), g.as_slice())).collect();
        if let Some(s) = summarize(|t| scene_average(&view, t, opts))? {
            per_action.insert(a, s);
        }
    }
    Ok(EvalReport { overall, per_action })
}

impl EvalReport {
    pub fn csv_header() -> String {
        let mut h = String::from("map,map_25,map_50");
        for t in coco_thresholds() {
            let _ = write!(h, ",ap_{}", (t * 100.0).round() as u32);
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let o = &self.overall;
        let mut r = format!("{:.6},{:.6},{:.6}", o.map_50_95, o.map_25, o.map_50);
        for (_, ap) in &o.ap_per_threshold[1..] {
            let _ = write!(r, ",{ap:.6}");
        }
        r
    }

    /// Aligned text table with an overall row and one row per action.
    pub fn table(&self, action_names: &[String]) -> String {
        let mut out = format!("{:<12} {:>8} {:>8} {:>8}\n", "", "mAP", "mAP@0.25", "mAP@0.50");
        let mut line = |label: &str, s: &ApSummary| {
            let _ = writeln!(out, "{label:<12} {:>8.4} {:>8.4} {:>8.4}", s.map_50_95, s.map_25, s.map_50);
        };
        line("overall", &self.overall);
        for (a, s) in &self.per_action {
            let name = action_names.get(*a).cloned().unwrap_or_else(|| format!("action {a}"));
            line(&name, s);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::VoxelGrid;

    fn grid() -> VoxelGrid {
        VoxelGrid::new([0.0; 3], 1.0).unwrap()
    }

    fn mask(cells: &[[usize; 3]]) -> VoxelMask {
        let mut m = VoxelMask::empty(grid());
        for &c in cells {
            m.set(c);
        }
        m
    }

    fn pred(m: &VoxelMask, c: f64) -> Prediction {
        Prediction {
            mask: m.clone(),
            confidence: c,
            action: 0,
        }
    }

    #[test]
    fn perfect_and_disjoint() {
        let g1 = mask(&[[0, 0, 0], [1, 0, 0]]);
        let g2 = mask(&[[5, 5, 5]]);
        let preds = vec![pred(&g1, 0.9), pred(&g2, 0.4)];
        for t in [0.25, 0.5, 0.95, 1.0] {
            assert_eq!(average_precision(&preds, &[g1.clone(), g2.clone()], t).unwrap(), 1.0);
        }
        let far = mask(&[[9, 9, 9]]);
        assert_eq!(average_precision(&[pred(&far, 0.9)], &[g1], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn hit_miss_hit_by_hand() {
        let g1 = mask(&[[0, 0, 0]]);
        let g2 = mask(&[[3, 3, 3]]);
        let miss = mask(&[[7, 7, 7]]);
        let preds = vec![pred(&g1, 0.9), pred(&miss, 0.8), pred(&g2, 0.7)];
        // precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1; envelope 1, 2/3, 2/3
        let ap = average_precision(&preds, &[g1, g2], 0.5).unwrap();
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn low_ranked_duplicates_do_not_change_ap() {
        let g1 = mask(&[[0, 0, 0]]);
        let g2 = mask(&[[3, 3, 3]]);
        let base = vec![pred(&g1, 0.9), pred(&g2, 0.8)];
        let mut dup = base.clone();
        dup.push(pred(&g1, 0.2));
        dup.push(pred(&g2, 0.1));
        let gts = [g1, g2];
        assert_eq!(
            average_precision(&base, &gts, 0.5).unwrap(),
            average_precision(&dup, &gts, 0.5).unwrap()
        );
    }

    #[test]
    fn evaluate_fields_and_absent_actions() {
        let g = mask(&[[1, 1, 1], [1, 1, 2]]);
        let gts = vec![vec![GroundTruth { mask: g.clone(), action: 2 }]];
        let preds = vec![vec![Prediction {
            mask: g,
            confidence: 0.6,
            action: 2,
        }]];
        let r = evaluate(&preds, &gts, EvalOptions::default()).unwrap();
        assert_eq!((r.overall.map_25, r.overall.map_50, r.overall.map_50_95), (1.0, 1.0, 1.0));
        assert_eq!(r.per_action.keys().copied().collect::<Vec<_>>(), vec![2]);
        assert!(!r.per_action.contains_key(&0));
        assert_eq!(r.csv_row().split(',').count(), EvalReport::csv_header().split(',').count());
    }

    #[test]
    fn per_action_matching_blocks_wrong_labels() {
        let g = mask(&[[1, 1, 1]]);
        let gts = vec![vec![GroundTruth { mask: g.clone(), action: 1 }]];
        let preds = vec![vec![Prediction {
            mask: g,
            confidence: 0.6,
            action: 0,
        }]];
        let aware = evaluate(&preds, &gts, EvalOptions::default()).unwrap();
        assert_eq!(aware.overall.map_50, 0.0);
        let agnostic = evaluate(
            &preds,
            &gts,
            EvalOptions {
                class_agnostic: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(agnostic.overall.map_50, 1.0);
    }

    #[test]
    fn constant_ap_gives_constant_mean() {
        let g = mask(&[[0, 0, 0]]);
        let gts = vec![vec![GroundTruth { mask: g.clone(), action: 0 }, GroundTruth { mask: mask(&[[4, 4, 4]]), action: 0 }]];
        let preds = vec![vec![pred(&g, 0.5)]];
        let r = evaluate(&preds, &gts, EvalOptions::default()).unwrap();
        assert!((r.overall.map_50_95 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = mask(&[[0, 0, 0]]);
        assert!(average_precision(&[pred(&g, 0.5)], std::slice::from_ref(&g), 0.0).is_err());
        assert!(average_precision(&[pred(&g, f64::NAN)], std::slice::from_ref(&g), 0.5).is_err());
        let mut other = VoxelMask::empty(VoxelGrid::new([1.0; 3], 1.0).unwrap());
        other.set([0, 0, 0]);
        assert!(matches!(
            average_precision(&[pred(&other, 0.5)], &[g], 0.5),
            Err(MetricsError::Geometry(GeometryError::IncompatibleGrid))
        ));
    }
}
