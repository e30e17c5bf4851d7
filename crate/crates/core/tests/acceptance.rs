//! End-to-end acceptance checks. Runs as a plain binary (no test harness)
//! and prints one PASS/FAIL line per criterion.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use affordance_match::encoders::ParamVars;
use affordance_match::geometry::{voxel_downsample, voxel_iou, ScenePointCloud, VoxelGrid, VoxelMask};
use affordance_match::gradcheck::{self, GradcheckConfig};
use affordance_match::losses::{loss_align, loss_bidir, loss_dissim, loss_embed, LossToggles};
use affordance_match::matcher::{self, cross_modal_attention, dissimilarity, match2match, MatchState, MatcherConfig};
use affordance_match::metrics::{average_precision, EvalReport, Prediction};
use affordance_match::model::{Model, PreparedSample};
use affordance_match::synth::{generate_splits, SynthConfig};
use affordance_match::tensor::{Graph, ParamStore, Tensor};
use affordance_match::trainer::{self, TrainConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn one_hot_rows(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (Tensor, Vec<usize>) {
    let mut a = Tensor::zeros(n, m);
    let mut cols = Vec::new();
    for i in 0..n {
        let j = rng.gen_range(0..m);
        a.set(i, j, 1.0);
        cols.push(j);
    }
    (a, cols)
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let cfg = GradcheckConfig::default();
    check(cfg.samples >= 5 && cfg.max_signifiers <= 3 && cfg.max_regions <= 4 && cfg.embed_dim <= 8, || {
        "toy sizes out of range".into()
    })?;
    let report = gradcheck::run(&cfg, None).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let worst = report.results.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    check(report.results.iter().all(|r| r.rel_err < 1e-4), || {
        format!("worst relative error {worst:.3e}\n{}", report.table())
    })?;
    check(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{} groups, worst rel err {worst:.2e}, {secs:.1} s", report.results.len()))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (n, m, d) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(2..9));
        let mut g = Graph::new();

        let unit = |t: Tensor| {
            let mut t = t;
            for r in 0..t.rows() {
                let norm = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                for c in 0..t.cols() {
                    t.set(r, c, t.get(r, c) / norm);
                }
            }
            t
        };
        let phi = g.constant(unit(randn(&mut rng, n, d)));
        let psi = g.constant(unit(randn(&mut rng, m, d)));
        let theta = g.param(&randn(&mut rng, 3, 3));
        let embed = loss_embed(&mut g, phi, psi, &[theta], 1.0, 0.0).map_err(|e| e.to_string())?;

        let (a_t, cols) = one_hot_rows(&mut rng, n, m);
        let a = g.constant(a_t.clone());
        let width = rng.gen_range(1..6);
        let m_ff = randn(&mut rng, n * m, width);
        let mf = g.constant(m_ff.clone());
        let tg = g.constant(m_ff);
        let align = loss_align(&mut g, mf, tg, a).map_err(|e| e.to_string())?;

        let base = randn(&mut rng, n, d);
        let mut psi_m = randn(&mut rng, m, d);
        let mut w_r = randn(&mut rng, m, d);
        let w_m = randn(&mut rng, n, d);
        // Every signifier matched to a region sharing its row; a region
        // claimed twice copies the first claimant, so only those signifiers
        // keep their own rows.
        let mut phi_m = base.clone();
        let mut owner = vec![None; m];
        let mut w_m_rows = w_m.clone();
        for (i, &j) in cols.iter().enumerate() {
            let src = *owner[j].get_or_insert(i);
            for c in 0..d {
                phi_m.set(i, c, base.get(src, c));
                psi_m.set(j, c, base.get(src, c));
                w_m_rows.set(i, c, w_m.get(src, c));
                w_r.set(j, c, w_m.get(src, c));
            }
        }
        let phi_v = g.constant(phi_m);
        let psi_v = g.constant(psi_m);
        let eye = g.constant(Tensor::eye(d));
        let bidir = loss_bidir(&mut g, phi_v, psi_v, eye, eye, a).map_err(|e| e.to_string())?;
        let wm = g.constant(w_m_rows);
        let wr = g.constant(w_r);
        let dissim = loss_dissim(&mut g, wm, wr, a, false).map_err(|e| e.to_string())?;
        for v in [embed, align, bidir, dissim] {
            worst = worst.max(g.value(v).item().abs());
        }
    }
    check(worst <= 1e-10, || format!("largest zero-case value {worst:.3e}"))?;
    Ok(format!("50 instances, largest |loss| {worst:.2e}"))
}

fn d_of(w_m: &Tensor, w_r: &Tensor) -> Result<Tensor, String> {
    let mut g = Graph::new();
    let a = g.constant(w_m.clone());
    let b = g.constant(w_r.clone());
    let (d, _) = dissimilarity(&mut g, a, b).map_err(|e| e.to_string())?;
    Ok(g.value(d).clone())
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pairs = 0;
    while pairs < 10_000 {
        let (n, m, k) = (rng.gen_range(1..13), rng.gen_range(1..13), rng.gen_range(1..9));
        let d = d_of(&randn(&mut rng, n, k), &randn(&mut rng, m, k))?;
        check(d.data().iter().all(|v| (0.0..=1.0).contains(v)), || "entry outside [0, 1]".into())?;
        pairs += n * m;
    }
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(2..9);
        let v = randn(&mut rng, 1, k);
        let mut w = randn(&mut rng, 1, k);
        let vv: f64 = v.data().iter().map(|x| x * x).sum();
        let vw: f64 = v.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        for c in 0..k {
            w.set(0, c, w.get(0, c) - vw / vv * v.get(0, c));
        }
        let neg = Tensor::matrix(1, k, v.data().iter().map(|x| -2.5 * x).collect());
        worst = worst.max(d_of(&v, &v)?.item().abs());
        worst = worst.max((d_of(&v, &w)?.item() - 1.0).abs());
        worst = worst.max((d_of(&v, &neg)?.item() - 1.0).abs());
    }
    check(worst <= 1e-12, || format!("special case off by {worst:.3e}"))?;
    Ok(format!("{pairs} random pairs in range, special cases within {worst:.1e}"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = MatcherConfig::default();
    let (wi, wp) = (6, 5);
    let mut store = ParamStore::new();
    matcher::init_params(&mut store, &cfg, wi, wp, &mut rng).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (n, m) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let fi = randn(&mut rng, n, wi);
        let fp = randn(&mut rng, m, wp);
        let mut g = Graph::new();
        let mut pv = ParamVars::new(&store);
        let a = g.constant(fi.clone());
        let b = g.constant(fp.clone());
        let att = cross_modal_attention(&mut g, &mut pv, &cfg, a, b).map_err(|e| e.to_string())?;
        let state = MatchState::compute(&store, &cfg, &fi, &fp).map_err(|e| e.to_string())?;
        for t in [g.value(att.signifier_attention), g.value(att.region_attention), &state.assignment.probs] {
            for r in 0..t.rows() {
                worst = worst.max((t.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    check(worst <= 1e-9, || format!("row sum off by {worst:.3e}"))?;
    Ok(format!("1000 shapes, worst row-sum error {worst:.1e}"))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = MatcherConfig::default();
    let mut store = ParamStore::new();
    matcher::init_params(&mut store, &cfg, 4, 4, &mut rng).map_err(|e| e.to_string())?;
    store.insert("matcher.ff_q", Tensor::zeros(cfg.pair_dim, cfg.pair_dim));
    store.insert("matcher.out_b", Tensor::scalar(-0.83));
    for _ in 0..20 {
        let (n, m) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let dm = Tensor::matrix(n, m, (0..n * m).map(|_| rng.gen_range(0.0..1.0)).collect());
        let mut g = Graph::new();
        let mut pv = ParamVars::new(&store);
        let d = g.constant(dm);
        let pair = match2match(&mut g, &mut pv, &cfg, d).map_err(|e| e.to_string())?;
        check(g.value(pair.m_ff).data().iter().all(|&v| v == 0.0), || "M_ff is not zero".into())?;
        check(g.value(pair.match_map).data().iter().all(|&v| v == -0.83), || {
            "match map is not the bias".into()
        })?;
    }
    Ok("20 shapes, M_ff = 0 and match map = bias exactly".into())
}

/// Precision/recall at every rank cutoff, then the area under the
/// monotone envelope.
fn brute_force_ap(preds: &[Prediction], gts: &[VoxelMask], t: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::new();
    for &p in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, m) in gts.iter().enumerate() {
            let iou = voxel_iou(&preds[p].mask, m).unwrap();
            if !used[g] && iou >= t && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        tp.push(best.is_some());
    }
    let mut curve = Vec::new();
    let mut hits = 0.0;
    for (k, &hit) in tp.iter().enumerate() {
        if hit {
            hits += 1.0;
        }
        curve.push((hits / gts.len() as f64, hits / (k + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..curve.len() {
        let envelope = curve[k..].iter().map(|c| c.1).fold(0.0, f64::max);
        ap += (curve[k].0 - prev_recall) * envelope;
        prev_recall = curve[k].0;
    }
    ap
}

fn random_mask(rng: &mut ChaCha8Rng, grid: VoxelGrid) -> VoxelMask {
    let mut m = VoxelMask::empty(grid);
    let (x0, y0) = (rng.gen_range(0..4), rng.gen_range(0..4));
    let (w, h) = (rng.gen_range(1..4), rng.gen_range(1..4));
    for x in x0..x0 + w {
        for y in y0..y0 + h {
            m.set([x, y, 0]);
        }
    }
    m
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let grid = VoxelGrid::new([0.0; 3], 0.1).map_err(|e| e.to_string())?;
    let thresholds: Vec<f64> = (1..=19).map(|k| k as f64 * 0.05).collect();
    let mut worst = 0.0f64;
    for instance in 0..1000 {
        let gts: Vec<VoxelMask> = (0..rng.gen_range(0..=4)).map(|_| random_mask(&mut rng, grid)).collect();
        let preds: Vec<Prediction> = (0..rng.gen_range(0..=6))
            .map(|_| Prediction {
                mask: random_mask(&mut rng, grid),
                confidence: rng.gen_range(0.0..1.0),
                action: 0,
            })
            .collect();
        let mut prev = f64::INFINITY;
        for &t in &thresholds {
            let ap = average_precision(&preds, &gts, t).map_err(|e| e.to_string())?;
            worst = worst.max((ap - brute_force_ap(&preds, &gts, t)).abs());
            check(ap <= prev + 1e-12, || format!("instance {instance}: AP rises at threshold {t}"))?;
            prev = ap;
        }
    }
    check(worst <= 1e-9, || format!("oracle mismatch {worst:.3e}"))?;
    Ok(format!("1000 instances x 19 thresholds, max oracle gap {worst:.1e}, monotone"))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cloud = |rng: &mut ChaCha8Rng, n: usize, side: f64| {
        let points = (0..n).map(|_| [0.0; 3].map(|_: f64| rng.gen_range(0.0..side))).collect();
        let features = (0..n).map(|_| [0.2, 0.4, 0.6, 0.0, 0.0, 1.0]).collect();
        ScenePointCloud::new(points, features).unwrap()
    };
    let small = cloud(&mut rng, 5000, 1.0);
    let once = voxel_downsample(&small, 0.05, 100_000).map_err(|e| e.to_string())?;
    let twice = voxel_downsample(&once, 0.05, 100_000).map_err(|e| e.to_string())?;
    check(once == twice, || "downsampling is not idempotent".into())?;

    let grid = VoxelGrid::new([0.0; 3], 0.1).map_err(|e| e.to_string())?;
    let (mut a, mut b) = (VoxelMask::empty(grid), VoxelMask::empty(grid));
    for x in 0..4 {
        a.set([x, 0, 0]);
        b.set([x + 2, 0, 0]);
    }
    let ab = voxel_iou(&a, &b).map_err(|e| e.to_string())?;
    let ba = voxel_iou(&b, &a).map_err(|e| e.to_string())?;
    check((ab - 2.0 / 6.0).abs() <= 1e-12 && ab == ba, || format!("IoU {ab} / {ba}"))?;

    let big = cloud(&mut rng, 500_000, 4.0);
    let started = Instant::now();
    let out = voxel_downsample(&big, 0.05, 100_000).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let mut cells: Vec<[i64; 3]> = out.points.iter().map(|p| p.map(|v| (v / 0.05).floor() as i64)).collect();
    cells.sort_unstable();
    cells.dedup();
    check(out.len() == 100_000, || format!("{} points kept", out.len()))?;
    check(cells.len() == out.len(), || "two outputs share a 0.05 cell".into())?;
    check(secs < 5.0, || format!("took {secs:.2} s"))?;
    Ok(format!("idempotent, IoU 2/6 symmetric, 500k -> {} points in {secs:.2} s", out.len()))
}

fn benchmark() -> (Vec<PreparedSample>, Vec<PreparedSample>) {
    let cfg = SynthConfig::default();
    let (train, val) = generate_splits(&cfg).expect("benchmark generation");
    let prep = |v: Vec<_>| {
        v.iter()
            .map(|s| PreparedSample::new(s, cfg.sub_widths).expect("prepared sample"))
            .collect::<Vec<_>>()
    };
    (prep(train), prep(val))
}

fn criterion_8(train: &[PreparedSample], val: &[PreparedSample]) -> Outcome {
    let cfg = TrainConfig::default();
    check(
        train.len() == 200 && val.len() == 50 && cfg.workers == 1 && cfg.momentum.is_none(),
        || "benchmark setup differs from the frozen protocol".into(),
    )?;
    let started = Instant::now();
    let out = trainer::train(&cfg, train, val).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let o = &out.final_eval().ok_or("no validation report")?.overall;
    let detail = format!(
        "mAP@0.50 {:.4}, mAP@0.25 {:.4}, mAP {:.4}, {secs:.1} s",
        o.map_50, o.map_25, o.map_50_95
    );
    check(o.map_50 >= 0.9, || format!("{detail}; mAP@0.50 below 0.9"))?;
    check(o.map_25 >= o.map_50 && o.map_50 >= o.map_50_95, || format!("{detail}; ordering violated"))?;
    check(secs < 600.0, || format!("{detail}; over 10 minutes"))?;
    Ok(detail)
}

fn criterion_9(train: &[PreparedSample], val: &[PreparedSample]) -> Outcome {
    let ladder = LossToggles::ladder();
    let seeds = [42u64, 43, 44];
    let mut scores = vec![Vec::new(); ladder.len()];
    for &seed in &seeds {
        let cfg = TrainConfig {
            seed,
            ..Default::default()
        };
        let rows = trainer::ablate(&cfg, train, val, &ladder).map_err(|e| e.to_string())?;
        for (k, r) in rows.iter().enumerate() {
            scores[k].push(r.report.overall.map_50);
        }
    }
    let stats: Vec<(f64, f64)> = scores
        .iter()
        .map(|s| {
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s.len() - 1) as f64;
            (mean, var.sqrt())
        })
        .collect();
    let detail = ladder
        .iter()
        .zip(&stats)
        .map(|(t, (m, s))| format!("{} {m:.4}±{s:.4}", t.label()))
        .collect::<Vec<_>>()
        .join(", ");
    for k in 1..stats.len() {
        let tol = stats[k - 1].1.max(stats[k].1);
        check(stats[k].0 >= stats[k - 1].0 - tol, || {
            format!("{detail}; drop at {}", ladder[k].label())
        })?;
    }
    Ok(detail)
}

fn criterion_10() -> Outcome {
    let synth = SynthConfig {
        scene_count: 24,
        val_count: 8,
        ..Default::default()
    };
    let (train, val) = generate_splits(&synth).map_err(|e| e.to_string())?;
    let prep = |v: &[_]| -> Vec<PreparedSample> {
        v.iter().map(|s| PreparedSample::new(s, synth.sub_widths).unwrap()).collect()
    };
    let (train, val) = (prep(&train), prep(&val));
    let cfg = TrainConfig {
        epochs: 6,
        learning_rate: 1e-2,
        ..Default::default()
    };
    let a = trainer::train(&cfg, &train, &val).map_err(|e| e.to_string())?;
    let b = trainer::train(&cfg, &train, &val).map_err(|e| e.to_string())?;
    check(a.model.params.to_bytes() == b.model.params.to_bytes(), || "checkpoints differ".into())?;
    let csv = |m: &Model| -> Result<String, String> {
        let r = trainer::evaluate_model(m, &val, cfg.eval, 1).map_err(|e| e.to_string())?;
        Ok(format!("{}\n{}\n", EvalReport::csv_header(), r.csv_row()))
    };
    check(csv(&a.model)? == csv(&b.model)?, || "eval CSVs differ".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("probe.ckpt");
    trainer::save_checkpoint(&a.model, &path).map_err(|e| e.to_string())?;
    let loaded = trainer::load_checkpoint(cfg.model.clone(), &path).map_err(|e| e.to_string())?;
    for s in &val {
        let x = a.model.match_state(s).map_err(|e| e.to_string())?;
        let y = loaded.match_state(s).map_err(|e| e.to_string())?;
        check(x == y, || "loaded checkpoint changes probe outputs".into())?;
    }
    Ok("bitwise-identical checkpoints and eval CSVs, round-trip exact".into())
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |k: usize, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("criterion {k:>2}: PASS  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {k:>2}: FAIL  {detail}");
            }
        }
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());
    report(6, criterion_6());
    report(7, criterion_7());
    let (train, val) = benchmark();
    report(8, criterion_8(&train, &val));
    report(9, criterion_9(&train, &val));
    report(10, criterion_10());
    if failed == 0 {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
