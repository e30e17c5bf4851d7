//! Property tests spanning several modules.

use proptest::prelude::*;

use crate::geometry::{rasterize, voxel_downsample, voxel_iou, ScenePointCloud, VoxelGrid, VoxelMask};
use crate::losses::{loss_align, loss_bidir, loss_dissim, loss_embed, loss_total, LossTerms, LossToggles, LossWeights};
use crate::matcher::{assign, dissimilarity};
use crate::metrics::{average_precision, Prediction};
use crate::model::{Model, ModelConfig, PreparedSample};
use crate::synth::{generate, SynthConfig};
use crate::tensor::{Graph, Tensor};
use crate::trainer::{self, TrainConfig};

fn matrix(max_rows: usize, max_cols: usize, mag: f64) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-mag..mag, r * c).prop_map(move |d| Tensor::matrix(r, c, d))
    })
}

fn pair(max_rows: usize, max_cols: usize, mag: f64) -> impl Strategy<Value = (Tensor, Tensor)> {
    (1..=max_rows, 1..=max_rows, 1..=max_cols).prop_flat_map(move |(n, m, k)| {
        (
            prop::collection::vec(-mag..mag, n * k).prop_map(move |d| Tensor::matrix(n, k, d)),
            prop::collection::vec(-mag..mag, m * k).prop_map(move |d| Tensor::matrix(m, k, d)),
        )
    })
}

fn mask(grid: VoxelGrid, cells: &[(usize, usize, usize)]) -> VoxelMask {
    let mut m = VoxelMask::empty(grid);
    for &(x, y, z) in cells {
        m.set([x, y, z]);
    }
    m
}

fn cells() -> impl Strategy<Value = Vec<(usize, usize, usize)>> {
    prop::collection::vec((0..6usize, 0..6usize, 0..2usize), 1..20)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
        .0
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_keep_argmax(t in matrix(8, 8, 50.0)) {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let s = g.softmax_rows(x);
        let s = g.value(s);
        for r in 0..t.rows() {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(argmax(s.row(r)), argmax(t.row(r)));
        }
    }

    #[test]
    fn large_finite_inputs_stay_finite(t in matrix(5, 5, 1e6)) {
        let mut g = Graph::new();
        let x = g.param(&t);
        let ops = [
            g.softmax_rows(x),
            g.sigmoid(x),
            g.l2_norm_rows(x),
            g.relu(x),
            g.square(x),
        ];
        for v in ops {
            prop_assert!(g.value(v).is_finite());
        }
        let xt = g.transpose(x);
        let p = g.matmul(x, xt).unwrap();
        let soft = g.softmax_rows(p);
        let loss = g.sum(soft);
        prop_assert!(g.value(p).is_finite());
        let grads = g.backward(loss).unwrap();
        prop_assert!(grads.get(x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in cells(), b in cells()) {
        let grid = VoxelGrid::new([0.0; 3], 0.1).unwrap();
        let (a, b) = (mask(grid, &a), mask(grid, &b));
        let ab = voxel_iou(&a, &b).unwrap();
        prop_assert_eq!(ab, voxel_iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(voxel_iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn downsample_is_idempotent_and_rasterizes_inside(
        pts in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), 1..300),
        size_exp in 2..6i32,
        nest in 0..3i32,
    ) {
        let size = 0.5f64.powi(size_exp);
        let points: Vec<[f64; 3]> = pts.iter().map(|&(x, y, z)| [x, y, z]).collect();
        let features = vec![[0.5, 0.5, 0.5, 1.0, 0.0, 0.0]; points.len()];
        let cloud = ScenePointCloud::new(points, features).unwrap();
        let once = voxel_downsample(&cloud, size, 100_000).unwrap();
        let twice = voxel_downsample(&once, size, 100_000).unwrap();
        prop_assert_eq!(&once, &twice);
        // Mask cells must be unions of downsample cells for the subset relation.
        let grid = VoxelGrid::new([0.0; 3], size * 2f64.powi(nest)).unwrap();
        let full = rasterize(&cloud, &(0..cloud.len()).collect::<Vec<_>>(), grid).unwrap();
        let down = rasterize(&once, &(0..once.len()).collect::<Vec<_>>(), grid).unwrap();
        prop_assert!(down.occupied().all(|c| full.contains(c)));
    }

    #[test]
    fn dissimilarity_is_bounded_and_zero_only_when_aligned((a, b) in pair(6, 6, 10.0)) {
        let mut g = Graph::new();
        let (x, y) = (g.constant(a), g.constant(b));
        let (d, cos) = dissimilarity(&mut g, x, y).unwrap();
        for (&dv, &cv) in g.value(d).data().iter().zip(g.value(cos).data()) {
            prop_assert!((0.0..=1.0).contains(&dv));
            prop_assert_eq!(dv == 0.0, cv >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn argmax_of_assignment_ignores_row_offsets(
        (d, mm) in (1..6usize, 1..6usize).prop_flat_map(|(n, m)| (
            prop::collection::vec(0.0..1.0f64, n * m).prop_map(move |v| Tensor::matrix(n, m, v)),
            prop::collection::vec(-3.0..3.0f64, n * m).prop_map(move |v| Tensor::matrix(n, m, v)),
        )),
        shift in prop::collection::vec(-100.0..100.0f64, 6),
    ) {
        let a = assign(&d, &mm, 0.2).unwrap();
        let mut moved = mm.clone();
        for (r, s) in shift.iter().enumerate().take(mm.rows()) {
            for c in 0..mm.cols() {
                moved.set(r, c, mm.get(r, c) + s);
            }
        }
        let b = assign(&d, &moved, 0.2).unwrap();
        for r in 0..mm.rows() {
            prop_assert_eq!(argmax(a.probs.row(r)), argmax(b.probs.row(r)));
        }
        prop_assert_eq!(a.matches, b.matches);
    }

    #[test]
    fn losses_are_nonnegative_linear_and_homogeneous_in_a(
        (phi, psi) in pair(4, 5, 2.0),
        seed in any::<u64>(),
        c in 0.1..10.0f64,
        w in (0.0..3.0f64, 0.0..3.0f64, 0.0..3.0f64),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (n, m, k) = (phi.rows(), psi.rows(), phi.cols());
        let mut a = Tensor::zeros(n, m);
        for i in 0..n {
            a.set(i, rng.gen_range(0..m), 1.0);
        }
        let rand_t = |rng: &mut rand_chacha::ChaCha8Rng, r: usize, cc: usize| {
            Tensor::matrix(r, cc, (0..r * cc).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let m_ff = rand_t(&mut rng, n * m, 3);
        let targets = rand_t(&mut rng, n * m, 3);
        let heads = rand_t(&mut rng, k, k);
        let values = |scale: f64| {
            let mut g = Graph::new();
            let av = g.constant(Tensor::matrix(n, m, a.data().iter().map(|v| v * scale).collect()));
            let (p, q) = (g.constant(phi.clone()), g.constant(psi.clone()));
            let (mf, t, h) = (g.constant(m_ff.clone()), g.constant(targets.clone()), g.constant(heads.clone()));
            let terms = LossTerms {
                embed: loss_embed(&mut g, p, q, &[h], 1.0, 0.01).unwrap(),
                align: loss_align(&mut g, mf, t, av).unwrap(),
                bidir: loss_bidir(&mut g, p, q, h, h, av).unwrap(),
                dissim: loss_dissim(&mut g, p, q, av, false).unwrap(),
            };
            (g, terms)
        };
        let (g1, t1) = values(1.0);
        let (gc, tc) = values(c);
        let v1 = [t1.embed, t1.align, t1.bidir, t1.dissim].map(|v| g1.value(v).item());
        let vc = [tc.embed, tc.align, tc.bidir, tc.dissim].map(|v| gc.value(v).item());
        prop_assert!(v1.iter().all(|&v| v >= 0.0));
        for k in 1..4 {
            prop_assert!((vc[k] - c * v1[k]).abs() <= 1e-9 * (1.0 + vc[k].abs()));
        }
        let weights = LossWeights { lambda: w.0, gamma: w.1, eta: w.2, ..Default::default() };
        let mut g1 = g1;
        let (_, report) = loss_total(&mut g1, &t1, &weights, &LossToggles::all()).unwrap();
        let expect = v1[0] + w.0 * v1[1] + w.1 * v1[2] + w.2 * v1[3];
        prop_assert!((report.total - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
    }

    #[test]
    fn ap_ignores_monotone_confidence_maps(
        preds in prop::collection::vec((cells(), 0.0..1.0f64), 0..6),
        gts in prop::collection::vec(cells(), 0..4),
        t in 0.05..1.0f64,
    ) {
        let grid = VoxelGrid::new([0.0; 3], 0.1).unwrap();
        let gts: Vec<VoxelMask> = gts.iter().map(|c| mask(grid, c)).collect();
        let make = |f: &dyn Fn(f64) -> f64| -> Vec<Prediction> {
            preds.iter().map(|(c, p)| Prediction { mask: mask(grid, c), confidence: f(*p), action: 0 }).collect()
        };
        let base = average_precision(&make(&|p| p), &gts, t).unwrap();
        let mapped = average_precision(&make(&|p| (5.0 * p).exp() - 3.0), &gts, t).unwrap();
        prop_assert_eq!(base, mapped);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_ground_truth_is_well_formed(seed in any::<u64>()) {
        let cfg = SynthConfig { seed, scene_count: 3, ..Default::default() };
        for s in generate(&cfg).unwrap() {
            let a = s.gt_assignment();
            for r in 0..a.rows() {
                prop_assert!(a.row(r).iter().all(|&v| v == 0.0 || v == 1.0));
                prop_assert_eq!(a.row(r).iter().sum::<f64>(), 1.0);
            }
            let (grid, regions) = s.scene.candidates().unwrap();
            for (&j, (m, action)) in s.gt_region.iter().zip(s.gt_masks(grid).unwrap()) {
                prop_assert!(!m.is_empty());
                prop_assert_eq!(&m, &regions[j].mask);
                prop_assert_eq!(action, regions[j].action_descriptor_id);
            }
        }
    }
}

#[test]
fn small_full_batch_step_lowers_total_loss() {
    let cfg = SynthConfig {
        scene_count: 6,
        ..Default::default()
    };
    let data: Vec<PreparedSample> = generate(&cfg)
        .unwrap()
        .iter()
        .map(|s| PreparedSample::new(s, cfg.sub_widths).unwrap())
        .collect();
    let model = Model::init(ModelConfig::default(), 11).unwrap();
    let total = |m: &Model| data.iter().map(|s| m.scene_loss(s).unwrap().total).sum::<f64>() / data.len() as f64;
    let tc = TrainConfig {
        epochs: 1,
        batch_size: data.len(),
        learning_rate: 1e-6,
        clip_norm: f64::INFINITY,
        eval_every_epoch: false,
        ..Default::default()
    };
    let before = total(&model);
    let after = total(&trainer::train_from(&tc, model, &data, &[]).unwrap().model);
    assert!(after < before, "{after} !< {before}");
}
