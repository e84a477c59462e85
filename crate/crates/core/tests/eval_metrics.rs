//! Evaluation metrics checked against independent oracles: average precision
//! against a straight-line precision-recall recomputation, IoU against set
//! arithmetic, and collisions against hand-computed footprint overlaps.

use duoview_core::metrics::{
    detection_metrics, iou_metrics, planning_metrics, AgentTrack, DetPred, EvalReport,
    IouAccumulator, OccReport, PlanningReport, SegReport, DEFAULT_DIST_THRESHOLDS,
    DEFAULT_EGO_DIMS, ERROR_BOUNDS,
};
use duoview_core::scene::BoxGt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::f64::consts::PI;

fn gt_box(x: f64, y: f64, yaw: f64, class_id: usize) -> BoxGt {
    BoxGt {
        center: [x, y, 0.9],
        size: [4.2, 1.9, 1.7],
        yaw,
        velocity: [0.8, -0.2],
        class_id,
        instance: 0,
    }
}

fn pred_of(sample: usize, g: &BoxGt, score: f64) -> DetPred {
    DetPred {
        sample,
        center: g.center,
        size: g.size,
        yaw: g.yaw,
        velocity: g.velocity,
        class_id: g.class_id,
        score,
    }
}

#[test]
fn perfect_predictions_score_a_clean_sweep() {
    let gts = vec![
        (0, gt_box(2.0, 1.0, 0.3, 0)),
        (0, gt_box(-4.0, 3.0, -0.8, 1)),
        (1, gt_box(6.0, -2.0, 1.2, 0)),
    ];
    let preds: Vec<DetPred> = gts.iter().map(|(s, g)| pred_of(*s, g, 1.0)).collect();
    let r = detection_metrics(&preds, &gts, &DEFAULT_DIST_THRESHOLDS);
    assert_eq!(r.map, 1.0);
    assert_eq!(r.composite, 1.0);
    assert_eq!(r.translation, 0.0);
    assert_eq!(r.scale, 0.0);
    assert_eq!(r.orientation, 0.0);
    assert_eq!(r.velocity, 0.0);

    // A class that never appears in the ground truth is not averaged in.
    let solo = vec![(0, gt_box(2.0, 1.0, 0.3, 0))];
    let preds = vec![pred_of(0, &solo[0].1, 1.0)];
    let r = detection_metrics(&preds, &solo, &DEFAULT_DIST_THRESHOLDS);
    assert_eq!(r.map, 1.0);
}

#[test]
fn empty_predictions_score_zero() {
    let gts = vec![(0, gt_box(2.0, 1.0, 0.3, 0)), (0, gt_box(-4.0, 3.0, -0.8, 1))];
    let r = detection_metrics(&[], &gts, &DEFAULT_DIST_THRESHOLDS);
    assert_eq!(r.map, 0.0);
    assert_eq!(r.composite, 0.0);
    assert_eq!(r.translation, ERROR_BOUNDS[0]);
    assert_eq!(r.scale, ERROR_BOUNDS[1]);
    assert_eq!(r.orientation, ERROR_BOUNDS[2]);
    assert_eq!(r.velocity, ERROR_BOUNDS[3]);

    // No ground truth at all pins everything to the floor as well.
    let r = detection_metrics(&[], &[], &DEFAULT_DIST_THRESHOLDS);
    assert_eq!(r.map, 0.0);
    assert_eq!(r.composite, 0.0);
}

/// Straight-line PR recomputation: sort by score, greedily take the nearest
/// free truth in the same sample, then integrate over 101 recall points.
fn oracle_ap(preds: &[DetPred], gts: &[(usize, BoxGt)], class_id: usize, thr: f64) -> f64 {
    let mut idx: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class_id == class_id).collect();
    idx.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));
    let n_gt = gts.iter().filter(|(_, g)| g.class_id == class_id).count();
    if n_gt == 0 {
        return 0.0;
    }
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::new();
    for &pi in &idx {
        let p = &preds[pi];
        let mut best = None;
        for (gi, (s, g)) in gts.iter().enumerate() {
            if used[gi] || g.class_id != class_id || *s != p.sample {
                continue;
            }
            let d = ((p.center[0] - g.center[0]).powi(2) + (p.center[1] - g.center[1]).powi(2))
                .sqrt();
            if d <= thr {
                match best {
                    None => best = Some((d, gi)),
                    Some((bd, _)) if d < bd => best = Some((d, gi)),
                    _ => {}
                }
            }
        }
        if let Some((_, gi)) = best {
            used[gi] = true;
            hits.push(true);
        } else {
            hits.push(false);
        }
    }
    let mut tp = 0.0;
    let mut pr = Vec::new();
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1.0;
        }
        pr.push((tp / n_gt as f64, tp / (k as f64 + 1.0)));
    }
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let mut best = 0.0;
        for &(rec, prec) in &pr {
            if rec >= r && prec > best {
                best = prec;
            }
        }
        total += best;
    }
    total / 101.0
}

#[test]
fn random_sets_match_the_brute_force_pr_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(50);
    for trial in 0..25 {
        // A couple of samples, five truths, noisy and spurious predictions.
        let mut gts = Vec::new();
        for _ in 0..5 {
            let s = rng.gen_range(0..2usize);
            let c = rng.gen_range(0..2usize);
            gts.push((s, gt_box(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), 0.0, c)));
        }
        let mut preds = Vec::new();
        for (s, g) in &gts {
            if rng.gen_bool(0.8) {
                let mut p = pred_of(*s, g, rng.gen_range(0.05..1.0));
                p.center[0] += rng.gen_range(-2.5..2.5);
                p.center[1] += rng.gen_range(-2.5..2.5);
                if rng.gen_bool(0.2) {
                    p.class_id = 1 - p.class_id;
                }
                preds.push(p);
            }
        }
        for _ in 0..rng.gen_range(0..4) {
            let g = gt_box(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), 0.0, rng.gen_range(0..2));
            preds.push(pred_of(rng.gen_range(0..2), &g, rng.gen_range(0.05..1.0)));
        }

        let thresholds = [1.0, 2.0];
        let r = detection_metrics(&preds, &gts, &thresholds);
        let classes: Vec<usize> = {
            let mut cs: Vec<usize> = gts.iter().map(|(_, g)| g.class_id).collect();
            cs.sort_unstable();
            cs.dedup();
            cs
        };
        let mut total = 0.0;
        for &c in &classes {
            for &t in &thresholds {
                total += oracle_ap(&preds, &gts, c, t);
            }
        }
        let want = total / (classes.len() * thresholds.len()) as f64;
        assert_eq!(r.map, want, "trial {trial}");
    }
}

#[test]
fn known_errors_surface_in_the_composite() {
    // One truth, one prediction 0.6 m off, rotated 0.4 rad, velocity off by
    // (0.3, -0.4): every error term has a closed form.
    let g = gt_box(0.0, 0.0, 0.2, 0);
    let mut p = pred_of(0, &g, 0.9);
    p.center = [0.6, 0.0, 0.9];
    p.yaw = 0.6;
    p.velocity = [1.1, -0.6];
    let r = detection_metrics(&[p], &[(0, g)], &DEFAULT_DIST_THRESHOLDS);
    assert!((r.translation - 0.6).abs() < 1e-12);
    assert_eq!(r.scale, 0.0);
    assert!((r.orientation - 0.4).abs() < 1e-12);
    assert!((r.velocity - 0.5).abs() < 1e-12);
    // Gates 1, 2, and 4 m accept the hit, the 0.5 m gate rejects it.
    assert!((r.map - 0.75).abs() < 1e-12);
    let tp_score = ((1.0 - 0.6) + 1.0 + (1.0 - 0.4 / PI) + (1.0 - 0.5)) / 4.0;
    assert!((r.composite - (0.5 * 0.75 + 0.5 * tp_score)).abs() < 1e-12);
}

#[test]
fn iou_matches_set_arithmetic_on_random_grids() {
    let mut rng = ChaCha12Rng::seed_from_u64(51);
    for _ in 0..20 {
        let n = 64;
        let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4u8)).collect();
        let gt: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4u8)).collect();
        let r = iou_metrics(&pred, &gt, 4);
        for c in 0..4u8 {
            let inter = pred.iter().zip(&gt).filter(|(p, g)| **p == c && **g == c).count();
            let union = pred.iter().zip(&gt).filter(|(p, g)| **p == c || **g == c).count();
            match r.per_class[c as usize] {
                Some(v) => assert_eq!(v, inter as f64 / union as f64),
                None => assert_eq!(union, 0),
            }
        }
        let bi = pred.iter().zip(&gt).filter(|(p, g)| **p != 0 && **g != 0).count();
        let bu = pred.iter().zip(&gt).filter(|(p, g)| **p != 0 || **g != 0).count();
        if bu > 0 {
            assert_eq!(r.binary_iou, bi as f64 / bu as f64);
        }

        // Swapping prediction and truth changes nothing.
        let sw = iou_metrics(&gt, &pred, 4);
        assert_eq!(r, sw);
    }
}

#[test]
fn iou_extremes_behave() {
    let a = vec![0u8, 1, 2, 3, 1, 0, 2, 2];
    let r = iou_metrics(&a, &a, 4);
    assert_eq!(r.miou, 1.0);
    assert_eq!(r.binary_iou, 1.0);
    for v in r.per_class.iter().flatten() {
        assert_eq!(*v, 1.0);
    }

    // Disjoint nonempty masks: zero everywhere a class is claimed.
    let pred = vec![1u8, 1, 0, 0];
    let gt = vec![0u8, 0, 1, 1];
    let r = iou_metrics(&pred, &gt, 2);
    assert_eq!(r.per_class[1], Some(0.0));
    assert_eq!(r.miou, 0.0);
    assert_eq!(r.binary_iou, 0.0);

    // Two empty grids agree perfectly.
    let z = vec![0u8; 8];
    let r = iou_metrics(&z, &z, 3);
    assert_eq!(r.binary_iou, 1.0);

    // Accumulating two grids equals evaluating their concatenation.
    let p1 = vec![0u8, 1, 2, 1];
    let g1 = vec![0u8, 1, 1, 1];
    let p2 = vec![2u8, 2, 0, 1];
    let g2 = vec![2u8, 0, 0, 1];
    let mut acc = IouAccumulator::new(3);
    acc.add(&p1, &g1);
    acc.add(&p2, &g2);
    let cat_p: Vec<u8> = p1.iter().chain(&p2).copied().collect();
    let cat_g: Vec<u8> = g1.iter().chain(&g2).copied().collect();
    assert_eq!(acc.finish(), iou_metrics(&cat_p, &cat_g, 3));
}

#[test]
fn perfect_plans_never_collide() {
    let traj = [[1.0, 0.1], [2.0, 0.2], [3.0, 0.3], [4.0, 0.4], [5.0, 0.5], [6.0, 0.6]];
    let r = planning_metrics(&traj, &traj, &[], DEFAULT_EGO_DIMS);
    assert_eq!(r.uniad.l2, [0.0; 3]);
    assert_eq!(r.vad_stp3.l2, [0.0; 3]);
    assert_eq!(r.uniad.collision, [0.0; 3]);
    assert_eq!(r.vad_stp3.collision, [0.0; 3]);
    assert_eq!(r.uniad.l2_mean, 0.0);
    assert_eq!(r.vad_stp3.collision_mean, 0.0);
}

#[test]
fn a_constant_offset_is_one_meter_everywhere() {
    let gt: Vec<[f64; 2]> = (1..=6).map(|i| [i as f64, 0.0]).collect();
    let pred: Vec<[f64; 2]> = gt.iter().map(|p| [p[0], p[1] + 1.0]).collect();
    let r = planning_metrics(&pred, &gt, &[], DEFAULT_EGO_DIMS);
    assert_eq!(r.uniad.l2, [1.0; 3]);
    assert_eq!(r.vad_stp3.l2, [1.0; 3]);
    assert_eq!(r.uniad.l2_mean, 1.0);
    assert_eq!(r.vad_stp3.l2_mean, 1.0);
}

#[test]
fn near_misses_match_the_footprint_oracle() {
    // Ego drives +x one meter per step; yaw stays 0, so its 4.0 x 1.8
    // footprint spans x +- 2.0 and y +- 0.9. A parked 4.2 x 1.9 agent at
    // (9.0, 1.5) overlaps once |ex - 9| <= 4.1 and |0 - 1.5| <= 1.85,
    // which first holds at ex = 5: steps 5 and 6 only.
    let pred: Vec<[f64; 2]> = (1..=6).map(|i| [i as f64, 0.0]).collect();
    let agent = AgentTrack { future: vec![[9.0, 1.5]; 6], dims: [4.2, 1.9], yaw: 0.0 };
    let r = planning_metrics(&pred, &pred, &[agent], DEFAULT_EGO_DIMS);
    assert_eq!(r.uniad.collision, [0.0, 0.0, 1.0]);
    let third = 1.0 / 3.0;
    assert!((r.vad_stp3.collision[2] - third).abs() < 1e-12);
    assert_eq!(r.vad_stp3.collision[0], 0.0);
    assert_eq!(r.vad_stp3.collision[1], 0.0);
    assert!((r.uniad.collision_mean - third).abs() < 1e-12);
    assert!((r.vad_stp3.collision_mean - third / 3.0).abs() < 1e-12);

    // Nudged out of reach in y, the same track never collides.
    let clear = AgentTrack { future: vec![[9.0, 2.8]; 6], dims: [4.2, 1.9], yaw: 0.0 };
    let r = planning_metrics(&pred, &pred, &[clear], DEFAULT_EGO_DIMS);
    assert_eq!(r.uniad.collision, [0.0; 3]);

    // A crossing agent is caught through the ego's rotated footprint: ego
    // turns straight north after step 2, so its long side sweeps y.
    let turn: Vec<[f64; 2]> = vec![[1.0, 0.0], [2.0, 0.0], [2.0, 1.0], [2.0, 2.0], [2.0, 3.0], [2.0, 4.0]];
    let side = AgentTrack { future: vec![[2.0, 6.5]; 6], dims: [4.2, 1.9], yaw: PI / 2.0 };
    // Heading north, overlap needs |ey - 6.5| <= 2.0 + 2.1: from ey >= 2.4,
    // so only the last two steps... ey = 3 and 4 qualify.
    let r = planning_metrics(&turn, &turn, &[side], DEFAULT_EGO_DIMS);
    assert_eq!(r.uniad.collision, [0.0, 0.0, 1.0]);
}

#[test]
fn averaging_bounds_the_convention_gap() {
    let mut rng = ChaCha12Rng::seed_from_u64(52);
    for _ in 0..50 {
        let steps = rng.gen_range(1..9usize);
        let pred: Vec<[f64; 2]> =
            (0..steps).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect();
        let gt: Vec<[f64; 2]> =
            (0..steps).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect();
        let r = planning_metrics(&pred, &gt, &[], DEFAULT_EGO_DIMS);
        let max_uniad = r.uniad.l2.iter().fold(0.0, |a: f64, &b| a.max(b));
        assert!(r.vad_stp3.l2_mean <= max_uniad + 1e-12);
    }
}

#[test]
fn reports_round_trip_through_json() {
    let full = EvalReport {
        detection: Some(detection_metrics(
            &[pred_of(0, &gt_box(1.0, 2.0, 0.1, 0), 0.9)],
            &[(0, gt_box(1.2, 2.0, 0.15, 0))],
            &DEFAULT_DIST_THRESHOLDS,
        )),
        seg: Some(SegReport { miou: 0.62, vehicle: Some(0.5), drivable: Some(0.8), divider: None }),
        occ: Some(OccReport { binary_iou: 0.44, semantic_miou: 0.41 }),
        planning: Some(planning_metrics(
            &[[1.0, 0.0], [2.0, 0.1], [3.0, 0.2]],
            &[[1.0, 0.1], [2.0, 0.0], [3.0, 0.4]],
            &[AgentTrack { future: vec![[2.0, 1.1]; 3], dims: [4.2, 1.9], yaw: 0.3 }],
            DEFAULT_EGO_DIMS,
        )),
    };
    let json = serde_json::to_string_pretty(&full).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(full, back);

    // A single-task evaluation leaves the other blocks out entirely.
    let solo = EvalReport { detection: full.detection.clone(), ..EvalReport::default() };
    let json = serde_json::to_string(&solo).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(solo, back);
    assert!(back.seg.is_none() && back.occ.is_none() && back.planning.is_none());

    // Scene averaging is a plain componentwise mean.
    let a = planning_metrics(&[[1.0, 0.0]], &[[0.0, 0.0]], &[], DEFAULT_EGO_DIMS);
    let b = planning_metrics(&[[3.0, 0.0]], &[[0.0, 0.0]], &[], DEFAULT_EGO_DIMS);
    let avg = PlanningReport::average(&[a, b]).unwrap();
    assert_eq!(avg.uniad.l2, [2.0; 3]);
    assert!(PlanningReport::average(&[]).is_none());
}
