//! Desk-scale evaluation: detection average precision with a composite
//! score, label-grid IoU, and planning error under the two reporting
//! conventions in common use.
//!
//! Detection matching is greedy by confidence with center-distance gating,
//! per class, per threshold, and never across samples. The composite score
//! is labeled "NDS-lite": 0.5 mAP plus 0.5 times the mean of the clipped,
//! normalized true-positive error scores. It is deliberately not the
//! official benchmark composite, whose velocity and attribute protocols do
//! not transfer to synthetic desk scale.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::geometry::obb_overlap;
use crate::scene::BoxGt;

/// Center-distance gates in meters.
pub const DEFAULT_DIST_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Ego footprint (length, width) for collision checks.
pub const DEFAULT_EGO_DIMS: [f64; 2] = [4.0, 1.8];

/// Bounds that normalize raw true-positive errors into [0, 1] scores:
/// translation (m), scale (already a 1-IoU ratio), orientation (rad),
/// velocity (m/s). A class with no true positives scores the full bound.
pub const ERROR_BOUNDS: [f64; 4] = [1.0, 1.0, PI, 1.0];

/// One detection to score, tagged with the sample it came from so matching
/// stays within a sample even when predictions are pooled over a whole set.
#[derive(Debug, Clone)]
pub struct DetPred {
    pub sample: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionReport {
    pub map: f64,
    /// NDS-lite composite, see the module docs.
    pub composite: f64,
    /// Mean center distance of true positives, meters.
    pub translation: f64,
    /// Mean 1 - IoU of center-and-yaw-aligned boxes.
    pub scale: f64,
    /// Mean absolute yaw gap, wrapped into [0, pi].
    pub orientation: f64,
    /// Mean velocity vector error, m/s.
    pub velocity: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegReport {
    pub miou: f64,
    pub vehicle: Option<f64>,
    pub drivable: Option<f64>,
    pub divider: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OccReport {
    pub binary_iou: f64,
    pub semantic_miou: f64,
}

/// Metrics at the three reported horizons plus their mean.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConventionReport {
    pub l2: [f64; 3],
    pub l2_mean: f64,
    pub collision: [f64; 3],
    pub collision_mean: f64,
}

/// Both reporting conventions side by side: `uniad` takes the value at each
/// horizon, `vad_stp3` averages the horizon values up to each horizon.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanningReport {
    pub uniad: ConventionReport,
    pub vad_stp3: ConventionReport,
}

/// Full evaluation document; absent blocks mean the task was not evaluated.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub detection: Option<DetectionReport>,
    pub seg: Option<SegReport>,
    pub occ: Option<OccReport>,
    pub planning: Option<PlanningReport>,
}

/// Per-class IoU with the derived means. Classes absent from both grids
/// carry no entry and are excluded from the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes 1.. with a nonempty union; class 0 is free space
    /// or background and only enters the binary split.
    pub miou: f64,
    /// Nonzero-vs-nonzero IoU; two empty grids agree perfectly (1.0).
    pub binary_iou: f64,
}

/// Intersection and union tallies, accumulated cellwise over any number of
/// grids so a whole evaluation set yields one dataset-level IoU.
#[derive(Debug, Clone, Default)]
pub struct IouAccumulator {
    inter: Vec<u64>,
    union: Vec<u64>,
    bin_inter: u64,
    bin_union: u64,
}

impl IouAccumulator {
    pub fn new(n_classes: usize) -> Self {
        Self { inter: vec![0; n_classes], union: vec![0; n_classes], bin_inter: 0, bin_union: 0 }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) {
        assert_eq!(pred.len(), gt.len(), "label grids must share a shape");
        let n = self.inter.len();
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            assert!(p < n && g < n, "label out of range");
            if p == g {
                self.inter[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
            match (p != 0, g != 0) {
                (true, true) => {
                    self.bin_inter += 1;
                    self.bin_union += 1;
                }
                (false, false) => {}
                _ => self.bin_union += 1,
            }
        }
    }

    pub fn finish(&self) -> IouReport {
        let per_class: Vec<Option<f64>> = self
            .inter
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().skip(1).flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let binary_iou =
            if self.bin_union == 0 { 1.0 } else { self.bin_inter as f64 / self.bin_union as f64 };
        IouReport { per_class, miou, binary_iou }
    }
}

/// One-shot IoU of a single grid pair.
pub fn iou_metrics(pred: &[u8], gt: &[u8], n_classes: usize) -> IouReport {
    let mut acc = IouAccumulator::new(n_classes);
    acc.add(pred, gt);
    acc.finish()
}

struct ClassMatch {
    /// True-positive flag per prediction, in descending score order.
    tp_flags: Vec<bool>,
    n_gt: usize,
    /// Matched (prediction index, ground-truth index) pairs.
    pairs: Vec<(usize, usize)>,
}

/// Greedy confidence-ordered matching of one class at one distance gate.
/// Each prediction takes the nearest still-unmatched ground truth in its own
/// sample, if that lies within the gate.
fn match_class(preds: &[DetPred], gts: &[(usize, BoxGt)], class_id: usize, thr: f64) -> ClassMatch {
    let mut order: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class_id == class_id).collect();
    order.sort_by(|&a, &b| {
        preds[b].score.partial_cmp(&preds[a].score).expect("scores must not be NaN").then(a.cmp(&b))
    });
    let n_gt = gts.iter().filter(|(_, g)| g.class_id == class_id).count();
    let mut taken = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(order.len());
    let mut pairs = Vec::new();
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(f64, usize)> = None;
        for (gi, (sample, g)) in gts.iter().enumerate() {
            if taken[gi] || g.class_id != class_id || *sample != p.sample {
                continue;
            }
            let d = bev_distance(&p.center, &g.center);
            if d <= thr && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                taken[gi] = true;
                pairs.push((pi, gi));
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    ClassMatch { tp_flags, n_gt, pairs }
}

fn bev_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// 101-point interpolated average precision from confidence-ordered
/// true-positive flags.
fn average_precision(tp_flags: &[bool], n_gt: usize) -> f64 {
    assert!(n_gt > 0, "a class without ground truth has no precision-recall curve");
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(tp_flags.len());
    for (k, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let best = curve
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        ap += best;
    }
    ap / 101.0
}

fn wrap_angle_abs(d: f64) -> f64 {
    let d = d.rem_euclid(TAU);
    d.min(TAU - d)
}

/// 1 - IoU of two boxes after aligning centers and yaw: pure size error.
fn scale_error(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let inter: f64 = a.iter().zip(b).map(|(x, y)| x.min(*y)).product();
    let union = a.iter().product::<f64>() + b.iter().product::<f64>() - inter;
    1.0 - inter / union
}

/// Average precision over classes and distance gates, plus true-positive
/// errors taken at the gate nearest 2 m. Classes with no ground truth
/// anywhere in the set are excluded throughout; with no ground truth at all
/// every score is zero and the errors sit at their bounds.
pub fn detection_metrics(
    preds: &[DetPred],
    gts: &[(usize, BoxGt)],
    thresholds: &[f64],
) -> DetectionReport {
    assert!(!thresholds.is_empty(), "need at least one distance gate");
    let classes: BTreeSet<usize> = gts.iter().map(|(_, g)| g.class_id).collect();
    if classes.is_empty() {
        return DetectionReport {
            map: 0.0,
            composite: 0.0,
            translation: ERROR_BOUNDS[0],
            scale: ERROR_BOUNDS[1],
            orientation: ERROR_BOUNDS[2],
            velocity: ERROR_BOUNDS[3],
        };
    }

    let mut ap_sum = 0.0;
    for &c in &classes {
        for &thr in thresholds {
            let m = match_class(preds, gts, c, thr);
            ap_sum += average_precision(&m.tp_flags, m.n_gt);
        }
    }
    let map = ap_sum / (classes.len() * thresholds.len()) as f64;

    let err_thr = thresholds
        .iter()
        .copied()
        .min_by(|a, b| (a - 2.0).abs().partial_cmp(&(b - 2.0).abs()).unwrap())
        .unwrap();
    let mut errors = [0.0; 4];
    for &c in &classes {
        let m = match_class(preds, gts, c, err_thr);
        if m.pairs.is_empty() {
            for (e, b) in errors.iter_mut().zip(ERROR_BOUNDS) {
                *e += b;
            }
            continue;
        }
        let mut sums = [0.0; 4];
        for &(pi, gi) in &m.pairs {
            let p = &preds[pi];
            let g = &gts[gi].1;
            sums[0] += bev_distance(&p.center, &g.center);
            sums[1] += scale_error(&p.size, &g.size);
            sums[2] += wrap_angle_abs(p.yaw - g.yaw);
            sums[3] += (p.velocity[0] - g.velocity[0]).hypot(p.velocity[1] - g.velocity[1]);
        }
        for (e, s) in errors.iter_mut().zip(sums) {
            *e += s / m.pairs.len() as f64;
        }
    }
    for e in errors.iter_mut() {
        *e /= classes.len() as f64;
    }

    let tp_score = errors
        .iter()
        .zip(ERROR_BOUNDS)
        .map(|(e, b)| 1.0 - (e / b).clamp(0.0, 1.0))
        .sum::<f64>()
        / 4.0;
    DetectionReport {
        map,
        composite: 0.5 * map + 0.5 * tp_score,
        translation: errors[0],
        scale: errors[1],
        orientation: errors[2],
        velocity: errors[3],
    }
}

/// A ground-truth agent's future track and footprint for collision checks.
#[derive(Debug, Clone)]
pub struct AgentTrack {
    /// One (x, y) per step, aligned with the ego trajectory.
    pub future: Vec<[f64; 2]>,
    /// Footprint (length, width).
    pub dims: [f64; 2],
    pub yaw: f64,
}

/// Reported horizon marks: the step indices closest to thirds of the
/// trajectory, standing in for 1 s, 2 s, and 3 s.
fn horizon_marks(steps: usize) -> [usize; 3] {
    let m = |i: usize| (i * steps).div_ceil(3).max(1);
    [m(1), m(2), m(3)]
}

/// L2 error and footprint collisions of a planned ego trajectory.
///
/// The `uniad` block takes each metric at the three horizon marks; the
/// `vad_stp3` block averages those mark values up to each mark, which is why
/// its mean can never exceed the largest per-horizon value. Collisions test
/// the ego rectangle, heading along its motion, against every agent's
/// footprint at the same step.
pub fn planning_metrics(
    pred: &[[f64; 2]],
    gt: &[[f64; 2]],
    agents: &[AgentTrack],
    ego_dims: [f64; 2],
) -> PlanningReport {
    assert!(!pred.is_empty() && pred.len() == gt.len(), "trajectories must align");
    for a in agents {
        assert_eq!(a.future.len(), pred.len(), "agent futures must align with the plan");
    }
    let steps = pred.len();
    let l2: Vec<f64> =
        pred.iter().zip(gt).map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1])).collect();

    let half_ego = (ego_dims[0] / 2.0, ego_dims[1] / 2.0);
    let mut collide = vec![false; steps];
    let mut yaw = 0.0;
    let mut prev = [0.0, 0.0];
    for (t, p) in pred.iter().enumerate() {
        let (dx, dy) = (p[0] - prev[0], p[1] - prev[1]);
        if dx.hypot(dy) > 1e-9 {
            yaw = dy.atan2(dx);
        }
        collide[t] = agents.iter().any(|a| {
            obb_overlap(
                (p[0], p[1]),
                half_ego,
                yaw,
                (a.future[t][0], a.future[t][1]),
                (a.dims[0] / 2.0, a.dims[1] / 2.0),
                a.yaw,
            )
        });
        prev = *p;
    }

    let marks = horizon_marks(steps);
    let at = |v: &[f64], m: usize| v[m - 1];
    let uniad_l2 = marks.map(|m| at(&l2, m));
    let col_f: Vec<f64> = collide.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    let uniad_col = marks.map(|m| at(&col_f, m));
    let prefix_mean = |v: &[f64; 3], i: usize| v[..=i].iter().sum::<f64>() / (i + 1) as f64;
    let vad_l2 = [0, 1, 2].map(|i| prefix_mean(&uniad_l2, i));
    let vad_col = [0, 1, 2].map(|i| prefix_mean(&uniad_col, i));
    let mean3 = |v: &[f64; 3]| v.iter().sum::<f64>() / 3.0;

    PlanningReport {
        uniad: ConventionReport {
            l2: uniad_l2,
            l2_mean: mean3(&uniad_l2),
            collision: uniad_col,
            collision_mean: mean3(&uniad_col),
        },
        vad_stp3: ConventionReport {
            l2: vad_l2,
            l2_mean: mean3(&vad_l2),
            collision: vad_col,
            collision_mean: mean3(&vad_col),
        },
    }
}

impl PlanningReport {
    /// Componentwise mean over per-scene reports.
    pub fn average(reports: &[PlanningReport]) -> Option<PlanningReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |pick: fn(&PlanningReport) -> &ConventionReport| {
            let mut out = ConventionReport::default();
            for r in reports {
                let c = pick(r);
                for i in 0..3 {
                    out.l2[i] += c.l2[i] / n;
                    out.collision[i] += c.collision[i] / n;
                }
                out.l2_mean += c.l2_mean / n;
                out.collision_mean += c.collision_mean / n;
            }
            out
        };
        Some(PlanningReport { uniad: avg(|r| &r.uniad), vad_stp3: avg(|r| &r.vad_stp3) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angles_wrap_into_the_half_circle() {
        assert!((wrap_angle_abs(0.1) - 0.1).abs() < 1e-12);
        assert!((wrap_angle_abs(-0.1) - 0.1).abs() < 1e-12);
        assert!((wrap_angle_abs(TAU + 0.3) - 0.3).abs() < 1e-12);
        assert!((wrap_angle_abs(PI + 0.2) - (PI - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn identical_sizes_have_no_scale_error() {
        assert_eq!(scale_error(&[4.2, 1.9, 1.7], &[4.2, 1.9, 1.7]), 0.0);
        // Half volume nested inside: IoU 0.5, error 0.5.
        let e = scale_error(&[2.0, 1.0, 1.0], &[1.0, 1.0, 1.0]);
        assert!((e - 0.5).abs() < 1e-12);
    }

    #[test]
    fn horizon_marks_split_the_trajectory_in_thirds() {
        assert_eq!(horizon_marks(6), [2, 4, 6]);
        assert_eq!(horizon_marks(3), [1, 2, 3]);
        assert_eq!(horizon_marks(1), [1, 1, 1]);
        assert_eq!(horizon_marks(4), [2, 3, 4]);
    }

    #[test]
    fn average_precision_saturates_on_clean_hits() {
        assert_eq!(average_precision(&[true, true], 2), 1.0);
        assert_eq!(average_precision(&[false, false], 2), 0.0);
        // One hit of two truths at precision 1: half the recall points score.
        let ap = average_precision(&[true], 2);
        assert!((ap - 51.0 / 101.0).abs() < 1e-12);
    }
}
