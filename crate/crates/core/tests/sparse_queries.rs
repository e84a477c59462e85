//! Sparse query refinement checked against direct-formula oracles: attention
//! with the distance penalty, projection plus bilinear sampling, adaptive
//! mixing as explicit matrix products, residual box refinement, and the
//! NMS-style fusion of the two streams.

use duoview_core::geometry::{project_to_camera, Intrinsics, Mat4, Vec3};
use duoview_core::sparse::{
    dedup_and_fuse, Horizon, SampleFrame, SparseDetector, SparseQueryConfig, BOX_DIMS,
};
use duoview_core::CoreError;
use duoview_tensor::nn::{ParamKind, ParamStore, Session};
use duoview_tensor::{assert_grad_close, Array, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn rand_vec(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn data(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(name).unwrap_or_else(|| panic!("missing param {name}")).array.data().to_vec()
}

fn set(store: &mut ParamStore, name: &str, values: &[f64]) {
    store
        .get_mut(name)
        .unwrap_or_else(|| panic!("missing param {name}"))
        .array
        .data_mut()
        .copy_from_slice(values);
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter().map(|&v| v / sum).collect()
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
        .collect()
}

/// y = W x + b read straight from the store.
fn apply_linear(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = data(store, &format!("{name}.weight"));
    let b = data(store, &format!("{name}.bias"));
    let in_dim = x.len();
    let out_dim = b.len();
    assert_eq!(w.len(), in_dim * out_dim, "{name} weight size");
    (0..out_dim)
        .map(|o| b[o] + (0..in_dim).map(|i| w[o * in_dim + i] * x[i]).sum::<f64>())
        .collect()
}

fn base_cfg() -> SparseQueryConfig {
    SparseQueryConfig {
        n_queries: 4,
        dim: 8,
        n_heads: 2,
        n_points: 1,
        n_layers: 1,
        short_frames: 1,
        long_frames: 1,
        feat_channels: 3,
        dedup_iou: 0.5,
        class_aware_dedup: false,
        extent: 10.0,
    }
}

/// Camera at the ego origin looking along +x: z_cam forward, x_cam right
/// (toward -y_ego), y_cam down (toward -z_ego).
fn forward_cam() -> Mat4 {
    Mat4::new(
        0.0, 0.0, 1.0, 0.0, //
        -1.0, 0.0, 0.0, 0.0, //
        0.0, -1.0, 0.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    )
}

fn test_intr() -> Intrinsics {
    Intrinsics { fx: 32.0, fy: 32.0, cx: 48.0, cy: 32.0 }
}

/// One-camera frame over a 4x6 stride-16 map (a 64x96 image) whose channel c
/// reads coefs[c].0 + coefs[c].1 * col + coefs[c].2 * row, so a bilinear
/// sample anywhere in the interior is exactly that affine function.
fn ramp_frame(s: &mut Session, coefs: &[(f64, f64, f64)], t: f64) -> SampleFrame {
    let (h16, w16) = (4usize, 6usize);
    let mut v = Vec::with_capacity(coefs.len() * h16 * w16);
    for &(c0, a, b) in coefs {
        for i in 0..h16 {
            for j in 0..w16 {
                v.push(c0 + a * j as f64 + b * i as f64);
            }
        }
    }
    let feat = s.g.constant(v, &[coefs.len(), h16, w16]);
    SampleFrame {
        feat16: vec![feat],
        intrinsics: vec![test_intr()],
        cam_to_ego: vec![forward_cam()],
        ego_pose: Mat4::identity(),
        timestamp: t,
    }
}

/// Expected ramp read at the projection of an ego point, via the scalar
/// projection oracle.
fn ramp_at(p: Vec3, coef: (f64, f64, f64)) -> f64 {
    let (u, v, _) = project_to_camera(p, &test_intr(), &forward_cam()).unwrap();
    let col = u / 16.0 - 0.5;
    let row = v / 16.0 - 0.5;
    coef.0 + coef.1 * col + coef.2 * row
}

#[test]
fn query_initialization_is_deterministic_and_in_extent() {
    let cfg = SparseQueryConfig {
        n_queries: 900,
        dim: 256,
        n_heads: 8,
        n_points: 4,
        extent: 25.6,
        ..base_cfg()
    };
    let mut store_a = ParamStore::new();
    let mut store_b = ParamStore::new();
    let mut rng_a = ChaCha12Rng::seed_from_u64(9);
    let mut rng_b = ChaCha12Rng::seed_from_u64(9);
    let det = SparseDetector::init(&mut store_a, &mut rng_a, "det", cfg.clone()).unwrap();
    SparseDetector::init(&mut store_b, &mut rng_b, "det", cfg).unwrap();

    for name in ["det.query_feat", "det.query_boxes", "det.tau", "det.layer0.sa_q.weight"] {
        assert_eq!(data(&store_a, name), data(&store_b, name), "{name} must be seed-determined");
    }

    let mut s = Session::new(&store_a);
    let (q, b, tau) = det.query_state(&mut s);
    assert_eq!(s.g.shape(q), &[900, 256]);
    assert_eq!(s.g.shape(b), &[900, BOX_DIMS]);
    assert_eq!(s.g.shape(tau), &[900]);

    let boxes = data(&store_a, "det.query_boxes");
    for row in boxes.chunks(BOX_DIMS) {
        assert!(row[0].abs() <= 25.6 && row[1].abs() <= 25.6, "center outside extent: {row:?}");
        assert_eq!(&row[2..], &[0.75, 4.0, 2.0, 1.5, 0.0, 0.0, 0.0]);
    }
    assert!(data(&store_a, "det.tau").iter().all(|&t| t == 1.0));
}

#[test]
fn attention_matches_direct_formula_oracle() {
    let cfg = base_cfg();
    let (n, d, heads) = (cfg.n_queries, cfg.dim, cfg.n_heads);
    let dh = d / heads;
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(21);
    let det = SparseDetector::init(&mut store, &mut rng, "det", cfg).unwrap();
    set(&mut store, "det.tau", &[0.3, 0.7, 1.3, 0.2]);
    // Bend the norm away from identity so the oracle exercises gamma and beta.
    set(&mut store, "det.layer0.sa_ln.gamma", &[1.0, 1.1, 0.9, 1.2, 0.8, 1.05, 0.95, 1.15]);
    set(&mut store, "det.layer0.sa_ln.beta", &[0.1, -0.2, 0.0, 0.3, -0.1, 0.05, 0.2, -0.3]);

    let mut s = Session::new(&store);
    let (q, b, tau) = det.query_state(&mut s);
    let tr = det.self_attention(&mut s, 0, q, b, tau).unwrap();
    assert_eq!(tr.weights.len(), heads);

    let qd = data(&store, "det.query_feat");
    let bd = data(&store, "det.query_boxes");
    let td = data(&store, "det.tau");
    let proj = |head_name: &str| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| apply_linear(&store, &format!("det.layer0.{head_name}"), &qd[i * d..(i + 1) * d]))
            .collect()
    };
    let (qp, kp, vp) = (proj("sa_q"), proj("sa_k"), proj("sa_v"));

    let mut atn = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let wdata = s.g.data(tr.weights[h]).to_vec();
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    let dot: f64 = (0..dh).map(|k| qp[i][h * dh + k] * kp[j][h * dh + k]).sum();
                    let dist = ((bd[i * BOX_DIMS] - bd[j * BOX_DIMS]).powi(2)
                        + (bd[i * BOX_DIMS + 1] - bd[j * BOX_DIMS + 1]).powi(2))
                    .sqrt();
                    dot / (dh as f64).sqrt() - td[i] * dist
                })
                .collect();
            let w = softmax(&scores);
            for j in 0..n {
                assert!(
                    (wdata[i * n + j] - w[j]).abs() < 1e-5,
                    "head {h} weight ({i},{j}): {} vs {}",
                    wdata[i * n + j],
                    w[j]
                );
            }
            for k in 0..dh {
                atn[i][h * dh + k] = (0..n).map(|j| w[j] * vp[j][h * dh + k]).sum();
            }
        }
    }
    let gamma = data(&store, "det.layer0.sa_ln.gamma");
    let beta = data(&store, "det.layer0.sa_ln.beta");
    let out = s.g.data(tr.out).to_vec();
    for i in 0..n {
        let res: Vec<f64> = (0..d).map(|k| qd[i * d + k] + atn[i][k]).collect();
        let want = layer_norm(&res, &gamma, &beta);
        for k in 0..d {
            assert!(
                (out[i * d + k] - want[k]).abs() < 1e-5,
                "output ({i},{k}): {} vs {}",
                out[i * d + k],
                want[k]
            );
        }
    }
}

#[test]
fn zero_tau_reduces_to_plain_self_attention() {
    let cfg = base_cfg();
    let (n, d, heads) = (cfg.n_queries, cfg.dim, cfg.n_heads);
    let dh = d / heads;
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(22);
    let det = SparseDetector::init(&mut store, &mut rng, "det", cfg).unwrap();

    let mut s = Session::new(&store);
    let (q, b, _) = det.query_state(&mut s);
    let tau0 = s.g.constant(vec![0.0; n], &[n]);
    let tr = det.self_attention(&mut s, 0, q, b, tau0).unwrap();

    let qd = data(&store, "det.query_feat");
    let qp: Vec<Vec<f64>> =
        (0..n).map(|i| apply_linear(&store, "det.layer0.sa_q", &qd[i * d..(i + 1) * d])).collect();
    let kp: Vec<Vec<f64>> =
        (0..n).map(|i| apply_linear(&store, "det.layer0.sa_k", &qd[i * d..(i + 1) * d])).collect();
    for h in 0..heads {
        let wdata = s.g.data(tr.weights[h]).to_vec();
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    (0..dh).map(|k| qp[i][h * dh + k] * kp[j][h * dh + k]).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let w = softmax(&scores);
            for j in 0..n {
                assert!((wdata[i * n + j] - w[j]).abs() < 1e-9, "penalty-free weights must match");
            }
        }
    }
}

#[test]
fn huge_tau_collapses_attention_onto_self() {
    let cfg = base_cfg();
    let n = cfg.n_queries;
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(23);
    let det = SparseDetector::init(&mut store, &mut rng, "det", cfg).unwrap();
    let mut centers = data(&store, "det.query_boxes");
    for (i, (x, y)) in [(0.0, 0.0), (3.0, 1.0), (-2.0, 4.0), (5.0, -2.0)].iter().enumerate() {
        centers[i * BOX_DIMS] = *x;
        centers[i * BOX_DIMS + 1] = *y;
    }
    set(&mut store, "det.query_boxes", &centers);

    let mut s = Session::new(&store);
    let (q, b, _) = det.query_state(&mut s);
    let tau = s.g.constant(vec![1e6; n], &[n]);
    let tr = det.self_attention(&mut s, 0, q, b, tau).unwrap();
    for w in &tr.weights {
        let wd = s.g.data(*w);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (wd[i * n + j] - want).abs() < 1e-6,
                    "row {i} must be one-hot on itself, got {:?}",
                    &wd[i * n..(i + 1) * n]
                );
            }
        }
    }
    assert!(s.g.data(tr.out).iter().all(|v| v.is_finite()));
}

#[test]
fn attention_rows_are_stochastic_and_tau_is_monotone() {
    let cfg = base_cfg();
    let n = cfg.n_queries;
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(24);
    let det = SparseDetector::init(&mut store, &mut rng, "det", cfg).unwrap();

    let mut s = Session::new(&store);
    let (q, b, tau) = det.query_state(&mut s);
    let tr = det.self_attention(&mut s, 0, q, b, tau).unwrap();
    for w in &tr.weights {
        let wd = s.g.data(*w);
        for i in 0..n {
            let sum: f64 = wd[i * n..(i + 1) * n].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
        }
    }

    // Raising query 1's tau never lowers its own attention weight.
    let mut prev = -1.0;
    for t in [0.0, 0.25, 1.0, 4.0, 16.0] {
        let mut s = Session::new(&store);
        let (q, b, _) = det.query_state(&mut s);
        let tau = s.g.constant(vec![0.5, t, 0.5, 0.5], &[n]);
        let tr = det.self_attention(&mut s, 0, q, b, tau).unwrap();
        let wd = s.g.data(tr.weights[0]);
        let self_w = wd[n + 1];
        assert!(self_w >= prev - 1e-12, "self weight fell from {prev} to {self_w} at tau {t}");
        prev = self_w;
    }
}

#[test]
fn sampling_reads_the_analytic_projection_pixel() {
    let cfg = SparseQueryConfig {
        n_queries: 2,
        n_points: 1,
        long_frames: 0,
        feat_channels: 2,
        ..base_cfg()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(31);
    let det = SparseDetector::init(&mut store, &mut rng, "det", cfg.clone()).unwrap();
    // Zero offsets put the single sample point at the box center.
    set(&mut store, "det.layer0.short.offsets.weight", &vec![0.0; 3 * cfg.dim]);
    #[rustfmt::skip]
    set(&mut store, "det.query_boxes", &[
        5.0, 0.8, 0.3, 4.0, 2.0, 1.5, 0.4, 0.0, 0.0,
        -3.0, 0.0, 0.5, 4.0, 2.0, 1.5, 0.0, 0.0, 0.0,
    ]);

    let coefs = [(0.25, 0.5, -0.3), (1.0, -0.2, 0.7)];
    let mut s = Session::new(&store);
    let frame = ramp_frame(&mut s, &coefs, 0.0);
    let (q, b, _) = det.query_state(&mut s);
    let out = det
        .sample_points(&mut s, 0, Horizon::Short, q, b, std::slice::from_ref(&frame), 0.0, &Mat4::identity())
        .unwrap();
    assert_eq!(s.g.shape(out), &[2, 1, 2]);
    let got = s.g.data(out);

    let p0 = Vec3::new(5.0, 0.8, 0.3);
    for (c, coef) in coefs.iter().enumerate() {
        let want = ramp_at(p0, *coef);
        assert!((got[c] - want).abs() < 1e-9, "channel {c}: {} vs {}", got[c], want);
    }
    // The second box sits behind the camera: its features are exactly zero.
    assert_eq!(&got[2..], &[0.0, 0.0]);
}

#[test]
fn nearest_camera_wins_when_several_see_a_point() {
    let cfg = SparseQueryConfig {
        n_queries: 2,
        n_points: 1,
        long_frames: 0,
        feat_channels: 1,
        ..base_cfg()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(32);
    let det = SparseDetector::init(&mut store, &mut rng, "det", cfg.clone()).unwrap();
    set(&mut store, "det.layer0.short.offsets.weight", &vec![0.0; 3 * cfg.dim]);
    #[rustfmt::skip]
    set(&mut store, "det.query_boxes", &[
        5.0, 0.8, 0.3, 4.0, 2.0, 1.5, 0.0, 0.0, 0.0,
        -1.0, 0.0, 0.3, 4.0, 2.0, 1.5, 0.0, 0.0, 0.0,
    ]);

    // Camera 1 sits 2 m behind camera 0, both looking along +x.
    let mut back = forward_cam();
    back[(0, 3)] = -2.0;
    let coef_front = (0.3, 0.7, 0.1);
    let coef_back = (-1.0, 0.2, 0.5);
    let mut s = Session::new(&store);
    let f_front = ramp_frame(&mut s, &[coef_front], 0.0);
    let f_back = ramp_frame(&mut s, &[coef_back], 0.0);
    let frame = SampleFrame {
        feat16: vec![f_front.feat16[0], f_back.feat16[0]],
        intrinsics: vec![test_intr(), test_intr()],
        cam_to_ego: vec![forward_cam(), back],
        ego_pose: Mat4::identity(),
        timestamp: 0.0,
    };
    let (q, b, _) = det.query_state(&mut s);
    let out = det
        .sample_points(&mut s, 0, Horizon::Short, q, b, std::slice::from_ref(&frame), 0.0, &Mat4::identity())
        .unwrap();
    let got = s.g.data(out);

    // Both cameras see the first point; the front one is closer and wins.
    let want0 = ramp_at(Vec3::new(5.0, 0.8, 0.3), coef_front);
    assert!((got[0] - want0).abs() < 1e-9, "front camera read: {} vs {}", got[0], want0);

    // Only the rear camera sees the second point (depth 1 m instead of -1).
    let (u, v, _) = project_to_camera(Vec3::new(-1.0, 0.0, 0.3), &test_intr(), &back).unwrap();
    let want1 = coef_back.0 + coef_back.1 * (u / 16.0 - 0.5) + coef_back.2 * (v / 16.0 - 0.5);
    assert!((got[1] - want1).abs() < 1e-9, "rear camera read: {} vs {}", got[1], want1);
}

#[test]
fn point_offsets_scale_with_half_size_and_rotate_with_yaw() {
    let cfg = SparseQueryConfig {
        n_queries: 1,
        n_points: 1,
        long_frames: 0,
        feat_channels: 1,
        ..base_cfg()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(33);
    let det = SparseDetector::init(&mut store, &mut rng, "det", cfg.clone()).unwrap();
    set(&mut store, "det.layer0.short.offsets.weight", &vec![0.0; 3 * cfg.dim]);
    // A unit offset along the box x axis lands on the front face: the head
    // output is measured in half sizes.
    set(&mut store, "det.layer0.short.offsets.bias", &[1.0, 0.0, 0.0]);
    let yaw = 0.5;
    set(&mut store, "det.query_boxes", &[6.0, 0.0, 0.2, 2.0, 2.0, 1.0, yaw, 0.0, 0.0]);

    let coef = (0.4, -0.6, 0.9);
    let mut s = Session::new(&store);
    let frame = ramp_frame(&mut s, &[coef], 0.0);
    let (q, b, _) = det.query_state(&mut s);
    let out = det
        .sample_points(&mut s, 0, Horizon::Short, q, b, std::slice::from_ref(&frame), 0.0, &Mat4::identity())
        .unwrap();
    let got = s.g.data(out)[0];
    let want = ramp_at(Vec3::new(6.0 + yaw.cos(), yaw.sin(), 0.2), coef);
    assert!((got - want).abs() < 1e-9, "rotated offset read: {got} vs {want}");
}

#[test]
fn zero_velocity_samples_identical_frames_identically() {
    let cfg = SparseQueryConfig {
        n_queries: 2,
        n_points: 2,
        short_frames: 2,
        long_frames: 0,
        feat_channels: 2,
        ..base_cfg()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(34);
    let det = SparseDetector::init(&mut store, &mut rng, "det", cfg.clone()).unwrap();
    let mut boxes = data(&store, "det.query_boxes");
    boxes[0] = 5.0;
    boxes[1] = 0.5;
    boxes[BOX_DIMS] = 6.0;
    boxes[BOX_DIMS + 1] = -0.6;
    set(&mut store, "det.query_boxes", &boxes);

    let coefs = [(0.25, 0.5, -0.3), (1.0, -0.2, 0.7)];
    let run = |store: &ParamStore| -> Vec<f64> {
        let mut s = Session::new(store);
        let f_old = ramp_frame(&mut s, &coefs, 0.3);
        let f_new = ramp_frame(&mut s, &coefs, 0.6);
        let (q, b, _) = det.query_state(&mut s);
        let out = det
            .sample_points(&mut s, 0, Horizon::Short, q, b, &[f_old, f_new], 1.0, &Mat4::identity())
            .unwrap();
        s.g.data(out).to_vec()
    };

    // Stationary boxes: the two frame blocks agree bitwise.
    let (s_pts, c) = (cfg.n_points, cfg.feat_channels);
    let block = |d: &[f64], qi: usize, f: usize| -> Vec<f64> {
        (0..s_pts * c).map(|k| d[((qi * 2 + f) * s_pts * c) + k]).collect()
    };
    let still = run(&store);
    for qi in 0..2 {
        assert_eq!(block(&still, qi, 0), block(&still, qi, 1), "query {qi} blocks must match");
    }

    // A moving first box samples different spots in the two frames.
    boxes[7] = 1.5;
    set(&mut store, "det.query_boxes", &boxes);
    let moving = run(&store);
    let diff0: f64 = block(&moving, 0, 0)
        .iter()
        .zip(block(&moving, 0, 1))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff0 > 1e-6, "moving box must sample differently across frames");
    assert_eq!(block(&moving, 1, 0), block(&moving, 1, 1), "still box is unaffected");
}

#[test]
fn mixing_matches_explicit_matrix_products() {
    let cfg = SparseQueryConfig {
        n_queries: 2,
        dim: 6,
        n_points: 2,
        long_frames: 0,
        feat_channels: 3,
        ..base_cfg()
    };
    let (n, d, c) = (cfg.n_queries, cfg.dim, cfg.feat_channels);
    let fs = cfg.short_frames * cfg.n_points;
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(41);
    let det = SparseDetector::init(&mut store, &mut rng, "det", cfg).unwrap();
    set(&mut store, "det.layer0.chan_ln.gamma", &[1.2, 0.8, 1.05]);
    set(&mut store, "det.layer0.chan_ln.beta", &[0.1, -0.3, 0.2]);
    set(&mut store, "det.layer0.short.point_ln.gamma", &[0.9, 1.3, 0.7]);
    set(&mut store, "det.layer0.short.point_ln.beta", &[-0.2, 0.0, 0.4]);

    let q_data = rand_vec(&mut rng, n * d);
    let p_data = rand_vec(&mut rng, n * fs * c);
    let mut s = Session::new(&store);
    let q = s.g.constant(q_data.clone(), &[n, d]);
    let samples = s.g.constant(p_data.clone(), &[n, fs, c]);
    let tr = det.adaptive_mix(&mut s, 0, Horizon::Short, q, samples).unwrap();
    assert_eq!(s.g.shape(tr.channel_mixed), &[n, fs, c]);
    assert_eq!(s.g.shape(tr.out), &[n, d]);

    let cg = data(&store, "det.layer0.chan_ln.gamma");
    let cb = data(&store, "det.layer0.chan_ln.beta");
    let pg = data(&store, "det.layer0.short.point_ln.gamma");
    let pb = data(&store, "det.layer0.short.point_ln.beta");
    let got_chan = s.g.data(tr.channel_mixed).to_vec();
    let got_point = s.g.data(tr.point_mixed).to_vec();
    let got_out = s.g.data(tr.out).to_vec();
    for i in 0..n {
        let qi = &q_data[i * d..(i + 1) * d];
        let qq: Vec<f64> = qi.iter().chain(qi.iter()).copied().collect();
        let mc = apply_linear(&store, "det.layer0.chan_gen", &qq);
        let mut chan = vec![vec![0.0; c]; fs];
        for p in 0..fs {
            for cc in 0..c {
                chan[p][cc] = (0..c)
                    .map(|k| p_data[(i * fs + p) * c + k] * mc[k * c + cc])
                    .sum();
            }
            chan[p] = layer_norm(&chan[p], &cg, &cb).iter().map(|&v| v.max(0.0)).collect();
            for cc in 0..c {
                let got = got_chan[(i * fs + p) * c + cc];
                assert!((got - chan[p][cc]).abs() < 1e-5, "channel stage ({i},{p},{cc})");
            }
        }
        let mp = apply_linear(&store, "det.layer0.short.point_gen", qi);
        let mut pnt = vec![vec![0.0; c]; fs];
        for p in 0..fs {
            for cc in 0..c {
                pnt[p][cc] = (0..fs).map(|r| mp[p * fs + r] * chan[r][cc]).sum();
            }
            pnt[p] = layer_norm(&pnt[p], &pg, &pb).iter().map(|&v| v.max(0.0)).collect();
            for cc in 0..c {
                let got = got_point[(i * fs + p) * c + cc];
                assert!((got - pnt[p][cc]).abs() < 1e-5, "point stage ({i},{p},{cc})");
            }
        }
        let flat: Vec<f64> = pnt.iter().flatten().copied().collect();
        let want = apply_linear(&store, "det.layer0.short.out", &flat);
        for k in 0..d {
            assert!((got_out[i * d + k] - want[k]).abs() < 1e-5, "projection ({i},{k})");
        }
    }
}

#[test]
fn identity_channel_matrix_reduces_to_norm_and_relu() {
    let cfg = SparseQueryConfig {
        n_queries: 2,
        dim: 6,
        n_points: 2,
        long_frames: 0,
        feat_channels: 3,
        ..base_cfg()
    };
    let (n, d, c) = (cfg.n_queries, cfg.dim, cfg.feat_channels);
    let fs = cfg.short_frames * cfg.n_points;
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(42);
    let det = SparseDetector::init(&mut store, &mut rng, "det", cfg).unwrap();
    set(&mut store, "det.layer0.chan_gen.weight", &vec![0.0; c * c * 2 * d]);
    let mut ident = vec![0.0; c * c];
    for k in 0..c {
        ident[k * c + k] = 1.0;
    }
    set(&mut store, "det.layer0.chan_gen.bias", &ident);

    let p_data = rand_vec(&mut rng, n * fs * c);
    let q_data = rand_vec(&mut rng, n * d);
    let mut s = Session::new(&store);
    let q = s.g.constant(q_data, &[n, d]);
    let samples = s.g.constant(p_data.clone(), &[n, fs, c]);
    let tr = det.adaptive_mix(&mut s, 0, Horizon::Short, q, samples).unwrap();
    let got = s.g.data(tr.channel_mixed);
    let ones = vec![1.0; c];
    let zeros = vec![0.0; c];
    for r in 0..n * fs {
        let want: Vec<f64> = layer_norm(&p_data[r * c..(r + 1) * c], &ones, &zeros)
            .iter()
            .map(|&v| v.max(0.0))
            .collect();
        for cc in 0..c {
            assert!(
                (got[r * c + cc] - want[cc]).abs() < 1e-12,
                "identity mixing row {r} channel {cc}"
            );
        }
    }
}

#[test]
fn channel_generator_is_shared_and_point_generators_are_not() {
    let cfg = SparseQueryConfig { n_layers: 2, n_points: 2, ..base_cfg() };
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(43);
    let det = SparseDetector::init(&mut store, &mut rng, "det", cfg).unwrap();
    let mut boxes = data(&store, "det.query_boxes");
    for (i, x) in [4.0, 5.0, 6.0, 7.0].iter().enumerate() {
        boxes[i * BOX_DIMS] = *x;
        boxes[i * BOX_DIMS + 1] = 0.2 * i as f64;
    }
    set(&mut store, "det.query_boxes", &boxes);

    let run = |store: &ParamStore| -> (Vec<f64>, Vec<f64>) {
        let mut s = Session::new(store);
        let short = [ramp_frame(&mut s, &[(0.3, 0.4, -0.2), (0.9, -0.1, 0.3), (0.1, 0.2, 0.5)], 0.8)];
        let long = [ramp_frame(&mut s, &[(0.5, -0.3, 0.1), (0.2, 0.6, -0.4), (0.7, 0.1, 0.1)], 0.2)];
        let (ss, ls) = det.iterate(&mut s, &short, &long, 1.0, &Mat4::identity()).unwrap();
        let ls = ls.expect("long stream is configured");
        (s.g.data(ss.features).to_vec(), s.g.data(ls.features).to_vec())
    };
    let max_diff = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    let (short0, long0) = run(&store);

    // The channel-mixing generator feeds both streams. A single entry is
    // bumped: a whole row would cancel against the zero-mean norm output.
    let mut bumped = store.clone();
    let mut w = data(&bumped, "det.layer0.chan_gen.weight");
    w[0] += 0.1;
    set(&mut bumped, "det.layer0.chan_gen.weight", &w);
    let (short1, long1) = run(&bumped);
    assert!(max_diff(&short0, &short1) > 1e-9, "shared generator must reach the short stream");
    assert!(max_diff(&long0, &long1) > 1e-9, "shared generator must reach the long stream");

    // The short point-mixing generator must not touch the long stream.
    let mut bumped = store.clone();
    let mut w = data(&bumped, "det.layer0.short.point_gen.weight");
    w[0] += 0.1;
    set(&mut bumped, "det.layer0.short.point_gen.weight", &w);
    let (short2, long2) = run(&bumped);
    assert!(max_diff(&short0, &short2) > 1e-9, "short generator must reach the short stream");
    assert_eq!(long0, long2, "short generator must not reach the long stream");

    // And conversely for a long-only parameter.
    let mut bumped = store.clone();
    let mut w = data(&bumped, "det.layer1.long.offsets.weight");
    w[0] += 0.1;
    set(&mut bumped, "det.layer1.long.offsets.weight", &w);
    let (short3, long3) = run(&bumped);
    assert_eq!(short0, short3, "long sampler must not reach the short stream");
    assert!(max_diff(&long0, &long3) > 1e-9, "long sampler must reach the long stream");
}

#[test]
fn zero_regression_heads_leave_boxes_untouched() {
    let cfg = SparseQueryConfig {
        n_queries: 2,
        n_layers: 3,
        long_frames: 0,
        feat_channels: 2,
        ..base_cfg()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(44);
    let det = SparseDetector::init(&mut store, &mut rng, "det", cfg).unwrap();
    let mut boxes = data(&store, "det.query_boxes");
    boxes[0] = 5.0;
    boxes[1] = 0.5;
    boxes[BOX_DIMS] = 6.0;
    boxes[BOX_DIMS + 1] = -0.4;
    set(&mut store, "det.query_boxes", &boxes);

    let run = |store: &ParamStore| -> Vec<Vec<f64>> {
        let mut s = Session::new(store);
        let short = [ramp_frame(&mut s, &[(0.3, 0.4, -0.2), (0.9, -0.1, 0.3)], 0.5)];
        let (ss, ls) = det.iterate(&mut s, &short, &[], 1.0, &Mat4::identity()).unwrap();
        assert!(ls.is_none(), "no long stream was configured");
        assert_eq!(*ss.box_trace.last().unwrap(), ss.boxes);
        ss.box_trace.iter().map(|&t| s.g.data(t).to_vec()).collect()
    };

    // Freshly initialized heads are zero: every round returns the boxes as is.
    let trace = run(&store);
    assert_eq!(trace.len(), 3, "one refinement per layer");
    for step in &trace {
        assert_eq!(*step, boxes, "zero head must keep boxes bitwise intact");
    }

    // A bias on the first layer's head shifts x once, then holds.
    let mut bias = vec![0.0; BOX_DIMS];
    bias[0] = 0.3;
    set(&mut store, "det.layer0.reg.bias", &bias);
    let trace = run(&store);
    let mut want = boxes.clone();
    want[0] += 0.3;
    want[BOX_DIMS] += 0.3;
    assert_eq!(trace[0], want, "layer 0 bias moves every x by 0.3");
    assert_eq!(trace[1], want);
    assert_eq!(trace[2], want);
}

#[test]
fn minimal_pipeline_runs_and_window_sizes_are_checked() {
    let cfg = SparseQueryConfig { long_frames: 0, feat_channels: 2, ..base_cfg() };
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(45);
    let det = SparseDetector::init(&mut store, &mut rng, "det", cfg).unwrap();

    let mut s = Session::new(&store);
    let short = [ramp_frame(&mut s, &[(0.3, 0.4, -0.2), (0.9, -0.1, 0.3)], 0.5)];
    let (ss, ls) = det.iterate(&mut s, &short, &[], 1.0, &Mat4::identity()).unwrap();
    assert!(ls.is_none());
    assert!(s.g.data(ss.features).iter().all(|v| v.is_finite()));
    assert!(s.g.data(ss.boxes).iter().all(|v| v.is_finite()));

    // A long frame where none belongs is rejected up front.
    let spare = ramp_frame(&mut s, &[(0.0, 1.0, 0.0), (0.0, 0.0, 1.0)], 0.1);
    let err = det
        .iterate(&mut s, &short, std::slice::from_ref(&spare), 1.0, &Mat4::identity())
        .err()
        .expect("unexpected long window must be rejected");
    match err {
        CoreError::Validation { what, problems } => {
            assert_eq!(what, "sparse frame windows");
            assert!(problems[0].contains("long"), "problem names the window: {problems:?}");
        }
        other => panic!("unexpected error {other:?}"),
    }
}

/// Greedy leader grouping reimplemented with nothing shared with the library.
fn oracle_groups(
    boxes: &[f64],
    scores: &[f64],
    classes: &[usize],
    thr: f64,
    aware: bool,
) -> Vec<Vec<usize>> {
    let iou = |a: usize, b: usize| -> f64 {
        let (ax, ay, al, aw) = (boxes[a * 9], boxes[a * 9 + 1], boxes[a * 9 + 3], boxes[a * 9 + 4]);
        let (bx, by, bl, bw) = (boxes[b * 9], boxes[b * 9 + 1], boxes[b * 9 + 3], boxes[b * 9 + 4]);
        let xo = ((ax + al / 2.0).min(bx + bl / 2.0) - (ax - al / 2.0).max(bx - bl / 2.0)).max(0.0);
        let yo = ((ay + aw / 2.0).min(by + bw / 2.0) - (ay - aw / 2.0).max(by - bw / 2.0)).max(0.0);
        let inter = xo * yo;
        inter / (al * aw + bl * bw - inter)
    };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &cand in &order {
        let mut placed = false;
        for g in groups.iter_mut() {
            if (!aware || classes[g[0]] == classes[cand]) && iou(g[0], cand) > thr {
                g.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            groups.push(vec![cand]);
        }
    }
    groups
}

fn box_row(x: f64, y: f64, l: f64, w: f64) -> [f64; BOX_DIMS] {
    [x, y, 0.75, l, w, 1.5, 0.0, 0.0, 0.0]
}

#[test]
fn dedup_grouping_matches_a_brute_force_oracle() {
    let store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(51);
    let mut s = Session::new(&store);
    let rows: Vec<[f64; BOX_DIMS]> = vec![
        box_row(0.0, 0.0, 4.0, 2.0),
        box_row(0.5, 0.0, 4.0, 2.0),
        box_row(10.0, 10.0, 4.0, 2.0),
        box_row(0.2, 0.1, 4.0, 2.0),
        box_row(10.5, 10.0, 4.0, 2.0),
    ];
    let box_data: Vec<f64> = rows.iter().flatten().copied().collect();
    let scores = [0.9, 0.8, 0.7, 0.6, 0.95];
    let classes = [0, 0, 1, 1, 1];
    let feat_data = rand_vec(&mut rng, 5 * 3);
    let feats = s.g.constant(feat_data.clone(), &[5, 3]);
    let boxes = s.g.constant(box_data.clone(), &[5, BOX_DIMS]);

    let fused = dedup_and_fuse(&mut s, feats, boxes, &scores, &classes, 0.5, false).unwrap();
    assert_eq!(fused.groups, vec![vec![4, 2], vec![0, 1, 3]]);
    assert_eq!(fused.groups, oracle_groups(&box_data, &scores, &classes, 0.5, false));
    assert_eq!(fused.scores, vec![0.95, 0.9]);
    assert_eq!(fused.classes, vec![1, 0]);
    let got_boxes = s.g.data(fused.boxes).to_vec();
    assert_eq!(&got_boxes[..BOX_DIMS], &rows[4]);
    assert_eq!(&got_boxes[BOX_DIMS..], &rows[0]);

    // Fused features are the exact per-channel max over each group.
    let got = s.g.data(fused.features).to_vec();
    for (gi, group) in fused.groups.iter().enumerate() {
        for c in 0..3 {
            let want =
                group.iter().map(|&m| feat_data[m * 3 + c]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(got[gi * 3 + c], want, "group {gi} channel {c}");
        }
    }

    // Class-aware grouping splits the mixed-class group.
    let aware = dedup_and_fuse(&mut s, feats, boxes, &scores, &classes, 0.5, true).unwrap();
    assert_eq!(aware.groups, vec![vec![4, 2], vec![0, 1], vec![3]]);
    assert_eq!(aware.groups, oracle_groups(&box_data, &scores, &classes, 0.5, true));
}

#[test]
fn dedup_keeps_disjoint_candidates_and_collapses_identical_ones() {
    let store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(52);
    let mut s = Session::new(&store);

    // Far-apart candidates pass through, reordered best score first.
    let rows = [box_row(0.0, 0.0, 4.0, 2.0), box_row(20.0, 0.0, 4.0, 2.0), box_row(0.0, 20.0, 4.0, 2.0)];
    let box_data: Vec<f64> = rows.iter().flatten().copied().collect();
    let feat_data = rand_vec(&mut rng, 3 * 4);
    let feats = s.g.constant(feat_data.clone(), &[3, 4]);
    let boxes = s.g.constant(box_data, &[3, BOX_DIMS]);
    let fused = dedup_and_fuse(&mut s, feats, boxes, &[0.2, 0.9, 0.5], &[0, 0, 0], 0.5, false).unwrap();
    assert_eq!(fused.groups, vec![vec![1], vec![2], vec![0]]);
    let got = s.g.data(fused.features).to_vec();
    for (gi, src) in [1usize, 2, 0].iter().enumerate() {
        assert_eq!(&got[gi * 4..(gi + 1) * 4], &feat_data[src * 4..(src + 1) * 4]);
    }

    // Two identical candidates become one instance with the shared vector.
    let twin_feat: Vec<f64> = feat_data[..4].repeat(2);
    let twin_boxes: Vec<f64> = box_row(1.0, 2.0, 4.0, 2.0).repeat(2);
    let tf = s.g.constant(twin_feat.clone(), &[2, 4]);
    let tb = s.g.constant(twin_boxes, &[2, BOX_DIMS]);
    let fused = dedup_and_fuse(&mut s, tf, tb, &[0.7, 0.7], &[0, 0], 0.5, false).unwrap();
    assert_eq!(fused.groups, vec![vec![0, 1]]);
    assert_eq!(s.g.data(fused.features), &twin_feat[..4]);
}

#[test]
fn fusion_backward_reaches_the_winning_members() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(53);
    store.insert(
        "cand.feat",
        Array::new(vec![4, 3], rand_vec(&mut rng, 12)).unwrap(),
        ParamKind::Other,
    );
    let mut s = Session::new(&store);
    let feats = s.param("cand.feat");
    let rows = [
        box_row(0.0, 0.0, 4.0, 2.0),
        box_row(0.2, 0.0, 4.0, 2.0),
        box_row(15.0, 0.0, 4.0, 2.0),
        box_row(15.2, 0.0, 4.0, 2.0),
    ];
    let box_data: Vec<f64> = rows.iter().flatten().copied().collect();
    let boxes = s.g.constant(box_data, &[4, BOX_DIMS]);
    let fused = dedup_and_fuse(&mut s, feats, boxes, &[0.9, 0.8, 0.7, 0.6], &[0; 4], 0.5, false).unwrap();
    assert_eq!(fused.groups.len(), 2);

    let loss = s.g.sum_all(fused.features);
    let grads = s.backward(loss).unwrap();
    let g = grads.get("cand.feat").expect("candidate features take gradient");
    assert!(g.iter().all(|&v| v == 0.0 || v == 1.0), "max routes unit gradient: {g:?}");
    // One winner per channel per group: 2 groups x 3 channels.
    assert_eq!(g.iter().sum::<f64>(), 6.0);
}

/// Probe-weighted sum over both streams' features and boxes, so every output
/// contributes to one scalar for gradient checking.
fn probe_loss<'a>(
    store: &'a ParamStore,
    det: &SparseDetector,
    probes: &[Vec<f64>],
) -> (f64, Session<'a>, TensorId) {
    let mut s = Session::new(store);
    let short = [ramp_frame(&mut s, &[(0.3, 0.4, -0.2), (0.9, -0.1, 0.3)], 0.6)];
    let long = [ramp_frame(&mut s, &[(0.5, -0.3, 0.1), (0.2, 0.6, -0.4)], 0.2)];
    let (ss, ls) = det.iterate(&mut s, &short, &long, 1.0, &Mat4::identity()).unwrap();
    let ls = ls.unwrap();
    let outs = [ss.features, ss.boxes, ls.features, ls.boxes];
    let mut total = None;
    for (t, probe) in outs.iter().zip(probes.iter()) {
        let sh = s.g.shape(*t).to_vec();
        let r = s.g.constant(probe.clone(), &sh);
        let prod = s.g.mul(*t, r);
        let contrib = s.g.sum_all(prod);
        total = Some(match total {
            None => contrib,
            Some(acc) => s.g.add(acc, contrib),
        });
    }
    let loss = total.unwrap();
    (s.g.scalar_value(loss), s, loss)
}

#[test]
fn query_gradients_match_finite_differences() {
    let cfg = SparseQueryConfig { feat_channels: 2, ..base_cfg() };
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(61);
    let det = SparseDetector::init(&mut store, &mut rng, "det", cfg.clone()).unwrap();
    let mut boxes = data(&store, "det.query_boxes");
    for (i, x) in [4.0, 5.0, 6.0, 7.0].iter().enumerate() {
        boxes[i * BOX_DIMS] = *x;
        boxes[i * BOX_DIMS + 1] = 0.3 * i as f64 - 0.5;
    }
    set(&mut store, "det.query_boxes", &boxes);
    let probes: Vec<Vec<f64>> = [
        cfg.n_queries * cfg.dim,
        cfg.n_queries * BOX_DIMS,
        cfg.n_queries * cfg.dim,
        cfg.n_queries * BOX_DIMS,
    ]
    .iter()
    .map(|&k| rand_vec(&mut rng, k))
    .collect();

    let (_, mut s, loss) = probe_loss(&store, &det, &probes);
    let grads = s.backward(loss).unwrap();
    for name in ["det.query_feat", "det.tau", "det.query_boxes"] {
        let x0 = data(&store, name);
        let analytic = grads.get(name).unwrap_or_else(|| panic!("no grad for {name}"));
        let f = |x: &[f64]| {
            let mut st = store.clone();
            st.get_mut(name).unwrap().array.data_mut().copy_from_slice(x);
            probe_loss(&st, &det, &probes).0
        };
        assert_grad_close(f, &x0, analytic, 1e-5, 1e-3, name);
    }
}
