//! End-to-end checks for scene generation: determinism, geometric
//! consistency between renders and the projection math, label consistency
//! across grids, and dataset persistence.

use duoview_core::geometry::{project_to_camera, GridSpec, Mat4, Vec3, VoxelSpec};
use duoview_core::scene::{
    self, camera_rig, generate_scene, render, BoxGt, MapComplexity, SceneSpec, CLASS_CAR, OCC_CAR,
    SEG_VEHICLE,
};

fn toy_spec(seed: u64, n_objects: usize) -> SceneSpec {
    SceneSpec {
        seed,
        n_frames: 3,
        n_cameras: 2,
        image_size: (48, 96),
        n_objects,
        map_complexity: MapComplexity::RoadsDividers,
        ego_speed_range: (2.0, 4.0),
        horizon_t: 4,
        dt: 0.5,
        vel_noise_std: 0.2,
        seg_grid: GridSpec { extent: 12.8, cell: 0.8 },
        occ_voxels: VoxelSpec {
            xy: GridSpec { extent: 12.8, cell: 0.4 },
            z_min: -1.0,
            z_max: 3.0,
            z_cell: 1.0,
        },
    }
}

#[test]
fn identical_specs_give_bit_identical_scenes() {
    let spec = toy_spec(42, 5);
    let (seq_a, gt_a) = generate_scene(&spec).unwrap();
    let (seq_b, gt_b) = generate_scene(&spec).unwrap();
    for (fa, fb) in seq_a.frames.iter().zip(&seq_b.frames) {
        assert_eq!(fa.images.data(), fb.images.data());
        assert_eq!(fa.depths.data(), fb.depths.data());
        assert_eq!(fa.instance_ids, fb.instance_ids);
    }
    assert_eq!(seq_a.ego_poses, seq_b.ego_poses);
    for (a, b) in gt_a.iter().zip(&gt_b) {
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.bev_seg, b.bev_seg);
        assert_eq!(a.occ, b.occ);
        assert_eq!(a.futures, b.futures);
        assert_eq!(a.ego_future, b.ego_future);
    }
}

#[test]
fn empty_scene_has_no_boxes_or_vehicle_cells() {
    let spec = toy_spec(3, 0);
    let (_, gts) = generate_scene(&spec).unwrap();
    for gt in &gts {
        assert!(gt.boxes.is_empty());
        assert!(gt.futures.is_empty());
        assert!(gt.bev_seg.iter().all(|&c| c != SEG_VEHICLE));
        assert!(gt.occ.iter().all(|&c| c != OCC_CAR));
    }
}

/// A thin plate faces the camera head-on, so its silhouette is symmetric
/// about the projected center: the mask centroid must land within 1 px.
#[test]
fn rendered_footprint_centroid_matches_projection() {
    let (intr, exts) = camera_rig(1, (64, 96));
    for yaw in [0.0, 0.35] {
        let b = BoxGt {
            center: [8.0, 0.6, 0.75],
            size: [0.2, 2.4, 1.5],
            yaw,
            velocity: [0.0, 0.0],
            class_id: CLASS_CAR,
            instance: 7,
        };
        let vr = render::render_views(
            &intr,
            &exts,
            (64, 96),
            &[b.clone()],
            &Mat4::identity(),
            MapComplexity::Roads,
        );
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
        for (idx, &inst) in vr.instances.iter().enumerate() {
            if inst == 7 {
                su += (idx % 96) as f64 + 0.5;
                sv += (idx / 96) as f64 + 0.5;
                n += 1;
            }
        }
        assert!(n > 30, "yaw {yaw}: only {n} mask pixels");
        let (cu, cv) = (su / n as f64, sv / n as f64);
        let (u, v, _) =
            project_to_camera(Vec3::new(8.0, 0.6, 0.75), &intr[0], &exts[0]).unwrap();
        assert!((cu - u).abs() <= 1.0, "yaw {yaw}: centroid u {cu} vs projected {u}");
        assert!((cv - v).abs() <= 1.0, "yaw {yaw}: centroid v {cv} vs projected {v}");
    }
}

/// Box centers are interior points of a convex solid, so whenever the center
/// projects into the image, its pixel must carry that instance's id.
#[test]
fn visible_box_centers_project_into_their_masks() {
    let (h, w) = (48usize, 96usize);
    let mut checked = 0;
    for seed in 0..5 {
        let spec = toy_spec(seed, 1);
        let (seq, gts) = generate_scene(&spec).unwrap();
        for (frame, gt) in seq.frames.iter().zip(&gts) {
            for b in &gt.boxes {
                for cam in 0..spec.n_cameras {
                    let p = Vec3::new(b.center[0], b.center[1], b.center[2]);
                    let Ok((u, v, _)) =
                        project_to_camera(p, &frame.intrinsics[cam], &frame.cam_to_ego[cam])
                    else {
                        continue;
                    };
                    if !(2.0..w as f64 - 2.0).contains(&u) || !(2.0..h as f64 - 2.0).contains(&v) {
                        continue;
                    }
                    let idx = cam * h * w + (v as usize) * w + u as usize;
                    assert_eq!(
                        frame.instance_ids[idx], b.instance as i32,
                        "seed {seed} cam {cam}: center pixel ({u:.1}, {v:.1}) not on instance"
                    );
                    checked += 1;
                }
            }
        }
    }
    assert!(checked >= 3, "too few visible boxes exercised ({checked})");
}

/// Every car-occupied voxel column maps to a vehicle cell in the coarser
/// segmentation grid.
#[test]
fn occupancy_columns_agree_with_segmentation() {
    for seed in 0..3 {
        let spec = toy_spec(seed, 6);
        let (_, gts) = generate_scene(&spec).unwrap();
        let v = spec.occ_voxels;
        let (side, layers) = (v.xy.side(), v.z_layers());
        let seg_side = spec.seg_grid.side();
        for gt in &gts {
            for ix in 0..side {
                for iy in 0..side {
                    let col = (ix * side + iy) * layers;
                    if (0..layers).any(|iz| gt.occ[col + iz] == OCC_CAR) {
                        let (x, y) = v.xy.cell_center(ix, iy);
                        let (sx, sy) = spec.seg_grid.cell_index(x, y).unwrap();
                        assert_eq!(
                            gt.bev_seg[sx * seg_side + sy],
                            SEG_VEHICLE,
                            "seed {seed}: car column at ({x:.2}, {y:.2}) not vehicle in seg"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn dataset_round_trips_bit_exactly() {
    let spec = toy_spec(11, 4);
    let (seq, gts) = generate_scene(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    scene::dataset::save_scene(dir.path(), &spec, &seq, &gts).unwrap();
    let (spec2, seq2, gts2) = scene::dataset::load_scene(dir.path()).unwrap();
    assert_eq!(spec, spec2);
    assert_eq!(seq.timestamps, seq2.timestamps);
    assert_eq!(seq.ego_poses, seq2.ego_poses);
    for (a, b) in seq.frames.iter().zip(&seq2.frames) {
        assert_eq!(a.images.data(), b.images.data(), "image quantization must round-trip");
        assert_eq!(a.depths.data(), b.depths.data());
        assert_eq!(a.instance_ids, b.instance_ids);
        assert_eq!(a.intrinsics, b.intrinsics);
        assert_eq!(a.cam_to_ego, b.cam_to_ego);
    }
    for (a, b) in gts.iter().zip(&gts2) {
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.bev_seg, b.bev_seg);
        assert_eq!(a.occ, b.occ);
        assert_eq!(a.futures, b.futures);
        assert_eq!(a.ego_future, b.ego_future);
        assert_eq!(a.ego_state, b.ego_state);
    }
}
