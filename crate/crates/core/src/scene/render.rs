//! Ray-cast rendering of scenes: textured ground plane plus shaded agent
//! boxes. Depth is camera-frame z, so it matches pinhole projection exactly.

use rayon::prelude::*;

use duoview_tensor::Array;

use crate::geometry::{transform_point, Intrinsics, Mat4, Vec3};

use super::{map_surface, BoxGt, MapComplexity, CLASS_CAR, SEG_DIVIDER, SEG_DRIVABLE};

pub struct ViewRender {
    /// [cams, 3, H, W]
    pub images: Array,
    /// [cams, H, W]; 0 where the ray escapes to the sky.
    pub depths: Array,
    /// cams*H*W instance ids; -1 for ground and sky.
    pub instances: Vec<i32>,
}

struct RenderBox {
    cx: f64,
    cy: f64,
    z0: f64,
    z1: f64,
    half_l: f64,
    half_w: f64,
    sin: f64,
    cos: f64,
    class_id: usize,
    instance: u32,
}

const SKY: [f64; 3] = [0.55, 0.70, 0.95];

fn checker(wx: f64, wy: f64) -> f64 {
    let p = ((wx / 2.0).floor() + (wy / 2.0).floor()) as i64;
    if p.rem_euclid(2) == 0 {
        1.0
    } else {
        0.82
    }
}

fn ground_color(wx: f64, wy: f64, complexity: MapComplexity) -> [f64; 3] {
    let k = checker(wx, wy);
    match map_surface(wx, wy, complexity) {
        SEG_DRIVABLE => [0.34 * k, 0.34 * k, 0.38 * k],
        SEG_DIVIDER => [0.85, 0.75, 0.10],
        _ => [0.20 * k, 0.45 * k, 0.15 * k],
    }
}

fn box_color(class_id: usize, instance: u32, face: (usize, bool)) -> [f64; 3] {
    let frac = (instance as f64 * 0.618_033_988_749_894_8).fract();
    let base = if class_id == CLASS_CAR {
        [0.20 + 0.60 * frac, 0.15, 0.85 - 0.60 * frac]
    } else {
        let s = 0.80 + 0.20 * frac;
        [0.90 * s, 0.55 * s, 0.12 * s]
    };
    let shade = match face {
        (2, true) => 1.0,
        (2, false) => 0.45,
        (0, true) => 0.85,
        (0, false) => 0.65,
        (1, true) => 0.75,
        (1, false) => 0.55,
        _ => 1.0,
    };
    [base[0] * shade, base[1] * shade, base[2] * shade]
}

/// Slab intersection in the box's local frame. Returns (t_entry, face) where
/// t parameterizes camera-frame depth; rays starting inside the box miss.
fn ray_box(o: [f64; 3], d: [f64; 3], b: &RenderBox) -> Option<(f64, (usize, bool))> {
    let dx = o[0] - b.cx;
    let dy = o[1] - b.cy;
    let ol = [b.cos * dx + b.sin * dy, -b.sin * dx + b.cos * dy, o[2]];
    let dl = [b.cos * d[0] + b.sin * d[1], -b.sin * d[0] + b.cos * d[1], d[2]];
    let lo = [-b.half_l, -b.half_w, b.z0];
    let hi = [b.half_l, b.half_w, b.z1];
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut face = (0usize, true);
    for a in 0..3 {
        if dl[a].abs() < 1e-12 {
            if ol[a] < lo[a] || ol[a] > hi[a] {
                return None;
            }
            continue;
        }
        let mut t1 = (lo[a] - ol[a]) / dl[a];
        let mut t2 = (hi[a] - ol[a]) / dl[a];
        // Entry through the max side when the ray travels in -a direction.
        let entry_positive = dl[a] < 0.0;
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
        }
        if t1 > t_near {
            t_near = t1;
            face = (a, entry_positive);
        }
        t_far = t_far.min(t2);
        if t_near > t_far {
            return None;
        }
    }
    if t_near > 1e-6 {
        Some((t_near, face))
    } else {
        None
    }
}

pub fn render_views(
    intrinsics: &[Intrinsics],
    cam_to_ego: &[Mat4],
    image_size: (usize, usize),
    boxes: &[BoxGt],
    ego_to_world: &Mat4,
    complexity: MapComplexity,
) -> ViewRender {
    let (h, w) = image_size;
    let cams = intrinsics.len();
    let rboxes: Vec<RenderBox> = boxes
        .iter()
        .map(|b| {
            let (s, c) = b.yaw.sin_cos();
            RenderBox {
                cx: b.center[0],
                cy: b.center[1],
                z0: b.center[2] - b.size[2] / 2.0,
                z1: b.center[2] + b.size[2] / 2.0,
                half_l: b.size[0] / 2.0,
                half_w: b.size[1] / 2.0,
                sin: s,
                cos: c,
                class_id: b.class_id,
                instance: b.instance,
            }
        })
        .collect();

    let mut images = Array::zeros(&[cams, 3, h, w]);
    let mut depths = Array::zeros(&[cams, h, w]);
    let mut instances = vec![-1i32; cams * h * w];

    for cam in 0..cams {
        let intr = intrinsics[cam];
        let m = cam_to_ego[cam];
        let o = [m[(0, 3)], m[(1, 3)], m[(2, 3)]];
        let rot = [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ];
        // (r, g, b, depth, instance) per pixel; each pixel is independent so
        // the parallel map stays deterministic.
        let pixels: Vec<(f64, f64, f64, f64, i32)> = (0..h * w)
            .into_par_iter()
            .map(|idx| {
                let i = idx / w;
                let j = idx % w;
                let dc = [(j as f64 + 0.5 - intr.cx) / intr.fx, (i as f64 + 0.5 - intr.cy) / intr.fy, 1.0];
                // Unnormalized: the ray parameter equals camera z depth.
                let d = [
                    rot[0][0] * dc[0] + rot[0][1] * dc[1] + rot[0][2] * dc[2],
                    rot[1][0] * dc[0] + rot[1][1] * dc[1] + rot[1][2] * dc[2],
                    rot[2][0] * dc[0] + rot[2][1] * dc[1] + rot[2][2] * dc[2],
                ];
                let mut best_t = f64::INFINITY;
                let mut color = SKY;
                let mut instance = -1i32;
                let mut depth = 0.0;
                if d[2] < -1e-9 {
                    let t = -o[2] / d[2];
                    if t > 1e-6 {
                        let p = Vec3::new(o[0] + t * d[0], o[1] + t * d[1], 0.0);
                        let wp = transform_point(ego_to_world, p);
                        best_t = t;
                        color = ground_color(wp.x, wp.y, complexity);
                        depth = t;
                    }
                }
                for b in &rboxes {
                    if let Some((t, face)) = ray_box(o, d, b) {
                        if t < best_t {
                            best_t = t;
                            color = box_color(b.class_id, b.instance, face);
                            instance = b.instance as i32;
                            depth = t;
                        }
                    }
                }
                let q = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                (q(color[0]), q(color[1]), q(color[2]), depth, instance)
            })
            .collect();

        let img = images.data_mut();
        for (idx, px) in pixels.iter().enumerate() {
            let base = cam * 3 * h * w;
            img[base + idx] = px.0;
            img[base + h * w + idx] = px.1;
            img[base + 2 * h * w + idx] = px.2;
        }
        let dep = depths.data_mut();
        for (idx, px) in pixels.iter().enumerate() {
            dep[cam * h * w + idx] = px.3;
        }
        for (idx, px) in pixels.iter().enumerate() {
            instances[cam * h * w + idx] = px.4;
        }
    }

    ViewRender { images, depths, instances }
}
