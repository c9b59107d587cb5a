// Flat-shaded ray casting of a scene into one camera.

use super::Scene;
use crate::error::{Error, Result};
use crate::geometry::{project_point, unproject_ray, OrientedBox, PixelCoord, Vec3};
use crate::tensor::Tensor;

pub const SKY: f32 = 1.0;
pub const GROUND: f32 = 0.75;
pub const ROAD: f32 = 0.35;
/// Distance at which vehicle colors fall to half brightness.
const FALLOFF: f64 = 30.0;

/// A rendered `3×H×W` image with the index of the box seen at each pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub image: Tensor<f32>,
    /// Row-major `H×W`; `-1` where no vehicle is hit.
    pub ids: Vec<i32>,
}

/// Entry distance of the ray `o + s·d` (`s > 0`) into the cuboid, if any.
fn hit_box(b: &OrientedBox, o: Vec3, d: Vec3) -> Option<f64> {
    let [lox, loy] = b.to_local([o[0], o[1]]);
    let (s, c) = b.yaw.sin_cos();
    let ldx = c * d[0] + s * d[1];
    let ldy = -s * d[0] + c * d[1];
    let slabs = [
        (lox, ldx, -b.half_extent[0], b.half_extent[0]),
        (loy, ldy, -b.half_extent[1], b.half_extent[1]),
        (o[2], d[2], 0.0, b.height),
    ];
    let mut near = 0.0f64;
    let mut far = f64::INFINITY;
    for (p, v, lo, hi) in slabs {
        if v.abs() < 1e-12 {
            if p < lo || p > hi {
                return None;
            }
            continue;
        }
        let (a, bb) = ((lo - p) / v, (hi - p) / v);
        near = near.max(a.min(bb));
        far = far.min(a.max(bb));
        if near > far {
            return None;
        }
    }
    (near > 0.0).then_some(near)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Nearest box along the ray through pixel `(row, col)` of camera `cam`.
fn cast(scene: &Scene, cam: usize, row: usize, col: usize) -> (Vec3, Vec3, Option<(usize, f64)>) {
    let calib = &scene.rig[cam];
    let o = calib.t();
    let d = unproject_ray(calib, PixelCoord::new(col as f64 + 0.5, row as f64 + 0.5));
    let hit = scene
        .boxes
        .iter()
        .enumerate()
        .filter_map(|(i, b)| hit_box(b, o, d).map(|s| (i, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    (o, d, hit)
}

pub fn render_view_with_ids(scene: &Scene, cam: usize) -> Result<RenderedView> {
    if cam >= scene.rig.len() {
        return Err(Error::invalid(
            "render_view",
            format!("camera {cam} out of range for a {}-camera rig", scene.rig.len()),
        ));
    }
    let (h, w) = (scene.image_h, scene.image_w);
    let mut image = Tensor::zeros([3, h, w]);
    let mut ids = vec![-1; h * w];
    let px = image.data_mut();
    for row in 0..h {
        for col in 0..w {
            let (o, d, hit) = cast(scene, cam, row, col);
            let ground = (d[2] < 0.0).then(|| -o[2] / d[2]);
            let rgb = match (hit, ground) {
                (Some((id, s)), g) if g.is_none_or(|g| s <= g) => {
                    ids[row * w + col] = id as i32;
                    let dist = s * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    let atten = 1.0 / (1.0 + dist / FALLOFF);
                    hsv_to_rgb(scene.hues[id], 0.85, 0.95).map(|c| (c * atten) as f32)
                }
                (_, Some(g)) => {
                    let p = [o[0] + g * d[0], o[1] + g * d[1]];
                    let v = if scene.road.iter().any(|r| r.contains(p)) {
                        ROAD
                    } else {
                        GROUND
                    };
                    [v; 3]
                }
                _ => [SKY; 3],
            };
            for (c, v) in rgb.into_iter().enumerate() {
                px[(c * h + row) * w + col] = v;
            }
        }
    }
    Ok(RenderedView { image, ids })
}

/// `3×H×W` image in `[0, 1]` of the scene seen from camera `cam`.
pub fn render_view(scene: &Scene, cam: usize) -> Result<Tensor<f32>> {
    Ok(render_view_with_ids(scene, cam)?.image)
}

/// Whether box `b` is the nearest surface for at least one pixel of some
/// camera. Only pixels inside the box's projected bounding rectangle are cast.
pub(super) fn box_visible(scene: &Scene, b: usize) -> bool {
    let (h, w) = (scene.image_h as f64, scene.image_w as f64);
    (0..scene.rig.len()).any(|cam| {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        let mut behind = 0;
        for p in scene.boxes[b].corners_3d() {
            match project_point(&scene.rig[cam], p).pixel() {
                Some(px) => {
                    lo = [lo[0].min(px.u), lo[1].min(px.v)];
                    hi = [hi[0].max(px.u), hi[1].max(px.v)];
                }
                None => behind += 1,
            }
        }
        if behind == 8 {
            return false;
        }
        if behind > 0 {
            lo = [0.0, 0.0];
            hi = [w, h];
        }
        let c0 = lo[0].floor().max(0.0) as usize;
        let c1 = (hi[0].ceil().min(w) as usize).min(scene.image_w);
        let r0 = lo[1].floor().max(0.0) as usize;
        let r1 = (hi[1].ceil().min(h) as usize).min(scene.image_h);
        (r0..r1).any(|row| {
            (c0..c1).any(|col| {
                let (o, d, hit) = cast(scene, cam, row, col);
                match hit {
                    Some((id, s)) if id == b => d[2] >= 0.0 || s <= -o[2] / d[2],
                    _ => false,
                }
            })
        })
    })
}
