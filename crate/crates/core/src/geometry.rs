//! Pinhole camera geometry, the ego-centered map grid, and BEV rasterization.
//!
//! World frame: +x forward, +y left, +z up, ego at the origin. Camera frame:
//! +x right, +y down, +z along the optical axis. Pixel `(col, row)` covers
//! `[col, col+1) × [row, row+1)`, so its center is at `(col + 0.5, row + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Depth and direction-norm degeneracy threshold (meters).
pub const GEOM_EPS: f64 = 1e-6;

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[j][i] = v;
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

/// Rotation by `angle` about world +z.
pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation by `angle` about an arbitrary unit `axis` (Rodrigues).
pub fn rot_axis(axis: Vec3, angle: f64) -> Mat3 {
    let [x, y, z] = normalize(axis);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Intrinsics `K`, world→camera rotation `R`, and camera origin `t` in the
/// world frame; a world point maps to pixels by `K·R·(x − t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraCalib {
    k: Mat3,
    r: Mat3,
    t: Vec3,
}

impl CameraCalib {
    pub fn new(k: Mat3, r: Mat3, t: Vec3) -> Result<Self> {
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 {
            return Err(Error::Calibration("K must be upper triangular".into()));
        }
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(Error::Calibration("K focal entries must be positive".into()));
        }
        if (k[2][2] - 1.0).abs() > 1e-12 {
            return Err(Error::Calibration("K[2][2] must be 1".into()));
        }
        let rtr = mat_mul(&transpose(&r), &r);
        let off = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (rtr[i][j] - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max);
        if off >= 1e-6 || det(&r) <= 0.0 {
            return Err(Error::Calibration(format!(
                "R must be a proper rotation (|RᵀR − I|∞ = {off:.2e}, det = {:.6})",
                det(&r)
            )));
        }
        if k.iter()
            .chain(r.iter())
            .flatten()
            .chain(t.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Calibration("non-finite entry".into()));
        }
        Ok(CameraCalib { k, r, t })
    }

    /// Camera at `position` facing heading `yaw` (radians from +x toward +y),
    /// pitched down by `pitch`, with square pixels of focal length `focal`
    /// and principal point `(cx, cy)`.
    pub fn looking(yaw: f64, pitch: f64, position: Vec3, focal: f64, cx: f64, cy: f64) -> Result<Self> {
        let (sy, cyaw) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = [cyaw * cp, sy * cp, -sp];
        let right = [sy, -cyaw, 0.0];
        let down = cross(forward, right);
        let k = [[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]];
        CameraCalib::new(k, [right, down, forward], position)
    }

    pub fn k(&self) -> &Mat3 {
        &self.k
    }

    pub fn r(&self) -> &Mat3 {
        &self.r
    }

    pub fn t(&self) -> Vec3 {
        self.t
    }

    /// `K⁻¹` of the upper-triangular intrinsics.
    pub fn k_inv(&self) -> Mat3 {
        let k = &self.k;
        let (a, b, c) = (k[0][0], k[0][1], k[0][2]);
        let (d, e) = (k[1][1], k[1][2]);
        [
            [1.0 / a, -b / (a * d), (b * e - c * d) / (a * d)],
            [0.0, 1.0 / d, -e / d],
            [0.0, 0.0, 1.0],
        ]
    }

    /// Applies a world isometry `x ↦ Q·x + s` to the camera: the returned
    /// calibration sees `Q·x + s` exactly where `self` saw `x`.
    pub fn transformed(&self, q: &Mat3, s: Vec3) -> Result<Self> {
        CameraCalib::new(self.k, mat_mul(&self.r, &transpose(q)), add(mat_vec(q, self.t), s))
    }
}

/// Homogeneous pixel coordinate `(u, v, w)`; constructed with `w = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        PixelCoord { u, v, w: 1.0 }
    }

    /// Same projective point, homogeneous vector scaled by `lambda`.
    pub fn scaled(self, lambda: f64) -> Self {
        PixelCoord {
            u: self.u * lambda,
            v: self.v * lambda,
            w: self.w * lambda,
        }
    }

    pub fn homogeneous(self) -> Vec3 {
        [self.u, self.v, self.w]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Pixel(PixelCoord),
    /// Camera-frame depth at or below [`GEOM_EPS`].
    Behind,
}

impl Projection {
    pub fn pixel(self) -> Option<PixelCoord> {
        match self {
            Projection::Pixel(p) => Some(p),
            Projection::Behind => None,
        }
    }
}

/// Perspective transform `x_I ≃ K·R·(x_W − t)`, normalized to `w = 1`.
pub fn project_point(calib: &CameraCalib, x_world: Vec3) -> Projection {
    let cam = mat_vec(&calib.r, sub(x_world, calib.t));
    if cam[2] <= GEOM_EPS {
        return Projection::Behind;
    }
    let h = mat_vec(&calib.k, cam);
    Projection::Pixel(PixelCoord::new(h[0] / h[2], h[1] / h[2]))
}

/// World-frame direction `R⁻¹·K⁻¹·(u, v, w)` of the ray through `pix`;
/// not normalized.
pub fn unproject_ray(calib: &CameraCalib, pix: PixelCoord) -> Vec3 {
    let cam = mat_vec(&calib.k_inv(), pix.homogeneous());
    mat_vec(&transpose(&calib.r), cam)
}

/// Cosine between the ray through `pix` and the direction from the camera
/// origin to `x_world`.
pub fn geometric_similarity(calib: &CameraCalib, pix: PixelCoord, x_world: Vec3) -> Result<f64> {
    let to_point = sub(x_world, calib.t);
    let dist = norm(to_point);
    if dist <= GEOM_EPS {
        return Err(Error::Degenerate("world point coincides with the camera origin".into()));
    }
    let ray = unproject_ray(calib, pix);
    let ray_norm = norm(ray);
    if ray_norm <= GEOM_EPS {
        return Err(Error::Degenerate("pixel ray has zero length".into()));
    }
    Ok((dot(ray, to_point) / (ray_norm * dist)).clamp(-1.0, 1.0))
}

/// Ego-centered map-view grid. Row `i` runs along world x, column `j` along
/// world y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapGrid {
    pub extent_x: f64,
    pub extent_y: f64,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

impl MapGrid {
    pub fn cell_size(&self) -> (f64, f64) {
        (self.extent_x / self.h as f64, self.extent_y / self.w as f64)
    }

    /// World (x, y) of the center of cell `(i, j)`.
    pub fn center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            ((i as f64 + 0.5) / self.h as f64 - 0.5) * self.extent_x,
            ((j as f64 + 0.5) / self.w as f64 - 0.5) * self.extent_y,
        ]
    }

    /// All cell centers, row-major `h×w`.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.h)
            .flat_map(|i| (0..self.w).map(move |j| (i, j)))
            .map(|(i, j)| self.center(i, j))
            .collect()
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Half-diagonal of the covered area.
    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.extent_x.hypot(self.extent_y)
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0].abs() <= 0.5 * self.extent_x && p[1].abs() <= 0.5 * self.extent_y
    }
}

/// Grid of `h×w` cells covering `extent_x × extent_y` meters around the ego,
/// with two channels (vehicle, driveable).
pub fn map_grid_centers(extent_x: f64, extent_y: f64, h: usize, w: usize) -> Result<MapGrid> {
    if !(extent_x > 0.0 && extent_y > 0.0) || h == 0 || w == 0 {
        return Err(Error::invalid(
            "map_grid_centers",
            format!("extents and counts must be positive, got {extent_x}×{extent_y} m, {h}×{w} cells"),
        ));
    }
    Ok(MapGrid {
        extent_x,
        extent_y,
        h,
        w,
        channels: 2,
    })
}

/// Ground footprint of a cuboid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: [f64; 2],
    pub half_extent: [f64; 2],
    pub yaw: f64,
    pub height: f64,
}

impl OrientedBox {
    pub fn new(center: [f64; 2], half_extent: [f64; 2], yaw: f64, height: f64) -> Result<Self> {
        if !(half_extent[0] > 0.0 && half_extent[1] > 0.0) {
            return Err(Error::invalid("oriented_box", "half extents must be positive"));
        }
        Ok(OrientedBox {
            center,
            half_extent,
            yaw,
            height,
        })
    }

    /// `p` expressed in the box's own axes.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Inclusive footprint containment.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let [lx, ly] = self.to_local(p);
        lx.abs() <= self.half_extent[0] && ly.abs() <= self.half_extent[1]
    }

    /// Footprint corners, counter-clockwise.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let [hx, hy] = self.half_extent;
        [[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]]
            .map(|[lx, ly]| [self.center[0] + c * lx - s * ly, self.center[1] + s * lx + c * ly])
    }

    /// The eight cuboid corners (z from 0 to `height`).
    pub fn corners_3d(&self) -> [Vec3; 8] {
        let f = self.corners();
        let mut out = [[0.0; 3]; 8];
        for (i, c) in f.iter().enumerate() {
            out[i] = [c[0], c[1], 0.0];
            out[i + 4] = [c[0], c[1], self.height];
        }
        out
    }
}

fn check_channel(grid: &MapGrid, channel: usize) -> Result<()> {
    if channel >= grid.channels {
        return Err(Error::invalid(
            "rasterize",
            format!("channel {channel} out of range for {} channels", grid.channels),
        ));
    }
    Ok(())
}

/// Binary `h×w` mask: a cell is set iff its center lies inside any footprint.
pub fn rasterize_boxes(grid: &MapGrid, boxes: &[OrientedBox], channel: usize) -> Result<Vec<u8>> {
    check_channel(grid, channel)?;
    Ok(grid
        .centers()
        .into_iter()
        .map(|p| boxes.iter().any(|b| b.contains(p)) as u8)
        .collect())
}

/// Convex polygon given by its vertices in counter-clockwise order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexPolygon {
    pub vertices: Vec<[f64; 2]>,
}

impl ConvexPolygon {
    /// Inclusive containment.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let n = self.vertices.len();
        n >= 3
            && (0..n).all(|i| {
                let a = self.vertices[i];
                let b = self.vertices[(i + 1) % n];
                (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
            })
    }
}

/// Binary `h×w` mask of cells whose centers lie in any of `polygons`.
pub fn rasterize_polygons(grid: &MapGrid, polygons: &[ConvexPolygon], channel: usize) -> Result<Vec<u8>> {
    check_channel(grid, channel)?;
    Ok(grid
        .centers()
        .into_iter()
        .map(|p| polygons.iter().any(|poly| poly.contains(p)) as u8)
        .collect())
}

/// Binary `h×w` mask of cells whose centers are at least `d_min` meters from
/// the ego.
pub fn distance_mask(grid: &MapGrid, d_min: f64) -> Vec<u8> {
    grid.centers()
        .into_iter()
        .map(|[x, y]| (x.hypot(y) >= d_min) as u8)
        .collect()
}
