//! Synthetic multi-camera driving scenes: cuboid vehicles on a flat ground
//! plane with a road corridor through the ego position, seen by a calibrated
//! surround rig.

mod dataset;
mod render;

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{map_grid_centers, CameraCalib, ConvexPolygon, MapGrid, OrientedBox};

pub use dataset::{
    read_sample, scene_seed, write_sample, CameraRecord, Dataset, DatasetEntry, DatasetManifest, GridRecord, Sample,
    SampleManifest, Split,
};
pub use render::{render_view, render_view_with_ids, RenderedView, GROUND, ROAD, SKY};

/// Placement attempts before a scene is abandoned.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// One camera of a rig, in ego-relative terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    /// Heading in radians, counter-clockwise from +x.
    pub yaw: f64,
    /// Downward tilt in radians.
    pub pitch: f64,
    pub position: [f64; 3],
    pub hfov_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub cameras: Vec<CameraSpec>,
    pub image_h: usize,
    pub image_w: usize,
}

impl RigSpec {
    /// Four cameras at 90° steps, 100° horizontal field of view, 64×128 images.
    pub fn desk() -> Self {
        let cameras = (0..4)
            .map(|k| {
                let yaw = k as f64 * FRAC_PI_2;
                CameraSpec {
                    yaw,
                    pitch: 8f64.to_radians(),
                    position: [yaw.cos(), yaw.sin(), 2.0],
                    hfov_deg: 100.0,
                }
            })
            .collect();
        RigSpec {
            cameras,
            image_h: 64,
            image_w: 128,
        }
    }

    /// Front and rear cameras at 8×16, matching the micro model.
    pub fn micro() -> Self {
        let cameras = [0.0, PI]
            .into_iter()
            .map(|yaw: f64| CameraSpec {
                yaw,
                pitch: 10f64.to_radians(),
                position: [yaw.cos(), yaw.sin(), 2.0],
                hfov_deg: 120.0,
            })
            .collect();
        RigSpec {
            cameras,
            image_h: 8,
            image_w: 16,
        }
    }

    /// Six-camera surround layout at 224×480.
    pub fn full_scale() -> Self {
        let yaws = [0.0f64, 55.0, 110.0, 180.0, -110.0, -55.0];
        let cameras = yaws
            .iter()
            .map(|&deg| {
                let yaw = deg.to_radians();
                CameraSpec {
                    yaw,
                    pitch: 0.0,
                    position: [1.5 * yaw.cos(), 0.8 * yaw.sin(), 1.6],
                    hfov_deg: 70.0,
                }
            })
            .collect();
        RigSpec {
            cameras,
            image_h: 224,
            image_w: 480,
        }
    }

    pub fn calibrations(&self) -> Result<Vec<CameraCalib>> {
        self.cameras
            .iter()
            .map(|c| {
                let focal = 0.5 * self.image_w as f64 / (0.5 * c.hfov_deg.to_radians()).tan();
                CameraCalib::looking(
                    c.yaw,
                    c.pitch,
                    c.position,
                    focal,
                    0.5 * self.image_w as f64,
                    0.5 * self.image_h as f64,
                )
            })
            .collect()
    }
}

/// Everything that shapes a generated scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid: MapGrid,
    pub rig: RigSpec,
    /// Inclusive range of vehicle counts.
    pub box_count: (usize, usize),
    pub box_length: (f64, f64),
    pub box_width: (f64, f64),
    pub box_height: f64,
    /// Minimum footprint distance from the ego origin.
    pub ego_clearance: f64,
    /// Minimum separation between vehicle footprints.
    pub min_gap: f64,
    pub road_width: (f64, f64),
    pub cross_street_prob: f64,
    /// Probability that a vehicle is placed on, and aligned with, a road.
    pub on_road_prob: f64,
    /// Reject placements that would leave some vehicle unseen by every camera.
    pub require_visibility: bool,
}

impl SceneConfig {
    /// 32 m × 32 m at 0.5 m cells, four-camera desk rig.
    pub fn desk() -> Self {
        SceneConfig {
            grid: map_grid_centers(32.0, 32.0, 64, 64).expect("valid preset"),
            rig: RigSpec::desk(),
            box_count: (2, 7),
            box_length: (3.0, 5.0),
            box_width: (1.6, 2.2),
            box_height: 1.5,
            ego_clearance: 2.5,
            min_gap: 0.4,
            road_width: (6.0, 10.0),
            cross_street_prob: 0.5,
            on_road_prob: 0.6,
            require_visibility: true,
        }
    }

    /// Two-camera 8×16 rig over a 32×32 grid, for the micro model.
    pub fn micro() -> Self {
        SceneConfig {
            grid: map_grid_centers(32.0, 32.0, 32, 32).expect("valid preset"),
            rig: RigSpec::micro(),
            require_visibility: false,
            ..SceneConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.box_count;
        if lo > hi {
            return Err(Error::Config(format!("box_count range {lo}..={hi} is empty")));
        }
        if !(self.box_length.0 > 0.0 && self.box_length.0 <= self.box_length.1)
            || !(self.box_width.0 > 0.0 && self.box_width.0 <= self.box_width.1)
            || self.box_height <= 0.0
        {
            return Err(Error::Config("vehicle size ranges must be positive and ordered".into()));
        }
        if !(self.road_width.0 > 0.0 && self.road_width.0 <= self.road_width.1) {
            return Err(Error::Config("road width range must be positive and ordered".into()));
        }
        if self.rig.cameras.is_empty() {
            return Err(Error::Config("rig has no cameras".into()));
        }
        Ok(())
    }
}

/// A generated world: vehicles, driveable area, and the rig observing it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub boxes: Vec<OrientedBox>,
    /// Render hue in [0, 1) of each box.
    pub hues: Vec<f64>,
    pub road: Vec<ConvexPolygon>,
    pub rig: Vec<CameraCalib>,
    pub image_h: usize,
    pub image_w: usize,
    pub grid: MapGrid,
    pub seed: u64,
}

struct Corridor {
    origin: [f64; 2],
    heading: f64,
    width: f64,
}

impl Corridor {
    fn polygon(&self, half_length: f64) -> ConvexPolygon {
        let (s, c) = self.heading.sin_cos();
        let hw = 0.5 * self.width;
        let vertices = [
            [half_length, -hw],
            [half_length, hw],
            [-half_length, hw],
            [-half_length, -hw],
        ]
        .map(|[lx, ly]| [self.origin[0] + c * lx - s * ly, self.origin[1] + s * lx + c * ly])
        .to_vec();
        ConvexPolygon { vertices }
    }
}

/// Distance from the origin to a box footprint.
fn origin_distance(b: &OrientedBox) -> f64 {
    let [lx, ly] = b.to_local([0.0, 0.0]);
    let dx = (lx.abs() - b.half_extent[0]).max(0.0);
    let dy = (ly.abs() - b.half_extent[1]).max(0.0);
    dx.hypot(dy)
}

/// Separating-axis test on footprints inflated by `gap / 2` each.
fn footprints_overlap(a: &OrientedBox, b: &OrientedBox, gap: f64) -> bool {
    let inflate = |x: &OrientedBox| OrientedBox {
        half_extent: [x.half_extent[0] + 0.5 * gap, x.half_extent[1] + 0.5 * gap],
        ..x.clone()
    };
    let (a, b) = (inflate(a), inflate(b));
    let (ca, cb) = (a.corners(), b.corners());
    let axes = [a.yaw, a.yaw + FRAC_PI_2, b.yaw, b.yaw + FRAC_PI_2].map(|t| [t.cos(), t.sin()]);
    axes.iter().all(|ax| {
        let proj = |cs: &[[f64; 2]; 4]| {
            cs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                let d = p[0] * ax[0] + p[1] * ax[1];
                (lo.min(d), hi.max(d))
            })
        };
        let (alo, ahi) = proj(&ca);
        let (blo, bhi) = proj(&cb);
        ahi >= blo && bhi >= alo
    })
}

/// Builds the scene for `seed`. The result is a pure function of
/// `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = config.grid.clone();
    let half_len = grid.half_diagonal() + 5.0;

    let mut corridors = vec![Corridor {
        origin: [0.0, 0.0],
        heading: rng.random_range(0.0..PI),
        width: rng.random_range(config.road_width.0..=config.road_width.1),
    }];
    if rng.random_bool(config.cross_street_prob) {
        let main = &corridors[0];
        let along = rng.random_range(-0.3..0.3) * grid.extent_x.min(grid.extent_y);
        let origin = [along * main.heading.cos(), along * main.heading.sin()];
        corridors.push(Corridor {
            origin,
            heading: main.heading + FRAC_PI_2 + rng.random_range(-0.3..0.3),
            width: rng.random_range(config.road_width.0..=config.road_width.1),
        });
    }
    let road: Vec<ConvexPolygon> = corridors.iter().map(|c| c.polygon(half_len)).collect();

    let rig = config.rig.calibrations()?;
    let mut scene = Scene {
        boxes: Vec::new(),
        hues: Vec::new(),
        road,
        rig,
        image_h: config.rig.image_h,
        image_w: config.rig.image_w,
        grid: grid.clone(),
        seed,
    };

    let target = rng.random_range(config.box_count.0..=config.box_count.1);
    let mut attempts = 0;
    while scene.boxes.len() < target {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Generation {
                seed,
                msg: format!(
                    "placed {} of {target} vehicles in {MAX_PLACEMENT_ATTEMPTS} attempts",
                    scene.boxes.len()
                ),
            });
        }
        let half_extent = [
            0.5 * rng.random_range(config.box_length.0..=config.box_length.1),
            0.5 * rng.random_range(config.box_width.0..=config.box_width.1),
        ];
        let (center, yaw) = if rng.random_bool(config.on_road_prob) {
            let c = &corridors[rng.random_range(0..corridors.len())];
            let along = rng.random_range(-half_len..half_len);
            let lateral = rng.random_range(-0.5..0.5) * (c.width - 2.0 * half_extent[1]).max(0.0);
            let (s, co) = c.heading.sin_cos();
            let center = [
                c.origin[0] + co * along - s * lateral,
                c.origin[1] + s * along + co * lateral,
            ];
            let flip = if rng.random_bool(0.5) { PI } else { 0.0 };
            (center, c.heading + flip + rng.random_range(-0.08..0.08))
        } else {
            let center = [
                rng.random_range(-0.5..0.5) * grid.extent_x,
                rng.random_range(-0.5..0.5) * grid.extent_y,
            ];
            (center, rng.random_range(0.0..PI))
        };
        let hue = rng.random_range(0.0..1.0);
        let candidate = OrientedBox::new(center, half_extent, yaw, config.box_height)?;
        if !candidate.corners().iter().all(|&p| grid.contains(p))
            || origin_distance(&candidate) < config.ego_clearance
            || scene
                .boxes
                .iter()
                .any(|b| footprints_overlap(b, &candidate, config.min_gap))
        {
            continue;
        }
        scene.boxes.push(candidate);
        scene.hues.push(hue);
        if config.require_visibility && !(0..scene.boxes.len()).all(|b| render::box_visible(&scene, b)) {
            scene.boxes.pop();
            scene.hues.pop();
        }
    }
    Ok(scene)
}

impl Scene {
    pub fn num_cameras(&self) -> usize {
        self.rig.len()
    }

    /// `C×h×w` binary label: channel 0 vehicles, channel 1 driveable area.
    pub fn label(&self) -> Result<Vec<u8>> {
        let mut out = crate::geometry::rasterize_boxes(&self.grid, &self.boxes, 0)?;
        out.extend(crate::geometry::rasterize_polygons(&self.grid, &self.road, 1)?);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SceneConfig::desk();
        assert_eq!(generate_scene(&cfg, 11).unwrap(), generate_scene(&cfg, 11).unwrap());
        assert_ne!(generate_scene(&cfg, 11).unwrap(), generate_scene(&cfg, 12).unwrap());
    }

    #[test]
    fn empty_vehicle_range() {
        let cfg = SceneConfig {
            box_count: (0, 0),
            ..SceneConfig::desk()
        };
        let s = generate_scene(&cfg, 3).unwrap();
        assert!(s.boxes.is_empty());
        let label = s.label().unwrap();
        assert!(label[..64 * 64].iter().all(|&v| v == 0));
    }

    #[test]
    fn impossible_placement_names_the_seed() {
        let cfg = SceneConfig {
            box_count: (40, 40),
            box_length: (7.0, 7.0),
            box_width: (5.0, 5.0),
            ..SceneConfig::desk()
        };
        match generate_scene(&cfg, 99) {
            Err(Error::Generation { seed, .. }) => assert_eq!(seed, 99),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn rig_geometry() {
        let rig = RigSpec::desk();
        for c in rig.calibrations().unwrap() {
            let t = c.t();
            assert!((t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt() < 3.0);
        }
        // 4 × 100° covers the full circle
        let total: f64 = rig.cameras.iter().map(|c| c.hfov_deg).sum();
        assert!(total >= 360.0);
    }

    #[test]
    fn road_passes_through_ego() {
        for seed in 0..20 {
            let s = generate_scene(&SceneConfig::desk(), seed).unwrap();
            assert!(s.road[0].contains([0.0, 0.0]));
        }
    }
}
