//! On-disk samples and generated datasets.
//!
//! A sample directory holds `manifest.json`, one `image_<k>.bt1` (float32,
//! `3×H×W`) per camera and `label.bt1` (uint8, `C×h×w`). Floats in manifests
//! are written with 17 significant digits so calibrations round-trip exactly.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use super::{generate_scene, render_view, Scene, SceneConfig};
use crate::error::{Error, Result};
use crate::geometry::{CameraCalib, MapGrid};
use crate::tensor::bt1::{self, Bt1};
use crate::tensor::Tensor;

pub const SAMPLE_FORMAT: &str = "cvt-sample";
pub const DATASET_FORMAT: &str = "cvt-dataset";
pub const FORMAT_VERSION: u32 = 1;

fn raw_float(v: f64) -> std::result::Result<Box<RawValue>, String> {
    if !v.is_finite() {
        return Err(format!("cannot encode non-finite float {v}"));
    }
    RawValue::from_string(format!("{v:.16e}")).map_err(|e| e.to_string())
}

fn ser_f64<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    raw_float(*v).map_err(serde::ser::Error::custom)?.serialize(s)
}

fn ser_f64s<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    v.iter()
        .map(|&x| raw_float(x))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(serde::ser::Error::custom)?
        .serialize(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    #[serde(serialize_with = "ser_f64")]
    pub extent_x: f64,
    #[serde(serialize_with = "ser_f64")]
    pub extent_y: f64,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub image: String,
    /// Intrinsics, row-major.
    #[serde(serialize_with = "ser_f64s")]
    pub k: Vec<f64>,
    /// World→camera rotation, row-major.
    #[serde(serialize_with = "ser_f64s")]
    pub r: Vec<f64>,
    #[serde(serialize_with = "ser_f64s")]
    pub t: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub image_h: usize,
    pub image_w: usize,
    pub grid: GridRecord,
    pub cameras: Vec<CameraRecord>,
    pub label: String,
}

/// Rendered camera images, their calibrations, and the map-view label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub images: Vec<Tensor<f32>>,
    pub calibs: Vec<CameraCalib>,
    /// `C×h×w` with entries 0 or 1.
    pub label: Tensor<f32>,
    pub grid: MapGrid,
    pub seed: u64,
}

impl Sample {
    pub fn from_scene(scene: &Scene) -> Result<Sample> {
        let images = (0..scene.num_cameras())
            .map(|k| render_view(scene, k))
            .collect::<Result<Vec<_>>>()?;
        let g = &scene.grid;
        let label = Tensor::new(
            [g.channels, g.h, g.w],
            scene.label()?.into_iter().map(f32::from).collect(),
        )?;
        Ok(Sample {
            images,
            calibs: scene.rig.clone(),
            label,
            grid: scene.grid.clone(),
            seed: scene.seed,
        })
    }

    pub fn num_cameras(&self) -> usize {
        self.images.len()
    }

    pub fn image_size(&self) -> (usize, usize) {
        let s = self.images[0].shape();
        (s[1], s[2])
    }
}

fn flat(m: &[[f64; 3]; 3]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn unflat(v: &[f64], field: &str) -> Result<[[f64; 3]; 3]> {
    if v.len() != 9 {
        return Err(Error::format(field, format!("expected 9 entries, found {}", v.len())));
    }
    Ok([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

pub fn write_sample(dir: &Path, sample: &Sample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (image_h, image_w) = sample.image_size();
    let mut cameras = Vec::with_capacity(sample.num_cameras());
    for (k, (img, calib)) in sample.images.iter().zip(&sample.calibs).enumerate() {
        let name = format!("image_{k}.bt1");
        bt1::write(&dir.join(&name), &bt1::encode_f32(img))?;
        cameras.push(CameraRecord {
            image: name,
            k: flat(calib.k()),
            r: flat(calib.r()),
            t: calib.t().to_vec(),
        });
    }
    let label: Vec<u8> = sample.label.data().iter().map(|&v| (v > 0.5) as u8).collect();
    bt1::write(&dir.join("label.bt1"), &bt1::encode_u8(sample.label.shape(), &label))?;
    let g = &sample.grid;
    let manifest = SampleManifest {
        format: SAMPLE_FORMAT.into(),
        version: FORMAT_VERSION,
        seed: sample.seed,
        image_h,
        image_w,
        grid: GridRecord {
            extent_x: g.extent_x,
            extent_y: g.extent_y,
            h: g.h,
            w: g.w,
            channels: g.channels,
        },
        cameras,
        label: "label.bt1".into(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_sample(dir: &Path) -> Result<Sample> {
    let manifest_path = dir.join("manifest.json");
    let m: SampleManifest = read_json(&manifest_path)?;
    let field = |f: &str| format!("{}:{f}", manifest_path.display());
    if m.format != SAMPLE_FORMAT || m.version != FORMAT_VERSION {
        return Err(Error::format(
            field("format"),
            format!("unsupported sample format {} v{}", m.format, m.version),
        ));
    }
    if m.cameras.is_empty() {
        return Err(Error::format(field("cameras"), "no cameras listed"));
    }
    let missing: Vec<usize> = m
        .cameras
        .iter()
        .enumerate()
        .filter(|(_, c)| !dir.join(&c.image).is_file())
        .map(|(k, _)| k)
        .collect();
    if !missing.is_empty() {
        return Err(Error::format(
            field("cameras"),
            format!(
                "{} cameras listed but image files missing for camera index {missing:?}",
                m.cameras.len()
            ),
        ));
    }
    let mut images = Vec::with_capacity(m.cameras.len());
    let mut calibs = Vec::with_capacity(m.cameras.len());
    for (k, cam) in m.cameras.iter().enumerate() {
        let img = bt1::read_f32(&dir.join(&cam.image))?;
        if img.shape() != [3, m.image_h, m.image_w] {
            return Err(Error::format(
                cam.image.clone(),
                format!("shape {:?} does not match 3×{}×{}", img.shape(), m.image_h, m.image_w),
            ));
        }
        images.push(img);
        let t: [f64; 3] = cam
            .t
            .as_slice()
            .try_into()
            .map_err(|_| Error::format(field(&format!("cameras[{k}].t")), "expected 3 entries"))?;
        calibs.push(CameraCalib::new(
            unflat(&cam.k, &field(&format!("cameras[{k}].k")))?,
            unflat(&cam.r, &field(&format!("cameras[{k}].r")))?,
            t,
        )?);
    }
    let g = &m.grid;
    let grid = crate::geometry::map_grid_centers(g.extent_x, g.extent_y, g.h, g.w)?.with_channels(g.channels);
    let label_path = dir.join(&m.label);
    let label = match bt1::read(&label_path)? {
        Bt1::U8 { shape, data } if shape == [g.channels, g.h, g.w] => {
            Tensor::new(shape, data.into_iter().map(f32::from).collect())?
        }
        other => {
            return Err(Error::format(
                m.label.clone(),
                format!(
                    "expected uint8 {}×{}×{} label, found {:?}",
                    g.channels,
                    g.h,
                    g.w,
                    other.shape()
                ),
            ))
        }
    };
    Ok(Sample {
        images,
        calibs,
        label,
        grid,
        seed: m.seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub dir: String,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub base_seed: u64,
    pub scene: SceneConfig,
    pub samples: Vec<DatasetEntry>,
}

/// Training and validation samples generated from disjoint seed sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Seed of scene `index` in the dataset drawn from `base`.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    crate::derive_seed(base, index)
}

impl Dataset {
    /// `n_train + n_val` scenes; each scene's split is fixed by its index.
    pub fn generate(scene: &SceneConfig, base_seed: u64, n_train: usize, n_val: usize) -> Result<Dataset> {
        let make = |offset: u64, n: usize| -> Result<Vec<Sample>> {
            (0..n as u64)
                .into_par_iter()
                .map(|i| Sample::from_scene(&generate_scene(scene, scene_seed(base_seed, offset + i))?))
                .collect()
        };
        Ok(Dataset {
            train: make(0, n_train)?,
            val: make(n_train as u64, n_val)?,
        })
    }

    /// Splits `total` scenes 80/20 between training and validation.
    pub fn generate_split(scene: &SceneConfig, base_seed: u64, total: usize) -> Result<Dataset> {
        let n_val = total / 5;
        Dataset::generate(scene, base_seed, total - n_val, n_val)
    }

    pub fn write(&self, dir: &Path, scene: &SceneConfig, base_seed: u64) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut samples = Vec::new();
        for (split, set) in [(Split::Train, &self.train), (Split::Val, &self.val)] {
            for s in set {
                let name = format!("sample_{:05}", samples.len());
                write_sample(&dir.join(&name), s)?;
                samples.push(DatasetEntry {
                    dir: name,
                    seed: s.seed,
                    split,
                });
            }
        }
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: FORMAT_VERSION,
            base_seed,
            scene: scene.clone(),
            samples,
        };
        write_json(&dir.join("dataset.json"), &manifest)
    }

    pub fn read(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
        let path: PathBuf = dir.join("dataset.json");
        let manifest: DatasetManifest = read_json(&path)?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::format(path.display().to_string(), "not a dataset index"));
        }
        let mut ds = Dataset {
            train: Vec::new(),
            val: Vec::new(),
        };
        for e in &manifest.samples {
            let s = read_sample(&dir.join(&e.dir))?;
            match e.split {
                Split::Train => ds.train.push(s),
                Split::Val => ds.val.push(s),
            }
        }
        Ok((ds, manifest))
    }
}
