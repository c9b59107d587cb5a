//! Evaluation: dataset-level IoU, distance-binned IoU, camera dropout,
//! attention-map export and the ablation runner.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::PositionalMode;
use crate::error::{Error, Result};
use crate::geometry::distance_mask;
use crate::model::{forward, init_params, predict, CameraView, ModelConfig, ParamStore};
use crate::scene::{Dataset, Sample};
use crate::tensor::{Graph, Tensor};
use crate::train::{train_run, TrainConfig};

/// Sigmoid probability above which a cell counts as predicted.
pub const THRESHOLD: f64 = 0.5;
pub const DISTANCE_THRESHOLDS: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 20.0];

/// IoU of one channel. An empty union yields 1 with `empty` set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelIou {
    pub iou: f64,
    pub empty: bool,
}

/// Intersection and union counts accumulated over many samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    pub fn new(channels: usize) -> Self {
        IouCounts {
            intersection: vec![0; channels],
            union: vec![0; channels],
        }
    }

    /// Adds one `C×h×w` prediction. Cells where `mask` is 0 are ignored.
    pub fn add(&mut self, logits: &Tensor<f32>, target: &Tensor<f32>, mask: Option<&[u8]>) -> Result<()> {
        if logits.shape() != target.shape() || logits.ndim() != 3 {
            return Err(Error::shape("iou", logits.shape(), target.shape()));
        }
        let c = logits.shape()[0];
        if c != self.intersection.len() {
            return Err(Error::invalid(
                "iou",
                format!("{c} channels, accumulator has {}", self.intersection.len()),
            ));
        }
        let cells = logits.shape()[1] * logits.shape()[2];
        if let Some(m) = mask {
            if m.len() != cells {
                return Err(Error::shape("iou", &[cells], &[m.len()]));
            }
        }
        // σ(z) ≥ t exactly when z ≥ logit(t)
        let cut = (THRESHOLD / (1.0 - THRESHOLD)).ln() as f32;
        for ch in 0..c {
            let z = &logits.data()[ch * cells..(ch + 1) * cells];
            let y = &target.data()[ch * cells..(ch + 1) * cells];
            for i in 0..cells {
                if mask.is_some_and(|m| m[i] == 0) {
                    continue;
                }
                let p = z[i] >= cut;
                let t = y[i] > 0.5;
                self.intersection[ch] += (p && t) as u64;
                self.union[ch] += (p || t) as u64;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Vec<ChannelIou> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| {
                if u == 0 {
                    ChannelIou { iou: 1.0, empty: true }
                } else {
                    ChannelIou {
                        iou: i as f64 / u as f64,
                        empty: false,
                    }
                }
            })
            .collect()
    }
}

/// Per-channel IoU of a single prediction.
pub fn iou(logits: &Tensor<f32>, target: &Tensor<f32>, mask: Option<&[u8]>) -> Result<Vec<ChannelIou>> {
    let mut c = IouCounts::new(target.shape().first().copied().unwrap_or(0));
    c.add(logits, target, mask)?;
    Ok(c.finish())
}

/// Predictions for every sample, in order.
pub fn predict_all(params: &ParamStore, cfg: &ModelConfig, samples: &[Sample]) -> Result<Vec<Tensor<f32>>> {
    samples
        .par_iter()
        .map(|s| predict(params, cfg, &CameraView::all(&s.images, &s.calibs)))
        .collect()
}

fn counts_for(preds: &[Tensor<f32>], samples: &[Sample], mask: Option<&[u8]>) -> Result<IouCounts> {
    let channels = samples.first().map_or(0, |s| s.label.shape()[0]);
    let mut c = IouCounts::new(channels);
    for (p, s) in preds.iter().zip(samples) {
        c.add(p, &s.label, mask)?;
    }
    Ok(c)
}

/// Dataset-level IoU per channel from global counts.
pub fn evaluate(params: &ParamStore, cfg: &ModelConfig, samples: &[Sample]) -> Result<Vec<ChannelIou>> {
    let preds = predict_all(params, cfg, samples)?;
    Ok(counts_for(&preds, samples, None)?.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceIou {
    pub min_distance: f64,
    pub iou: Vec<ChannelIou>,
}

/// IoU restricted to cells at least `d` meters from the ego, for each `d`.
pub fn distance_binned_iou(
    params: &ParamStore,
    cfg: &ModelConfig,
    samples: &[Sample],
    thresholds: &[f64],
) -> Result<Vec<DistanceIou>> {
    let preds = predict_all(params, cfg, samples)?;
    distance_binned_from(&preds, samples, thresholds)
}

pub fn distance_binned_from(preds: &[Tensor<f32>], samples: &[Sample], thresholds: &[f64]) -> Result<Vec<DistanceIou>> {
    let grid = match samples.first() {
        Some(s) => &s.grid,
        None => return Ok(Vec::new()),
    };
    thresholds
        .iter()
        .map(|&d| {
            let mask = distance_mask(grid, d);
            Ok(DistanceIou {
                min_distance: d,
                iou: counts_for(preds, samples, Some(&mask))?.finish(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutResult {
    pub dropped: usize,
    /// Per-channel IoU of each trial.
    pub trials: Vec<Vec<f64>>,
    /// Per-channel mean over trials.
    pub mean: Vec<f64>,
}

/// Cameras kept for one sample of one dropout trial.
pub fn kept_cameras(n: usize, dropped: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop = sample_indices(&mut rng, n, dropped).into_vec();
    drop.sort_unstable();
    (0..n).filter(|k| drop.binary_search(k).is_err()).collect()
}

/// IoU with `dropped` cameras removed at random from every sample, averaged
/// over `trials` seeded trials.
pub fn camera_dropout_eval(
    params: &ParamStore,
    cfg: &ModelConfig,
    samples: &[Sample],
    dropped: usize,
    trials: usize,
    seed: u64,
) -> Result<DropoutResult> {
    if trials == 0 {
        return Err(Error::invalid("camera_dropout_eval", "at least one trial is required"));
    }
    if let Some(s) = samples.iter().find(|s| dropped >= s.num_cameras()) {
        return Err(Error::invalid(
            "camera_dropout_eval",
            format!("cannot drop {dropped} of {} cameras", s.num_cameras()),
        ));
    }
    let mut per_trial = Vec::with_capacity(trials);
    for trial in 0..trials {
        let trial_seed = crate::derive_seed(seed, trial as u64);
        let preds: Vec<Tensor<f32>> = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let all = CameraView::all(&s.images, &s.calibs);
                let keep = kept_cameras(s.num_cameras(), dropped, crate::derive_seed(trial_seed, i as u64));
                let views: Vec<CameraView> = keep.into_iter().map(|k| all[k]).collect();
                predict(params, cfg, &views)
            })
            .collect::<Result<_>>()?;
        per_trial.push(
            counts_for(&preds, samples, None)?
                .finish()
                .iter()
                .map(|c| c.iou)
                .collect::<Vec<_>>(),
        );
    }
    let channels = per_trial[0].len();
    let mean = (0..channels)
        .map(|c| per_trial.iter().map(|t| t[c]).sum::<f64>() / trials as f64)
        .collect();
    Ok(DropoutResult {
        dropped,
        trials: per_trial,
        mean,
    })
}

/// Attention of the final block for one sample, head-averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub trace: crate::attention::AttentionTrace,
    /// Feature-map size of the traced scale.
    pub feat_h: usize,
    pub feat_w: usize,
}

impl AttentionMaps {
    /// Camera receiving the largest head-averaged attention mass from latent
    /// cell `query`.
    pub fn argmax_camera(&self, query: usize) -> usize {
        let mass = self.trace.camera_mass(query);
        (0..mass.len())
            .max_by(|&a, &b| mass[a].total_cmp(&mass[b]).then(b.cmp(&a)))
            .expect("at least one camera")
    }
}

pub fn attention_maps(params: &ParamStore, cfg: &ModelConfig, sample: &Sample) -> Result<AttentionMaps> {
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, false);
    let out = forward(&mut g, &p, cfg, &CameraView::all(&sample.images, &sample.calibs), true)?;
    let trace = out.traces.into_iter().last().expect("one trace per block");
    let (feat_h, feat_w) = *cfg.scale_shapes().last().expect("validated scales");
    Ok(AttentionMaps { trace, feat_h, feat_w })
}

/// Bilinear resize with half-pixel centers and edge clamping.
fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let axis = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, ly) = axis(y, h, oh);
        for x in 0..ow {
            let (x0, x1, lx) = axis(x, w, ow);
            let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
            let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
            out.push(top * (1.0 - ly) + bot * ly);
        }
    }
    out
}

fn pgm(data: &[f64], h: usize, w: usize) -> Vec<u8> {
    let max = data.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(data.iter().map(|&v| {
        if max > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Writes, for each latent `(row, col)` query, one grayscale PGM per camera
/// (`attn_q<row>_<col>_cam<k>.pgm`, attention upsampled to image size) and
/// a CSV of the raw weights (`attn_q<row>_<col>.csv`). Returns the paths
/// written.
pub fn export_attention_maps(
    params: &ParamStore,
    cfg: &ModelConfig,
    sample: &Sample,
    queries: &[(usize, usize)],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let maps = attention_maps(params, cfg, sample)?;
    let (fh, fw) = (maps.feat_h, maps.feat_w);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for &(r, c) in queries {
        if r >= cfg.latent_h || c >= cfg.latent_w {
            return Err(Error::invalid(
                "export_attention_maps",
                format!("query ({r}, {c}) outside the {}×{} grid", cfg.latent_h, cfg.latent_w),
            ));
        }
        let q = r * cfg.latent_w + c;
        let mut csv = String::from("camera,row,col,weight\n");
        for cam in 0..maps.trace.camera_keys.len() {
            let w = maps.trace.mean_weights(q, cam);
            for (i, v) in w.iter().enumerate() {
                writeln!(csv, "{cam},{},{},{v}", i / fw, i % fw).expect("string write");
            }
            let img = resize_bilinear(&w, fh, fw, cfg.image_h, cfg.image_w);
            let path = out_dir.join(format!("attn_q{r}_{c}_cam{cam}.pgm"));
            fs::write(&path, pgm(&img, cfg.image_h, cfg.image_w)).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        let path = out_dir.join(format!("attn_q{r}_{c}.csv"));
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// A named change to the model configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
}

/// The full model, each component ablation, and each positional-embedding
/// alternative, without duplicates.
pub fn ablation_variants(base: &ModelConfig) -> Vec<Variant> {
    let v = |name: &str, f: &dyn Fn(&mut ModelConfig)| {
        let mut m = base.clone();
        f(&mut m);
        Variant {
            name: name.into(),
            model: m,
        }
    };
    vec![
        v("full", &|_| {}),
        v("no_camera_embedding", &|m| m.positional = PositionalMode::None),
        v("no_image_features_in_keys", &|m| m.keys_use_features = false),
        v("no_refinement", &|m| m.refine_latent = false),
        v("learned_per_camera", &|m| {
            m.positional = PositionalMode::LearnedPerCamera
        }),
        v("fourier", &|m| m.positional = PositionalMode::Fourier),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub iou_vehicle: f64,
    pub iou_driveable: f64,
}

pub const ABLATION_HEADER: &str = "variant,seed,iou_vehicle,iou_driveable";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.variant, r.seed, r.iou_vehicle, r.iou_driveable).expect("string write");
    }
    out
}

/// Trains and evaluates every variant once per seed. The seed drives both
/// parameter initialization and batch order; the data are shared.
pub fn run_ablation_suite(
    variants: &[Variant],
    train: &TrainConfig,
    data: &Dataset,
    seeds: &[u64],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if seeds.len() < 3 {
        return Err(Error::invalid(
            "run_ablation_suite",
            "at least three seeds are required",
        ));
    }
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for v in variants {
        for &seed in seeds {
            let params = init_params(&v.model, seed)?;
            let tc = TrainConfig { seed, ..train.clone() };
            let out = train_run(&v.model, &tc, data, params, |_| {})?;
            let iou = evaluate(&out.params, &v.model, &data.val)?;
            let row = AblationRow {
                variant: v.name.clone(),
                seed,
                iou_vehicle: iou[0].iou,
                iou_driveable: iou.get(1).map_or(f64::NAN, |c| c.iou),
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Mean and sample standard deviation of one column of ablation rows.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Everything `eval` reports for one model on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: Vec<ChannelIou>,
    pub distance: Vec<DistanceIou>,
    pub dropout: Vec<DropoutResult>,
    pub samples: usize,
    /// FNV-1a hash of the model configuration's JSON form.
    pub config_fingerprint: String,
}

pub fn config_fingerprint(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let hash = json.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    });
    format!("{hash:016x}")
}

/// Plain IoU, the distance curve, and the dropout curve for `m` in
/// `0..rig size`.
pub fn eval_report(
    params: &ParamStore,
    cfg: &ModelConfig,
    samples: &[Sample],
    thresholds: &[f64],
    dropout_trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("eval_report", "no samples to evaluate"));
    }
    let preds = predict_all(params, cfg, samples)?;
    let iou = counts_for(&preds, samples, None)?.finish();
    let distance = distance_binned_from(&preds, samples, thresholds)?;
    let cams = samples.iter().map(Sample::num_cameras).min().unwrap_or(0);
    let dropout = (0..cams)
        .map(|m| camera_dropout_eval(params, cfg, samples, m, dropout_trials, seed))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        iou,
        distance,
        dropout,
        samples: samples.len(),
        config_fingerprint: config_fingerprint(cfg),
    })
}

impl EvalReport {
    /// One row per measurement: `curve,parameter,channel,iou,empty`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("curve,parameter,channel,iou,empty\n");
        let mut row = |curve: &str, param: f64, ch: usize, iou: f64, empty: bool| {
            writeln!(out, "{curve},{param},{ch},{iou},{empty}").expect("string write");
        };
        for (ch, c) in self.iou.iter().enumerate() {
            row("overall", 0.0, ch, c.iou, c.empty);
        }
        for d in &self.distance {
            for (ch, c) in d.iou.iter().enumerate() {
                row("min_distance", d.min_distance, ch, c.iou, c.empty);
            }
        }
        for d in &self.dropout {
            for (ch, &v) in d.mean.iter().enumerate() {
                row("dropped_cameras", d.dropped as f64, ch, v, false);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_edge_cases() {
        let z = Tensor::full([1, 2, 2], -5.0f32);
        let y = Tensor::zeros([1, 2, 2]);
        let r = iou(&z, &y, None).unwrap();
        assert_eq!(r[0], ChannelIou { iou: 1.0, empty: true });
        let y1 = Tensor::full([1, 2, 2], 1.0f32);
        assert_eq!(iou(&z, &y1, None).unwrap()[0].iou, 0.0);
        let z1 = Tensor::full([1, 2, 2], 5.0f32);
        assert_eq!(iou(&z1, &y1, None).unwrap()[0].iou, 1.0);
    }

    #[test]
    fn kept_cameras_drop_exactly() {
        for seed in 0..20 {
            let k = kept_cameras(4, 2, seed);
            assert_eq!(k.len(), 2);
            assert!(k.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(kept_cameras(4, 0, 3), vec![0, 1, 2, 3]);
    }

    #[test]
    fn variants_are_distinct() {
        let v = ablation_variants(&ModelConfig::desk());
        for i in 0..v.len() {
            v[i].model.validate().unwrap();
            for j in 0..i {
                assert_ne!(v[i].model, v[j].model);
            }
        }
    }
}
