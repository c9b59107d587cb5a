//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.
//!
//! The learning criteria (4 to 8) train fifteen desk models and take hours
//! on a single core. `CVT_ACCEPTANCE=1,2,3` restricts a development run to
//! the listed criteria.

use std::collections::BTreeMap;
use std::fs;
use std::time::{Duration, Instant};

use cvt::eval::{ablation_variants, attention_maps, camera_dropout_eval, evaluate};
use cvt::geometry::*;
use cvt::gradcheck::{model_check, op_suite};
use cvt::model::{forward, init_params, CameraView, ModelConfig, ParamStore};
use cvt::scene::{generate_scene, read_sample, render_view_with_ids, write_sample, Dataset, Sample, SceneConfig};
use cvt::tensor::{Graph, Tensor};
use cvt::train::{
    adamw_step, batch_gradients, load_checkpoint, metrics_csv, save_checkpoint, train_run, AdamW, TrainConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const SEEDS: [u64; 3] = [0, 1, 2];
const DATA_SEED: u64 = 1;
const DESK_SCENES: usize = 640;
const VEHICLE_MIN: f64 = 0.50;
const DRIVEABLE_MIN: f64 = 0.70;
const ABLATION_GAP: f64 = 0.03;
const PROBED_CELLS: usize = 50;
const LOCALIZATION_MIN: f64 = 0.70;

struct Outcome {
    pass: bool,
    detail: String,
    /// Time measured against the runtime bound, and the bound itself.
    timed: Duration,
    bound: Option<Duration>,
}

impl Outcome {
    fn new(pass: bool, detail: String, timed: Duration, bound: Option<Duration>) -> Self {
        Outcome {
            pass,
            detail,
            timed,
            bound,
        }
    }
}

fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

/// One trained desk model.
struct Run {
    params: ParamStore,
    model: ModelConfig,
    vehicle: f64,
    driveable: f64,
    elapsed: Duration,
}

impl Run {
    fn mean(&self) -> f64 {
        (self.vehicle + self.driveable) / 2.0
    }
}

/// Trained desk models keyed by variant and seed, trained on first use.
struct Desk {
    data: Dataset,
    runs: BTreeMap<(String, u64), Run>,
}

impl Desk {
    fn new() -> Self {
        let data = Dataset::generate_split(&SceneConfig::desk(), DATA_SEED, DESK_SCENES).expect("desk dataset");
        Desk {
            data,
            runs: BTreeMap::new(),
        }
    }

    fn run(&mut self, variant: &str, seed: u64) -> &Run {
        let key = (variant.to_string(), seed);
        if !self.runs.contains_key(&key) {
            let model = ablation_variants(&ModelConfig::desk())
                .into_iter()
                .find(|v| v.name == variant)
                .expect("known variant")
                .model;
            let tc = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let start = Instant::now();
            let out = train_run(&model, &tc, &self.data, init_params(&model, seed).unwrap(), |_| {}).expect("training");
            let iou = evaluate(&out.params, &model, &self.data.val).unwrap();
            let run = Run {
                params: out.params,
                model,
                vehicle: iou[0].iou,
                driveable: iou[1].iou,
                elapsed: start.elapsed(),
            };
            eprintln!(
                "  trained {variant} seed {seed}: vehicle {:.4} driveable {:.4} in {:.0} s",
                run.vehicle,
                run.driveable,
                run.elapsed.as_secs_f64()
            );
            self.runs.insert(key.clone(), run);
        }
        &self.runs[&key]
    }

    fn median(&mut self, variant: &str, f: fn(&Run) -> f64) -> f64 {
        let mut v: Vec<f64> = SEEDS.iter().map(|&s| f(self.run(variant, s))).collect();
        v.sort_by(f64::total_cmp);
        v[1]
    }

    fn time(&self, variants: &[&str]) -> Duration {
        self.runs
            .iter()
            .filter(|((v, _), _)| variants.contains(&v.as_str()))
            .map(|(_, r)| r.elapsed)
            .sum()
    }
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let ops = op_suite(0).expect("op suite");
    let model = model_check(0).expect("model check");
    let worst = ops
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap();
    let pass = worst.max_rel_err < 1e-6 && model.max_rel_err < 1e-5;
    let detail = format!(
        "{} op checks, worst {} {:.2e} (< 1e-6); micro model {:.2e} (< 1e-5)",
        ops.len(),
        worst.name,
        worst.max_rel_err,
        model.max_rel_err
    );
    Outcome::new(pass, detail, start.elapsed(), minutes(2))
}

fn random_image(rng: &mut impl Rng, cfg: &ModelConfig) -> Tensor<f32> {
    Tensor::from_fn([3, cfg.image_h, cfg.image_w], |_| rng.random_range(0.0..1.0))
}

fn random_calib(rng: &mut impl Rng, cfg: &ModelConfig) -> CameraCalib {
    let (w, h) = (cfg.image_w as f64, cfg.image_h as f64);
    let pos = [
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(0.5..2.5),
    ];
    CameraCalib::looking(
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        rng.random_range(-0.3..0.3),
        pos,
        rng.random_range(0.4..1.2) * w,
        w / 2.0,
        h / 2.0,
    )
    .unwrap()
}

fn attention_contract() -> Outcome {
    let start = Instant::now();
    let mut worst_sum = 0f64;
    let (mut permutation_failures, mut count_failures) = (0, 0);
    for i in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let n = rng.random_range(2..=5);
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let cfg = ModelConfig {
            heads,
            d_head: rng.random_range(2..=6),
            temperature: rng.random_range(0.05..2.0),
            num_cameras: n,
            ..ModelConfig::micro()
        };
        let params = init_params(&cfg, i).unwrap();
        let images: Vec<Tensor<f32>> = (0..n).map(|_| random_image(&mut rng, &cfg)).collect();
        let calibs: Vec<CameraCalib> = (0..n).map(|_| random_calib(&mut rng, &cfg)).collect();
        let views = CameraView::all(&images, &calibs);

        let run = |views: &[CameraView]| {
            let mut g = Graph::<f32>::new();
            let p = params.bind(&mut g, false);
            let out = forward(&mut g, &p, &cfg, views, true)?;
            Ok::<_, cvt::Error>((g.value(out.logits).clone(), out.traces))
        };
        let (logits, traces) = run(&views).unwrap();
        for t in &traces {
            for row in t.weights.chunks(t.total_keys()) {
                worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let mut shuffled = views.clone();
        shuffled.shuffle(&mut rng);
        let (again, _) = run(&shuffled).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        permutation_failures += (bits(&logits) != bits(&again)) as usize;
        for k in 1..=n {
            let subset: Vec<CameraView> = shuffled[..k].to_vec();
            match run(&subset) {
                Ok((l, _))
                    if l.shape() == [cfg.channels, cfg.out_h, cfg.out_w] && l.data().iter().all(|v| v.is_finite()) => {}
                _ => count_failures += 1,
            }
        }
    }
    let pass = worst_sum <= 1e-5 && permutation_failures == 0 && count_failures == 0;
    let detail = format!(
        "100 configs: max |Σw − 1| {worst_sum:.1e}, {permutation_failures} permutation mismatches, {count_failures} rejected camera counts"
    );
    Outcome::new(pass, detail, start.elapsed(), minutes(1))
}

fn in_rect(b: &OrientedBox, p: [f64; 2]) -> bool {
    let (dx, dy) = (p[0] - b.center[0], p[1] - b.center[1]);
    let (s, c) = b.yaw.sin_cos();
    let (lx, ly) = (c * dx + s * dy, -s * dx + c * dy);
    lx.abs() <= b.half_extent[0] && ly.abs() <= b.half_extent[1]
}

fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    let axis = normalize([
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ]);
    rot_axis(axis, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
}

fn any_calib(rng: &mut impl Rng) -> CameraCalib {
    let f = rng.random_range(100.0..1500.0);
    let k = [
        [f, 0.0, rng.random_range(100.0..500.0)],
        [0.0, f * rng.random_range(0.8..1.2), rng.random_range(100.0..400.0)],
        [0.0, 0.0, 1.0],
    ];
    let t = [
        rng.random_range(-20.0..20.0),
        rng.random_range(-20.0..20.0),
        rng.random_range(-3.0..3.0),
    ];
    CameraCalib::new(k, random_rotation(rng), t).unwrap()
}

fn point_ahead(rng: &mut impl Rng, c: &CameraCalib) -> Vec3 {
    let cam = [
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(0.5..60.0),
    ];
    add(mat_vec(&transpose(c.r()), cam), c.t())
}

fn geometry_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = map_grid_centers(40.0, 40.0, 64, 64).unwrap();
    let mut raster_failures = 0;
    for _ in 0..100 {
        let b = OrientedBox::new(
            [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)],
            [rng.random_range(0.2..6.0), rng.random_range(0.2..3.0)],
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            1.5,
        )
        .unwrap();
        let mask = rasterize_boxes(&grid, std::slice::from_ref(&b), 0).unwrap();
        let oracle: Vec<u8> = grid.centers().iter().map(|&p| in_rect(&b, p) as u8).collect();
        raster_failures += (mask != oracle) as usize;
    }
    let (mut scale_err, mut iso_err, mut angle_err) = (0f64, 0f64, 0f64);
    for _ in 0..100 {
        let c = any_calib(&mut rng);
        let x = point_ahead(&mut rng, &c);
        let pix = PixelCoord::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let s = geometric_similarity(&c, pix, x).unwrap();
        let scaled = geometric_similarity(&c, pix.scaled(rng.random_range(1e-3..1e3)), x).unwrap();
        scale_err = scale_err.max((s - scaled).abs());
        let q = random_rotation(&mut rng);
        let shift = [
            rng.random_range(-50.0..50.0),
            rng.random_range(-50.0..50.0),
            rng.random_range(-5.0..5.0),
        ];
        let moved = geometric_similarity(&c.transformed(&q, shift).unwrap(), pix, add(mat_vec(&q, x), shift)).unwrap();
        iso_err = iso_err.max((s - moved).abs());
        let p = project_point(&c, x).pixel().expect("point is ahead");
        let (ray, true_dir) = (unproject_ray(&c, p), sub(x, c.t()));
        angle_err = angle_err.max(norm(cross(ray, true_dir)).atan2(dot(ray, true_dir)));
    }
    let pass = raster_failures == 0 && scale_err < 1e-12 && iso_err < 1e-9 && angle_err < 1e-9;
    let detail = format!(
        "{raster_failures}/100 raster mismatches; scale {scale_err:.1e}, isometry {iso_err:.1e}, round trip {angle_err:.1e} rad"
    );
    Outcome::new(pass, detail, start.elapsed(), minutes(1))
}

fn learning_smoke(desk: &mut Desk) -> Outcome {
    let mut lines = Vec::new();
    let mut good = 0;
    for &seed in &SEEDS {
        let r = desk.run("full", seed);
        let ok = r.vehicle >= VEHICLE_MIN && r.driveable >= DRIVEABLE_MIN;
        good += ok as usize;
        lines.push(format!("seed {seed} {:.3}/{:.3}", r.vehicle, r.driveable));
    }
    let slowest = SEEDS.iter().map(|&s| desk.run("full", s).elapsed).max().unwrap();
    let detail = format!(
        "vehicle/driveable IoU {} (need ≥ {VEHICLE_MIN}/{DRIVEABLE_MIN} on 2 of 3, got {good}); slowest run",
        lines.join(", ")
    );
    Outcome::new(good >= 2, detail, slowest, minutes(20))
}

fn medians(desk: &mut Desk, variant: &str) -> (f64, f64, f64) {
    (
        desk.median(variant, Run::mean),
        desk.median(variant, |r| r.vehicle),
        desk.median(variant, |r| r.driveable),
    )
}

fn fmt_medians(name: &str, m: (f64, f64, f64)) -> String {
    format!("{name} {:.3} ({:.3}/{:.3})", m.0, m.1, m.2)
}

const TABLE3: [&str; 4] = [
    "full",
    "no_camera_embedding",
    "no_image_features_in_keys",
    "no_refinement",
];

fn ablation_ordering(desk: &mut Desk) -> Outcome {
    let m: Vec<_> = TABLE3.iter().map(|v| medians(desk, v)).collect();
    let pass = m[0].0 - m[1].0 >= ABLATION_GAP && m[0].0 >= m[2].0 && m[0].0 >= m[3].0;
    let parts: Vec<String> = TABLE3.iter().zip(&m).map(|(n, v)| fmt_medians(n, *v)).collect();
    let detail = format!(
        "median mean IoU (vehicle/driveable): {}; need full − no_camera_embedding ≥ {ABLATION_GAP}",
        parts.join(", ")
    );
    Outcome::new(pass, detail, desk.time(&TABLE3), minutes(90))
}

fn embedding_ordering(desk: &mut Desk) -> Outcome {
    let names = ["full", "learned_per_camera", "no_camera_embedding"];
    let m: Vec<_> = names.iter().map(|v| medians(desk, v)).collect();
    let pass = m[0].0 >= m[1].0 && m[1].0 >= m[2].0;
    let parts: Vec<String> = names.iter().zip(&m).map(|(n, v)| fmt_medians(n, *v)).collect();
    Outcome::new(
        pass,
        format!("median mean IoU: {}", parts.join(" ≥ ")),
        desk.time(&names),
        None,
    )
}

fn dropout_trend(desk: &mut Desk) -> Outcome {
    let start = Instant::now();
    let r = desk.run("full", 0);
    let (params, model) = (r.params.clone(), r.model.clone());
    let mut means = Vec::new();
    let mut parts = Vec::new();
    for m in 0..=2 {
        let d = camera_dropout_eval(&params, &model, &desk.data.val, m, 5, 0).unwrap();
        let mean = d.mean.iter().sum::<f64>() / d.mean.len() as f64;
        parts.push(format!("m={m} {mean:.3} ({:.3}/{:.3})", d.mean[0], d.mean[1]));
        means.push(mean);
    }
    let pass = means.windows(2).all(|w| w[1] < w[0]);
    Outcome::new(
        pass,
        format!("mean IoU by dropped cameras: {}", parts.join(", ")),
        start.elapsed(),
        minutes(5),
    )
}

/// Whether a latent cell holds a vehicle, and which one covers most of it.
fn vehicle_in_cell(scene: &cvt::scene::Scene, model: &ModelConfig, qi: usize, qj: usize) -> Option<usize> {
    let g = &scene.grid;
    let (lh, lw) = (model.latent_h, model.latent_w);
    let mut counts = vec![0usize; scene.boxes.len()];
    for i in qi * g.h / lh..(qi + 1) * g.h / lh {
        for j in qj * g.w / lw..(qj + 1) * g.w / lw {
            let p = g.center(i, j);
            for (b, bx) in scene.boxes.iter().enumerate() {
                counts[b] += bx.contains(p) as usize;
            }
        }
    }
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .max_by_key(|(_, &c)| c)
        .map(|(b, _)| b)
}

fn attention_localization(desk: &mut Desk) -> Outcome {
    let start = Instant::now();
    let r = desk.run("full", 0);
    let (params, model) = (r.params.clone(), r.model.clone());
    let (mut hits, mut probed) = (0, 0);
    'samples: for s in &desk.data.val {
        let scene = generate_scene(&SceneConfig::desk(), s.seed).unwrap();
        let ids: Vec<Vec<i32>> = (0..scene.num_cameras())
            .map(|k| render_view_with_ids(&scene, k).unwrap().ids)
            .collect();
        let maps = attention_maps(&params, &model, s).unwrap();
        for qi in 0..model.latent_h {
            for qj in 0..model.latent_w {
                let Some(b) = vehicle_in_cell(&scene, &model, qi, qj) else {
                    continue;
                };
                let cam = maps.argmax_camera(qi * model.latent_w + qj);
                hits += ids[cam].contains(&(b as i32)) as usize;
                probed += 1;
                if probed == PROBED_CELLS {
                    break 'samples;
                }
            }
        }
    }
    let rate = hits as f64 / probed as f64;
    let detail = format!(
        "argmax camera sees the vehicle in {hits}/{probed} cells ({:.0}%, need ≥ 70%)",
        100.0 * rate
    );
    Outcome::new(
        probed == PROBED_CELLS && rate >= LOCALIZATION_MIN,
        detail,
        start.elapsed(),
        minutes(2),
    )
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn same_sample(a: &Sample, b: &Sample) -> bool {
    a.seed == b.seed
        && a.calibs == b.calibs
        && a.grid == b.grid
        && a.images.len() == b.images.len()
        && a.images
            .iter()
            .zip(&b.images)
            .all(|(x, y)| x.shape() == y.shape() && bits(x) == bits(y))
        && a.label.shape() == b.label.shape()
        && bits(&a.label) == bits(&b.label)
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::micro();
    let data = Dataset::generate(&SceneConfig::micro(), 5, 6, 2).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let train = || pool.install(|| train_run(&cfg, &tc, &data, init_params(&cfg, 1).unwrap(), |_| {}).unwrap());
    let (a, b) = (train(), train());
    let reruns = metrics_csv(&a.history) == metrics_csv(&b.history);

    save_checkpoint(tmp.path(), &cfg, &a.params, Some(&a.optimizer)).unwrap();
    let ck = load_checkpoint(tmp.path(), Some(&cfg)).unwrap();
    let batch: Vec<&Sample> = data.train.iter().take(3).collect();
    let opt = AdamW::from(&tc);
    let next_loss = |mut params: ParamStore, mut state| {
        let (_, grads) = batch_gradients(&params, &cfg, &batch, tc.focal_gamma, tc.focal_alpha).unwrap();
        adamw_step(&mut params, &grads, &mut state, tc.max_lr, &opt).unwrap();
        batch_gradients(&params, &cfg, &batch, tc.focal_gamma, tc.focal_alpha)
            .unwrap()
            .0
    };
    let live = next_loss(a.params.clone(), a.optimizer.clone());
    let resumed = next_loss(ck.params, ck.optimizer.expect("optimizer saved"));
    let resume = live.to_bits() == resumed.to_bits();

    let desk = Dataset::generate(&SceneConfig::desk(), 11, 3, 1).unwrap();
    let dir = tmp.path().join("data");
    desk.write(&dir, &SceneConfig::desk(), 11).unwrap();
    let (back, _) = Dataset::read(&dir).unwrap();
    let single = tmp.path().join("one");
    write_sample(&single, &desk.val[0]).unwrap();
    let round_trip = back.train.len() == desk.train.len()
        && back.val.len() == desk.val.len()
        && back
            .train
            .iter()
            .chain(&back.val)
            .zip(desk.train.iter().chain(&desk.val))
            .all(|(x, y)| same_sample(x, y))
        && same_sample(&read_sample(&single).unwrap(), &desk.val[0]);

    let detail = format!("metric CSV reruns identical: {reruns}; resumed next-step loss identical: {resume}; dataset round trip exact: {round_trip}");
    Outcome::new(reruns && resume && round_trip, detail, start.elapsed(), None)
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("CVT_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let wanted = |n: u32| selected.as_ref().is_none_or(|s| s.contains(&n));
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let enforce_time = cores >= 4;
    if !enforce_time {
        println!("note: {cores} core(s) available; runtime bounds assume 4 and are reported, not enforced");
    }

    let mut desk: Option<Desk> = None;
    let mut results = Vec::new();
    for n in 1..=9u32 {
        if !wanted(n) {
            println!("criterion {n}: SKIPPED");
            continue;
        }
        let needs_desk = (4..=8).contains(&n);
        if needs_desk && desk.is_none() {
            desk = Some(Desk::new());
        }
        let wall = Instant::now();
        let o = match n {
            1 => gradient_integrity(),
            2 => attention_contract(),
            3 => geometry_oracles(),
            4 => learning_smoke(desk.as_mut().unwrap()),
            5 => ablation_ordering(desk.as_mut().unwrap()),
            6 => embedding_ordering(desk.as_mut().unwrap()),
            7 => dropout_trend(desk.as_mut().unwrap()),
            8 => attention_localization(desk.as_mut().unwrap()),
            _ => determinism(),
        };
        let over = o.bound.is_some_and(|b| o.timed > b);
        let pass = o.pass && !(enforce_time && over);
        let timing = match o.bound {
            Some(b) => format!(
                "{:.0} s, bound {:.0} s{}",
                o.timed.as_secs_f64(),
                b.as_secs_f64(),
                if over { " exceeded" } else { "" }
            ),
            None => format!("{:.0} s", o.timed.as_secs_f64()),
        };
        println!(
            "criterion {n}: {} {} [{timing}; wall {:.0} s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            wall.elapsed().as_secs_f64()
        );
        results.push(json!({ "criterion": n, "pass": pass, "detail": o.detail, "seconds": o.timed.as_secs_f64() }));
    }

    let record = json!({
        "format": "cvt-acceptance",
        "version": env!("CARGO_PKG_VERSION"),
        "cores": cores,
        "thresholds": {
            "vehicle_iou": VEHICLE_MIN,
            "driveable_iou": DRIVEABLE_MIN,
            "ablation_gap": ABLATION_GAP,
            "localization": LOCALIZATION_MIN,
            "probed_cells": PROBED_CELLS,
        },
        "desk": { "scenes": DESK_SCENES, "data_seed": DATA_SEED, "seeds": SEEDS, "model": ModelConfig::desk(), "train": TrainConfig::default() },
        "runs": desk.as_ref().map(|d| d.runs.iter().map(|((v, s), r)| json!({
            "variant": v, "seed": s, "iou_vehicle": r.vehicle, "iou_driveable": r.driveable, "seconds": r.elapsed.as_secs_f64(),
        })).collect::<Vec<_>>()),
        "results": results,
    });
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join("run.json");
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(&path, serde_json::to_string_pretty(&record).unwrap()).unwrap();
    println!("record: {}", path.display());

    let failed = results.iter().filter(|r| r["pass"] == false).count();
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
