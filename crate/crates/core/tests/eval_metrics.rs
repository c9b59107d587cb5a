use std::fs;

use cvt::eval::*;
use cvt::geometry::{distance_mask, map_grid_centers, CameraCalib, OrientedBox};
use cvt::model::{init_params, ModelConfig};
use cvt::scene::{generate_scene, Dataset, Sample, SceneConfig};
use cvt::tensor::Tensor;
use cvt::train::TrainConfig;
use cvt::Error;
use proptest::prelude::*;

fn logits_from(mask: &[u8], shape: [usize; 3]) -> Tensor<f32> {
    Tensor::new(shape, mask.iter().map(|&m| if m == 1 { 4.0 } else { -4.0 }).collect()).unwrap()
}

fn target_from(mask: &[u8], shape: [usize; 3]) -> Tensor<f32> {
    Tensor::new(shape, mask.iter().map(|&m| m as f32).collect()).unwrap()
}

/// |a ∧ b ∧ m| / |(a ∨ b) ∧ m| by plain enumeration.
fn counting_oracle(a: &[u8], b: &[u8], m: &[u8]) -> Option<f64> {
    let (mut i, mut u) = (0u32, 0u32);
    for k in 0..a.len() {
        if m[k] == 1 {
            i += (a[k] & b[k]) as u32;
            u += (a[k] | b[k]) as u32;
        }
    }
    (u > 0).then(|| i as f64 / u as f64)
}

fn single(a: &[u8], b: &[u8], mask: Option<&[u8]>) -> ChannelIou {
    let shape = [1, 4, a.len() / 4];
    iou(&logits_from(a, shape), &target_from(b, shape), mask).unwrap()[0]
}

#[test]
fn counting_examples() {
    // 16 cells: target = first 4, prediction = first 8
    let mut target = [0u8; 16];
    let mut pred = [0u8; 16];
    target[..4].fill(1);
    pred[..8].fill(1);
    assert_eq!(single(&pred, &target, None).iou, 0.5);

    // equal areas of 4, overlapping in 2
    let mut a = [0u8; 16];
    let mut b = [0u8; 16];
    a[..4].fill(1);
    b[2..6].fill(1);
    let got = single(&a, &b, None).iou;
    assert_eq!(got, 1.0 / 3.0);
    assert_eq!(Some(got), counting_oracle(&a, &b, &[1; 16]));

    assert_eq!(single(&a, &a, None).iou, 1.0);
    let mut c = [0u8; 16];
    c[8..12].fill(1);
    assert_eq!(single(&a, &c, None).iou, 0.0);
}

#[test]
fn counts_are_global_across_samples() {
    // sample one: 1/1, sample two: 0/3; global 1/4 where the per-sample mean is 1/2
    let shape = [1, 1, 4];
    let mut acc = IouCounts::new(1);
    acc.add(
        &logits_from(&[1, 0, 0, 0], shape),
        &target_from(&[1, 0, 0, 0], shape),
        None,
    )
    .unwrap();
    acc.add(
        &logits_from(&[1, 1, 0, 0], shape),
        &target_from(&[0, 0, 1, 0], shape),
        None,
    )
    .unwrap();
    assert_eq!(acc.finish()[0].iou, 0.25);
}

#[test]
fn iou_rejects_mismatched_inputs() {
    let z = Tensor::<f32>::zeros([2, 4, 4]);
    assert!(matches!(
        iou(&z, &Tensor::zeros([2, 4, 5]), None),
        Err(Error::Shape { .. })
    ));
    assert!(matches!(
        iou(&z, &Tensor::zeros([2, 4, 4]), Some(&[1; 15])),
        Err(Error::Shape { .. })
    ));
}

fn masks(n: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>, Vec<u8>)> {
    let bits = move || proptest::collection::vec(0u8..2, n);
    (bits(), bits(), bits())
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_matches_the_oracle((a, b, m) in masks(24)) {
        let ab = single(&a, &b, Some(&m));
        let ba = single(&b, &a, Some(&m));
        prop_assert_eq!(ab, ba);
        match counting_oracle(&a, &b, &m) {
            Some(v) => prop_assert_eq!(ab, ChannelIou { iou: v, empty: false }),
            None => prop_assert_eq!(ab, ChannelIou { iou: 1.0, empty: true }),
        }
    }

    /// Dropping union cells that are in both sets can only lower the score.
    #[test]
    fn shrinking_the_mask_over_the_intersection_does_not_raise_iou((a, b, m) in masks(24), drop in proptest::collection::vec(0u8..2, 24)) {
        let shrunk: Vec<u8> = (0..24).map(|k| if a[k] & b[k] == 1 && drop[k] == 1 { 0 } else { m[k] }).collect();
        let before = single(&a, &b, Some(&m));
        let after = single(&a, &b, Some(&shrunk));
        if !after.empty {
            prop_assert!(after.iou <= before.iou);
        }
    }
}

fn perfect_predictions(samples: &[Sample]) -> Vec<Tensor<f32>> {
    samples
        .iter()
        .map(|s| s.label.map(|y| if y > 0.5 { 6.0 } else { -6.0 }))
        .collect()
}

fn noisy_predictions(samples: &[Sample]) -> Vec<Tensor<f32>> {
    samples
        .iter()
        .map(|s| {
            let y = s.label.data();
            Tensor::from_fn(
                s.label.shape(),
                |i| if (y[i] > 0.5) ^ (i % 7 == 0) { 3.0 } else { -3.0 },
            )
        })
        .collect()
}

#[test]
fn distance_zero_is_plain_iou_and_far_bins_are_empty() {
    let cfg = SceneConfig::desk();
    let samples: Vec<Sample> = (0..3)
        .map(|s| Sample::from_scene(&generate_scene(&cfg, s).unwrap()).unwrap())
        .collect();
    let preds = noisy_predictions(&samples);
    let mut plain = IouCounts::new(2);
    for (p, s) in preds.iter().zip(&samples) {
        plain.add(p, &s.label, None).unwrap();
    }
    let beyond = cfg.grid.half_diagonal() + 0.1;
    let curve = distance_binned_from(&preds, &samples, &[0.0, beyond]).unwrap();
    assert_eq!(curve[0].iou, plain.finish());
    assert!(curve[1].iou.iter().all(|c| *c == ChannelIou { iou: 1.0, empty: true }));
}

#[test]
fn vehicles_inside_ten_meters_leave_the_twenty_meter_bin_empty() {
    let cfg = SceneConfig::desk();
    let mut samples = Vec::new();
    for seed in 0..4 {
        let mut scene = generate_scene(&cfg, seed).unwrap();
        scene.boxes = vec![
            OrientedBox::new([6.0, 0.5], [2.0, 0.9], 0.2, 1.5).unwrap(),
            OrientedBox::new([-3.0, -5.0], [2.2, 1.0], 1.1, 1.5).unwrap(),
        ];
        scene.hues = vec![0.1, 0.6];
        samples.push(Sample::from_scene(&scene).unwrap());
    }
    let preds = perfect_predictions(&samples);
    let curve = distance_binned_from(&preds, &samples, &DISTANCE_THRESHOLDS).unwrap();
    let at = |d: f64| curve.iter().find(|c| c.min_distance == d).unwrap().iou[0];
    assert_eq!(at(0.0), ChannelIou { iou: 1.0, empty: false });
    assert!(at(20.0).empty);
    // the vehicle footprints reach past 5 m but not past 10 m
    assert!(!at(5.0).empty);
    assert!(at(10.0).empty);
}

#[test]
fn distance_mask_counts_cells() {
    let grid = map_grid_centers(4.0, 4.0, 4, 4).unwrap();
    // centers at ±0.5 and ±1.5: radii √0.5, √2.5 and √4.5
    let at = |d: f64| distance_mask(&grid, d).iter().map(|&m| m as usize).sum::<usize>();
    assert_eq!(at(0.0), 16);
    assert_eq!(at(1.0), 12);
    assert_eq!(at(2.0), 4);
    assert_eq!(at(3.0), 0);
}

fn micro_samples(n: u64) -> Vec<Sample> {
    (0..n)
        .map(|s| Sample::from_scene(&generate_scene(&SceneConfig::micro(), 100 + s).unwrap()).unwrap())
        .collect()
}

#[test]
fn no_dropout_is_standard_evaluation() {
    let cfg = ModelConfig::micro();
    let params = init_params(&cfg, 4).unwrap();
    let samples = micro_samples(3);
    let plain: Vec<f64> = evaluate(&params, &cfg, &samples)
        .unwrap()
        .iter()
        .map(|c| c.iou)
        .collect();
    let d = camera_dropout_eval(&params, &cfg, &samples, 0, 2, 9).unwrap();
    for trial in &d.trials {
        assert_eq!(
            trial.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            plain.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
    assert_eq!(d.mean, plain);

    let one = camera_dropout_eval(&params, &cfg, &samples, 1, 3, 9).unwrap();
    assert_eq!(one.trials.len(), 3);
    assert!(one.mean.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(one, camera_dropout_eval(&params, &cfg, &samples, 1, 3, 9).unwrap());

    for m in [2, 3] {
        assert!(matches!(
            camera_dropout_eval(&params, &cfg, &samples, m, 1, 9),
            Err(Error::InvalidArgument { .. })
        ));
    }
    assert!(camera_dropout_eval(&params, &cfg, &samples, 1, 0, 9).is_err());
}

fn read_pgm(bytes: &[u8]) -> (usize, usize, &[u8]) {
    let header: Vec<&[u8]> = bytes.splitn(4, |&b| b == b'\n').collect();
    assert_eq!(header[0], b"P5");
    let dims = std::str::from_utf8(header[1]).unwrap();
    let (w, h) = dims.split_once(' ').unwrap();
    assert_eq!(header[2], b"255");
    (h.parse().unwrap(), w.parse().unwrap(), header[3])
}

#[test]
fn exported_attention_sums_to_one_per_query() {
    let cfg = ModelConfig::micro();
    let params = init_params(&cfg, 1).unwrap();
    let sample = &micro_samples(1)[0];
    let dir = tempfile::tempdir().unwrap();
    let queries = [(0, 0), (1, 2), (3, 3)];
    let written = export_attention_maps(&params, &cfg, sample, &queries, dir.path()).unwrap();
    assert_eq!(written.len(), queries.len() * (cfg.num_cameras + 1));
    for &(r, c) in &queries {
        let csv = fs::read_to_string(dir.path().join(format!("attn_q{r}_{c}.csv"))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("camera,row,col,weight"));
        let total: f64 = lines
            .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-4, "query ({r}, {c}) sums to {total}");
        for cam in 0..cfg.num_cameras {
            let bytes = fs::read(dir.path().join(format!("attn_q{r}_{c}_cam{cam}.pgm"))).unwrap();
            let (h, w, px) = read_pgm(&bytes);
            assert_eq!((h, w, px.len()), (cfg.image_h, cfg.image_w, h * w));
        }
        // each file is normalized to its own maximum
        let peak = (0..cfg.num_cameras)
            .map(|cam| {
                *read_pgm(&fs::read(dir.path().join(format!("attn_q{r}_{c}_cam{cam}.pgm"))).unwrap())
                    .2
                    .iter()
                    .max()
                    .unwrap()
            })
            .collect::<Vec<_>>();
        assert!(peak.iter().all(|&p| p == 255), "{peak:?}");
    }

    let out = dir.path().join("bad");
    let err = export_attention_maps(&params, &cfg, sample, &[(4, 0)], &out).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument { .. }));
}

#[test]
fn a_single_key_saturates_the_whole_image() {
    let cfg = ModelConfig {
        num_cameras: 1,
        scales: 1,
        image_h: 8,
        image_w: 8,
        ..ModelConfig::micro()
    };
    assert_eq!(cfg.scale_shapes(), vec![(1, 1)]);
    let params = init_params(&cfg, 2).unwrap();
    let calib = CameraCalib::looking(0.0, 0.0, [0.0, 0.0, 2.0], 4.0, 4.0, 4.0).unwrap();
    let grid = map_grid_centers(32.0, 32.0, 32, 32).unwrap();
    let sample = Sample {
        images: vec![Tensor::from_fn([3, 8, 8], |i| (i % 5) as f32 / 5.0)],
        calibs: vec![calib],
        label: Tensor::zeros([2, 32, 32]),
        grid,
        seed: 0,
    };
    let dir = tempfile::tempdir().unwrap();
    export_attention_maps(&params, &cfg, &sample, &[(2, 1)], dir.path()).unwrap();
    let bytes = fs::read(dir.path().join("attn_q2_1_cam0.pgm")).unwrap();
    let (_, _, px) = read_pgm(&bytes);
    assert!(px.iter().all(|&p| p == 255));
    let csv = fs::read_to_string(dir.path().join("attn_q2_1.csv")).unwrap();
    assert_eq!(csv.lines().nth(1), Some("0,0,0,1"));
}

#[test]
fn argmax_camera_follows_attention_mass() {
    let cfg = ModelConfig::micro();
    let params = init_params(&cfg, 3).unwrap();
    let maps = attention_maps(&params, &cfg, &micro_samples(1)[0]).unwrap();
    for q in 0..cfg.latent_h * cfg.latent_w {
        let mass = maps.trace.camera_mass(q);
        assert!((mass.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        let best = maps.argmax_camera(q);
        assert!(mass.iter().all(|&m| m <= mass[best]));
    }
}

#[test]
fn ablation_table() {
    let rows = vec![
        AblationRow {
            variant: "full".into(),
            seed: 0,
            iou_vehicle: 0.25,
            iou_driveable: 0.5,
        },
        AblationRow {
            variant: "no_refinement".into(),
            seed: 1,
            iou_vehicle: 0.125,
            iou_driveable: 0.75,
        },
    ];
    assert_eq!(
        ablation_csv(&rows),
        "variant,seed,iou_vehicle,iou_driveable\nfull,0,0.25,0.5\nno_refinement,1,0.125,0.75\n"
    );

    let (mean, std) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(mean, 2.5);
    assert!((std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
}

#[test]
fn ablation_suite_runs_every_variant_and_seed() {
    let data = Dataset::generate(&SceneConfig::micro(), 3, 4, 2).unwrap();
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 2,
        ..Default::default()
    };
    let variants = ablation_variants(&ModelConfig::micro());
    let names: Vec<&str> = variants.iter().map(|v| v.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "full",
            "no_camera_embedding",
            "no_image_features_in_keys",
            "no_refinement",
            "learned_per_camera",
            "fourier"
        ]
    );
    assert!(matches!(
        run_ablation_suite(&variants, &tc, &data, &[0, 1], |_| {}),
        Err(Error::InvalidArgument { .. })
    ));
    let mut seen = 0;
    let rows = run_ablation_suite(&variants[..2], &tc, &data, &[0, 1, 2], |_| seen += 1).unwrap();
    assert_eq!((rows.len(), seen), (6, 6));
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.iou_vehicle) && (0.0..=1.0).contains(&r.iou_driveable));
    }
    assert_eq!(ablation_csv(&rows).lines().count(), 7);
}
