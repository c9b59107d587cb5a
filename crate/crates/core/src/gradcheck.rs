//! Central finite-difference verification of analytic gradients in `f64`.
//!
//! The checker only ever evaluates the forward pass of the function under
//! test, so it is independent of every backward rule it verifies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{forward, init_params, CameraView, ModelConfig, ParamStore};
use crate::scene::{generate_scene, Sample, SceneConfig};
use crate::tensor::{Graph, Tensor, Var};

/// Finite-difference step for single ops.
pub const STEP: f64 = 1e-4;
/// Finite-difference step for the full model, whose many ReLUs make a
/// smaller window worth its extra rounding noise.
pub const MODEL_STEP: f64 = 1e-5;
/// Floor added to `|numeric|` in the relative error denominator.
pub const REL_FLOOR: f64 = 1e-8;
/// Nonzero analytic partials smaller than this sit within a few orders of
/// magnitude of the finite-difference rounding noise; inputs producing them
/// are redrawn before checking.
pub const GRAD_FLOOR: f64 = 1e-3;
const MAX_REDRAWS: usize = 64;
const WEIGHT_SEED: u64 = 0x9e37_79b9;

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    /// `max |analytic - numeric| / (|numeric| + 1e-8)` over every checked element.
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Per-element relative error used throughout.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + REL_FLOOR)
}

/// Function under test: builds an output of any shape from graph inputs.
/// Non-scalar outputs are reduced by a fixed weighting in `[0.5, 1.5)` so
/// every element contributes a distinct gradient.
pub trait GraphFn: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> GraphFn for F {}

fn reduction_weights(shape: &[usize]) -> Tensor<f64> {
    random_tensor(&mut ChaCha8Rng::seed_from_u64(WEIGHT_SEED), shape, 0.5, 1.5)
}

fn outputs(f: &impl GraphFn, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

/// Analytic gradients of the weighted output sum at `inputs`.
pub fn analytic(f: &impl GraphFn, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let w = g.constant(reduction_weights(g.shape(out)));
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    let mut grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect())
}

/// Central differences of the weighted output sum with respect to element
/// `index` of input `which`, at steps `h` and `2h`. Outputs are differenced
/// element by element before weighting, so untouched outputs contribute
/// exactly zero.
fn central_pair(f: &impl GraphFn, inputs: &[Tensor<f64>], which: usize, index: usize, h: f64) -> Result<(f64, f64)> {
    let mut probe = inputs.to_vec();
    let orig = probe[which].data()[index];
    let mut at = |offset: f64| {
        probe[which].data_mut()[index] = orig + offset;
        outputs(f, &probe)
    };
    let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
    let w = reduction_weights(p1.shape());
    let (mut near, mut far) = (0.0, 0.0);
    for (i, &wi) in w.data().iter().enumerate() {
        near += wi * (p1.data()[i] - m1.data()[i]);
        far += wi * (p2.data()[i] - m2.data()[i]);
    }
    Ok((near / (2.0 * h), far / (4.0 * h)))
}

/// Fourth-order central difference of the weighted output sum:
/// `(8·(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`.
pub fn numeric_partial(f: &impl GraphFn, inputs: &[Tensor<f64>], which: usize, index: usize) -> Result<f64> {
    let (near, far) = central_pair(f, inputs, which, index, STEP)?;
    Ok((4.0 * near - far) / 3.0)
}

/// Checks every element of every input.
pub fn check(name: impl Into<String>, inputs: &[Tensor<f64>], f: impl GraphFn) -> Result<CheckReport> {
    let grads = analytic(&f, inputs)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (which, grad) in grads.iter().enumerate() {
        for (index, &a) in grad.data().iter().enumerate() {
            let n = numeric_partial(&f, inputs, which, index)?;
            worst = worst.max(rel_err(a, n));
            checked += 1;
        }
    }
    Ok(CheckReport {
        name: name.into(),
        max_rel_err: worst,
        checked,
    })
}

/// Jitters `inputs` until no analytic partial is nonzero but below
/// [`GRAD_FLOOR`]. Exact zeros are kept: the central difference reproduces
/// them exactly.
pub fn condition(f: &impl GraphFn, inputs: Vec<Tensor<f64>>, rng: &mut impl Rng) -> Result<Vec<Tensor<f64>>> {
    let mut inputs = inputs;
    for _ in 0..MAX_REDRAWS {
        let grads = analytic(f, &inputs)?;
        let ill = grads
            .iter()
            .flat_map(|g| g.data())
            .any(|&v| v != 0.0 && v.abs() < GRAD_FLOOR);
        if !ill {
            break;
        }
        for t in &mut inputs {
            for v in t.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
    }
    Ok(inputs)
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Random tensor whose entries stay at least `margin` away from zero, for
/// inputs to kinked ops.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = rng.random_range(margin..1.5);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

type OpCase = (
    String,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>,
);

/// Finite-difference checks for every differentiable op, each at three
/// input shapes.
pub fn op_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<OpCase> = Vec::new();
    let mut push = |name: String, inputs: Vec<Tensor<f64>>, f: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>| {
        cases.push((name, inputs, f));
    };

    let shapes: [&[usize]; 3] = [&[5], &[3, 4], &[2, 3, 4]];
    for (si, s) in shapes.iter().enumerate() {
        let tag = format!("{s:?}");
        let a = random_tensor(&mut rng, s, -1.0, 1.0);
        let b = random_tensor(&mut rng, s, -1.0, 1.0);
        push(
            format!("add {tag}"),
            vec![a.clone(), b.clone()],
            Box::new(move |g, v| g.add(v[0], v[1])),
        );
        push(
            format!("sub {tag}"),
            vec![a.clone(), b.clone()],
            Box::new(move |g, v| g.sub(v[0], v[1])),
        );
        push(
            format!("mul {tag}"),
            vec![a.clone(), b.clone()],
            Box::new(move |g, v| g.mul(v[0], v[1])),
        );
        push(
            format!("scale {tag}"),
            vec![a.clone()],
            Box::new(move |g, v| Ok(g.scale(v[0], -1.7))),
        );
        push(
            format!("relu {tag}"),
            vec![away_from_zero(&mut rng, s, 0.05)],
            Box::new(move |g, v| Ok(g.relu(v[0]))),
        );
        push(
            format!("gelu {tag}"),
            vec![random_tensor(&mut rng, s, -3.0, 3.0)],
            Box::new(move |g, v| Ok(g.gelu(v[0]))),
        );
        push(
            format!("sin {tag}"),
            vec![a.clone()],
            Box::new(move |g, v| Ok(g.sin(v[0]))),
        );
        push(
            format!("cos {tag}"),
            vec![a.clone()],
            Box::new(move |g, v| Ok(g.cos(v[0]))),
        );
        push(format!("sum {tag}"), vec![a.clone()], Box::new(|g, v| Ok(g.sum(v[0]))));
        push(
            format!("mean {tag}"),
            vec![a.clone()],
            Box::new(|g, v| Ok(g.mean(v[0]))),
        );
        let last = *s.last().unwrap();
        for axis in [0, s.len() - 1] {
            push(
                format!("softmax axis{axis} {tag}"),
                vec![random_tensor(&mut rng, s, -2.0, 2.0)],
                Box::new(move |g, v| g.softmax(v[0], axis)),
            );
        }
        let row = random_tensor(&mut rng, &[last], -1.0, 1.0);
        push(
            format!("add_row {tag}"),
            vec![a.clone(), row.clone()],
            Box::new(move |g, v| g.add_row(v[0], v[1])),
        );
        push(
            format!("sub_row {tag}"),
            vec![a.clone(), row.clone()],
            Box::new(move |g, v| g.sub_row(v[0], v[1])),
        );
        push(
            format!("layer_norm {tag}"),
            vec![
                random_tensor(&mut rng, s, -2.0, 2.0),
                random_tensor(&mut rng, &[last], 0.5, 1.5),
                row.clone(),
            ],
            Box::new(move |g, v| g.layer_norm(v[0], v[1], v[2])),
        );
        let focal_target = Tensor::from_fn(s.to_vec(), |i| if (i * 7 + si) % 3 == 0 { 1.0 } else { 0.0 });
        push(
            format!("focal_loss {tag}"),
            vec![random_tensor(&mut rng, s, -1.5, 1.5)],
            Box::new(move |g, v| g.focal_loss(v[0], &focal_target, 2.0, 0.25)),
        );
        let flat: usize = s.iter().product();
        push(
            format!("reshape {tag}"),
            vec![a.clone()],
            Box::new(move |g, v| g.reshape(v[0], &[flat])),
        );
    }

    for &(m, kd, n) in &[(1usize, 1usize, 1usize), (3, 4, 2), (5, 3, 6)] {
        let tag = format!("{m}x{kd}x{n}");
        let a = random_tensor(&mut rng, &[m, kd], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[kd, n], -1.0, 1.0);
        let bt = random_tensor(&mut rng, &[n, kd], -1.0, 1.0);
        push(
            format!("matmul {tag}"),
            vec![a.clone(), b],
            Box::new(move |g, v| g.matmul(v[0], v[1])),
        );
        push(
            format!("matmul_bt {tag}"),
            vec![a.clone(), bt],
            Box::new(move |g, v| g.matmul_bt(v[0], v[1])),
        );
        push(
            format!("transpose {tag}"),
            vec![a.clone()],
            Box::new(move |g, v| g.transpose(v[0])),
        );
        let c = random_tensor(&mut rng, &[m, n], -1.0, 1.0);
        push(
            format!("concat_cols {tag}"),
            vec![a.clone(), c.clone()],
            Box::new(move |g, v| g.concat_cols(&[v[0], v[1], v[0]])),
        );
        let d = random_tensor(&mut rng, &[n, kd], -1.0, 1.0);
        push(
            format!("concat_rows {tag}"),
            vec![a.clone(), d],
            Box::new(move |g, v| g.concat_rows(&[v[0], v[1]])),
        );
        push(
            format!("slice_cols {tag}"),
            vec![a.clone()],
            Box::new(move |g, v| g.slice_cols(v[0], kd / 2, kd - kd / 2)),
        );
        let rows = random_tensor(&mut rng, &[m, kd + 1], -1.0, 1.0);
        push(
            format!("l2_normalize_rows {tag}"),
            vec![rows],
            Box::new(move |g, v| g.l2_normalize_rows(v[0], 1e-6)),
        );
    }

    let convs = [
        // (c_in, h, w, c_out, kh, kw, stride, pad)
        (1usize, 3usize, 3usize, 2usize, 1usize, 1usize, 1usize, 0usize),
        (2, 5, 5, 3, 3, 3, 2, 1),
        (3, 6, 4, 2, 3, 2, 1, 1),
    ];
    for &(ci, h, w, co, kh, kw, stride, pad) in &convs {
        let x = random_tensor(&mut rng, &[ci, h, w], -1.0, 1.0);
        let wt = random_tensor(&mut rng, &[co, ci, kh, kw], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[co], -1.0, 1.0);
        push(
            format!("conv2d {ci}x{h}x{w} k{kh}x{kw} s{stride} p{pad}"),
            vec![x.clone(), wt, b],
            Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
        );
        push(
            format!("upsample2x {ci}x{h}x{w}"),
            vec![x.clone()],
            Box::new(move |g, v| g.upsample2x(v[0])),
        );
        push(
            format!("center_crop {ci}x{h}x{w}"),
            vec![x],
            Box::new(move |g, v| g.center_crop(v[0], h - 1, w.saturating_sub(2).max(1))),
        );
    }

    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            let inputs = condition(&f, inputs, &mut rng)?;
            check(name, &inputs, f)
        })
        .collect()
}

/// Two central estimates farther apart than this bracket a kink.
const KINK_TOL: f64 = 1e-6;

/// A check point for the micro model: convolutions keep their He scale,
/// other weights and embeddings are uniform in ±0.5 so attention gradients
/// stand well above rounding noise, and biases are positive so ReLU
/// pre-activations sit away from zero.
fn model_point(params: &ParamStore, rng: &mut impl Rng) -> Vec<Tensor<f64>> {
    params
        .iter()
        .map(|(name, t)| {
            let conv = ["enc.", "tap.", "dec.", "head."].iter().any(|p| name.starts_with(p));
            if name.ends_with(".b") {
                random_tensor(rng, t.shape(), 0.2, 0.6)
            } else if name.ends_with(".g") {
                random_tensor(rng, t.shape(), 0.5, 1.5)
            } else if conv {
                t.cast()
            } else {
                random_tensor(rng, t.shape(), -0.5, 0.5)
            }
        })
        .collect()
}

/// Checks every parameter of the micro model against finite differences of
/// its logits on one generated scene.
///
/// The error of each parameter tensor is `max |analytic − numeric|` over
/// its elements divided by the tensor's largest `|numeric|`: individual
/// partials of a full network span many orders of magnitude, and those
/// near zero are dominated by rounding in any `f64` difference quotient.
/// A point where some difference window straddles a ReLU kink is redrawn.
pub fn model_check(seed: u64) -> Result<CheckReport> {
    let cfg = ModelConfig::micro();
    let params = init_params(&cfg, seed)?;
    let sample = Sample::from_scene(&generate_scene(&SceneConfig::micro(), seed)?)?;
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let bound = params.bind_vars(v.to_vec())?;
        let views = CameraView::all(&sample.images, &sample.calibs);
        Ok(forward(g, &bound, &cfg, &views, false)?.logits)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'draw: for attempt in 0..MAX_REDRAWS {
        let inputs = model_point(&params, &mut rng);
        let grads = analytic(&f, &inputs)?;
        let mut worst = 0.0f64;
        let mut checked = 0;
        for (which, grad) in grads.iter().enumerate() {
            let (mut err, mut scale) = (0.0f64, 0.0f64);
            for (index, &a) in grad.data().iter().enumerate() {
                let (near, far) = central_pair(&f, &inputs, which, index, MODEL_STEP)?;
                if (near - far).abs() > KINK_TOL * (1.0 + near.abs()) {
                    log::debug!(
                        "model check: kink at {}[{index}], redrawing (attempt {attempt})",
                        params.names()[which]
                    );
                    continue 'draw;
                }
                let n = (4.0 * near - far) / 3.0;
                err = err.max((a - n).abs());
                scale = scale.max(n.abs());
                checked += 1;
            }
            worst = worst.max(err / scale.max(REL_FLOOR));
        }
        return Ok(CheckReport {
            name: "micro model".into(),
            max_rel_err: worst,
            checked,
        });
    }
    Err(Error::Contract(format!(
        "model check: no kink-free point in {MAX_REDRAWS} draws"
    )))
}
