//! Camera-aware positional embeddings: per-cell ray directions (δ), camera
//! locations (τ), and the learned map-view query grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize, unproject_ray, CameraCalib, PixelCoord};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Standard deviation of every normal-initialized embedding and MLP weight.
pub const INIT_STD: f64 = 0.02;

/// How image keys learn where they look.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    /// Keys carry image features only.
    None,
    /// A free embedding per camera slot and feature cell, blind to calibration.
    LearnedPerCamera,
    /// Ray directions lifted by random Fourier features, then the MLP.
    Fourier,
    /// Ray directions fed straight into the MLP.
    #[default]
    Linear,
}

impl PositionalMode {
    pub fn uses_rays(self) -> bool {
        matches!(self, PositionalMode::Fourier | PositionalMode::Linear)
    }
}

/// Two-layer perceptron `in → D → D` with a GELU between the layers.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub w0: Var,
    pub b0: Var,
    pub w1: Var,
    pub b1: Var,
}

impl Mlp {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.w0)?;
        let h = g.add_row(h, self.b0)?;
        let h = g.gelu(h);
        let h = g.matmul(h, self.w1)?;
        g.add_row(h, self.b1)
    }
}

/// Per-axis pixel stride between an image and a feature map.
pub fn feature_stride(image_h: usize, image_w: usize, feat_h: usize, feat_w: usize) -> Result<(usize, usize)> {
    if feat_h == 0 || feat_w == 0 || !image_h.is_multiple_of(feat_h) || !image_w.is_multiple_of(feat_w) {
        return Err(Error::invalid(
            "ray_embedding",
            format!("feature map {feat_h}×{feat_w} does not tile a {image_h}×{image_w} image"),
        ));
    }
    Ok((image_h / feat_h, image_w / feat_w))
}

/// Unit world-frame ray directions through the center pixel of every
/// feature cell, row-major, as an `N×3` tensor. Cell `(i, j)` of a stride-`s`
/// map is centered at pixel `(s·j + s/2, s·i + s/2)`.
pub fn ray_directions(
    calib: &CameraCalib,
    feat_h: usize,
    feat_w: usize,
    image_h: usize,
    image_w: usize,
) -> Result<Tensor<f64>> {
    let (sy, sx) = feature_stride(image_h, image_w, feat_h, feat_w)?;
    let mut data = Vec::with_capacity(feat_h * feat_w * 3);
    for i in 0..feat_h {
        for j in 0..feat_w {
            let pix = PixelCoord::new((sx * j) as f64 + 0.5 * sx as f64, (sy * i) as f64 + 0.5 * sy as f64);
            data.extend(normalize(unproject_ray(calib, pix)));
        }
    }
    Tensor::new([feat_h * feat_w, 3], data)
}

/// `[sin(2π·x·B), cos(2π·x·B)]` for rows `x` of `dirs` (`N×3`) and a `3×m`
/// frequency matrix `B`.
pub fn fourier_features(dirs: &Tensor<f64>, freqs: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = dirs.shape()[0];
    if freqs.ndim() != 2 || freqs.shape()[0] != 3 || dirs.shape() != [n, 3] {
        return Err(Error::shape("fourier_features", dirs.shape(), freqs.shape()));
    }
    let m = freqs.shape()[1];
    let (d, b) = (dirs.data(), freqs.data());
    let mut out = vec![0.0; n * 2 * m];
    for r in 0..n {
        for c in 0..m {
            let proj = (0..3).map(|a| d[r * 3 + a] * b[a * m + c]).sum::<f64>();
            let angle = std::f64::consts::TAU * proj;
            out[r * 2 * m + c] = angle.sin();
            out[r * 2 * m + m + c] = angle.cos();
        }
    }
    Tensor::new([n, 2 * m], out)
}

/// Gaussian `3×m` frequency matrix with unit scale.
pub fn fourier_frequencies(m: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn([3, m], |_| normal.sample(&mut rng))
}

/// Direction embedding `δ` (`N×D`) for every cell of a `feat_h×feat_w`
/// feature map. With `freqs`, directions are first lifted to Fourier
/// features.
pub fn ray_embedding<T: Scalar>(
    g: &mut Graph<T>,
    calib: &CameraCalib,
    feat_h: usize,
    feat_w: usize,
    image_h: usize,
    image_w: usize,
    mlp: &Mlp,
    freqs: Option<&Tensor<f64>>,
) -> Result<Var> {
    let dirs = ray_directions(calib, feat_h, feat_w, image_h, image_w)?;
    let input = match freqs {
        Some(b) => fourier_features(&dirs, b)?,
        None => dirs,
    };
    let x = g.constant(input.cast());
    mlp.apply(g, x)
}

/// Location embedding `τ` (length `D`) of a camera's origin.
pub fn location_embedding<T: Scalar>(g: &mut Graph<T>, calib: &CameraCalib, mlp: &Mlp) -> Result<Var> {
    let x = g.constant(Tensor::new([1, 3], calib.t().to_vec())?.cast());
    let y = mlp.apply(g, x)?;
    let d = g.shape(y)[1];
    g.reshape(y, &[d])
}

/// Initial map-view queries `c⁽⁰⁾`, one `D`-vector per cell, row-major.
pub fn init_map_embedding(h: usize, w: usize, dim: usize, seed: u64) -> Tensor<f32> {
    normal_tensor(&[h * w, dim], INIT_STD, seed)
}

pub(crate) fn normal_tensor(shape: &[usize], std: f64, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(&mut rng) as f32)
}
