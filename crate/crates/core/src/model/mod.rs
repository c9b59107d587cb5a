//! The full network: a shared convolutional image encoder, camera-aware
//! cross-view attention refining a learned map-view query grid coarse to
//! fine, and a convolutional map-view decoder.

mod params;

use serde::{Deserialize, Serialize};

pub use params::{Bound, ParamStore};

use crate::attention::{cvt_block, AttentionConfig, AttentionTrace, AttentionWeights, BlockWeights, CameraKeys};
use crate::embeddings::{
    fourier_frequencies, init_map_embedding, location_embedding, normal_tensor, ray_embedding, Mlp, PositionalMode,
    INIT_STD,
};
use crate::error::{Error, Result};
use crate::geometry::CameraCalib;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Each decoder stage doubles the map resolution.
pub const DECODER_STAGES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width `D`.
    pub dim: usize,
    pub heads: usize,
    pub d_head: usize,
    /// Hidden width of the block MLPs as a multiple of `D`.
    pub mlp_ratio: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Output semantic channels.
    pub channels: usize,
    /// Output width of each stride-2 encoder stage.
    pub encoder_widths: Vec<usize>,
    /// Number of encoder taps (the last stages) and attention blocks.
    pub scales: usize,
    /// Width of each upsampling decoder stage.
    pub decoder_widths: Vec<usize>,
    pub temperature: f64,
    pub positional: PositionalMode,
    pub fourier_features: usize,
    pub fourier_seed: u64,
    /// Add image features to the keys.
    pub keys_use_features: bool,
    /// Build each block's queries from the refined grid instead of `c⁽⁰⁾`.
    pub refine_latent: bool,
    /// Camera slots known to the model.
    pub num_cameras: usize,
}

impl ModelConfig {
    /// Four cameras at 64×128, 8×8 queries decoded to a 64×64 map, `D = 64`.
    pub fn desk() -> Self {
        ModelConfig {
            dim: 64,
            heads: 4,
            d_head: 16,
            mlp_ratio: 4,
            latent_h: 8,
            latent_w: 8,
            image_h: 64,
            image_w: 128,
            out_h: 64,
            out_w: 64,
            channels: 2,
            encoder_widths: vec![16, 32, 64, 64],
            scales: 2,
            decoder_widths: vec![64, 32, 16],
            temperature: 0.05,
            positional: PositionalMode::Linear,
            fourier_features: 16,
            fourier_seed: 0,
            keys_use_features: true,
            refine_latent: true,
            num_cameras: 4,
        }
    }

    /// Tiny two-camera network for finite-difference checks: `D = 8`,
    /// 8×16 images, 4×4 queries.
    pub fn micro() -> Self {
        ModelConfig {
            dim: 8,
            heads: 2,
            d_head: 4,
            mlp_ratio: 4,
            latent_h: 4,
            latent_w: 4,
            image_h: 8,
            image_w: 16,
            out_h: 32,
            out_w: 32,
            channels: 2,
            encoder_widths: vec![4, 4, 4],
            scales: 2,
            decoder_widths: vec![4, 4, 4],
            temperature: 1.0,
            positional: PositionalMode::Linear,
            fourier_features: 3,
            fourier_seed: 0,
            keys_use_features: true,
            refine_latent: true,
            num_cameras: 2,
        }
    }

    /// Six cameras at 224×480, 25×25 queries decoded to 200×200, `D = 128`.
    pub fn full_scale() -> Self {
        ModelConfig {
            dim: 128,
            heads: 4,
            d_head: 64,
            mlp_ratio: 4,
            latent_h: 25,
            latent_w: 25,
            image_h: 224,
            image_w: 480,
            out_h: 200,
            out_w: 200,
            channels: 2,
            encoder_widths: vec![32, 64, 128, 128],
            scales: 2,
            decoder_widths: vec![128, 64, 64],
            temperature: 1.0,
            positional: PositionalMode::Linear,
            fourier_features: 32,
            fourier_seed: 0,
            keys_use_features: true,
            refine_latent: true,
            num_cameras: 6,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            d_head: self.d_head,
            temperature: self.temperature,
        }
    }

    /// `(h, w)` of every encoder stage output.
    pub fn stage_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.encoder_widths.len());
        let (mut h, mut w) = (self.image_h, self.image_w);
        for _ in &self.encoder_widths {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            shapes.push((h, w));
        }
        shapes
    }

    /// Feature-map sizes of the attended scales, coarse first.
    pub fn scale_shapes(&self) -> Vec<(usize, usize)> {
        let stages = self.stage_shapes();
        stages[stages.len() - self.scales..].iter().rev().copied().collect()
    }

    fn tap_stages(&self) -> Vec<usize> {
        let n = self.encoder_widths.len();
        (n - self.scales..n).rev().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.d_head == 0 || self.mlp_ratio == 0 || self.channels == 0 {
            return bad("dim, heads, d_head, mlp_ratio and channels must be positive".into());
        }
        if self.image_h == 0 || self.image_w == 0 || self.latent_h == 0 || self.latent_w == 0 {
            return bad("image and latent sizes must be positive".into());
        }
        if self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.scales == 0 || self.scales > self.encoder_widths.len() {
            return bad(format!(
                "scales = {} needs between 1 and {} encoder stages",
                self.scales,
                self.encoder_widths.len()
            ));
        }
        if self.decoder_widths.len() != DECODER_STAGES {
            return bad(format!("the decoder has exactly {DECODER_STAGES} upsampling stages"));
        }
        let up = 1usize << DECODER_STAGES;
        if self.latent_h * up < self.out_h || self.latent_w * up < self.out_w {
            return bad(format!(
                "decoder output {}×{} is smaller than the map {}×{}",
                self.latent_h * up,
                self.latent_w * up,
                self.out_h,
                self.out_w
            ));
        }
        for (h, w) in self.scale_shapes() {
            if !self.image_h.is_multiple_of(h) || !self.image_w.is_multiple_of(w) {
                return bad(format!(
                    "feature map {h}×{w} does not tile the {}×{} image",
                    self.image_h, self.image_w
                ));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive".into());
        }
        if self.positional == PositionalMode::None && !self.keys_use_features {
            return bad("keys need positional embeddings, image features, or both".into());
        }
        if self.positional == PositionalMode::Fourier && self.fourier_features == 0 {
            return bad("Fourier mode needs at least one frequency".into());
        }
        if self.num_cameras == 0 {
            return bad("num_cameras must be positive".into());
        }
        Ok(())
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let d = self.dim;
        let hd = self.heads * self.d_head;
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| specs.push((name, shape, init));

        let mut c_in = 3;
        for (i, &c) in self.encoder_widths.iter().enumerate() {
            add(format!("enc.{i}.w"), vec![c, c_in, 3, 3], Init::He(c_in * 9));
            add(format!("enc.{i}.b"), vec![c], Init::Zeros);
            c_in = c;
        }
        for (r, &s) in self.tap_stages().iter().enumerate() {
            let c = self.encoder_widths[s];
            add(format!("tap.{r}.w"), vec![d, c, 1, 1], Init::He(c));
            add(format!("tap.{r}.b"), vec![d], Init::Zeros);
        }
        let mut mlp = |prefix: &str, d_in: usize| {
            add(format!("{prefix}.0.w"), vec![d_in, d], Init::Normal);
            add(format!("{prefix}.0.b"), vec![d], Init::Zeros);
            add(format!("{prefix}.1.w"), vec![d, d], Init::Normal);
            add(format!("{prefix}.1.b"), vec![d], Init::Zeros);
        };
        match self.positional {
            PositionalMode::Linear => mlp("delta", 3),
            PositionalMode::Fourier => mlp("delta", 2 * self.fourier_features),
            _ => {}
        }
        mlp("tau", 3);
        if self.positional == PositionalMode::LearnedPerCamera {
            for (r, (h, w)) in self.scale_shapes().into_iter().enumerate() {
                for k in 0..self.num_cameras {
                    add(format!("pos.{r}.cam{k}"), vec![h * w, d], Init::Normal);
                }
            }
        }
        add("latent".into(), vec![self.latent_h * self.latent_w, d], Init::Normal);
        for r in 0..self.scales {
            let p = format!("block.{r}");
            add(format!("{p}.ln1.g"), vec![d], Init::Ones);
            add(format!("{p}.ln1.b"), vec![d], Init::Zeros);
            for x in ["q", "k", "v"] {
                add(format!("{p}.{x}.w"), vec![d, hd], Init::Normal);
                add(format!("{p}.{x}.b"), vec![hd], Init::Zeros);
            }
            add(format!("{p}.o.w"), vec![hd, d], Init::Normal);
            add(format!("{p}.o.b"), vec![d], Init::Zeros);
            add(format!("{p}.ln2.g"), vec![d], Init::Ones);
            add(format!("{p}.ln2.b"), vec![d], Init::Zeros);
            add(format!("{p}.mlp.0.w"), vec![d, self.mlp_ratio * d], Init::Normal);
            add(format!("{p}.mlp.0.b"), vec![self.mlp_ratio * d], Init::Zeros);
            add(format!("{p}.mlp.1.w"), vec![self.mlp_ratio * d, d], Init::Normal);
            add(format!("{p}.mlp.1.b"), vec![d], Init::Zeros);
        }
        let mut c_in = d;
        for (i, &c) in self.decoder_widths.iter().enumerate() {
            add(format!("dec.{i}.w"), vec![c, c_in, 3, 3], Init::He(c_in * 9));
            add(format!("dec.{i}.b"), vec![c], Init::Zeros);
            c_in = c;
        }
        add("head.w".into(), vec![self.channels, c_in, 1, 1], Init::He(c_in));
        add("head.b".into(), vec![self.channels], Init::Zeros);
        specs
    }

    /// Name and shape of every parameter, in store order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.param_specs().into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    /// Normal with the embedding standard deviation.
    Normal,
    /// Normal with variance `2 / fan_in`.
    He(usize),
}

/// Freshly initialized parameters for `cfg`; a pure function of `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (i, (name, shape, init)) in cfg.param_specs().into_iter().enumerate() {
        let s = crate::derive_seed(seed, i as u64);
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Normal if name == "latent" => init_map_embedding(cfg.latent_h, cfg.latent_w, cfg.dim, s),
            Init::Normal => normal_tensor(&shape, INIT_STD, s),
            Init::He(fan_in) => normal_tensor(&shape, (2.0 / fan_in as f64).sqrt(), s),
        };
        store.insert(name, t)?;
    }
    Ok(store)
}

/// Checks that `store` holds exactly the parameters `cfg` expects.
pub fn check_params(cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let expected = cfg.param_shapes();
    if expected.len() != store.len() {
        return Err(Error::Config(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            store.len()
        )));
    }
    for (name, shape) in expected {
        match store.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(Error::Config(format!("parameter {name} is missing"))),
        }
    }
    Ok(())
}

/// One camera's input to a forward pass. `slot` is the camera's index in
/// the full rig, which survives when other cameras are dropped.
#[derive(Clone, Copy, Debug)]
pub struct CameraView<'a> {
    pub image: &'a Tensor<f32>,
    pub calib: &'a CameraCalib,
    pub slot: usize,
}

impl<'a> CameraView<'a> {
    /// Views of every camera of a sample, in rig order.
    pub fn all(images: &'a [Tensor<f32>], calibs: &'a [CameraCalib]) -> Vec<CameraView<'a>> {
        images
            .iter()
            .zip(calibs)
            .enumerate()
            .map(|(slot, (image, calib))| CameraView { image, calib, slot })
            .collect()
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `C×out_h×out_w` logits.
    pub logits: Var,
    /// Attention of each block, coarse first, when requested.
    pub traces: Vec<AttentionTrace>,
}

fn mlp(p: &Bound, prefix: &str) -> Result<Mlp> {
    Ok(Mlp {
        w0: p.var(&format!("{prefix}.0.w"))?,
        b0: p.var(&format!("{prefix}.0.b"))?,
        w1: p.var(&format!("{prefix}.1.w"))?,
        b1: p.var(&format!("{prefix}.1.b"))?,
    })
}

fn block_weights(p: &Bound, r: usize) -> Result<BlockWeights> {
    let v = |s: &str| p.var(&format!("block.{r}.{s}"));
    Ok(BlockWeights {
        ln1_g: v("ln1.g")?,
        ln1_b: v("ln1.b")?,
        attn: AttentionWeights {
            q_w: v("q.w")?,
            q_b: v("q.b")?,
            k_w: v("k.w")?,
            k_b: v("k.b")?,
            v_w: v("v.w")?,
            v_b: v("v.b")?,
            o_w: v("o.w")?,
            o_b: v("o.b")?,
        },
        ln2_g: v("ln2.g")?,
        ln2_b: v("ln2.b")?,
        mlp_w0: v("mlp.0.w")?,
        mlp_b0: v("mlp.0.b")?,
        mlp_w1: v("mlp.1.w")?,
        mlp_b1: v("mlp.1.b")?,
    })
}

/// Runs the shared encoder on one `3×H×W` image and returns the projected
/// features `φ` (`N×D`) of every attended scale, coarse first.
pub fn encode_image<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, image: Var) -> Result<Vec<Var>> {
    let taps = cfg.tap_stages();
    let mut x = image;
    let mut stage_out = Vec::with_capacity(cfg.encoder_widths.len());
    for i in 0..cfg.encoder_widths.len() {
        let y = g.conv2d(
            x,
            p.var(&format!("enc.{i}.w"))?,
            Some(p.var(&format!("enc.{i}.b"))?),
            2,
            1,
        )?;
        x = g.relu(y);
        stage_out.push(x);
    }
    let mut out = Vec::with_capacity(taps.len());
    for (r, &s) in taps.iter().enumerate() {
        let f = g.conv2d(
            stage_out[s],
            p.var(&format!("tap.{r}.w"))?,
            Some(p.var(&format!("tap.{r}.b"))?),
            1,
            0,
        )?;
        let [d, h, w] = *g.shape(f) else {
            unreachable!("conv output is 3-D")
        };
        let f = g.reshape(f, &[d, h * w])?;
        out.push(g.transpose(f)?);
    }
    Ok(out)
}

/// Decodes the refined queries (`N×D`, row-major over the latent grid) to
/// `C×out_h×out_w` logits.
pub fn decode_map<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, c: Var) -> Result<Var> {
    let x = g.transpose(c)?;
    let mut x = g.reshape(x, &[cfg.dim, cfg.latent_h, cfg.latent_w])?;
    for i in 0..cfg.decoder_widths.len() {
        let u = g.upsample2x(x)?;
        let y = g.conv2d(
            u,
            p.var(&format!("dec.{i}.w"))?,
            Some(p.var(&format!("dec.{i}.b"))?),
            1,
            1,
        )?;
        x = g.relu(y);
    }
    let y = g.conv2d(x, p.var("head.w")?, Some(p.var("head.b")?), 1, 0)?;
    g.center_crop(y, cfg.out_h, cfg.out_w)
}

/// Full forward pass over any non-empty set of cameras.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    views: &[CameraView],
    trace: bool,
) -> Result<ForwardOutput> {
    if views.is_empty() {
        return Err(Error::invalid("forward", "at least one camera is required"));
    }
    for v in views {
        if v.image.shape() != [3, cfg.image_h, cfg.image_w] {
            return Err(Error::shape("forward", &[3, cfg.image_h, cfg.image_w], v.image.shape()));
        }
        if v.slot >= cfg.num_cameras {
            return Err(Error::invalid(
                "forward",
                format!("camera slot {} out of range for {} cameras", v.slot, cfg.num_cameras),
            ));
        }
    }
    let shapes = cfg.scale_shapes();
    let delta_mlp = if cfg.positional.uses_rays() {
        Some(mlp(p, "delta")?)
    } else {
        None
    };
    let tau_mlp = mlp(p, "tau")?;
    let freqs = (cfg.positional == PositionalMode::Fourier)
        .then(|| fourier_frequencies(cfg.fourier_features, cfg.fourier_seed));

    // keys and values per scale, per camera
    let mut per_scale: Vec<Vec<CameraKeys>> = vec![Vec::with_capacity(views.len()); cfg.scales];
    for v in views {
        let img = g.constant(v.image.cast());
        let phis = encode_image(g, p, cfg, img)?;
        let tau = location_embedding(g, v.calib, &tau_mlp)?;
        for (r, (&phi, &(h, w))) in phis.iter().zip(&shapes).enumerate() {
            let delta = match cfg.positional {
                PositionalMode::None => None,
                PositionalMode::LearnedPerCamera => Some(p.var(&format!("pos.{r}.cam{}", v.slot))?),
                _ => Some(ray_embedding(
                    g,
                    v.calib,
                    h,
                    w,
                    cfg.image_h,
                    cfg.image_w,
                    delta_mlp.as_ref().expect("ray modes have a δ MLP"),
                    freqs.as_ref(),
                )?),
            };
            let keys = match (delta, cfg.keys_use_features) {
                (Some(d), true) => g.add(d, phi)?,
                (Some(d), false) => d,
                (None, _) => phi,
            };
            per_scale[r].push(CameraKeys { tau, keys, values: phi });
        }
    }

    let c0 = p.var("latent")?;
    let mut c = c0;
    let mut traces = Vec::new();
    let att = cfg.attention();
    for (r, cams) in per_scale.iter().enumerate() {
        let query = if cfg.refine_latent { c } else { c0 };
        let (next, tr) = cvt_block(g, c, query, cams, &block_weights(p, r)?, &att, trace)?;
        c = next;
        traces.extend(tr);
    }
    let logits = decode_map(g, p, cfg, c)?;
    Ok(ForwardOutput { logits, traces })
}

/// Inference without gradient bookkeeping; returns `C×out_h×out_w` logits.
pub fn predict(params: &ParamStore, cfg: &ModelConfig, views: &[CameraView]) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, false);
    let out = forward(&mut g, &p, cfg, views, false)?;
    Ok(g.value(out.logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [ModelConfig::desk(), ModelConfig::micro(), ModelConfig::full_scale()] {
            cfg.validate().unwrap();
        }
        assert!(ModelConfig::desk().num_params() < 1_000_000);
    }

    #[test]
    fn feature_scales() {
        assert_eq!(ModelConfig::desk().scale_shapes(), vec![(4, 8), (8, 16)]);
        assert_eq!(ModelConfig::full_scale().scale_shapes(), vec![(14, 30), (28, 60)]);
        let narrow = ModelConfig {
            image_w: 448,
            ..ModelConfig::full_scale()
        };
        assert_eq!(narrow.scale_shapes(), vec![(14, 28), (28, 56)]);
    }

    #[test]
    fn decoder_too_small_is_rejected() {
        let cfg = ModelConfig {
            out_h: 65,
            ..ModelConfig::desk()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn keys_need_something() {
        let cfg = ModelConfig {
            positional: PositionalMode::None,
            keys_use_features: false,
            ..ModelConfig::desk()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_complete() {
        let cfg = ModelConfig::micro();
        let a = init_params(&cfg, 1).unwrap();
        assert_eq!(a, init_params(&cfg, 1).unwrap());
        assert_ne!(a, init_params(&cfg, 2).unwrap());
        check_params(&cfg, &a).unwrap();
        assert_eq!(a.num_scalars(), cfg.num_params());
    }
}
