//! Multi-head cross-view attention from map-view queries to the image keys
//! of every camera, with a single softmax across all cameras' keys.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Norm floor applied when queries and keys are normalized per head.
pub const COSINE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_head: usize,
    /// Logits are cosine similarities divided by this.
    pub temperature: f64,
}

/// Projection weights; `q`, `k` and `v` map `D → heads·d_head`, `o` maps
/// back to `D`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
    pub o_w: Var,
    pub o_b: Var,
}

/// What one camera contributes: its location embedding `τ` (length `D`),
/// keys (`N×D`) and values (`N×D`).
#[derive(Clone, Copy, Debug)]
pub struct CameraKeys {
    pub tau: Var,
    pub keys: Var,
    pub values: Var,
}

/// Attention weights recorded during a forward pass, in the caller's camera
/// order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub heads: usize,
    pub queries: usize,
    /// Number of keys contributed by each camera.
    pub camera_keys: Vec<usize>,
    /// `heads × queries × Σ camera_keys`, row-major.
    pub weights: Vec<f64>,
}

impl AttentionTrace {
    pub fn total_keys(&self) -> usize {
        self.camera_keys.iter().sum()
    }

    fn offset(&self, cam: usize) -> usize {
        self.camera_keys[..cam].iter().sum()
    }

    /// Weights of one head and query over camera `cam`'s keys.
    pub fn weights_for(&self, head: usize, query: usize, cam: usize) -> &[f64] {
        let start = (head * self.queries + query) * self.total_keys() + self.offset(cam);
        &self.weights[start..start + self.camera_keys[cam]]
    }

    /// Head-averaged weights of `query` over camera `cam`'s keys.
    pub fn mean_weights(&self, query: usize, cam: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.camera_keys[cam]];
        for h in 0..self.heads {
            for (o, w) in out.iter_mut().zip(self.weights_for(h, query, cam)) {
                *o += w / self.heads as f64;
            }
        }
        out
    }

    /// Head-averaged attention mass that `query` places on each camera.
    pub fn camera_mass(&self, query: usize) -> Vec<f64> {
        (0..self.camera_keys.len())
            .map(|k| self.mean_weights(query, k).iter().sum())
            .collect()
    }
}

fn lexicographic<T: Scalar>(a: &[T], b: &[T]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            x.to_f64()
                .unwrap_or(f64::NAN)
                .total_cmp(&y.to_f64().unwrap_or(f64::NAN))
        })
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

/// Processing order of the cameras, fixed by their inputs alone so that the
/// result does not depend on the order they were passed in.
fn canonical_order<T: Scalar>(g: &Graph<T>, cams: &[CameraKeys]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cams.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&cams[a], &cams[b]);
        lexicographic(g.value(ca.tau).data(), g.value(cb.tau).data())
            .then_with(|| lexicographic(g.value(ca.keys).data(), g.value(cb.keys).data()))
            .then_with(|| lexicographic(g.value(ca.values).data(), g.value(cb.values).data()))
    });
    order
}

/// Attends from `queries` (`Nq×D`, already normalized) to all cameras.
///
/// For camera `k` the queries are `queries − τ_k`. Per head, projected
/// queries and keys are normalized to unit length and the logits are their
/// cosine similarity over the temperature; one softmax runs over the keys of
/// every camera together. Returns the projected output (`Nq×D`) and, when
/// `trace` is set, the attention weights.
pub fn cross_view_attend<T: Scalar>(
    g: &mut Graph<T>,
    queries: Var,
    cams: &[CameraKeys],
    w: &AttentionWeights,
    cfg: &AttentionConfig,
    trace: bool,
) -> Result<(Var, Option<AttentionTrace>)> {
    if cams.is_empty() {
        return Err(Error::invalid("cross_view_attend", "at least one camera is required"));
    }
    if cfg.heads == 0 || cfg.d_head == 0 || !(cfg.temperature > 0.0) {
        return Err(Error::invalid(
            "cross_view_attend",
            "heads, d_head and temperature must be positive",
        ));
    }
    let [nq, dim] = *g.shape(queries) else {
        return Err(Error::invalid("cross_view_attend", "queries must be Nq×D"));
    };
    for c in cams {
        if g.shape(c.tau) != [dim] {
            return Err(Error::shape("cross_view_attend", &[dim], g.shape(c.tau)));
        }
        let ks = g.shape(c.keys).to_vec();
        if ks.len() != 2 || ks[1] != dim || g.shape(c.values) != ks.as_slice() {
            return Err(Error::shape("cross_view_attend", &ks, g.shape(c.values)));
        }
    }
    let (heads, dh) = (cfg.heads, cfg.d_head);
    let order = canonical_order(g, cams);
    let eps = T::lit(COSINE_EPS);

    let xq = g.matmul(queries, w.q_w)?;
    let mut q_proj = Vec::with_capacity(cams.len());
    let mut k_proj = Vec::with_capacity(cams.len());
    let mut v_proj = Vec::with_capacity(cams.len());
    for &k in &order {
        let cam = &cams[k];
        let tau = g.reshape(cam.tau, &[1, dim])?;
        let tq = g.matmul(tau, w.q_w)?;
        let tq = g.reshape(tq, &[heads * dh])?;
        let q = g.sub_row(xq, tq)?;
        q_proj.push(g.add_row(q, w.q_b)?);
        let kk = g.matmul(cam.keys, w.k_w)?;
        k_proj.push(g.add_row(kk, w.k_b)?);
        let vv = g.matmul(cam.values, w.v_w)?;
        v_proj.push(g.add_row(vv, w.v_b)?);
    }

    let inv_t = T::lit(1.0 / cfg.temperature);
    let mut head_out = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(if trace { heads } else { 0 });
    for h in 0..heads {
        let mut logits = Vec::with_capacity(cams.len());
        let mut values = Vec::with_capacity(cams.len());
        for i in 0..order.len() {
            let q = g.slice_cols(q_proj[i], h * dh, dh)?;
            let q = g.l2_normalize_rows(q, eps)?;
            let k = g.slice_cols(k_proj[i], h * dh, dh)?;
            let k = g.l2_normalize_rows(k, eps)?;
            logits.push(g.matmul_bt(q, k)?);
            values.push(g.slice_cols(v_proj[i], h * dh, dh)?);
        }
        let l = g.concat_cols(&logits)?;
        let l = g.scale(l, inv_t);
        let a = g.softmax(l, 1)?;
        if trace {
            weights.push(a);
        }
        let v = g.concat_rows(&values)?;
        head_out.push(g.matmul(a, v)?);
    }
    let out = g.concat_cols(&head_out)?;
    let out = g.matmul(out, w.o_w)?;
    let out = g.add_row(out, w.o_b)?;

    let trace = trace.then(|| {
        let camera_keys: Vec<usize> = cams.iter().map(|c| g.shape(c.keys)[0]).collect();
        let total: usize = camera_keys.iter().sum();
        // column offset of each camera in the canonical concatenation
        let mut sorted_offset = vec![0; cams.len()];
        let mut acc = 0;
        for &k in &order {
            sorted_offset[k] = acc;
            acc += camera_keys[k];
        }
        let mut flat = Vec::with_capacity(heads * nq * total);
        for a in &weights {
            let data = g.value(*a).data();
            for q in 0..nq {
                let row = &data[q * total..(q + 1) * total];
                for (k, &n) in camera_keys.iter().enumerate() {
                    let s = sorted_offset[k];
                    flat.extend(row[s..s + n].iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
                }
            }
        }
        AttentionTrace {
            heads,
            queries: nq,
            camera_keys,
            weights: flat,
        }
    });
    Ok((out, trace))
}

/// Layer-norm and MLP weights around one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct BlockWeights {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub attn: AttentionWeights,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub mlp_w0: Var,
    pub mlp_b0: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
}

/// One refinement step: `c' = c + attend(LN(q))`, `c'' = c' + MLP(LN(c'))`.
/// `query_source` is normally `c` itself.
pub fn cvt_block<T: Scalar>(
    g: &mut Graph<T>,
    c: Var,
    query_source: Var,
    cams: &[CameraKeys],
    w: &BlockWeights,
    cfg: &AttentionConfig,
    trace: bool,
) -> Result<(Var, Option<AttentionTrace>)> {
    let x = g.layer_norm(query_source, w.ln1_g, w.ln1_b)?;
    let (a, tr) = cross_view_attend(g, x, cams, &w.attn, cfg, trace)?;
    let c1 = g.add(c, a)?;
    let y = g.layer_norm(c1, w.ln2_g, w.ln2_b)?;
    let y = g.matmul(y, w.mlp_w0)?;
    let y = g.add_row(y, w.mlp_b0)?;
    let y = g.gelu(y);
    let y = g.matmul(y, w.mlp_w1)?;
    let y = g.add_row(y, w.mlp_b1)?;
    Ok((g.add(c1, y)?, tr))
}
