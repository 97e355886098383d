//! Small pre-norm vision transformer mapping tiles to CLS embeddings while
//! exposing the last layer's CLS-row attention per head.

use crate::autograd::{Graph, Value};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub tile_size: usize,
    pub channels: usize,
    pub mlp_ratio: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        // Desk-scale default: a full training run finishes in minutes on CPU.
        ViTConfig {
            layers: 4,
            heads: 4,
            embed_dim: 64,
            patch_size: 8,
            tile_size: 32,
            channels: 3,
            mlp_ratio: 4,
        }
    }
}

impl ViTConfig {
    /// Tiny config used by gradient-check tests.
    pub fn toy() -> Self {
        ViTConfig {
            layers: 2,
            heads: 2,
            embed_dim: 16,
            patch_size: 4,
            tile_size: 8,
            channels: 1,
            mlp_ratio: 2,
        }
    }

    /// Small config compatible with the synthetic 32x32 RGB tiles; used by
    /// fast pipeline tests.
    pub fn toy_rgb32() -> Self {
        ViTConfig {
            layers: 2,
            heads: 2,
            embed_dim: 32,
            patch_size: 8,
            tile_size: 32,
            channels: 3,
            mlp_ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || self.patch_size == 0 || self.tile_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "tile_size {} must be a positive multiple of patch_size {}",
                self.tile_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("layers, channels, mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Patch tokens per tile (CLS excluded).
    pub fn num_patches(&self) -> usize {
        let g = self.tile_size / self.patch_size;
        g * g
    }

    /// Sequence length including CLS.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
}

/// Backbone parameters (θ_PFM).
#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams<T> {
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    /// Learned positional embeddings for the N patch tokens.
    pub pos: Tensor<T>,
    pub cls: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_gamma: Tensor<T>,
    pub final_beta: Tensor<T>,
}

impl<T: Scalar> ViTParams<T> {
    /// Truncated-normal (σ=0.02) projections, zero biases, zero-init CLS,
    /// unit layer-norm gains.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let n = cfg.num_patches();
        let hidden = d * cfg.mlp_ratio;
        let mut tn = |shape: Vec<usize>| trunc_normal::<T>(&mut rng, shape, 0.02);
        let blocks = (0..cfg.layers)
            .map(|_| BlockParams {
                ln1_gamma: Tensor::full(vec![d], T::ONE),
                ln1_beta: Tensor::zeros(vec![d]),
                wq: tn(vec![d, d]),
                bq: Tensor::zeros(vec![d]),
                wk: tn(vec![d, d]),
                bk: Tensor::zeros(vec![d]),
                wv: tn(vec![d, d]),
                bv: Tensor::zeros(vec![d]),
                wo: tn(vec![d, d]),
                bo: Tensor::zeros(vec![d]),
                ln2_gamma: Tensor::full(vec![d], T::ONE),
                ln2_beta: Tensor::zeros(vec![d]),
                mlp_w1: tn(vec![d, hidden]),
                mlp_b1: Tensor::zeros(vec![hidden]),
                mlp_w2: tn(vec![hidden, d]),
                mlp_b2: Tensor::zeros(vec![d]),
            })
            .collect();
        Ok(ViTParams {
            patch_w: tn(vec![cfg.patch_dim(), d]),
            patch_b: Tensor::zeros(vec![d]),
            pos: tn(vec![n, d]),
            cls: Tensor::zeros(vec![d]),
            blocks,
            final_gamma: Tensor::full(vec![d], T::ONE),
            final_beta: Tensor::zeros(vec![d]),
        })
    }

    /// Canonical (name, tensor) listing; the order is the contract shared by
    /// the optimizer, checkpoints and flattening.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("backbone.patch_w".into(), &self.patch_w),
            ("backbone.patch_b".into(), &self.patch_b),
            ("backbone.pos".into(), &self.pos),
            ("backbone.cls".into(), &self.cls),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("backbone.block{i}");
            out.push((format!("{p}.ln1_gamma"), &b.ln1_gamma));
            out.push((format!("{p}.ln1_beta"), &b.ln1_beta));
            out.push((format!("{p}.wq"), &b.wq));
            out.push((format!("{p}.bq"), &b.bq));
            out.push((format!("{p}.wk"), &b.wk));
            out.push((format!("{p}.bk"), &b.bk));
            out.push((format!("{p}.wv"), &b.wv));
            out.push((format!("{p}.bv"), &b.bv));
            out.push((format!("{p}.wo"), &b.wo));
            out.push((format!("{p}.bo"), &b.bo));
            out.push((format!("{p}.ln2_gamma"), &b.ln2_gamma));
            out.push((format!("{p}.ln2_beta"), &b.ln2_beta));
            out.push((format!("{p}.mlp_w1"), &b.mlp_w1));
            out.push((format!("{p}.mlp_b1"), &b.mlp_b1));
            out.push((format!("{p}.mlp_w2"), &b.mlp_w2));
            out.push((format!("{p}.mlp_b2"), &b.mlp_b2));
        }
        out.push(("backbone.final_gamma".into(), &self.final_gamma));
        out.push(("backbone.final_beta".into(), &self.final_beta));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.pos,
            &mut self.cls,
        ];
        for b in self.blocks.iter_mut() {
            out.push(&mut b.ln1_gamma);
            out.push(&mut b.ln1_beta);
            out.push(&mut b.wq);
            out.push(&mut b.bq);
            out.push(&mut b.wk);
            out.push(&mut b.bk);
            out.push(&mut b.wv);
            out.push(&mut b.bv);
            out.push(&mut b.wo);
            out.push(&mut b.bo);
            out.push(&mut b.ln2_gamma);
            out.push(&mut b.ln2_beta);
            out.push(&mut b.mlp_w1);
            out.push(&mut b.mlp_b1);
            out.push(&mut b.mlp_w2);
            out.push(&mut b.mlp_b2);
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ViTParams<U> {
        ViTParams {
            patch_w: self.patch_w.cast(),
            patch_b: self.patch_b.cast(),
            pos: self.pos.cast(),
            cls: self.cls.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_gamma: b.ln1_gamma.cast(),
                    ln1_beta: b.ln1_beta.cast(),
                    wq: b.wq.cast(),
                    bq: b.bq.cast(),
                    wk: b.wk.cast(),
                    bk: b.bk.cast(),
                    wv: b.wv.cast(),
                    bv: b.bv.cast(),
                    wo: b.wo.cast(),
                    bo: b.bo.cast(),
                    ln2_gamma: b.ln2_gamma.cast(),
                    ln2_beta: b.ln2_beta.cast(),
                    mlp_w1: b.mlp_w1.cast(),
                    mlp_b1: b.mlp_b1.cast(),
                    mlp_w2: b.mlp_w2.cast(),
                    mlp_b2: b.mlp_b2.cast(),
                })
                .collect(),
            final_gamma: self.final_gamma.cast(),
            final_beta: self.final_beta.cast(),
        }
    }

    /// Flatten all parameters into one f64 vector (canonical order).
    pub fn flatten_f64(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.named_tensors() {
            out.extend(t.data().iter().map(|v| v.to_f64()));
        }
        out
    }

    /// Rebuild parameters from a flat f64 vector (inverse of `flatten_f64`).
    pub fn from_flat_f64(&self, flat: &[f64]) -> ViTParams<T> {
        let mut p = self.clone();
        let mut offset = 0usize;
        for t in p.tensors_mut() {
            let n = t.numel();
            for (dst, src) in t.data_mut().iter_mut().zip(&flat[offset..offset + n]) {
                *dst = T::from_f64(*src);
            }
            offset += n;
        }
        debug_assert_eq!(offset, flat.len());
        p
    }
}

fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, sigma: f64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        // Box-Muller, rejecting samples beyond 2σ.
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        for z in [r * c, r * s] {
            if z.abs() <= 2.0 && data.len() < numel {
                data.push(T::from_f64(z * sigma));
            }
        }
    }
    Tensor::new(shape, data).expect("trunc_normal shape")
}

/// Backbone parameter leaves registered on a graph, in canonical order.
pub struct RegisteredViT<T> {
    pub values: Vec<Value<T>>,
}

/// Register every backbone tensor as a requires-grad leaf.
pub fn register_params<T: Scalar>(graph: &mut Graph<T>, params: &ViTParams<T>) -> RegisteredViT<T> {
    let values = params
        .named_tensors()
        .into_iter()
        .map(|(_, t)| graph.leaf(t.clone(), true))
        .collect();
    RegisteredViT { values }
}

/// Forward output: per-tile CLS features plus the last layer's CLS-row
/// attention over patch tokens (both attached to the graph).
pub struct BackboneOutput<T> {
    /// Z ∈ R^{K×D}, row i = CLS embedding of tile i.
    pub features: Value<T>,
    /// Post-softmax attention from CLS to each patch token: K×H×N.
    pub cls_attention: Value<T>,
    /// The CLS self-attention entry per head (K×H), kept for row-sum checks.
    pub cls_self_attention: Tensor<T>,
}

struct ParamCursor<'a, T> {
    values: &'a [Value<T>],
    idx: usize,
}

impl<'a, T> ParamCursor<'a, T> {
    fn next(&mut self) -> &'a Value<T> {
        let v = &self.values[self.idx];
        self.idx += 1;
        v
    }
}

/// Standardize each tile to zero mean, unit variance. The backbone's input
/// transform: raw tiles keep their [0,1] storage range, but the projection
/// should see contrast, not the shared intensity offset (which otherwise
/// drowns out tile content in the CLS embedding at random init).
pub fn standardize_tiles<T: Scalar>(tiles: &Tensor<T>) -> Tensor<T> {
    let s = tiles.shape();
    let stride: usize = s[1..].iter().product();
    let mut out = tiles.clone();
    for tile in out.data_mut().chunks_mut(stride.max(1)) {
        let n = T::from_f64(tile.len() as f64);
        let mut mean = T::ZERO;
        for &v in tile.iter() {
            mean += v;
        }
        mean = mean / n;
        let mut var = T::ZERO;
        for &v in tile.iter() {
            let c = v - mean;
            var += c * c;
        }
        var = var / n;
        let inv = T::ONE / var.sqrt().maxv(T::from_f64(1e-6));
        for v in tile.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Extract P×P×C patches from K tiles into a [K·N, P²C] matrix. Pure data
/// movement; gradients never flow into the raw pixels.
pub fn patchify<T: Scalar>(tiles: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let s = tiles.shape();
    if s.len() != 4 || s[1] != cfg.tile_size || s[2] != cfg.tile_size || s[3] != cfg.channels {
        return Err(Error::BadShape {
            op: "patchify",
            shape: s.to_vec(),
            reason: format!(
                "expected [K, {}, {}, {}]",
                cfg.tile_size, cfg.tile_size, cfg.channels
            ),
        });
    }
    let k = s[0];
    let p = cfg.patch_size;
    let c = cfg.channels;
    let grid = cfg.tile_size / p;
    let n = grid * grid;
    let pd = cfg.patch_dim();
    let mut out = Tensor::zeros(vec![k * n, pd]);
    let ts = cfg.tile_size;
    for ki in 0..k {
        for gy in 0..grid {
            for gx in 0..grid {
                let row = ki * n + gy * grid + gx;
                let dst = &mut out.data_mut()[row * pd..(row + 1) * pd];
                for py in 0..p {
                    let src_base = ((ki * ts + gy * p + py) * ts + gx * p) * c;
                    let dst_base = py * p * c;
                    dst[dst_base..dst_base + p * c]
                        .copy_from_slice(&tiles.data()[src_base..src_base + p * c]);
                }
            }
        }
    }
    Ok(out)
}

/// Embed tiles into token sequences: projected patches + positional
/// embeddings with the learned CLS token prepended at index 0.
/// Returns [K, N+1, D].
pub fn patchify_embed<T: Scalar>(
    graph: &mut Graph<T>,
    tiles: &Tensor<T>,
    reg: &RegisteredViT<T>,
    cfg: &ViTConfig,
) -> Result<Value<T>> {
    let k = tiles.shape()[0];
    let n = cfg.num_patches();
    let d = cfg.embed_dim;
    let mut cur = ParamCursor {
        values: &reg.values,
        idx: 0,
    };
    let patch_w = cur.next();
    let patch_b = cur.next();
    let pos = cur.next();
    let cls = cur.next();

    let patches = graph.leaf(patchify(&standardize_tiles(tiles), cfg)?, false);
    let proj = graph.matmul(&patches, patch_w)?;
    let proj = graph.add(&proj, patch_b)?;
    let tokens = graph.reshape(&proj, vec![k, n, d])?;
    let tokens = graph.add(&tokens, pos)?; // pos [N,D] broadcast over tiles

    let cls3 = graph.reshape(cls, vec![1, 1, d])?;
    let cls_rep = graph.repeat_axis(&cls3, 0, k)?;
    graph.concat(&[&cls_rep, &tokens], 1)
}

/// Run the full backbone over a bag of tiles.
pub fn forward_tiles<T: Scalar>(
    graph: &mut Graph<T>,
    tiles: &Tensor<T>,
    reg: &RegisteredViT<T>,
    cfg: &ViTConfig,
) -> Result<BackboneOutput<T>> {
    if tiles.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptyBag);
    }
    let k = tiles.shape()[0];
    let s = cfg.seq_len();
    let n = cfg.num_patches();
    let d = cfg.embed_dim;
    let h = cfg.heads;
    let dh = cfg.head_dim();
    let eps = T::from_f64(1e-5);
    let inv_sqrt_dh = T::from_f64(1.0 / (dh as f64).sqrt());

    let mut x = patchify_embed(graph, tiles, reg, cfg)?; // [K,S,D]
    let mut cur = ParamCursor {
        values: &reg.values,
        idx: 4,
    };
    let mut last_attn: Option<Value<T>> = None;

    for _ in 0..cfg.layers {
        let ln1_g = cur.next();
        let ln1_b = cur.next();
        let wq = cur.next();
        let bq = cur.next();
        let wk = cur.next();
        let bk = cur.next();
        let wv = cur.next();
        let bv = cur.next();
        let wo = cur.next();
        let bo = cur.next();
        let ln2_g = cur.next();
        let ln2_b = cur.next();
        let w1 = cur.next();
        let b1 = cur.next();
        let w2 = cur.next();
        let b2 = cur.next();

        let normed = graph.layer_norm(&x, ln1_g, ln1_b, eps)?;
        let flat = graph.reshape(&normed, vec![k * s, d])?;
        let to_heads = |graph: &mut Graph<T>, w: &Value<T>, b: &Value<T>, flat: &Value<T>| {
            let p = graph.matmul(flat, w)?;
            let p = graph.add(&p, b)?;
            let p = graph.reshape(&p, vec![k, s, h, dh])?;
            let p = graph.permute(&p, &[0, 2, 1, 3])?;
            graph.reshape(&p, vec![k * h, s, dh])
        };
        let q = to_heads(graph, wq, bq, &flat)?;
        let kk = to_heads(graph, wk, bk, &flat)?;
        let v = to_heads(graph, wv, bv, &flat)?;

        let scores = graph.batch_matmul_nt(&q, &kk)?; // [K·H, S, S]
        let scores = graph.scale(&scores, inv_sqrt_dh)?;
        let attn = graph.softmax(&scores, 2)?;
        let ctx = graph.batch_matmul(&attn, &v)?; // [K·H, S, dh]
        let ctx = graph.reshape(&ctx, vec![k, h, s, dh])?;
        let ctx = graph.permute(&ctx, &[0, 2, 1, 3])?;
        let ctx = graph.reshape(&ctx, vec![k * s, d])?;
        let o = graph.matmul(&ctx, wo)?;
        let o = graph.add(&o, bo)?;
        let o = graph.reshape(&o, vec![k, s, d])?;
        x = graph.add(&x, &o)?;

        let normed2 = graph.layer_norm(&x, ln2_g, ln2_b, eps)?;
        let flat2 = graph.reshape(&normed2, vec![k * s, d])?;
        let f1 = graph.matmul(&flat2, w1)?;
        let f1 = graph.add(&f1, b1)?;
        let f1 = graph.gelu(&f1)?;
        let f2 = graph.matmul(&f1, w2)?;
        let f2 = graph.add(&f2, b2)?;
        let f2 = graph.reshape(&f2, vec![k, s, d])?;
        x = graph.add(&x, &f2)?;

        last_attn = Some(attn);
    }

    let final_g = cur.next();
    let final_b = cur.next();
    let xf = graph.layer_norm(&x, final_g, final_b, eps)?;
    let cls_out = graph.slice(&xf, 1, 0, 1)?;
    let features = graph.reshape(&cls_out, vec![k, d])?;

    let attn = last_attn.expect("at least one layer");
    let cls_row = graph.slice(&attn, 1, 0, 1)?; // [K·H, 1, S]
    let cls_row = graph.reshape(&cls_row, vec![k, h, s])?;
    let cls_attention = graph.slice(&cls_row, 2, 1, n)?; // patch columns
    let cls_self = graph.slice(&cls_row, 2, 0, 1)?;
    let cls_self_attention = cls_self.data().reshape(vec![k, h])?;

    Ok(BackboneOutput {
        features,
        cls_attention,
        cls_self_attention,
    })
}

/// Raw attention scores a ∈ R^K: per tile, CLS attention averaged over heads
/// and patch tokens. Stays attached to the backbone graph.
pub fn cls_attention_scores<T: Scalar>(
    graph: &mut Graph<T>,
    out: &BackboneOutput<T>,
) -> Result<Value<T>> {
    let per_head = graph.mean_axis(&out.cls_attention, 2)?; // [K,H]
    graph.mean_axis(&per_head, 1) // [K]
}
