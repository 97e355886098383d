//! Frozen-feature reference baselines: ABMIL and mean pooling trained on
//! features from a fixed backbone. Features are extracted once per bag and
//! cached, so these runs are cheap; no augmentation is applied.

use crate::aggregator::{
    abmil_forward, meanpool_forward, AbmilParams, ClassWeights,
};
use crate::autograd::Graph;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, AdamConfig, AdamState, CosineWarmRestarts};
use crate::synth::{fnv1a, mix_seed, sample_bag_tiles};
use crate::tensor::Tensor;
use crate::trainer::{extract_features, split_metric, train_split_weights, TaskKind};
use crate::vit::{ViTConfig, ViTParams};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Abmil,
    MeanPool,
}

#[derive(Clone, Debug)]
pub struct BaselineConfig {
    pub epochs: u32,
    pub lr: f64,
    pub weight_decay: f64,
    pub tiles_per_bag: usize,
    pub attn_dim: usize,
    pub seed: u64,
    pub eval_chunk: usize,
    pub sched_t0: u32,
    pub sched_t_mult: u32,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 20,
            lr: 5e-3,
            weight_decay: 1e-4,
            tiles_per_bag: 50,
            attn_dim: 64,
            seed: 42,
            eval_chunk: 256,
            sched_t0: 10,
            sched_t_mult: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BaselineOutcome {
    pub best_epoch: u32,
    pub best_metric: f64,
    pub history: Vec<f64>,
}

struct CachedBag {
    bag_id: String,
    features: Tensor<f32>,
    labels: Vec<f64>,
    labels_u8: Vec<u8>,
}

fn cache_split(
    dataset: &Dataset,
    split: Split,
    backbone: &ViTParams<f32>,
    vit_cfg: &ViTConfig,
    chunk: usize,
) -> Result<Vec<CachedBag>> {
    let recs = dataset.split(split);
    if recs.is_empty() {
        return Err(Error::Data(format!("split '{}' is empty", split.as_str())));
    }
    let out: Vec<Result<CachedBag>> = recs
        .par_iter()
        .map(|rec| {
            let tiles = crate::data::read_bag_tiles(&dataset.bag_path(rec))?;
            let (features, _) = extract_features(backbone, vit_cfg, &tiles, chunk)?;
            Ok(CachedBag {
                bag_id: rec.bag_id.clone(),
                features,
                labels: rec.labels.iter().map(|&v| v as f64).collect(),
                labels_u8: rec.labels.clone(),
            })
        })
        .collect();
    out.into_iter().collect()
}

fn gather_rows(features: &Tensor<f32>, indices: &[usize]) -> Tensor<f32> {
    let d = features.shape()[1];
    let mut out = Tensor::zeros(vec![indices.len(), d]);
    for (row, &i) in indices.iter().enumerate() {
        out.data_mut()[row * d..(row + 1) * d]
            .copy_from_slice(&features.data()[i * d..(i + 1) * d]);
    }
    out
}

fn score_bag(
    kind: BaselineKind,
    features: &Tensor<f32>,
    abmil: &AbmilParams<f32>,
    weights: &ClassWeights,
) -> Result<Vec<f64>> {
    let labels = vec![0.0; abmil.classifier.c_out()];
    let mut g = Graph::new();
    let z = g.leaf(features.clone(), false);
    let v = g.leaf(abmil.v.clone(), false);
    let wa = g.leaf(abmil.w_attn.clone(), false);
    let w = g.leaf(abmil.classifier.w.clone(), false);
    let b = g.leaf(abmil.classifier.b.clone(), false);
    let fwd = match kind {
        BaselineKind::Abmil => abmil_forward(&mut g, &z, &v, &wa, &w, &b, &labels, weights)?,
        BaselineKind::MeanPool => meanpool_forward(&mut g, &z, &w, &b, &labels, weights)?,
    };
    Ok(fwd.probs.data().data().iter().map(|&p| p as f64).collect())
}

/// Train a baseline MIL head on frozen backbone features; model selection by
/// validation metric, same sampling protocol as the main trainer.
pub fn train_baseline(
    dataset: &Dataset,
    backbone: &ViTParams<f32>,
    vit_cfg: &ViTConfig,
    kind: BaselineKind,
    task: TaskKind,
    cfg: &BaselineConfig,
) -> Result<(AbmilParams<f32>, BaselineOutcome)> {
    let weights = train_split_weights(dataset, task)?;
    let train = cache_split(dataset, Split::Train, backbone, vit_cfg, cfg.eval_chunk)?;
    let val = cache_split(dataset, Split::Val, backbone, vit_cfg, cfg.eval_chunk)?;
    let classes = dataset.num_classes();
    let d = vit_cfg.embed_dim;
    let mut params = AbmilParams::<f32>::init(classes, d, cfg.attn_dim, mix_seed(&[cfg.seed, 0xab1]));
    let shapes: Vec<Vec<usize>> = match kind {
        BaselineKind::Abmil => vec![
            params.v.shape().to_vec(),
            params.w_attn.shape().to_vec(),
            params.classifier.w.shape().to_vec(),
            params.classifier.b.shape().to_vec(),
        ],
        BaselineKind::MeanPool => vec![
            params.classifier.w.shape().to_vec(),
            params.classifier.b.shape().to_vec(),
        ],
    };
    let mut opt = AdamState::<f32>::for_shapes(&shapes);
    let adam = AdamConfig::new(cfg.lr, cfg.weight_decay);
    let sched = CosineWarmRestarts {
        t0: cfg.sched_t0,
        t_mult: cfg.sched_t_mult,
    };

    let mut outcome = BaselineOutcome {
        best_epoch: 0,
        best_metric: f64::NEG_INFINITY,
        history: Vec::new(),
    };
    let mut best_params = params.clone();
    for epoch in 0..cfg.epochs {
        let lr_factor = sched.factor(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0xba5e, epoch as u64]));
        order.shuffle(&mut rng);
        for &bi in &order {
            let bag = &train[bi];
            let k = bag.features.shape()[0];
            let mut sample_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                cfg.seed,
                epoch as u64,
                fnv1a(&bag.bag_id),
                0x5a4f1e,
            ]));
            let idx = sample_bag_tiles(k, cfg.tiles_per_bag, &mut sample_rng);
            let feats = gather_rows(&bag.features, &idx);
            let mut g = Graph::new();
            let z = g.leaf(feats, false);
            let v = g.leaf(params.v.clone(), true);
            let wa = g.leaf(params.w_attn.clone(), true);
            let w = g.leaf(params.classifier.w.clone(), true);
            let b = g.leaf(params.classifier.b.clone(), true);
            let fwd = match kind {
                BaselineKind::Abmil => {
                    abmil_forward(&mut g, &z, &v, &wa, &w, &b, &bag.labels, &weights)?
                }
                BaselineKind::MeanPool => {
                    meanpool_forward(&mut g, &z, &w, &b, &bag.labels, &weights)?
                }
            };
            if !fwd.loss.data().item().is_finite() {
                continue;
            }
            g.backward(&fwd.loss, None)?;
            let zero = |shape: &[usize]| Tensor::<f32>::zeros(shape.to_vec());
            match kind {
                BaselineKind::Abmil => {
                    let gv = g.grad(&v).cloned().unwrap_or_else(|| zero(params.v.shape()));
                    let gwa = g
                        .grad(&wa)
                        .cloned()
                        .unwrap_or_else(|| zero(params.w_attn.shape()));
                    let gw = g
                        .grad(&w)
                        .cloned()
                        .unwrap_or_else(|| zero(params.classifier.w.shape()));
                    let gb = g
                        .grad(&b)
                        .cloned()
                        .unwrap_or_else(|| zero(params.classifier.b.shape()));
                    let mut ps = params.tensors_mut();
                    adamw_step(&mut ps, &[&gv, &gwa, &gw, &gb], &mut opt, &adam, lr_factor);
                }
                BaselineKind::MeanPool => {
                    let gw = g
                        .grad(&w)
                        .cloned()
                        .unwrap_or_else(|| zero(params.classifier.w.shape()));
                    let gb = g
                        .grad(&b)
                        .cloned()
                        .unwrap_or_else(|| zero(params.classifier.b.shape()));
                    let mut ps = params.classifier.tensors_mut();
                    adamw_step(&mut ps, &[&gw, &gb], &mut opt, &adam, lr_factor);
                }
            }
        }

        let probs: Vec<Vec<f64>> = val
            .iter()
            .map(|bag| score_bag(kind, &bag.features, &params, &weights))
            .collect::<Result<_>>()?;
        let labels: Vec<Vec<u8>> = val.iter().map(|b| b.labels_u8.clone()).collect();
        let report = split_metric(&probs, &labels, task)?;
        outcome.history.push(report.macro_auc);
        if report.macro_auc > outcome.best_metric {
            outcome.best_metric = report.macro_auc;
            outcome.best_epoch = epoch;
            best_params = params.clone();
        }
    }
    Ok((best_params, outcome))
}

/// Score a split with a trained baseline head over frozen features.
pub fn score_baseline_split(
    dataset: &Dataset,
    split: Split,
    backbone: &ViTParams<f32>,
    vit_cfg: &ViTConfig,
    kind: BaselineKind,
    params: &AbmilParams<f32>,
    task: TaskKind,
    eval_chunk: usize,
) -> Result<f64> {
    let weights = ClassWeights::unit(params.classifier.c_out());
    let cached = cache_split(dataset, split, backbone, vit_cfg, eval_chunk)?;
    let probs: Vec<Vec<f64>> = cached
        .iter()
        .map(|bag| score_bag(kind, &bag.features, params, &weights))
        .collect::<Result<_>>()?;
    let labels: Vec<Vec<u8>> = cached.iter().map(|b| b.labels_u8.clone()).collect();
    Ok(split_metric(&probs, &labels, task)?.macro_auc)
}

/// The frozen backbone used by baseline comparisons: a fresh random
/// initialization with the same seed derivation as the main trainer.
pub fn frozen_random_backbone(vit_cfg: &ViTConfig, seed: u64) -> Result<ViTParams<f32>> {
    ViTParams::init(vit_cfg, mix_seed(&[seed, 0xb0de]))
}
