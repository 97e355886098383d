//! Runtime/memory scaling probe: one training step per bag size, wall time
//! and allocator high-water mark, with least-squares linearity fits.
//!
//! Peak memory comes from a counting global allocator that a binary opts
//! into; when it is not installed the probe degrades to a time-only report.

use crate::aggregator::ClassWeights;
use crate::error::{Error, Result};
use crate::metrics::{linear_fit, LinFit};
use crate::synth::mix_seed;
use crate::tensor::Tensor;
use crate::trainer::{tapfm_step, ModelState, TrainConfig};
use crate::vit::ViTConfig;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::Instant;

static CURRENT_BYTES: AtomicU64 = AtomicU64::new(0);
static PEAK_BYTES: AtomicU64 = AtomicU64::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

/// Global allocator wrapper tracking live bytes and their high-water mark.
/// Install with `#[global_allocator]` in a binary or test target.
pub struct CountingAlloc;

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = System.alloc(layout);
        if !p.is_null() {
            let cur = CURRENT_BYTES.fetch_add(layout.size() as u64, Ordering::Relaxed)
                + layout.size() as u64;
            PEAK_BYTES.fetch_max(cur, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT_BYTES.fetch_sub(layout.size() as u64, Ordering::Relaxed);
    }
}

/// Whether the counting allocator is active in this process.
pub fn allocator_installed() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

/// Reset the high-water mark to the current live size.
pub fn reset_peak() {
    PEAK_BYTES.store(CURRENT_BYTES.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// High-water mark of live bytes since the last reset.
pub fn peak_bytes() -> u64 {
    PEAK_BYTES.load(Ordering::Relaxed)
}

pub fn current_bytes() -> u64 {
    CURRENT_BYTES.load(Ordering::Relaxed)
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbePoint {
    pub k: usize,
    pub wall_seconds: f64,
    pub peak_bytes: Option<u64>,
    pub forward_flops: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub points: Vec<ProbePoint>,
    pub time_fit: LinFit,
    pub mem_fit: Option<LinFit>,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,wall_seconds,peak_bytes,forward_flops\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{}\n",
                p.k,
                p.wall_seconds,
                p.peak_bytes.map(|b| b.to_string()).unwrap_or_default(),
                p.forward_flops
            ));
        }
        s
    }
}

/// Random bag of K tiles for probing.
pub fn random_bag(k: usize, vit_cfg: &ViTConfig, seed: u64) -> Tensor<f32> {
    let ts = vit_cfg.tile_size;
    let c = vit_cfg.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..k * ts * ts * c).map(|_| rng.random::<f32>()).collect();
    Tensor::new(vec![k, ts, ts, c], data).expect("random bag shape")
}

/// Run one decoupled step per bag size (serially, to avoid timing
/// interference) and fit wall time and peak allocation against K.
pub fn scaling_probe(
    k_list: &[usize],
    vit_cfg: &ViTConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ProbeReport> {
    if k_list.len() < 3 || k_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "scaling_probe: need at least 3 strictly increasing bag sizes".into(),
        ));
    }
    let weights = ClassWeights::unit(1);
    let mut points = Vec::with_capacity(k_list.len());
    for (i, &k) in k_list.iter().enumerate() {
        let tiles = random_bag(k, vit_cfg, mix_seed(&[seed, k as u64]));
        let labels = vec![(i % 2) as f64];
        // warm-up pass so allocator pools and thread stacks do not attribute
        // one-time costs to the first K
        let mut warm_state = ModelState::init(vit_cfg, 1, mix_seed(&[seed, 1, k as u64]))?;
        tapfm_step(&tiles, &labels, &mut warm_state, cfg, &weights, 1.0)?;

        let mut state = ModelState::init(vit_cfg, 1, mix_seed(&[seed, 2, k as u64]))?;
        let mem_available = allocator_installed();
        reset_peak();
        let base = current_bytes();
        let t0 = Instant::now();
        tapfm_step(&tiles, &labels, &mut state, cfg, &weights, 1.0)?;
        let wall = t0.elapsed().as_secs_f64();
        let peak = if mem_available {
            Some(peak_bytes().saturating_sub(base))
        } else {
            None
        };
        points.push(ProbePoint {
            k,
            wall_seconds: wall,
            peak_bytes: peak,
            forward_flops: forward_flop_count(k, vit_cfg)?,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.k as f64).collect();
    let times: Vec<f64> = points.iter().map(|p| p.wall_seconds).collect();
    let time_fit = linear_fit(&xs, &times)?;
    let mem_fit = if points.iter().all(|p| p.peak_bytes.is_some()) {
        let ys: Vec<f64> = points
            .iter()
            .map(|p| p.peak_bytes.unwrap() as f64)
            .collect();
        Some(linear_fit(&xs, &ys)?)
    } else {
        None
    };
    Ok(ProbeReport {
        points,
        time_fit,
        mem_fit,
    })
}

/// Scalar-operation count of one backbone forward pass over a K-tile bag,
/// counted from the recorded graph. Exactly proportional to K because tiles
/// are processed independently.
pub fn forward_flop_count(k: usize, vit_cfg: &ViTConfig) -> Result<u64> {
    use crate::autograd::Graph;
    use crate::vit::{cls_attention_scores, forward_tiles, register_params, ViTParams};
    let tiles = random_bag(k, vit_cfg, 7);
    let params = ViTParams::<f32>::init(vit_cfg, 7)?;
    let mut g = Graph::new();
    let reg = register_params(&mut g, &params);
    let out = forward_tiles(&mut g, &tiles, &reg, vit_cfg)?;
    let _ = cls_attention_scores(&mut g, &out)?;
    Ok(g.flop_count())
}

/// Raise glibc's mmap/trim thresholds so large short-lived op buffers are
/// served from the heap and reused instead of being mmap'd and returned to
/// the OS on every free. Training steps allocate tens of megabytes of
/// transient activations; without this the page-fault churn dominates.
/// No-op off Linux.
pub fn tune_allocator() {
    #[cfg(target_os = "linux")]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 * 1024 * 1024);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    }
}
