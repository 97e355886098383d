//! Ablation harness: λ and tiles-per-bag sweeps with log-linear convergence
//! fits, and the decoupled-vs-joint update-direction stability report.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{fit_log_linear, FitRecord};
use crate::trainer::{train, ModelState, TrainConfig, TrainMode};
use crate::vit::ViTConfig;
use serde::Serialize;
use std::fs;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Lambda,
    Tiles,
    Mode,
}

impl SweepKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepKind::Lambda),
            "tiles" => Ok(SweepKind::Tiles),
            "mode" => Ok(SweepKind::Mode),
            other => Err(Error::Config(format!("unknown sweep '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub fit: Option<FitRecord>,
    pub best_val_metric: f64,
    pub best_epoch: u32,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityRow {
    pub mode: String,
    pub mean_update_cosine: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub stability: Option<Vec<StabilityRow>>,
}

impl SweepOutcome {
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("value,a,b,r2,best_val_metric,best_epoch,error\n");
        for r in &self.rows {
            let (a, b, r2) = match &r.fit {
                Some(f) => (f.a.to_string(), f.b.to_string(), f.r2.to_string()),
                None => (String::new(), String::new(), String::new()),
            };
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.value,
                a,
                b,
                r2,
                r.best_val_metric,
                r.best_epoch,
                r.error.clone().unwrap_or_default()
            ));
        }
        s
    }

    pub fn stability_csv(&self) -> Option<String> {
        let rows = self.stability.as_ref()?;
        let mut s = String::from("mode,mean_update_cosine,steps\n");
        for r in rows {
            s.push_str(&format!("{},{},{}\n", r.mode, r.mean_update_cosine, r.steps));
        }
        Some(s)
    }
}

/// Tracks the mean cosine similarity between successive θ_PFM update vectors.
struct UpdateTracker {
    prev_theta: Option<Vec<f32>>,
    prev_delta: Option<Vec<f64>>,
    cos_sum: f64,
    count: u64,
}

impl UpdateTracker {
    fn new() -> Self {
        UpdateTracker {
            prev_theta: None,
            prev_delta: None,
            cos_sum: 0.0,
            count: 0,
        }
    }

    fn observe(&mut self, state: &ModelState) {
        let theta: Vec<f32> = state
            .backbone
            .named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect();
        if let Some(prev) = &self.prev_theta {
            let delta: Vec<f64> = theta
                .iter()
                .zip(prev)
                .map(|(a, b)| (*a - *b) as f64)
                .collect();
            if let Some(pd) = &self.prev_delta {
                let dot: f64 = delta.iter().zip(pd).map(|(a, b)| a * b).sum();
                let na: f64 = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb: f64 = pd.iter().map(|v| v * v).sum::<f64>().sqrt();
                if na > 1e-30 && nb > 1e-30 {
                    self.cos_sum += dot / (na * nb);
                    self.count += 1;
                }
            }
            self.prev_delta = Some(delta);
        }
        self.prev_theta = Some(theta);
    }

    fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.cos_sum / self.count as f64
        }
    }
}

/// Fit window for convergence rates (1-based epochs 2..=20, clipped to the
/// run length).
pub fn fit_window(epochs: u32) -> (usize, usize) {
    (2, (epochs as usize).min(20).max(3))
}

/// One training run per value with a shared seed; per-run metrics land in
/// `<out_dir>/<label>/`. A failed sub-run is recorded and the sweep
/// continues.
pub fn run_sweep(
    dataset: &Dataset,
    vit_cfg: &ViTConfig,
    base: &TrainConfig,
    kind: SweepKind,
    values: &[String],
    out_dir: Option<&Path>,
) -> Result<SweepOutcome> {
    if values.is_empty() {
        return Err(Error::Config("sweep values list is empty".into()));
    }
    let mut rows = Vec::new();
    let mut stability = if kind == SweepKind::Mode {
        Some(Vec::new())
    } else {
        None
    };
    for value in values {
        let mut cfg = base.clone();
        let label = match kind {
            SweepKind::Lambda => {
                cfg.lambda = value
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad lambda '{value}': {e}")))?;
                format!("lambda_{value}")
            }
            SweepKind::Tiles => {
                cfg.tiles_per_bag = value
                    .parse::<usize>()
                    .map_err(|e| Error::Config(format!("bad tile count '{value}': {e}")))?;
                format!("tiles_{value}")
            }
            SweepKind::Mode => {
                cfg.mode = match value.as_str() {
                    "decoupled" => TrainMode::Decoupled,
                    "joint" => TrainMode::Joint,
                    other => return Err(Error::Config(format!("bad mode '{other}'"))),
                };
                format!("mode_{value}")
            }
        };
        let run_dir = out_dir.map(|d| d.join(&label));
        let mut tracker = UpdateTracker::new();
        let result = train(dataset, vit_cfg, &cfg, run_dir.as_deref(), |state, _| {
            if kind == SweepKind::Mode {
                tracker.observe(state);
            }
        });
        match result {
            Ok((_state, outcome)) => {
                let losses: Vec<f64> = outcome.history.iter().map(|h| h.mean_l_agg).collect();
                let (k0, k1) = fit_window(cfg.epochs);
                let fit = fit_log_linear(&losses, k0, k1).ok();
                rows.push(SweepRow {
                    value: value.clone(),
                    fit,
                    best_val_metric: outcome.best_metric,
                    best_epoch: outcome.best_epoch,
                    error: None,
                });
                if let Some(st) = stability.as_mut() {
                    st.push(StabilityRow {
                        mode: value.clone(),
                        mean_update_cosine: tracker.mean(),
                        steps: tracker.count,
                    });
                }
            }
            Err(e) => {
                rows.push(SweepRow {
                    value: value.clone(),
                    fit: None,
                    best_val_metric: f64::NAN,
                    best_epoch: 0,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let outcome = SweepOutcome { rows, stability };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.csv"), outcome.summary_csv())?;
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&outcome)?,
        )?;
        if let Some(csv) = outcome.stability_csv() {
            fs::write(dir.join("stability.csv"), csv)?;
        }
    }
    Ok(outcome)
}
