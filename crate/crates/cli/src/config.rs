use std::path::{Path, PathBuf};

use clap::Args;
use gridplan::model::{ModelConfig, TrainConfig};
use gridplan::planner::Variant;
use gridplan::scene::GridSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// Everything a subcommand may read, after merging defaults, file and flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base model size: "default", "desk" or "tiny".
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Ego position noise for synthesis, meters.
    pub pos_sigma: f64,
    /// Ego heading noise for synthesis, degrees.
    pub heading_sigma_deg: f64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_preset("default").expect("default preset exists")
    }
}

impl RunConfig {
    pub fn for_preset(name: &str) -> Option<Self> {
        let model = match name {
            "default" => ModelConfig::default(),
            "desk" => ModelConfig::desk(),
            "tiny" => ModelConfig::tiny(),
            _ => return None,
        };
        Some(Self {
            preset: name.to_string(),
            model,
            train: TrainConfig::default(),
            pos_sigma: 0.5,
            heading_sigma_deg: 2.0,
            threads: 1,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.threads == 0 {
            return Err(CliError::Usage("threads must be at least 1".into()));
        }
        if !(self.pos_sigma >= 0.0 && self.heading_sigma_deg >= 0.0) {
            return Err(CliError::Usage("noise sigmas must be non-negative".into()));
        }
        Ok(())
    }
}

/// Flags shared by every subcommand. Unset flags leave the file or default value.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON config file merged over the defaults
    #[arg(long, global = true, env = "GRIDPLAN_CONFIG")]
    pub config: Option<PathBuf>,
    /// Model size preset: default, desk or tiny
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Waypoints per trajectory (H)
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    /// Waypoint spacing in meters
    #[arg(long, global = true)]
    pub spacing: Option<f64>,
    /// Past plan rows (P)
    #[arg(long, global = true)]
    pub past: Option<usize>,
    /// Future plan rows (F)
    #[arg(long, global = true)]
    pub future: Option<usize>,
    /// Latent modes (K)
    #[arg(long, global = true)]
    pub modes: Option<usize>,
    /// Grid resolution in pixels per meter (D)
    #[arg(long, global = true)]
    pub resolution: Option<f64>,
    /// Meters from the ego to the crop edge (L_max); crop side L = 2 D L_max
    #[arg(long, global = true)]
    pub range: Option<f64>,
    /// Weight of the MSE loss term (lambda)
    #[arg(long, global = true)]
    pub mse_weight: Option<f64>,
    /// Plan variant: PF, STPF or STCPF
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Adam learning rate
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Training epochs
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Minibatch size
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Seed for synthesis, initialization and shuffling
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

/// Recursively overlay `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

fn read_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let file = self.config.as_deref().map(read_file).transpose()?;
        let preset = self
            .preset
            .clone()
            .or_else(|| file.as_ref()?.get("preset")?.as_str().map(String::from))
            .unwrap_or_else(|| "default".into());
        let base = RunConfig::for_preset(&preset)
            .ok_or_else(|| CliError::Usage(format!("unknown preset {preset:?} (expected default, desk or tiny)")))?;
        let mut value = serde_json::to_value(&base).expect("config serializes");
        if let Some(f) = file {
            merge(&mut value, f);
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.preset = preset;
        self.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        let m = &mut cfg.model;
        set(&mut m.horizon, self.horizon);
        set(&mut m.spacing, self.spacing);
        set(&mut m.past, self.past);
        set(&mut m.future, self.future);
        set(&mut m.modes, self.modes);
        set(&mut m.mse_weight, self.mse_weight);
        if self.resolution.is_some() || self.range.is_some() {
            let d = self.resolution.unwrap_or(m.grid.resolution);
            let r = self.range.unwrap_or(m.grid.horizon);
            m.grid = GridSpec::new(d, r).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        if let Some(v) = &self.variant {
            m.variant = v.parse::<Variant>().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        let t = &mut cfg.train;
        set(&mut t.lr, self.lr);
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.seed, self.seed);
        set(&mut cfg.threads, self.threads);
        Ok(())
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}
