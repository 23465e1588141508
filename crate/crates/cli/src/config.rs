use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dloral_core::backbone::{ModelConfig, UNetConfig};
use dloral_core::cfr::{CfrConfig, Window};
use dloral_core::codec::LatentConfig;
use dloral_core::data::{DataConfig, DegradationRanges};
use dloral_core::flow::FlowConfig;
use dloral_core::losses::LossWeights;
use dloral_core::lora::LoraConfig;
use dloral_core::trainer::{AdamConfig, StageConfig, TrainMode};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

/// Every tunable in one flat namespace. Missing keys take the library
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub n_sequences: usize,
    pub height: usize,
    pub width: usize,
    pub length: usize,
    pub max_shift: i32,
    pub blur_sigma: [f64; 2],
    pub down_factors: Vec<usize>,
    pub noise_sigma: [f64; 2],
    pub compression_q: [u32; 2],

    pub mode: TrainMode,
    pub n_cons: usize,
    pub n_enh: usize,
    pub n_total: usize,
    pub s_t: usize,
    pub lr: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub checkpoint_every: usize,
    pub perceptual_seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    /// Loss weights; `lambda_csd` applies to the enhancement stage only.
    pub lambda_pix: f64,
    pub lambda_lpips: f64,
    pub lambda_opt: f64,
    pub lambda_csd: f64,

    pub latent_factor: usize,
    pub base_width: usize,
    pub cfr_k: usize,
    pub cfr_d: usize,
    /// Local retrieval radius; `null` searches the whole frame.
    pub cfr_radius: Option<usize>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_init_std: f64,
    pub flow_radius: usize,
    pub flow_temp: f64,

    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DataConfig::default();
        let s = StageConfig::default();
        let m = ModelConfig::default();
        let w = s.weights_enh;
        RunConfig {
            seed: s.seed,
            n_sequences: 16,
            height: d.height,
            width: d.width,
            length: d.length,
            max_shift: d.max_shift,
            blur_sigma: d.degradation.blur_sigma,
            down_factors: d.degradation.down_factors,
            noise_sigma: d.degradation.noise_sigma,
            compression_q: d.degradation.compression_q,
            mode: s.mode,
            n_cons: s.n_cons,
            n_enh: s.n_enh,
            n_total: s.n_total,
            s_t: s.s_t,
            lr: s.lr,
            batch: s.batch,
            seq_len: s.seq_len,
            checkpoint_every: s.checkpoint_every,
            perceptual_seed: s.perceptual_seed,
            adam_beta1: s.adam.beta1,
            adam_beta2: s.adam.beta2,
            adam_eps: s.adam.eps,
            lambda_pix: w.pix,
            lambda_lpips: w.lpips,
            lambda_opt: w.opt,
            lambda_csd: w.csd,
            latent_factor: m.latent.factor,
            base_width: m.unet.base_width,
            cfr_k: m.cfr.k,
            cfr_d: m.cfr.d,
            cfr_radius: match m.cfr.window {
                Window::Local { radius } => Some(radius),
                Window::Global => None,
            },
            lora_rank: m.lora.rank,
            lora_alpha: m.lora.alpha,
            lora_init_std: m.lora.init_std,
            flow_radius: m.flow.radius,
            flow_temp: m.flow.softmax_temp,
            data: None,
            out: None,
            checkpoint: None,
            input: None,
            pred: None,
            gt: None,
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid with the JSON file at `path` if given.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    /// Applies `key=value`; the value is parsed as JSON and falls back to a
    /// plain string.
    pub fn set(&mut self, assignment: &str) -> anyhow::Result<()> {
        let Some((key, raw)) = assignment.split_once('=') else {
            bail!(UsageError(format!("expected KEY=VALUE, got {assignment:?}")));
        };
        let mut obj = serde_json::to_value(&*self)?;
        let map = obj.as_object_mut().expect("config serializes as an object");
        if !map.contains_key(key) {
            bail!(UsageError(format!("unknown config key {key:?}")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        map.insert(key.to_string(), value);
        *self = serde_json::from_value(obj).map_err(|e| UsageError(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            height: self.height,
            width: self.width,
            length: self.length,
            max_shift: self.max_shift,
            degradation: DegradationRanges {
                blur_sigma: self.blur_sigma,
                down_factors: self.down_factors.clone(),
                noise_sigma: self.noise_sigma,
                compression_q: self.compression_q,
            },
        }
    }

    pub fn stage_config(&self) -> StageConfig {
        let w = LossWeights { pix: self.lambda_pix, lpips: self.lambda_lpips, opt: self.lambda_opt, csd: self.lambda_csd };
        StageConfig {
            n_cons: self.n_cons,
            n_enh: self.n_enh,
            n_total: self.n_total,
            s_t: self.s_t,
            lr: self.lr,
            batch: self.batch,
            seq_len: self.seq_len,
            weights_cons: LossWeights { csd: 0.0, ..w },
            weights_enh: w,
            mode: self.mode,
            adam: AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps },
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
            perceptual_seed: self.perceptual_seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let latent = LatentConfig { factor: self.latent_factor, ..LatentConfig::default() };
        let latent_channels = latent.latent_channels();
        ModelConfig {
            latent,
            flow: FlowConfig { radius: self.flow_radius, softmax_temp: self.flow_temp },
            cfr: CfrConfig {
                k: self.cfr_k,
                d: self.cfr_d,
                window: match self.cfr_radius {
                    Some(radius) => Window::Local { radius },
                    None => Window::Global,
                },
            },
            unet: UNetConfig { base_width: self.base_width, latent_channels },
            lora: LoraConfig { rank: self.lora_rank, alpha: self.lora_alpha, init_std: self.lora_init_std },
        }
    }

    /// Writes the effective config as `config.json` into `dir`.
    pub fn echo(&self, dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(dir)?;
        self.echo_to(&dir.join("config.json"))
    }

    pub fn echo_to(&self, path: &Path) -> anyhow::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_into_library_configs() {
        let c = RunConfig::default();
        assert_eq!(c.stage_config(), StageConfig::default());
        assert_eq!(c.model_config(), ModelConfig::default());
        assert_eq!(c.data_config(), DataConfig::default());
    }

    #[test]
    fn set_parses_json_and_strings() {
        let mut c = RunConfig::default();
        c.set("lr=0.001").unwrap();
        c.set("mode=joint_single").unwrap();
        c.set("cfr_radius=null").unwrap();
        c.set("out=/tmp/x").unwrap();
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.mode, TrainMode::JointSingle);
        assert_eq!(c.model_config().cfr.window, Window::Global);
        assert_eq!(c.out.as_deref(), Some(Path::new("/tmp/x")));
        assert!(c.set("bogus=1").is_err());
        assert!(c.set("lr=fast").is_err());
        assert!(c.set("lr").is_err());
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"n_total": 12}"#).unwrap();
        assert_eq!(c.n_total, 12);
        assert_eq!(c.lr, RunConfig::default().lr);
        assert!(serde_json::from_str::<RunConfig>(r#"{"nope": 1}"#).is_err());
    }
}
