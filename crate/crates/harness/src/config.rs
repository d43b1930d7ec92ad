//! Run configuration and its flat `key = value` grammar.
//!
//! A config file is TOML restricted to dotted keys with scalar values
//! (`cache.n = 2`, `swap.mode = "async"`). Every key can also be given on the
//! command line as `--set key=value`, which is applied after the file.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::Serialize;

use stagecache_core::chunk::{ChunkSpec, Halo, TileGrid};
use stagecache_core::codec::CodecConfig;
use stagecache_core::denoiser::{pass_blocks, BlockId, PassKind, UNet, UNetConfig};
use stagecache_core::ledger::ClockMode;
use stagecache_core::sampler::SamplerKind;
use stagecache_core::swap::TransferEngine;
use stagecache_core::Shape5;

use crate::error::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Pure-noise initial latents.
    Text,
    /// Encode a conditioning frame and noise it to the first timestep.
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SwapMode {
    Off,
    Sync,
    Async,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwapConfig {
    pub mode: SwapMode,
    /// bytes per second (simulated engine)
    pub bandwidth: f64,
    /// seconds (simulated engine)
    pub latency: f64,
    /// simulated engine only: overlap transfers with compute
    pub overlap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkConfig {
    pub enabled: bool,
    pub eta: usize,
    pub omega: usize,
    pub halo: Halo,
    /// `None` means every block.
    pub targets: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub mode: InitMode,
    pub image: Option<PathBuf>,
    pub seed: u64,
    pub unet: UNetConfig,
    pub codec: CodecConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerKind,
    pub steps: usize,
    pub guidance: f32,
    /// Cache refresh interval; `None` disables caching entirely.
    pub cache: Option<usize>,
    pub swap: SwapConfig,
    pub clock: ClockMode,
    pub chunk: ChunkConfig,
    pub slice_decode: bool,
    pub budget_fast: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            frames: 8,
            height: 64,
            width: 64,
            mode: InitMode::Text,
            image: None,
            seed: 42,
            unet: UNetConfig::default(),
            codec: CodecConfig::default(),
            schedule: ScheduleConfig {
                train_steps: 50,
                beta_min: 0.001,
                beta_max: 0.1,
            },
            sampler: SamplerKind::Euler,
            steps: 25,
            guidance: 2.0,
            cache: None,
            swap: SwapConfig {
                mode: SwapMode::Off,
                bandwidth: 1e9,
                latency: 0.0,
                overlap: true,
            },
            clock: ClockMode::Real,
            chunk: ChunkConfig {
                enabled: false,
                eta: 2,
                omega: 2,
                halo: Halo::Exact,
                targets: None,
            },
            slice_decode: false,
            budget_fast: None,
            output_dir: None,
        }
    }
}

/// Every accepted key, for error messages and the README.
pub const KEYS: &[&str] = &[
    "frames",
    "height",
    "width",
    "mode",
    "image",
    "seed",
    "unet.depth",
    "unet.base_channels",
    "unet.kernel",
    "unet.cache_depth",
    "unet.weight_seed",
    "unet.emb_dim",
    "codec.latent_channels",
    "codec.hidden_channels",
    "codec.upsample_stages",
    "codec.weight_seed",
    "schedule.train_steps",
    "schedule.beta_min",
    "schedule.beta_max",
    "sampler",
    "steps",
    "guidance",
    "cache.n",
    "swap.mode",
    "swap.bandwidth",
    "swap.latency",
    "swap.overlap",
    "clock.mode",
    "clock.ns_per_mac",
    "chunk.enabled",
    "chunk.eta",
    "chunk.omega",
    "chunk.halo",
    "chunk.targets",
    "decode.slice",
    "budget.fast",
    "output.dir",
];

fn bad(key: &str, value: &str, want: &str) -> HarnessError {
    HarnessError::Config(format!("{key} = {value:?}: expected {want}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value
        .trim()
        .parse()
        .map_err(|_| bad(key, value, "a number"))
}

fn flag(key: &str, value: &str) -> Result<bool, HarnessError> {
    match value.trim() {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn off_or<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>, HarnessError> {
    match value.trim() {
        "off" | "none" => Ok(None),
        v => num(key, v).map(Some),
    }
}

impl RunConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let v = value.trim();
        match key {
            "frames" => self.frames = num(key, v)?,
            "height" => self.height = num(key, v)?,
            "width" => self.width = num(key, v)?,
            "mode" => {
                self.mode = match v {
                    "text" => InitMode::Text,
                    "image" => InitMode::Image,
                    _ => return Err(bad(key, v, "text or image")),
                }
            }
            "image" => self.image = Some(PathBuf::from(v)),
            "seed" => self.seed = num(key, v)?,
            "unet.depth" => self.unet.depth = num(key, v)?,
            "unet.base_channels" => self.unet.base_channels = num(key, v)?,
            "unet.kernel" => self.unet.kernel = num(key, v)?,
            "unet.cache_depth" => self.unet.cache_depth = num(key, v)?,
            "unet.weight_seed" => self.unet.weight_seed = num(key, v)?,
            "unet.emb_dim" => self.unet.emb_dim = num(key, v)?,
            "codec.latent_channels" => self.codec.latent_channels = num(key, v)?,
            "codec.hidden_channels" => self.codec.hidden_channels = num(key, v)?,
            "codec.upsample_stages" => self.codec.upsample_stages = num(key, v)?,
            "codec.weight_seed" => self.codec.weight_seed = num(key, v)?,
            "schedule.train_steps" => self.schedule.train_steps = num(key, v)?,
            "schedule.beta_min" => self.schedule.beta_min = num(key, v)?,
            "schedule.beta_max" => self.schedule.beta_max = num(key, v)?,
            "sampler" => {
                self.sampler =
                    SamplerKind::parse(v).ok_or_else(|| bad(key, v, "ancestral, ddim or euler"))?
            }
            "steps" => self.steps = num(key, v)?,
            "guidance" => self.guidance = num(key, v)?,
            "cache.n" => self.cache = off_or(key, v)?,
            "swap.mode" => {
                self.swap.mode = match v {
                    "off" => SwapMode::Off,
                    "sync" => SwapMode::Sync,
                    "async" => SwapMode::Async,
                    "simulated" => SwapMode::Simulated,
                    _ => return Err(bad(key, v, "off, sync, async or simulated")),
                }
            }
            "swap.bandwidth" => self.swap.bandwidth = num(key, v)?,
            "swap.latency" => self.swap.latency = num(key, v)?,
            "swap.overlap" => self.swap.overlap = flag(key, v)?,
            "clock.mode" => {
                self.clock = match v {
                    "real" => ClockMode::Real,
                    "virtual" => ClockMode::Virtual {
                        ns_per_mac: match self.clock {
                            ClockMode::Virtual { ns_per_mac } => ns_per_mac,
                            ClockMode::Real => 1,
                        },
                    },
                    _ => return Err(bad(key, v, "real or virtual")),
                }
            }
            "clock.ns_per_mac" => {
                self.clock = ClockMode::Virtual {
                    ns_per_mac: num(key, v)?,
                }
            }
            "chunk.enabled" => self.chunk.enabled = flag(key, v)?,
            "chunk.eta" => self.chunk.eta = num(key, v)?,
            "chunk.omega" => self.chunk.omega = num(key, v)?,
            "chunk.halo" => {
                self.chunk.halo = match v {
                    "exact" => Halo::Exact,
                    "none" => Halo::None,
                    n => Halo::Fixed(
                        num(key, n).map_err(|_| bad(key, v, "exact, none or a pixel count"))?,
                    ),
                }
            }
            "chunk.targets" => {
                self.chunk.targets = match v {
                    "all" => None,
                    list => Some(
                        list.split(',')
                            .map(|s| s.trim().to_string())
                            .filter(|s| !s.is_empty())
                            .collect(),
                    ),
                }
            }
            "decode.slice" => self.slice_decode = flag(key, v)?,
            "budget.fast" => self.budget_fast = off_or(key, v)?,
            "output.dir" => self.output_dir = Some(PathBuf::from(v)),
            _ => {
                return Err(HarnessError::Config(format!(
                    "unknown key {key:?}; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Apply a `key=value` string.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), HarnessError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("{pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Defaults overridden by a config document.
    pub fn from_toml_str(src: &str) -> Result<RunConfig, HarnessError> {
        let table: toml::Table = toml::from_str(src)
            .map_err(|e| HarnessError::Config(format!("config parse error: {e}")))?;
        let mut pairs = Vec::new();
        flatten("", &table, &mut pairs)?;
        let mut cfg = RunConfig::default();
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, sets: &[String]) -> Result<RunConfig, HarnessError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_toml_str(&src)?;
        for s in sets {
            cfg.set_pair(s)?;
        }
        Ok(cfg)
    }

    pub fn latent_hw(&self) -> (usize, usize) {
        let f = self.codec.factor();
        (self.height / f, self.width / f)
    }

    /// The UNet config with its input channels tied to the codec.
    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            in_channels: self.codec.latent_channels,
            ..self.unet.clone()
        }
    }

    pub fn chunk_spec(&self) -> Result<Option<ChunkSpec>, HarnessError> {
        if !self.chunk.enabled {
            return Ok(None);
        }
        let spec = ChunkSpec::new(self.chunk.eta, self.chunk.omega, self.chunk.halo)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(Some(match &self.chunk.targets {
            Some(t) => spec.with_targets(t.iter().cloned()),
            None => spec,
        }))
    }

    pub fn engine(&self) -> Option<TransferEngine> {
        match self.swap.mode {
            SwapMode::Off => None,
            SwapMode::Sync => Some(TransferEngine::Synchronous),
            SwapMode::Async => Some(TransferEngine::AsyncOverlapped),
            SwapMode::Simulated => Some(TransferEngine::Simulated {
                bandwidth: self.swap.bandwidth,
                latency_s: self.swap.latency,
                overlap: self.swap.overlap,
            }),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg_err = |m: String| Err(HarnessError::Config(m));
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return cfg_err("frames, height and width must be ≥ 1".into());
        }
        self.codec
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let unet = self.unet_config();
        unet.validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let f = self.codec.factor();
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return cfg_err(format!(
                "{}x{} frames are not divisible by the codec factor {f}",
                self.height, self.width
            ));
        }
        let (h, w) = self.latent_hw();
        unet.check_extent(h, w)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.steps == 0 || self.steps > self.schedule.train_steps {
            return cfg_err(format!(
                "steps {} must be in 1..={}",
                self.steps, self.schedule.train_steps
            ));
        }
        stagecache_core::sampler::NoiseSchedule::linear(
            self.schedule.train_steps,
            self.schedule.beta_min,
            self.schedule.beta_max,
        )
        .map_err(|e| HarnessError::Config(e.to_string()))?;
        if !self.guidance.is_finite() {
            return cfg_err("guidance must be finite".into());
        }
        if self.cache == Some(0) {
            return cfg_err("cache.n must be ≥ 1 (or off)".into());
        }
        if let Some(e) = self.engine() {
            e.validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if self.swap.mode == SwapMode::Simulated && !matches!(self.clock, ClockMode::Virtual { .. })
        {
            return cfg_err("swap.mode = simulated needs clock.mode = virtual".into());
        }
        if self.swap.mode != SwapMode::Off && self.cache.is_none() {
            return cfg_err("swapping moves cache entries; enable cache.n".into());
        }
        if self.budget_fast == Some(0) {
            return cfg_err("budget.fast must be > 0 (or off)".into());
        }
        if let Some(targets) = &self.chunk.targets {
            let known: BTreeSet<String> = pass_blocks(&unet, PassKind::Full)
                .iter()
                .map(BlockId::label)
                .collect();
            if let Some(t) = targets.iter().find(|t| !known.contains(*t)) {
                return cfg_err(format!("unknown chunk target {t:?}"));
            }
        }
        self.check_chunk_geometry(&unet)
    }

    /// Every targeted block must split evenly into its tile grid.
    fn check_chunk_geometry(&self, unet_cfg: &UNetConfig) -> Result<(), HarnessError> {
        let Some(spec) = self.chunk_spec()? else {
            return Ok(());
        };
        let unet = UNet::new(unet_cfg.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
        let (h, w) = self.latent_hw();
        let c = |l: usize| unet_cfg.channels(l);
        let top = unet_cfg.depth - 1;
        for block in pass_blocks(unet_cfg, PassKind::Full) {
            if !spec.applies_to(&block.label()) {
                continue;
            }
            let (ch, lvl) = match block {
                BlockId::Down(0) => (unet_cfg.in_channels, 0),
                BlockId::Down(i) => (c(i - 1), i - 1),
                BlockId::Mid => (c(top), top),
                BlockId::Up(i) => (c(i) + unet_cfg.below_channels(i), i),
            };
            let shape = Shape5::new(2, self.frames, ch, h >> lvl, w >> lvl)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            TileGrid::for_chain(shape, &spec, &unet.block_chain(block, 0))
                .map_err(|e| HarnessError::Config(format!("chunking {block}: {e}")))?;
        }
        Ok(())
    }

    /// Same run with every acceleration switched off.
    pub fn baseline(&self) -> RunConfig {
        let mut b = self.clone();
        b.cache = None;
        b.swap.mode = SwapMode::Off;
        b.chunk.enabled = false;
        b.slice_decode = false;
        b.budget_fast = None;
        b
    }

    /// Knobs that must agree for two runs to be comparable.
    pub fn content_key(&self) -> String {
        let mut b = self.baseline();
        b.unet.cache_depth = 0;
        b.clock = ClockMode::Real;
        b.output_dir = None;
        b.swap = RunConfig::default().swap;
        b.chunk = RunConfig::default().chunk;
        serde_json::to_string(&b).expect("config serializes")
    }
}

fn flatten(
    prefix: &str,
    table: &toml::Table,
    out: &mut Vec<(String, String)>,
) -> Result<(), HarnessError> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            toml::Value::String(s) => out.push((key, s.clone())),
            toml::Value::Integer(i) => out.push((key, i.to_string())),
            toml::Value::Float(f) => out.push((key, f.to_string())),
            toml::Value::Boolean(b) => out.push((key, b.to_string())),
            toml::Value::Array(items) => {
                let parts: Vec<String> = items
                    .iter()
                    .map(|i| match i {
                        toml::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect();
                out.push((key, parts.join(",")));
            }
            toml::Value::Datetime(_) => {
                return Err(HarnessError::Config(format!(
                    "{key}: dates are not supported"
                )))
            }
        }
    }
    Ok(())
}
