//! The three-stage pipeline: encode (or noise init), denoise, decode.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use stagecache_core::cache::{
    cache_bytes, plan_steps, CachePolicy, CacheStore, StepKind, StepPlan,
};
use stagecache_core::codec::{merge_bt, Codec, Video};
use stagecache_core::denoiser::{pass_blocks, PassKind, UNet};
use stagecache_core::ledger::{Ledger, MemLedger};
use stagecache_core::rng::derive_seed;
use stagecache_core::sampler::{cfg_combine, forward_noise, inference_timesteps, NoiseSchedule};
use stagecache_core::swap::{makespan_ns, TierSwapper};
use stagecache_core::{Shape5, StageTag, Tensor5};

use crate::config::{InitMode, RunConfig};
use crate::error::HarnessError;

/// Everything one pipeline execution produced.
#[derive(Clone)]
pub struct RunOutput {
    pub config: RunConfig,
    pub video: Video,
    pub ledger: Ledger,
    pub plan: Option<StepPlan>,
    pub wall_seconds: f64,
    /// encode / denoise / decode wall seconds
    pub stage_seconds: BTreeMap<String, f64>,
    pub cache_bytes: u64,
}

impl RunOutput {
    /// MACs charged to denoiser blocks.
    pub fn denoiser_macs(&self) -> u64 {
        let cfg = self.config.unet_config();
        let labels: Vec<String> = pass_blocks(&cfg, PassKind::Full)
            .iter()
            .map(|b| b.label())
            .collect();
        self.ledger
            .block_stats()
            .iter()
            .filter(|(k, _)| labels.contains(k))
            .map(|(_, s)| s.macs)
            .sum()
    }
}

/// Step seeds for the ancestral sampler's fresh noise.
const STEP_NOISE_STREAM: u64 = 1000;
const INIT_STREAM: u64 = 1;
const ENCODE_NOISE_STREAM: u64 = 2;

/// Conditioning frames for image mode: the configured file, or a smooth
/// synthetic pattern in [0, 1].
fn conditioning_frames(cfg: &RunConfig, ledger: &Ledger) -> Result<Tensor5, HarnessError> {
    let (t, c, h, w) = (cfg.frames, cfg.codec.image_channels, cfg.height, cfg.width);
    let shape = Shape5::new(1, t, c, h, w)?;
    let data = match &cfg.image {
        Some(path) => {
            let v = Video::read(path)?;
            if (v.c, v.h, v.w) != (c, h, w) || (v.t != 1 && v.t != t) {
                return Err(HarnessError::Config(format!(
                    "image {} is {}x{}x{}x{}, need 1 or {t} frames of {c}x{h}x{w}",
                    path.display(),
                    v.t,
                    v.c,
                    v.h,
                    v.w
                )));
            }
            if v.t == 1 {
                v.data.repeat(t)
            } else {
                v.data
            }
        }
        None => {
            let mut d = Vec::with_capacity(shape.numel());
            for f in 0..t {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let phase = (f as f32) * 0.3 + ch as f32;
                            let v = ((x as f32 / w as f32) * 6.0 + phase).sin()
                                * ((y as f32 / h as f32) * 4.0 - phase).cos();
                            d.push(0.5 + 0.4 * v);
                        }
                    }
                }
            }
            d
        }
    };
    Ok(Tensor5::from_vec(ledger, shape, data)?)
}

/// Run the pipeline once. No baseline, no artifacts.
pub fn execute(cfg: &RunConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let start = Instant::now();
    let ledger = MemLedger::new(cfg.clock);
    if let Some(limit) = cfg.budget_fast {
        ledger.enforce_budget(limit)?;
    }
    let unet_cfg = cfg.unet_config();
    let mut unet = UNet::new(unet_cfg.clone())?;
    unet.set_chunking(cfg.chunk_spec()?);
    let codec = Codec::new(cfg.codec.clone())?;
    let sched = NoiseSchedule::linear(
        cfg.schedule.train_steps,
        cfg.schedule.beta_min,
        cfg.schedule.beta_max,
    )?;
    let ts = inference_timesteps(sched.len(), cfg.steps)?;
    let swapper = match cfg.engine() {
        Some(e) => Some(Arc::new(TierSwapper::new(e, &ledger)?)),
        None => None,
    };
    let plan = match cfg.cache {
        Some(n) => Some(plan_steps(
            cfg.steps,
            &CachePolicy::new(n, unet_cfg.cache_depth)?,
        )?),
        None => None,
    };
    let (lh, lw) = cfg.latent_hw();
    let lat_shape = Shape5::new(1, cfg.frames, cfg.codec.latent_channels, lh, lw)?;
    let mut stage_seconds = BTreeMap::new();

    let result = (|| -> Result<Video, HarnessError> {
        // encode
        let t_enc = Instant::now();
        ledger.enter_stage(StageTag::Encode);
        let mut x = match cfg.mode {
            InitMode::Text => {
                Tensor5::randn(&ledger, lat_shape, derive_seed(cfg.seed, INIT_STREAM))?
            }
            InitMode::Image => {
                let frames = conditioning_frames(cfg, &ledger)?;
                let z0 = codec.encode(&frames)?;
                drop(frames);
                let eps = Tensor5::randn(
                    &ledger,
                    lat_shape,
                    derive_seed(cfg.seed, ENCODE_NOISE_STREAM),
                )?;
                forward_noise(&z0, ts[0], &eps, &sched)?
            }
        };
        stage_seconds.insert("encode".to_string(), t_enc.elapsed().as_secs_f64());

        // denoise
        let t_den = Instant::now();
        ledger.enter_stage(StageTag::Denoise);
        let mut store = CacheStore::new(swapper.clone());
        for (s, &t) in ts.iter().enumerate() {
            let prev = ts.get(s + 1).copied();
            ledger.begin_compute(Some(s));
            let pair = unet.guidance_pair(&x)?;
            let eps = match &plan {
                None => {
                    let (eps, deep) = unet.forward_full(&pair, t)?;
                    drop(deep);
                    eps
                }
                Some(plan) => match plan.kinds[s] {
                    StepKind::Full => {
                        store.settle_all()?;
                        let (eps, deep) = unet.forward_full(&pair, t)?;
                        store.store(deep, s)?;
                        if plan.is_last_use(s) {
                            store.evict_all(s)?;
                        }
                        eps
                    }
                    StepKind::Cached => {
                        let mut pass = unet.begin_pass(&pair, t)?;
                        {
                            let deep = store.fetch_all(s)?;
                            pass.join_deep(&deep)?;
                        }
                        if plan.is_last_use(s) {
                            store.evict_all(s)?;
                        }
                        pass.finish()?
                    }
                },
            };
            drop(pair);
            let guided = {
                let mut halves = eps.split_batch()?;
                let cond = halves.pop().expect("two branches");
                let uncond = halves.pop().expect("two branches");
                cfg_combine(&uncond, &cond, cfg.guidance)?
            };
            x = cfg.sampler.step(
                &x,
                t,
                prev,
                &guided,
                &sched,
                derive_seed(cfg.seed, STEP_NOISE_STREAM + s as u64),
            )?;
            drop(guided);
            ledger.end_compute();
        }
        store.settle_all()?;
        stage_seconds.insert("denoise".to_string(), t_den.elapsed().as_secs_f64());

        // decode
        let t_dec = Instant::now();
        let lat = merge_bt(x)?;
        let decoded = if cfg.slice_decode {
            codec.decode_sliced(&lat)?
        } else {
            codec.decode_batch(&lat)?
        };
        drop(lat);
        let video = Video::from_tensor(&decoded, 0)?;
        drop(decoded);
        // cache entries live until the run's end
        store.clear()?;
        drop(store);
        stage_seconds.insert("decode".to_string(), t_dec.elapsed().as_secs_f64());
        Ok(video)
    })();
    if let Some(sw) = &swapper {
        sw.shutdown();
    }
    let video = result?;
    let wall_seconds = start.elapsed().as_secs_f64();
    check_invariants(&ledger)?;
    let cb = match cfg.cache {
        Some(_) => cache_bytes(&unet_cfg, cfg.frames, lh, lw)?,
        None => 0,
    };
    Ok(RunOutput {
        config: cfg.clone(),
        video,
        ledger,
        plan,
        wall_seconds,
        stage_seconds,
        cache_bytes: cb,
    })
}

fn check_invariants(ledger: &Ledger) -> Result<(), HarnessError> {
    let v = ledger.violations();
    if !v.is_empty() {
        return Err(HarnessError::Invariant(v.join("; ")));
    }
    if ledger.live_count() != 0 {
        return Err(HarnessError::Invariant(format!(
            "{} allocations still live at the end of the run",
            ledger.live_count()
        )));
    }
    if ledger.balance() != 0 {
        return Err(HarnessError::Invariant(format!(
            "ledger balance {}",
            ledger.balance()
        )));
    }
    makespan_ns(&ledger.timeline()).map_err(|e| HarnessError::Invariant(e.to_string()))?;
    Ok(())
}
