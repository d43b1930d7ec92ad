//! Run reports, baseline comparison, ablation and N sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::path::Path;

use serde::Serialize;

use stagecache_core::ledger::TierBytes;
use stagecache_core::metrics::{metric_csv, video_series, Metric, MetricSeries};
use stagecache_core::{StageTag, Tier};

use crate::config::{RunConfig, SwapMode};
use crate::error::HarnessError;
use crate::pipeline::{execute, RunOutput};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityVsBaseline {
    pub psnr: MetricSeries,
    pub ssim: MetricSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub wall_seconds: f64,
    pub stage_seconds: BTreeMap<String, f64>,
    /// span of the compute/transfer timeline, seconds on the run's clock
    pub simulated_makespan: f64,
    pub stall_seconds: f64,
    pub mac_count: u64,
    pub macs_total: u64,
    pub full_steps: usize,
    pub cached_steps: usize,
    pub cache_bytes: u64,
    pub peaks: BTreeMap<String, TierBytes>,
    pub overall_peak: TierBytes,
    pub video_digest: String,
    /// baseline wall / this run's wall
    pub speed_up: Option<f64>,
    /// baseline denoiser MACs / this run's denoiser MACs
    pub mac_speed_up: Option<f64>,
    pub baseline_wall_seconds: Option<f64>,
    pub quality: Option<QualityVsBaseline>,
}

pub fn video_digest(bytes: &[u8]) -> String {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    bytes.hash(&mut h);
    format!("{:016x}", h.finish())
}

impl RunReport {
    pub fn from_output(out: &RunOutput) -> RunReport {
        let summary = out.ledger.summary();
        let (full, cached) = match &out.plan {
            Some(p) => (p.full_count(), p.cached_count()),
            None => (out.config.steps, 0),
        };
        RunReport {
            config: out.config.clone(),
            wall_seconds: out.wall_seconds,
            stage_seconds: out.stage_seconds.clone(),
            simulated_makespan: summary.makespan_s,
            stall_seconds: summary.stall_s,
            mac_count: out.denoiser_macs(),
            macs_total: summary.macs_total,
            full_steps: full,
            cached_steps: cached,
            cache_bytes: out.cache_bytes,
            peaks: summary.peaks,
            overall_peak: summary.overall,
            video_digest: video_digest(&out.video.to_bytes()),
            speed_up: None,
            mac_speed_up: None,
            baseline_wall_seconds: None,
            quality: None,
        }
    }

    pub fn peak(&self, stage: StageTag, tier: Tier) -> u64 {
        self.peaks
            .get(stage.as_str())
            .map(|b| match tier {
                Tier::Fast => b.fast,
                Tier::Slow => b.slow,
            })
            .unwrap_or(0)
    }

    fn attach_baseline(&mut self, out: &RunOutput, base: &RunOutput) -> Result<(), HarnessError> {
        self.speed_up = Some(base.wall_seconds / out.wall_seconds.max(f64::MIN_POSITIVE));
        self.mac_speed_up = Some(base.denoiser_macs() as f64 / out.denoiser_macs().max(1) as f64);
        self.baseline_wall_seconds = Some(base.wall_seconds);
        self.quality = Some(QualityVsBaseline {
            psnr: video_series(Metric::Psnr, &base.video, &out.video)?,
            ssim: video_series(Metric::Ssim, &base.video, &out.video)?,
        });
        Ok(())
    }
}

/// A run together with its comparison against the cache-off baseline.
pub struct Compared {
    pub output: RunOutput,
    pub report: RunReport,
}

fn compare_outputs(out: RunOutput, base: &RunOutput) -> Result<Compared, HarnessError> {
    let mut report = RunReport::from_output(&out);
    report.attach_baseline(&out, base)?;
    Ok(Compared {
        output: out,
        report,
    })
}

/// Run `cfg` and its all-off baseline (same seed, sampler and sizes).
pub fn run(cfg: &RunConfig) -> Result<Compared, HarnessError> {
    let base_cfg = cfg.baseline();
    let out = execute(cfg)?;
    if base_cfg == *cfg {
        return compare_outputs(out.clone(), &out);
    }
    let base = execute(&base_cfg)?;
    compare_outputs(out, &base)
}

/// Write the video, ledger exports, report and metric CSV into `dir`.
pub fn write_artifacts(dir: &Path, c: &Compared) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    c.output.video.write(&dir.join("video.f32"))?;
    c.output
        .ledger
        .export(&dir.join("ledger.json"), &dir.join("ledger.csv"))?;
    let json = serde_json::to_string_pretty(&c.report)
        .map_err(|e| HarnessError::Io(std::io::Error::other(e)))?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    if let Some(q) = &c.report.quality {
        std::fs::write(dir.join("metrics.csv"), metric_csv(&q.psnr, &q.ssim)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub speed_up: f64,
    pub mac_speed_up: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// variant − baseline fast-tier peak per stage
    pub peak_delta_fast: BTreeMap<String, i64>,
}

/// Compare two configs that differ only in acceleration knobs. Returns the
/// row and the variant's report (measured against `baseline`).
pub fn compare(
    baseline: &RunConfig,
    variant: &RunConfig,
) -> Result<(ComparisonRow, RunReport), HarnessError> {
    if baseline.seed != variant.seed {
        return Err(HarnessError::Config(format!(
            "seed mismatch: baseline {} vs variant {}",
            baseline.seed, variant.seed
        )));
    }
    if baseline.content_key() != variant.content_key() {
        return Err(HarnessError::Config(
            "baseline and variant differ in more than acceleration settings".into(),
        ));
    }
    let base = execute(baseline)?;
    let var = if baseline == variant {
        compare_outputs(base.clone(), &base)?
    } else {
        compare_outputs(execute(variant)?, &base)?
    };
    let base_report = RunReport::from_output(&base);
    let q = var.report.quality.as_ref().expect("attached");
    let peak_delta_fast = StageTag::ALL
        .iter()
        .map(|s| {
            (
                s.as_str().to_string(),
                var.report.peak(*s, Tier::Fast) as i64 - base_report.peak(*s, Tier::Fast) as i64,
            )
        })
        .collect();
    let row = ComparisonRow {
        speed_up: var.report.speed_up.expect("attached"),
        mac_speed_up: var.report.mac_speed_up.expect("attached"),
        mean_psnr: q.psnr.mean,
        mean_ssim: q.ssim.mean,
        peak_delta_fast,
    };
    Ok((row, var.report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub encode_peak: u64,
    pub denoise_peak: u64,
    pub decode_peak: u64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "variant,encode_peak,denoise_peak,decode_peak,mean_psnr,mean_ssim,wall_seconds\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.label,
                r.encode_peak,
                r.denoise_peak,
                r.decode_peak,
                r.mean_psnr,
                r.mean_ssim,
                r.wall_seconds
            );
        }
        s
    }
}

/// The five ablation configurations of a base with every optimization on.
pub fn ablation_variants(base: &RunConfig) -> Result<Vec<(&'static str, RunConfig)>, HarnessError> {
    if base.cache.is_none()
        || base.swap.mode == SwapMode::Off
        || !base.chunk.enabled
        || !base.slice_decode
    {
        return Err(HarnessError::Config(
            "ablate needs cache, swapping, chunking and sliced decoding all enabled".into(),
        ));
    }
    let mut no_swap = base.clone();
    no_swap.swap.mode = SwapMode::Off;
    let mut no_slice = base.clone();
    no_slice.slice_decode = false;
    let mut no_chunk = base.clone();
    no_chunk.chunk.enabled = false;
    let mut cache_only = no_swap.clone();
    cache_only.slice_decode = false;
    cache_only.chunk.enabled = false;
    Ok(vec![
        ("all", base.clone()),
        ("-swap", no_swap),
        ("-slice", no_slice),
        ("-chunk", no_chunk),
        ("cache-only", cache_only),
    ])
}

pub fn ablate(base: &RunConfig) -> Result<AblationTable, HarnessError> {
    let variants = ablation_variants(base)?;
    let reference = execute(&base.baseline())?;
    let mut rows = Vec::new();
    for (label, cfg) in variants {
        let c = compare_outputs(execute(&cfg)?, &reference)?;
        let q = c.report.quality.as_ref().expect("attached");
        rows.push(AblationRow {
            label: label.to_string(),
            encode_peak: c.report.peak(StageTag::Encode, Tier::Fast),
            denoise_peak: c.report.peak(StageTag::Denoise, Tier::Fast),
            decode_peak: c.report.peak(StageTag::Decode, Tier::Fast),
            mean_psnr: q.psnr.mean,
            mean_ssim: q.ssim.mean,
            wall_seconds: c.report.wall_seconds,
        });
    }
    Ok(AblationTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub speed_up: f64,
    pub mac_speed_up: f64,
    pub mac_count: u64,
    pub full_steps: usize,
    pub cached_steps: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    #[serde(skip)]
    pub psnr: MetricSeries,
    #[serde(skip)]
    pub ssim: MetricSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Human-readable notes where speed-up falls or quality rises with N.
    pub trend_flags: Vec<String>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "n,speed_up,mac_speed_up,mac_count,full_steps,cached_steps,mean_psnr,mean_ssim\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.n,
                r.speed_up,
                r.mac_speed_up,
                r.mac_count,
                r.full_steps,
                r.cached_steps,
                r.mean_psnr,
                r.mean_ssim
            );
        }
        s
    }
}

pub fn parse_ns(list: &str) -> Result<Vec<usize>, HarnessError> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| HarnessError::Config(format!("{s:?} is not an interval")))
        })
        .collect()
}

/// Run `cfg` at each cache interval in `ns` against the cache-off baseline.
pub fn sweep_n(cfg: &RunConfig, ns: &[usize]) -> Result<SweepTable, HarnessError> {
    if ns.is_empty() || ns.contains(&0) || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::Config(format!(
            "intervals must be positive and strictly ascending, got {ns:?}"
        )));
    }
    let reference = execute(&cfg.baseline())?;
    let mut rows: Vec<SweepRow> = Vec::new();
    for &n in ns {
        let mut c = cfg.clone();
        c.cache = Some(n);
        let r = compare_outputs(execute(&c)?, &reference)?;
        let q = r.report.quality.clone().expect("attached");
        rows.push(SweepRow {
            n,
            speed_up: r.report.speed_up.expect("attached"),
            mac_speed_up: r.report.mac_speed_up.expect("attached"),
            mac_count: r.report.mac_count,
            full_steps: r.report.full_steps,
            cached_steps: r.report.cached_steps,
            mean_psnr: q.psnr.mean,
            mean_ssim: q.ssim.mean,
            psnr: q.psnr,
            ssim: q.ssim,
        });
    }
    let mut trend_flags = Vec::new();
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.speed_up < a.speed_up {
            trend_flags.push(format!("speed-up fell from N={} to N={}", a.n, b.n));
        }
        if b.mean_psnr > a.mean_psnr {
            trend_flags.push(format!("PSNR rose from N={} to N={}", a.n, b.n));
        }
        if b.mean_ssim > a.mean_ssim {
            trend_flags.push(format!("SSIM rose from N={} to N={}", a.n, b.n));
        }
    }
    Ok(SweepTable { rows, trend_flags })
}

/// Per-frame metric CSVs, one `metrics_n{N}.csv` per interval, plus the
/// sweep summary.
pub fn export_plots(cfg: &RunConfig, ns: &[usize], dir: &Path) -> Result<SweepTable, HarnessError> {
    let table = sweep_n(cfg, ns)?;
    std::fs::create_dir_all(dir)?;
    for r in &table.rows {
        std::fs::write(
            dir.join(format!("metrics_n{}.csv", r.n)),
            metric_csv(&r.psnr, &r.ssim)?,
        )?;
    }
    std::fs::write(dir.join("sweep.csv"), table.to_csv())?;
    Ok(table)
}
