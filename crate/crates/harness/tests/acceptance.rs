//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, ensure, Result};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};

use stagecache_core::chunk::{receptive_radius, run_chunked, BlockChain, ChainOp, ChunkSpec, Halo};
use stagecache_core::codec::{merge_bt, Codec, CodecConfig};
use stagecache_core::denoiser::{flops_estimate, PassKind};
use stagecache_core::ledger::{EventKind, Ledger, TimelineKind};
use stagecache_core::metrics::{psnr, ssim, Frame, PSNR_CAP};
use stagecache_core::rng::NormalStream;
use stagecache_core::swap::makespan_ns;
use stagecache_core::{KernelBank, MemLedger, Shape5, StageTag, Tensor5, Tier};
use stagecache_harness::config::SwapMode;
use stagecache_harness::report::ablate;
use stagecache_harness::{execute, HarnessError, RunConfig, RunOutput};

fn cfg(pairs: &[&str]) -> RunConfig {
    let mut c = RunConfig::default();
    for p in pairs {
        c.set_pair(p).expect("valid setting");
    }
    c
}

fn exec(c: &RunConfig) -> Result<RunOutput> {
    Ok(execute(c)?)
}

fn runner_config(cases: u32) -> PtConfig {
    PtConfig {
        failure_persistence: None,
        ..PtConfig::with_cases(cases)
    }
}

fn same_video(a: &RunOutput, b: &RunOutput) -> bool {
    a.video.to_bytes() == b.video.to_bytes()
}

fn fast(out: &RunOutput, stage: StageTag) -> u64 {
    out.ledger.peak(stage, Tier::Fast)
}

// 1 -------------------------------------------------------------------------

fn cache_degeneracy() -> Result<String> {
    let mut worst = 0.0f64;
    for sampler in ["ancestral", "ddim", "euler"] {
        let s = format!("sampler={sampler}");
        let t0 = Instant::now();
        let off = exec(&cfg(&[&s]))?;
        let t1 = Instant::now();
        let n1 = exec(&cfg(&[&s, "cache.n=1"]))?;
        let secs = t1.elapsed().as_secs_f64().max((t1 - t0).as_secs_f64());
        worst = worst.max(secs);
        ensure!(
            same_video(&off, &n1),
            "{sampler}: N=1 video differs from cache-off"
        );
        ensure!(secs < 10.0, "{sampler}: run took {secs:.2} s");
    }
    Ok(format!(
        "3 samplers bit-identical, slowest run {worst:.2} s"
    ))
}

// 2 -------------------------------------------------------------------------

fn transparency() -> Result<String> {
    let mut runs = 0;
    for n in [2, 4] {
        let nset = format!("cache.n={n}");
        let reference = exec(&cfg(&[&nset]))?;
        for swap in ["off", "sync", "async", "simulated"] {
            for slice in [false, true] {
                for chunk in [false, true] {
                    let mut c = cfg(&[&nset, &format!("swap.mode={swap}")]);
                    if swap == "simulated" {
                        c.set("clock.mode", "virtual")?;
                    }
                    c.slice_decode = slice;
                    c.chunk.enabled = chunk;
                    c.chunk.halo = Halo::Exact;
                    let out = exec(&c)?;
                    ensure!(
                        same_video(&reference, &out),
                        "N={n} swap={swap} slice={slice} chunk={chunk} differs"
                    );
                    runs += 1;
                }
            }
        }
    }
    Ok(format!(
        "{runs} combinations bit-identical to their N reference"
    ))
}

// 3 -------------------------------------------------------------------------

fn conv(c_in: usize, c_out: usize, k: usize, seed: u64) -> ChainOp {
    ChainOp::Conv(Arc::new(KernelBank::random(c_out, c_in, k, seed).unwrap()))
}

fn test_chain(kind: u8, c: usize, seed: u64) -> BlockChain {
    let ops = match kind % 4 {
        0 => vec![conv(c, c, 3, seed)],
        1 => vec![conv(c, 3, 3, seed), ChainOp::Act, conv(3, c, 5, seed + 1)],
        2 => vec![
            ChainOp::Down,
            conv(c, 2, 3, seed),
            ChainOp::Act,
            ChainOp::Up,
        ],
        _ => vec![
            ChainOp::Film {
                scale: vec![0.8; c],
                shift: vec![0.1; c],
            },
            conv(c, c, 3, seed),
            ChainOp::Act,
            ChainOp::Up,
            conv(c, 2, 1, seed + 2),
        ],
    };
    BlockChain::new("acc", ops)
}

fn chunk_equivalence() -> Result<String> {
    let cases = 128;
    let mut runner = TestRunner::new(runner_config(cases));
    let strategy = (
        0u8..4,
        prop::sample::select(vec![1usize, 2, 4]),
        prop::sample::select(vec![1usize, 2, 4]),
        1usize..4,
        1usize..4,
        1usize..4,
        any::<u64>(),
    );
    let worst = std::cell::Cell::new(0.0f32);
    let res = runner.run(&strategy, |(kind, eta, omega, hm, wm, c, seed)| {
        let ch = test_chain(kind, c, seed);
        let unit = 2 * ch.alignment();
        let l = MemLedger::real();
        let x = Tensor5::randn(
            &l,
            Shape5::new(1, 2, c, eta * unit * hm, omega * unit * wm).unwrap(),
            seed,
        )
        .unwrap();
        let spec = ChunkSpec::new(eta, omega, Halo::Exact).unwrap();
        let d = ch
            .run(&x)
            .unwrap()
            .max_abs_diff(&run_chunked(&ch, &x, &spec).unwrap())
            .unwrap();
        worst.set(worst.get().max(d));
        prop_assert!(d <= 1e-5, "max abs diff {d}");
        Ok(())
    });
    if let Err(e) = res {
        bail!("exact halo: {e}");
    }

    let mut runner = TestRunner::new(runner_config(cases));
    let res = runner.run(
        &(
            1usize..4,
            1usize..4,
            prop::sample::select(vec![3usize, 5]),
            any::<u64>(),
        ),
        |(eta, omega, k, seed)| {
            let ch = BlockChain::new(
                "seam",
                vec![conv(2, 2, k, seed), ChainOp::Act, conv(2, 1, 3, seed + 1)],
            );
            let r = receptive_radius(&ch);
            let (th, tw) = (6, 5);
            let (h, w) = (eta * th, omega * tw);
            let l = MemLedger::real();
            let x = Tensor5::randn(&l, Shape5::new(1, 1, 2, h, w).unwrap(), seed).unwrap();
            let spec = ChunkSpec::new(eta, omega, Halo::None).unwrap();
            let a = ch.run(&x).unwrap();
            let y = run_chunked(&ch, &x, &spec).unwrap();
            let near = |v: usize, tile: usize, n: usize| {
                (1..n).any(|s| v + r >= s * tile && v < s * tile + r)
            };
            for yy in 0..h {
                for xx in 0..w {
                    if a.at(0, 0, 0, yy, xx) != y.at(0, 0, 0, yy, xx) {
                        prop_assert!(
                            near(yy, th, eta) || near(xx, tw, omega),
                            "({yy},{xx}) off-seam"
                        );
                    }
                }
            }
            Ok(())
        },
    );
    if let Err(e) = res {
        bail!("no-halo seam mask: {e}");
    }
    Ok(format!(
        "{cases}+{cases} cases, worst exact-halo diff {:e}",
        worst.get()
    ))
}

// 4 -------------------------------------------------------------------------

fn decode_once(codec: &Codec, frames: usize, sliced: bool) -> Result<(Ledger, Tensor5, u64, u64)> {
    let l = MemLedger::real();
    let cfg = codec.config();
    let lat = Tensor5::randn(&l, Shape5::new(1, frames, cfg.latent_channels, 16, 16)?, 9)?;
    let batch = merge_bt(lat)?;
    let ws = codec.frame_working_set(&batch)?;
    let out = if sliced {
        codec.decode_sliced(&batch)?
    } else {
        codec.decode_batch(&batch)?
    };
    let out_bytes = out.bytes();
    Ok((l, out, ws, out_bytes))
}

fn slicing_law() -> Result<String> {
    let codec = Codec::new(CodecConfig::default())?;
    let mut notes = Vec::new();
    for t in [1usize, 4, 8] {
        let (lb, yb, _, _) = decode_once(&codec, t, false)?;
        let (ls, ys, ws, out_bytes) = decode_once(&codec, t, true)?;
        ensure!(ys.bit_eq(&yb), "T={t}: sliced decode differs from batch");
        let pb = lb.peak(StageTag::Decode, Tier::Fast);
        let ps = ls.peak(StageTag::Decode, Tier::Fast);
        let bound = pb as f64 / t as f64 + out_bytes as f64 + ws as f64;
        ensure!(
            ps as f64 <= bound,
            "T={t}: sliced peak {ps} > bound {bound}"
        );
        notes.push(format!("T={t} {ps}<={bound:.0}"));
    }
    Ok(notes.join(", "))
}

// 5 -------------------------------------------------------------------------

/// Largest total of bytes between TierMoveStart and TierMoveEnd at once.
fn max_in_flight(l: &Ledger) -> u64 {
    let (mut cur, mut max) = (0u64, 0u64);
    for e in l.events() {
        match e.kind {
            EventKind::TierMoveStart => {
                cur += e.bytes;
                max = max.max(cur);
            }
            EventKind::TierMoveEnd => cur -= e.bytes,
            _ => {}
        }
    }
    max
}

fn cache_arithmetic() -> Result<String> {
    let off = exec(&cfg(&[]))?;
    let on = exec(&cfg(&["cache.n=2"]))?;
    let base = fast(&off, StageTag::Denoise);
    let diff = fast(&on, StageTag::Denoise) as i128 - base as i128;
    ensure!(on.cache_bytes > 0, "cache_bytes is zero");
    ensure!(
        diff == on.cache_bytes as i128,
        "cache-on surge {diff} != cache_bytes {}",
        on.cache_bytes
    );
    let mut notes = vec![format!("surge {diff} == cache_bytes")];
    for mode in ["sync", "async"] {
        let sw = exec(&cfg(&["cache.n=2", &format!("swap.mode={mode}")]))?;
        let d = fast(&sw, StageTag::Denoise) as i128 - base as i128;
        let inflight = max_in_flight(&sw.ledger);
        ensure!(inflight > 0, "{mode}: no transfers recorded");
        ensure!(
            d <= inflight as i128,
            "{mode}: surge {d} > max in-flight {inflight}"
        );
        notes.push(format!("{mode} surge {d} <= {inflight}"));
    }
    Ok(notes.join(", "))
}

// 6 -------------------------------------------------------------------------

fn ablation_shape() -> Result<String> {
    let base = cfg(&[
        "cache.n=2",
        "swap.mode=async",
        "chunk.enabled=true",
        "decode.slice=true",
    ]);
    let t = ablate(&base)?;
    let row = |l: &str| t.row(l).ok_or_else(|| anyhow::anyhow!("missing row {l}"));
    let all = row("all")?;
    let ns = row("-slice")?;
    let nc = row("-chunk")?;
    let nw = row("-swap")?;
    ensure!(
        ns.decode_peak > all.decode_peak,
        "-slice does not raise Decode"
    );
    ensure!(
        ns.denoise_peak == all.denoise_peak && ns.encode_peak == all.encode_peak,
        "-slice moved a non-decode peak"
    );
    ensure!(
        nc.denoise_peak > all.denoise_peak,
        "-chunk does not raise Denoise"
    );
    ensure!(
        nc.decode_peak == all.decode_peak && nc.encode_peak == all.encode_peak,
        "-chunk moved a non-denoise peak"
    );
    ensure!(
        nw.denoise_peak > all.denoise_peak,
        "-swap does not raise Denoise"
    );
    ensure!(
        nw.decode_peak > all.decode_peak,
        "-swap does not raise Decode"
    );
    for r in &t.rows {
        ensure!(
            r.mean_psnr == all.mean_psnr && r.mean_ssim == all.mean_ssim,
            "{} quality differs",
            r.label
        );
    }
    Ok(format!(
        "denoise/decode all {}/{} -slice {}/{} -chunk {}/{} -swap {}/{}",
        all.denoise_peak,
        all.decode_peak,
        ns.denoise_peak,
        ns.decode_peak,
        nc.denoise_peak,
        nc.decode_peak,
        nw.denoise_peak,
        nw.decode_peak
    ))
}

// 7 -------------------------------------------------------------------------

fn speed_accounting() -> Result<String> {
    for n in [1usize, 2, 3, 8] {
        let c = cfg(&[&format!("cache.n={n}")]);
        let out = exec(&c)?;
        let plan = out.plan.as_ref().expect("cache on");
        let u = c.unet_config();
        let (h, w) = c.latent_hw();
        let s = Shape5::new(2, c.frames, u.in_channels, h, w)?;
        let expect = plan.full_count() as u64 * flops_estimate(&u, PassKind::Full, s)
            + plan.cached_count() as u64 * flops_estimate(&u, PassKind::Cached, s);
        ensure!(
            out.denoiser_macs() == expect,
            "N={n}: counted {} != {expect}",
            out.denoiser_macs()
        );
    }
    let best = |c: &RunConfig| -> Result<f64> {
        let mut b = f64::INFINITY;
        for _ in 0..3 {
            b = b.min(exec(c)?.wall_seconds);
        }
        Ok(b)
    };
    let w1 = best(&cfg(&["cache.n=1"]))?;
    let w2 = best(&cfg(&["cache.n=2"]))?;
    let speed_up = w1 / w2;
    ensure!(speed_up >= 1.15, "wall speed-up {speed_up:.3} < 1.15");
    Ok(format!(
        "MAC identity exact for N=1,2,3,8; wall speed-up N=2 {speed_up:.3}"
    ))
}

// 8 -------------------------------------------------------------------------

fn compute_spans(l: &Ledger) -> Vec<u64> {
    let tl = l.timeline();
    tl.iter()
        .filter(|e| e.kind == TimelineKind::ComputeStart)
        .filter_map(|s| {
            tl.iter()
                .find(|e| e.kind == TimelineKind::ComputeEnd && e.id == s.id)
                .map(|e| e.clock_ns - s.clock_ns)
        })
        .collect()
}

fn overlap_law() -> Result<String> {
    let common = ["cache.n=2", "clock.ns_per_mac=1"];
    let none = exec(&cfg(&common))?;
    let m_none = makespan_ns(&none.ledger.timeline())?;
    let entry_bytes = none.cache_bytes / 2;
    // transfer ~1 ms against ~24 ms of compute per step
    let bandwidth = entry_bytes as f64 * 1e3;
    let sim = |overlap: bool| {
        let mut c = cfg(&common);
        c.swap.mode = SwapMode::Simulated;
        c.swap.bandwidth = bandwidth;
        c.swap.latency = 0.0;
        c.swap.overlap = overlap;
        c
    };
    let ov_cfg = sim(true);
    let engine = ov_cfg.engine().expect("swap on");
    let x = engine.duration_ns(entry_bytes);
    let c_min = compute_spans(&none.ledger).into_iter().min().unwrap_or(0);
    ensure!(x <= c_min, "precondition x {x} <= c {c_min} fails");

    let ov = exec(&ov_cfg)?;
    let m_ov = makespan_ns(&ov.ledger.timeline())?;
    let sy = exec(&sim(false))?;
    let m_sy = makespan_ns(&sy.ledger.timeline())?;
    let xfers = sy
        .ledger
        .timeline()
        .iter()
        .filter(|e| e.kind == TimelineKind::XferEnd)
        .count() as u64;
    ensure!(xfers > 0, "no transfers in the synchronous run");
    ensure!(
        (m_ov as f64) <= 1.01 * m_none as f64,
        "overlapped makespan {m_ov} > 1.01 x {m_none}"
    );
    ensure!(
        m_sy == m_none + xfers * x,
        "synchronous makespan {m_sy} != {m_none} + {xfers} x {x}"
    );
    Ok(format!(
        "x={x} ns c>={c_min} ns; no-swap {m_none}, overlapped {m_ov} ({:.4}x), synchronous {m_sy} = +{xfers}x",
        m_ov as f64 / m_none as f64
    ))
}

// 9 -------------------------------------------------------------------------

fn quality_trend() -> Result<String> {
    let table = stagecache_harness::sweep_n(&cfg(&[]), &[2, 3, 4, 8])?;
    let mut notes = Vec::new();
    for w in table.rows.windows(2) {
        ensure!(
            w[1].mean_psnr <= w[0].mean_psnr,
            "PSNR rises N={} {} -> N={} {}",
            w[0].n,
            w[0].mean_psnr,
            w[1].n,
            w[1].mean_psnr
        );
        ensure!(
            w[1].mean_ssim <= w[0].mean_ssim,
            "SSIM rises N={} {} -> N={} {}",
            w[0].n,
            w[0].mean_ssim,
            w[1].n,
            w[1].mean_ssim
        );
    }
    for r in &table.rows {
        notes.push(format!(
            "N={} {:.2} dB/{:.4}",
            r.n, r.mean_psnr, r.mean_ssim
        ));
    }
    Ok(notes.join(", "))
}

// 10 ------------------------------------------------------------------------

fn budget_behaviour() -> Result<String> {
    let all = cfg(&[
        "cache.n=2",
        "swap.mode=async",
        "chunk.enabled=true",
        "decode.slice=true",
    ]);
    let mut no_slice = all.clone();
    no_slice.slice_decode = false;
    let opt = exec(&all)?;
    let unopt = exec(&no_slice)?;
    let opt_decode = fast(&opt, StageTag::Decode);
    let unopt_decode = fast(&unopt, StageTag::Decode);
    let opt_overall = opt.ledger.overall_peak(Tier::Fast);
    let limit = (opt_overall.max(opt_decode) + unopt_decode) / 2;
    ensure!(
        opt_decode < limit && limit < unopt_decode && opt_overall <= limit,
        "no budget window: opt decode {opt_decode}, opt overall {opt_overall}, unopt decode {unopt_decode}"
    );
    let mut a = all.clone();
    a.budget_fast = Some(limit);
    exec(&a)?;
    let mut b = no_slice.clone();
    b.budget_fast = Some(limit);
    match execute(&b) {
        Err(HarnessError::Budget(e)) if e.stage == StageTag::Decode => {}
        Err(e) => bail!("slicing-off run failed with {e}"),
        Ok(_) => bail!("slicing-off run completed under {limit} B"),
    }
    Ok(format!(
        "limit {limit} B: optimized completes, slicing off aborts in Decode"
    ))
}

// 11 ------------------------------------------------------------------------

fn metric_sanity() -> Result<String> {
    let zero = vec![0.0f32; 3 * 16 * 16];
    let tenth = vec![0.1f32; zero.len()];
    let a = Frame::new(3, 16, 16, &zero)?;
    let b = Frame::new(3, 16, 16, &tenth)?;
    let p = psnr(&a, &b, 1.0)?;
    ensure!((p - 20.0).abs() <= 1e-6, "psnr {p} != 20 dB");
    let mut s = NormalStream::new(5);
    let noise: Vec<f32> = (0..zero.len()).map(|_| 0.2 * s.next_normal()).collect();
    let fnoise = Frame::new(3, 16, 16, &noise)?;
    let same = ssim(&fnoise, &fnoise, 1.0)?;
    ensure!(
        (same - 1.0).abs() <= 1e-6,
        "ssim of identical frames {same}"
    );
    ensure!(
        psnr(&fnoise, &fnoise, 1.0)? == PSNR_CAP,
        "identical psnr not capped"
    );

    let mut runner = TestRunner::new(runner_config(128));
    let res = runner.run(
        &(any::<u64>(), 0.01f32..1.0, 0.01f32..0.1, 1.5f32..4.0),
        |(seed, scale, small, ratio)| {
            let mut s = NormalStream::new(seed);
            let n = 2 * 9 * 11;
            let x: Vec<f32> = (0..n).map(|_| s.next_normal() * scale).collect();
            let y: Vec<f32> = (0..n).map(|_| s.next_normal() * scale).collect();
            let fx = Frame::new(2, 9, 11, &x).unwrap();
            let fy = Frame::new(2, 9, 11, &y).unwrap();
            let xy = ssim(&fx, &fy, 1.0).unwrap();
            prop_assert!((xy - ssim(&fy, &fx, 1.0).unwrap()).abs() < 1e-9);
            prop_assert!(xy > -1.0 && xy <= 1.0 + 1e-12);
            let z: Vec<f32> = (0..n).map(|_| s.next_normal()).collect();
            let lo: Vec<f32> = x.iter().zip(&z).map(|(a, e)| a + small * e).collect();
            let hi: Vec<f32> = x
                .iter()
                .zip(&z)
                .map(|(a, e)| a + small * ratio * e)
                .collect();
            let p = |v: &[f32]| psnr(&fx, &Frame::new(2, 9, 11, v).unwrap(), 1.0).unwrap();
            prop_assert!(p(&hi) < p(&lo));
            prop_assert!(p(&lo) <= PSNR_CAP);
            Ok(())
        },
    );
    if let Err(e) = res {
        bail!("metric properties: {e}");
    }
    Ok(format!(
        "psnr {p:.9} dB, ssim(x,x) {same}, 128 property cases"
    ))
}

type Check = fn() -> Result<String>;

fn main() {
    let criteria: [(u8, &str, Check); 11] = [
        (1, "cache degeneracy", cache_degeneracy),
        (2, "memory-optimization transparency", transparency),
        (3, "chunk equivalence", chunk_equivalence),
        (4, "slicing exactness and peak law", slicing_law),
        (5, "cache-memory arithmetic", cache_arithmetic),
        (6, "ablation shape", ablation_shape),
        (7, "speed accounting", speed_accounting),
        (8, "overlap law", overlap_law),
        (9, "quality trend", quality_trend),
        (10, "budget behaviour", budget_behaviour),
        (11, "metric sanity", metric_sanity),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(anyhow::anyhow!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(e) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {e:#} [{secs:.1}s]");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
