//! A small U-shaped noise predictor.
//!
//! `depth` down blocks halve the resolution (except the first), a middle
//! block runs one level below the deepest, and `depth` up blocks each
//! concatenate the matching down block's output with the block below and
//! upsample back. Every block is FiLM-conditioned on a sinusoidal embedding
//! of the timestep.
//!
//! With cache depth `m`, a cached pass runs only `down0..=down{m}` and
//! `up{m}..=up0`, taking the input of `up{m}` from features stored by the last
//! full pass (the output of the block directly below `up{m}`). Both paths use
//! the same code for the shallow blocks, so a cached pass fed features from a
//! full pass at the same input and timestep reproduces it bit for bit.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chunk::{run_chunked, BlockChain, ChainOp, ChunkSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, NormalStream};
use crate::tensor::{KernelBank, Shape5, Tensor5};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub kernel: usize,
    pub cache_depth: usize,
    pub weight_seed: u64,
    pub in_channels: usize,
    pub emb_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 3,
            base_channels: 8,
            kernel: 3,
            cache_depth: 0,
            weight_seed: 1234,
            in_channels: 4,
            emb_dim: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.depth == 0 {
            return bad("unet depth must be ≥ 1".into());
        }
        if self.cache_depth >= self.depth {
            return bad(format!(
                "cache depth {} must be below the unet depth {}",
                self.cache_depth, self.depth
            ));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return bad("channel counts must be ≥ 1".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel size {} must be odd", self.kernel));
        }
        if self.emb_dim == 0 || !self.emb_dim.is_multiple_of(2) {
            return bad(format!(
                "embedding size {} must be even and ≥ 2",
                self.emb_dim
            ));
        }
        Ok(())
    }

    /// Output channels of down/up blocks at level `i`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channels of the features fed into `up{level}` from below.
    pub fn below_channels(&self, level: usize) -> usize {
        if level + 1 < self.depth {
            self.channels(level + 1)
        } else {
            self.channels(self.depth - 1)
        }
    }

    /// Latent extents must survive `depth` halvings.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let q = 1usize << self.depth;
        if !h.is_multiple_of(q) || !w.is_multiple_of(q) || h == 0 || w == 0 {
            return Err(Error::InvalidShape(format!(
                "latent {h}x{w} must be a multiple of {q}"
            )));
        }
        Ok(())
    }

    /// Shape of the stored deep features for one branch.
    pub fn deep_shape(&self, t: usize, h: usize, w: usize) -> Result<Shape5> {
        let m = self.cache_depth;
        Shape5::new(1, t, self.below_channels(m), h >> m, w >> m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockId {
    Down(usize),
    Mid,
    Up(usize),
}

impl BlockId {
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockId::Down(i) => write!(f, "down{i}"),
            BlockId::Mid => f.write_str("mid"),
            BlockId::Up(i) => write!(f, "up{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PassKind {
    Full,
    Cached,
}

/// Blocks a pass executes, in execution order.
pub fn pass_blocks(cfg: &UNetConfig, kind: PassKind) -> Vec<BlockId> {
    let top = match kind {
        PassKind::Full => cfg.depth - 1,
        PassKind::Cached => cfg.cache_depth,
    };
    let mut v: Vec<BlockId> = (0..=top).map(BlockId::Down).collect();
    if kind == PassKind::Full {
        v.push(BlockId::Mid);
    }
    v.extend((0..=top).rev().map(BlockId::Up));
    v
}

/// Closed-form multiply-accumulate count of one pass over a latent of
/// shape `s`: `k² · c_in · c_out · h · w` per conv, per (b, t) slab.
pub fn flops_estimate(cfg: &UNetConfig, kind: PassKind, s: Shape5) -> u64 {
    let k2 = (cfg.kernel * cfg.kernel) as u64;
    let slabs = (s.b * s.t) as u64;
    let area = |level: usize| ((s.h >> level) * (s.w >> level)) as u64;
    let conv = |c_in: usize, c_out: usize, level: usize| k2 * (c_in * c_out) as u64 * area(level);
    let mut total = 0;
    for b in pass_blocks(cfg, kind) {
        total += match b {
            BlockId::Down(0) => conv(cfg.in_channels, cfg.channels(0), 0),
            BlockId::Down(i) => conv(cfg.channels(i - 1), cfg.channels(i), i),
            BlockId::Mid => {
                let c = cfg.channels(cfg.depth - 1);
                conv(c, c, cfg.depth)
            }
            BlockId::Up(i) => {
                let c = cfg.channels(i);
                let main = conv(c + cfg.below_channels(i), c, i);
                if i == 0 {
                    main + conv(c, cfg.in_channels, 0)
                } else {
                    main
                }
            }
        };
    }
    total * slabs
}

/// Radians per timestep at the highest embedding frequency. The blocks read
/// the embedding directly (no learned time MLP), so it has to vary slowly
/// between neighbouring sampled steps.
pub const EMBED_TIME_SCALE: f64 = 0.1;

/// Sinusoidal embedding: `[sin(τ f_k)..., cos(τ f_k)...]` with
/// `τ = t · EMBED_TIME_SCALE` and `f_k = 10000^(-k / half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let tau = t as f64 * EMBED_TIME_SCALE;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp())
        .collect();
    let mut e: Vec<f64> = freqs.iter().map(|f| (tau * f).sin()).collect();
    e.extend(freqs.iter().map(|f| (tau * f).cos()));
    e
}

struct BlockWeights {
    conv: Arc<KernelBank>,
    head: Option<Arc<KernelBank>>,
    /// `c_in × emb_dim`, row-major.
    film_scale: Vec<f32>,
    film_shift: Vec<f32>,
    c_in: usize,
}

impl BlockWeights {
    fn init(
        cfg: &UNetConfig,
        c_in: usize,
        c_out: usize,
        head: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let mut film = NormalStream::new(derive_seed(seed, 1));
        let mut gen = |n: usize| {
            (0..n)
                .map(|_| 0.1 * film.next_normal())
                .collect::<Vec<f32>>()
        };
        let film_scale = gen(c_in * cfg.emb_dim);
        let film_shift = gen(c_in * cfg.emb_dim);
        let head = match head {
            Some(out) => Some(Arc::new(KernelBank::random(
                out,
                c_out,
                cfg.kernel,
                derive_seed(seed, 2),
            )?)),
            None => None,
        };
        Ok(BlockWeights {
            conv: Arc::new(KernelBank::random(
                c_out,
                c_in,
                cfg.kernel,
                derive_seed(seed, 0),
            )?),
            head,
            film_scale,
            film_shift,
            c_in,
        })
    }

    fn film(&self, emb: &[f64]) -> ChainOp {
        let d = emb.len();
        let dot = |w: &[f32], c: usize| -> f64 {
            w[c * d..(c + 1) * d]
                .iter()
                .zip(emb)
                .map(|(a, e)| *a as f64 * e)
                .sum()
        };
        ChainOp::Film {
            scale: (0..self.c_in)
                .map(|c| (1.0 + dot(&self.film_scale, c)) as f32)
                .collect(),
            shift: (0..self.c_in)
                .map(|c| dot(&self.film_shift, c) as f32)
                .collect(),
        }
    }
}

/// Stored output of the block below `up{m}`, one tensor per batch index
/// (unconditional first, then conditional).
pub struct DeepFeatures {
    pub slabs: Vec<Tensor5>,
    pub origin_t: usize,
}

impl DeepFeatures {
    pub fn bytes(&self) -> u64 {
        self.slabs.iter().map(Tensor5::bytes).sum()
    }
}

pub struct UNet {
    cfg: UNetConfig,
    down: Vec<BlockWeights>,
    mid: BlockWeights,
    up: Vec<BlockWeights>,
    cond_bias: Vec<f32>,
    chunk: Option<ChunkSpec>,
}

impl UNet {
    /// Deterministic weights from `cfg.weight_seed`.
    pub fn new(cfg: UNetConfig) -> Result<UNet> {
        cfg.validate()?;
        let seed = |i: u64| derive_seed(cfg.weight_seed, i);
        let mut down = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let c_in = if i == 0 {
                cfg.in_channels
            } else {
                cfg.channels(i - 1)
            };
            down.push(BlockWeights::init(
                &cfg,
                c_in,
                cfg.channels(i),
                None,
                seed(i as u64),
            )?);
        }
        let cm = cfg.channels(cfg.depth - 1);
        let mid = BlockWeights::init(&cfg, cm, cm, None, seed(100))?;
        let mut up = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let c = cfg.channels(i);
            let head = (i == 0).then_some(cfg.in_channels);
            up.push(BlockWeights::init(
                &cfg,
                c + cfg.below_channels(i),
                c,
                head,
                seed(200 + i as u64),
            )?);
        }
        let mut cb = NormalStream::new(seed(300));
        let cond_bias = (0..cfg.in_channels)
            .map(|_| 0.5 * cb.next_normal())
            .collect();
        Ok(UNet {
            cfg,
            down,
            mid,
            up,
            cond_bias,
            chunk: None,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Per-channel offset applied to the conditional branch's input.
    pub fn cond_bias(&self) -> &[f32] {
        &self.cond_bias
    }

    pub fn set_chunking(&mut self, spec: Option<ChunkSpec>) {
        self.chunk = spec;
    }

    pub fn chunking(&self) -> Option<&ChunkSpec> {
        self.chunk.as_ref()
    }

    /// Stack `x` (b = 1) into an unconditional / conditional pair (b = 2).
    pub fn guidance_pair(&self, x: &Tensor5) -> Result<Tensor5> {
        if x.shape().b != 1 {
            return Err(Error::InvalidShape(format!(
                "guidance pair from {}",
                x.shape()
            )));
        }
        let both = Tensor5::concat_batch(&[x, x])?;
        both.add_channel_bias(1, &self.cond_bias)
    }

    /// The op sequence of `block` at timestep `t`.
    pub fn block_chain(&self, block: BlockId, t: usize) -> BlockChain {
        let emb = timestep_embedding(t, self.cfg.emb_dim);
        let mut ops = Vec::new();
        let w = match block {
            BlockId::Down(i) => {
                if i > 0 {
                    ops.push(ChainOp::Down);
                }
                &self.down[i]
            }
            BlockId::Mid => {
                ops.push(ChainOp::Down);
                &self.mid
            }
            BlockId::Up(i) => &self.up[i],
        };
        ops.push(w.film(&emb));
        ops.push(ChainOp::Conv(Arc::clone(&w.conv)));
        ops.push(ChainOp::Act);
        match block {
            BlockId::Mid => ops.push(ChainOp::Up),
            BlockId::Up(i) if i > 0 => ops.push(ChainOp::Up),
            _ => {}
        }
        if let Some(head) = &w.head {
            ops.push(ChainOp::Conv(Arc::clone(head)));
        }
        BlockChain::new(block.label(), ops)
    }

    fn run_block(&self, block: BlockId, t: usize, x: &Tensor5) -> Result<Tensor5> {
        let chain = self.block_chain(block, t);
        x.ledger().note_block(&chain.label);
        match &self.chunk {
            Some(spec) if spec.applies_to(&chain.label) => run_chunked(&chain, x, spec),
            _ => chain.run(x),
        }
    }

    fn check_input(&self, x: &Tensor5) -> Result<()> {
        let s = x.shape();
        if s.c != self.cfg.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.cfg.in_channels,
                got: s.c,
            });
        }
        self.cfg.check_extent(s.h, s.w)?;
        if !x.is_finite() {
            return Err(Error::NonFinite("denoiser input".into()));
        }
        Ok(())
    }

    /// Run the shallow down blocks of a pass.
    pub fn begin_pass(&self, x: &Tensor5, t: usize) -> Result<ShallowPass<'_>> {
        self.check_input(x)?;
        let mut skips: Vec<Tensor5> = Vec::with_capacity(self.cfg.cache_depth + 1);
        for i in 0..=self.cfg.cache_depth {
            let d = match skips.last() {
                None => self.run_block(BlockId::Down(0), t, x)?,
                Some(prev) => self.run_block(BlockId::Down(i), t, prev)?,
            };
            skips.push(d);
        }
        Ok(ShallowPass {
            unet: self,
            t,
            batch: x.shape().b,
            skips,
            joined: None,
        })
    }

    /// Full pass. Returns the noise prediction and the deep features to
    /// store.
    pub fn forward_full(&self, x: &Tensor5, t: usize) -> Result<(Tensor5, DeepFeatures)> {
        let mut pass = self.begin_pass(x, t)?;
        let m = self.cfg.cache_depth;
        let top = self.cfg.depth - 1;
        let mut deep_skips: Vec<Tensor5> = Vec::new();
        for i in m + 1..=top {
            let src = deep_skips.last().unwrap_or(&pass.skips[m]);
            let d = self.run_block(BlockId::Down(i), t, src)?;
            deep_skips.push(d);
        }
        let bottom = deep_skips.last().unwrap_or(&pass.skips[m]);
        let mut u = self.run_block(BlockId::Mid, t, bottom)?;
        for i in (m + 1..=top).rev() {
            let d = deep_skips.pop().expect("one skip per deep level");
            let cat = Tensor5::concat_channels(&d, &u)?;
            drop(d);
            drop(u);
            u = self.run_block(BlockId::Up(i), t, &cat)?;
        }
        let slabs = u.split_batch()?;
        {
            let refs: Vec<&Tensor5> = slabs.iter().collect();
            pass.join_deep(&refs)?;
        }
        let eps = pass.finish()?;
        Ok((eps, DeepFeatures { slabs, origin_t: t }))
    }

    /// Cached pass reusing `deep` from an earlier full pass.
    pub fn forward_cached(&self, x: &Tensor5, t: usize, deep: &[&Tensor5]) -> Result<Tensor5> {
        let mut pass = self.begin_pass(x, t)?;
        pass.join_deep(deep)?;
        pass.finish()
    }
}

/// A pass that has run `down0..=down{m}` and waits for the deep features.
pub struct ShallowPass<'a> {
    unet: &'a UNet,
    t: usize,
    batch: usize,
    skips: Vec<Tensor5>,
    joined: Option<Tensor5>,
}

impl ShallowPass<'_> {
    /// Concatenate the deep features (one slab per batch index) onto the
    /// deepest shallow skip.
    pub fn join_deep(&mut self, deep: &[&Tensor5]) -> Result<()> {
        if self.joined.is_some() {
            return Err(Error::InvalidArgument(
                "deep features already joined".into(),
            ));
        }
        let cfg = &self.unet.cfg;
        let skip = self.skips.last().expect("at least down0");
        let s = skip.shape();
        let want = Shape5::new(1, s.t, cfg.below_channels(cfg.cache_depth), s.h, s.w)?;
        if deep.len() != self.batch {
            return Err(Error::ShapeMismatch(format!(
                "{} deep slabs for batch {}",
                deep.len(),
                self.batch
            )));
        }
        if let Some(bad) = deep.iter().find(|d| d.shape() != want) {
            return Err(Error::ShapeMismatch(format!(
                "deep features {} where {want} expected",
                bad.shape()
            )));
        }
        let skip = self.skips.pop().expect("at least down0");
        let cat = Tensor5::concat_channels_slabs(&skip, deep)?;
        drop(skip);
        self.joined = Some(cat);
        Ok(())
    }

    /// Run `up{m}..=up0` and return the noise prediction.
    pub fn finish(mut self) -> Result<Tensor5> {
        let cat = self
            .joined
            .take()
            .ok_or_else(|| Error::InvalidArgument("finish before join_deep".into()))?;
        let m = self.unet.cfg.cache_depth;
        let mut u = self.unet.run_block(BlockId::Up(m), self.t, &cat)?;
        drop(cat);
        for i in (0..m).rev() {
            let d = self.skips.pop().expect("one skip per shallow level");
            let cat = Tensor5::concat_channels(&d, &u)?;
            drop(d);
            drop(u);
            u = self.unet.run_block(BlockId::Up(i), self.t, &cat)?;
        }
        Ok(u)
    }
}
