//! Block chains and spatially tiled ("chunked") execution.
//!
//! A [`BlockChain`] is a straight-line sequence of per-(b, t) spatial ops.
//! [`run_chunked`] splits the input's height into `eta` and its width into
//! `omega` core tiles, dilates each core by a halo, runs the chain on every
//! padded tile in turn and pastes the cropped results into one output
//! buffer. With [`Halo::Exact`] the halo is the chain's receptive-field
//! radius and the stitched output is bit-identical to an unchunked run.
//!
//! Tiles run sequentially; only one tile's activations are live at a time.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{KernelBank, Region, Shape5, Tensor5, ELEM_BYTES};

#[derive(Clone, PartialEq)]
pub enum ChainOp {
    Conv(Arc<KernelBank>),
    /// x · sigmoid(x)
    Act,
    Down,
    Up,
    /// Per-channel `x * scale + shift`.
    Film {
        scale: Vec<f32>,
        shift: Vec<f32>,
    },
}

impl fmt::Debug for ChainOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainOp::Conv(k) => write!(f, "Conv({}→{}, k{})", k.c_in, k.c_out, k.k),
            ChainOp::Act => f.write_str("Act"),
            ChainOp::Down => f.write_str("Down"),
            ChainOp::Up => f.write_str("Up"),
            ChainOp::Film { scale, .. } => write!(f, "Film({})", scale.len()),
        }
    }
}

impl ChainOp {
    fn apply(&self, x: &Tensor5, label: Option<&str>) -> Result<Tensor5> {
        match self {
            ChainOp::Conv(k) => x.conv2d_labelled(k, label),
            ChainOp::Act => x.silu(),
            ChainOp::Down => x.downsample2(),
            ChainOp::Up => x.upsample2(),
            ChainOp::Film { scale, shift } => x.film(scale, shift),
        }
    }

    fn out_shape(&self, s: Shape5) -> Result<Shape5> {
        match self {
            ChainOp::Conv(k) => {
                if k.c_in != s.c {
                    return Err(Error::ChannelMismatch {
                        expected: k.c_in,
                        got: s.c,
                    });
                }
                Ok(s.with_c(k.c_out))
            }
            ChainOp::Act | ChainOp::Film { .. } => Ok(s),
            ChainOp::Down => {
                if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
                    return Err(Error::InvalidShape(format!("downsample of {s}")));
                }
                Ok(s.with_hw(s.h / 2, s.w / 2))
            }
            ChainOp::Up => Ok(s.with_hw(s.h * 2, s.w * 2)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockChain {
    pub label: String,
    pub ops: Vec<ChainOp>,
}

impl BlockChain {
    pub fn new(label: impl Into<String>, ops: Vec<ChainOp>) -> BlockChain {
        BlockChain {
            label: label.into(),
            ops,
        }
    }

    /// Run on `input`; each intermediate is freed as soon as the next op's
    /// output exists.
    pub fn run(&self, input: &Tensor5) -> Result<Tensor5> {
        let (first, rest) = self
            .ops
            .split_first()
            .ok_or_else(|| Error::InvalidArgument(format!("chain {} is empty", self.label)))?;
        let label = Some(self.label.as_str());
        let mut cur = first.apply(input, label)?;
        for op in rest {
            cur = op.apply(&cur, label)?;
        }
        Ok(cur)
    }

    /// Output shapes of every op for an input of shape `s`.
    pub fn shapes(&self, s: Shape5) -> Result<Vec<Shape5>> {
        let mut out = Vec::with_capacity(self.ops.len());
        let mut cur = s;
        for op in &self.ops {
            cur = op.out_shape(cur)?;
            out.push(cur);
        }
        Ok(out)
    }

    pub fn output_shape(&self, s: Shape5) -> Result<Shape5> {
        Ok(self.shapes(s)?.last().copied().unwrap_or(s))
    }

    /// Peak bytes held by intermediates while running on an input of shape
    /// `s` (the input itself excluded): max over ops of output + previous
    /// intermediate.
    pub fn activation_bytes(&self, s: Shape5) -> Result<u64> {
        let shapes = self.shapes(s)?;
        let mut peak = 0;
        for (i, sh) in shapes.iter().enumerate() {
            let prev = if i > 0 { shapes[i - 1].bytes() } else { 0 };
            peak = peak.max(sh.bytes() + prev);
        }
        Ok(peak)
    }

    fn downsamples(&self) -> u32 {
        self.ops
            .iter()
            .filter(|o| matches!(o, ChainOp::Down))
            .count() as u32
    }

    fn upsamples(&self) -> u32 {
        self.ops.iter().filter(|o| matches!(o, ChainOp::Up)).count() as u32
    }

    /// Tile boundaries must be multiples of this so pooling windows line up.
    pub fn alignment(&self) -> usize {
        1usize << self.downsamples()
    }

    /// Map an input coordinate to the output grid. Exact for aligned
    /// coordinates.
    fn map_coord(&self, v: usize) -> usize {
        (v << self.upsamples()) >> self.downsamples()
    }
}

/// Receptive-field radius of a chain in input pixels: every output pixel of
/// an aligned tile depends only on inputs within this Chebyshev distance of
/// the tile. A `k×k` conv contributes `(k-1)/2` at the current scale, each
/// downsample doubles later contributions and each upsample halves them.
pub fn receptive_radius(chain: &BlockChain) -> usize {
    let mut scale = 1.0f64;
    let mut radius = 0.0f64;
    for op in &chain.ops {
        match op {
            ChainOp::Conv(k) => radius += ((k.k - 1) / 2) as f64 * scale,
            ChainOp::Down => scale *= 2.0,
            ChainOp::Up => scale /= 2.0,
            ChainOp::Act | ChainOp::Film { .. } => {}
        }
    }
    radius.ceil() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Halo {
    Exact,
    Fixed(usize),
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkSpec {
    pub eta: usize,
    pub omega: usize,
    pub halo: Halo,
    /// Block labels to chunk; `None` chunks every block offered.
    pub targets: Option<BTreeSet<String>>,
}

impl ChunkSpec {
    pub fn new(eta: usize, omega: usize, halo: Halo) -> Result<ChunkSpec> {
        if eta == 0 || omega == 0 {
            return Err(Error::InvalidArgument("eta and omega must be ≥ 1".into()));
        }
        Ok(ChunkSpec {
            eta,
            omega,
            halo,
            targets: None,
        })
    }

    pub fn with_targets<I, S>(mut self, targets: I) -> ChunkSpec
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.targets = Some(targets.into_iter().map(Into::into).collect());
        self
    }

    pub fn applies_to(&self, label: &str) -> bool {
        self.targets.as_ref().is_none_or(|t| t.contains(label))
    }

    /// Halo in input pixels for `chain`, rounded up to its alignment.
    pub fn halo_px(&self, chain: &BlockChain) -> usize {
        let raw = match self.halo {
            Halo::Exact => receptive_radius(chain),
            Halo::Fixed(h) => h,
            Halo::None => 0,
        };
        raw.div_ceil(chain.alignment()) * chain.alignment()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tile {
    pub core: Region,
    pub padded: Region,
    /// Window of the chain output (for the padded input) that belongs to the
    /// core.
    pub out_window: Region,
    /// Where that window lands in the full output.
    pub out_offset: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub tiles: Vec<Tile>,
}

impl TileGrid {
    /// `eta × omega` core tiles of an `h × w` extent, each dilated by `halo`
    /// and clamped to the bounds.
    pub fn split(
        h: usize,
        w: usize,
        eta: usize,
        omega: usize,
        halo: usize,
        align: usize,
    ) -> Result<TileGrid> {
        if eta == 0 || omega == 0 || !h.is_multiple_of(eta) || !w.is_multiple_of(omega) {
            return Err(Error::InvalidArgument(format!(
                "{h}x{w} is not divisible into {eta}x{omega} tiles"
            )));
        }
        let (th, tw) = (h / eta, w / omega);
        if th % align != 0 || tw % align != 0 {
            return Err(Error::InvalidArgument(format!(
                "tile {th}x{tw} is not a multiple of the chain alignment {align}"
            )));
        }
        let mut tiles = Vec::with_capacity(eta * omega);
        for i in 0..eta {
            for j in 0..omega {
                let core = Region::new(i * th, (i + 1) * th, j * tw, (j + 1) * tw);
                let padded = Region::new(
                    core.y0.saturating_sub(halo),
                    (core.y1 + halo).min(h),
                    core.x0.saturating_sub(halo),
                    (core.x1 + halo).min(w),
                );
                tiles.push(Tile {
                    core,
                    padded,
                    out_window: core,
                    out_offset: (core.y0, core.x0),
                });
            }
        }
        Ok(TileGrid { tiles })
    }

    /// Tile grid for running `chain` over `shape` under `spec`, with output
    /// windows mapped through the chain's geometry.
    pub fn for_chain(shape: Shape5, spec: &ChunkSpec, chain: &BlockChain) -> Result<TileGrid> {
        let align = chain.alignment();
        let mut grid = TileGrid::split(
            shape.h,
            shape.w,
            spec.eta,
            spec.omega,
            spec.halo_px(chain),
            align,
        )?;
        for t in &mut grid.tiles {
            let m = |v| chain.map_coord(v);
            t.out_window = Region::new(
                m(t.core.y0 - t.padded.y0),
                m(t.core.y1 - t.padded.y0),
                m(t.core.x0 - t.padded.x0),
                m(t.core.x1 - t.padded.x0),
            );
            t.out_offset = (m(t.core.y0), m(t.core.x0));
        }
        Ok(grid)
    }

    pub fn is_single(&self) -> bool {
        self.tiles.len() == 1
    }
}

/// Run `chain` over `input` tile by tile. A 1×1 grid runs the chain
/// directly.
pub fn run_chunked(chain: &BlockChain, input: &Tensor5, spec: &ChunkSpec) -> Result<Tensor5> {
    let grid = TileGrid::for_chain(input.shape(), spec, chain)?;
    if grid.is_single() {
        return chain.run(input);
    }
    let out_shape = chain.output_shape(input.shape())?;
    let mut out = Tensor5::zeros(input.ledger(), out_shape)?;
    for tile in &grid.tiles {
        let y = {
            let patch = input.crop_spatial(tile.padded)?;
            chain.run(&patch)?
        };
        let expect = (tile.out_window.y1, tile.out_window.x1);
        if expect.0 > y.shape().h || expect.1 > y.shape().w {
            return Err(Error::ShapeMismatch(format!(
                "tile output {} smaller than crop window {:?}",
                y.shape(),
                tile.out_window
            )));
        }
        out.paste_window(&y, tile.out_window, tile.out_offset)?;
    }
    Ok(out)
}

/// Predicted transient bytes of [`run_chunked`] above the live input: the
/// largest tile's patch plus its activations, plus the full output buffer.
/// For a 1×1 grid this is the unchunked activation footprint.
pub fn chunk_peak_model(spec: &ChunkSpec, chain: &BlockChain, shape: Shape5) -> Result<u64> {
    let grid = TileGrid::for_chain(shape, spec, chain)?;
    if grid.is_single() {
        return chain.activation_bytes(shape);
    }
    let out_bytes = chain.output_shape(shape)?.bytes();
    let mut worst = 0;
    for t in &grid.tiles {
        let ps = shape.with_hw(t.padded.height(), t.padded.width());
        worst = worst.max(ps.bytes() + chain.activation_bytes(ps)?);
    }
    Ok(out_bytes + worst)
}

/// Bytes of one padded tile patch (the tolerance unit for the peak model).
pub fn max_tile_bytes(spec: &ChunkSpec, chain: &BlockChain, shape: Shape5) -> Result<u64> {
    let grid = TileGrid::for_chain(shape, spec, chain)?;
    Ok(grid
        .tiles
        .iter()
        .map(|t| (shape.numel() / shape.plane() * t.padded.area()) as u64 * ELEM_BYTES)
        .max()
        .unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{MemLedger, StageTag, Tier};

    fn conv(c_in: usize, c_out: usize, k: usize, seed: u64) -> ChainOp {
        ChainOp::Conv(Arc::new(KernelBank::random(c_out, c_in, k, seed).unwrap()))
    }

    /// Perturb one input pixel and measure the farthest changed output.
    fn brute_force_radius(chain: &BlockChain, c: usize) -> usize {
        let l = MemLedger::real();
        let s = Shape5::new(1, 1, c, 15, 15).unwrap();
        let x = Tensor5::randn(&l, s, 3).unwrap();
        let base = chain.run(&x).unwrap();
        let mut v = x.data().to_vec();
        v[7 * 15 + 7] += 1.0;
        let y = chain.run(&Tensor5::from_vec(&l, s, v).unwrap()).unwrap();
        let os = y.shape();
        let mut r = 0;
        for ch in 0..os.c {
            for yy in 0..os.h {
                for xx in 0..os.w {
                    if y.at(0, 0, ch, yy, xx) != base.at(0, 0, ch, yy, xx) {
                        r = r.max(
                            (yy as isize - 7)
                                .unsigned_abs()
                                .max((xx as isize - 7).unsigned_abs()),
                        );
                    }
                }
            }
        }
        r
    }

    #[test]
    fn radius_matches_brute_force() {
        let one = BlockChain::new("a", vec![conv(1, 1, 3, 1)]);
        assert_eq!(receptive_radius(&one), 1);
        assert_eq!(brute_force_radius(&one, 1), 1);

        let two = BlockChain::new("b", vec![conv(1, 2, 3, 1), ChainOp::Act, conv(2, 1, 3, 2)]);
        assert_eq!(receptive_radius(&two), 2);
        assert_eq!(brute_force_radius(&two, 1), 2);

        let point = BlockChain::new("c", vec![conv(1, 1, 1, 1)]);
        assert_eq!(receptive_radius(&point), 0);
        assert_eq!(brute_force_radius(&point, 1), 0);
    }

    #[test]
    fn split_single_tile() {
        let g = TileGrid::split(8, 8, 1, 1, 3, 1).unwrap();
        assert_eq!(g.tiles.len(), 1);
        assert_eq!(g.tiles[0].core, Region::full(8, 8));
        assert_eq!(g.tiles[0].padded, Region::full(8, 8));
    }

    #[test]
    fn split_four_tiles_no_halo() {
        let g = TileGrid::split(8, 8, 2, 2, 0, 1).unwrap();
        assert_eq!(g.tiles.len(), 4);
        for t in &g.tiles {
            assert_eq!((t.core.height(), t.core.width()), (4, 4));
            assert_eq!(t.core, t.padded);
        }
    }

    #[test]
    fn split_fixed_halo_clamps_corners() {
        let g = TileGrid::split(8, 8, 2, 2, 1, 1).unwrap();
        for t in &g.tiles {
            assert_eq!((t.padded.height(), t.padded.width()), (5, 5));
        }
        assert_eq!(g.tiles[0].padded, Region::new(0, 5, 0, 5));
        assert_eq!(g.tiles[3].padded, Region::new(3, 8, 3, 8));
    }

    #[test]
    fn split_rejects_non_divisible() {
        assert!(TileGrid::split(9, 8, 2, 2, 0, 1).is_err());
        assert!(TileGrid::split(6, 6, 2, 2, 0, 2).is_err());
    }

    #[test]
    fn pointwise_chain_without_halo_is_exact() {
        let l = MemLedger::real();
        let chain = BlockChain::new("p", vec![conv(3, 2, 1, 4), ChainOp::Act]);
        let x = Tensor5::randn(&l, Shape5::new(2, 2, 3, 8, 8).unwrap(), 1).unwrap();
        let spec = ChunkSpec::new(2, 4, Halo::None).unwrap();
        let a = chain.run(&x).unwrap();
        let b = run_chunked(&chain, &x, &spec).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn exact_halo_with_resampling_is_exact() {
        let l = MemLedger::real();
        let chain = BlockChain::new(
            "mid",
            vec![
                ChainOp::Down,
                conv(2, 3, 3, 1),
                ChainOp::Act,
                ChainOp::Up,
                conv(3, 2, 3, 2),
            ],
        );
        let x = Tensor5::randn(&l, Shape5::new(1, 2, 2, 16, 16).unwrap(), 5).unwrap();
        let spec = ChunkSpec::new(2, 4, Halo::Exact).unwrap();
        let a = chain.run(&x).unwrap();
        let b = run_chunked(&chain, &x, &spec).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn no_halo_differs_only_near_seams() {
        let l = MemLedger::real();
        let chain = BlockChain::new("s", vec![conv(1, 1, 3, 8)]);
        let r = receptive_radius(&chain);
        let x = Tensor5::randn(&l, Shape5::new(1, 1, 1, 8, 8).unwrap(), 2).unwrap();
        let spec = ChunkSpec::new(2, 2, Halo::None).unwrap();
        let a = chain.run(&x).unwrap();
        let b = run_chunked(&chain, &x, &spec).unwrap();
        let near = |v: usize| (v as isize - 4).unsigned_abs() <= r || v + r == 4;
        let mut differs = false;
        for y in 0..8 {
            for xx in 0..8 {
                let d = a.at(0, 0, 0, y, xx) != b.at(0, 0, 0, y, xx);
                differs |= d;
                if d {
                    assert!(near(y) || near(xx), "diff at ({y},{xx}) away from seams");
                }
            }
        }
        assert!(differs);
    }

    fn measured_transient(chain: &BlockChain, spec: &ChunkSpec, s: Shape5) -> u64 {
        let l = MemLedger::real();
        l.enter_stage(StageTag::Denoise);
        let x = Tensor5::randn(&l, s, 1).unwrap();
        let base = l.occupancy(Tier::Fast);
        let y = run_chunked(chain, &x, spec).unwrap();
        drop(y);
        l.peak(StageTag::Denoise, Tier::Fast) - base
    }

    #[test]
    fn peak_model_matches_ledger() {
        let chain = BlockChain::new(
            "u",
            vec![
                ChainOp::Film {
                    scale: vec![1.0; 4],
                    shift: vec![0.0; 4],
                },
                conv(4, 6, 3, 1),
                ChainOp::Act,
                conv(6, 2, 3, 2),
            ],
        );
        let s = Shape5::new(2, 2, 4, 16, 16).unwrap();
        for (eta, omega, halo) in [
            (1, 1, Halo::Exact),
            (2, 2, Halo::None),
            (2, 4, Halo::Exact),
            (4, 2, Halo::Fixed(1)),
        ] {
            let spec = ChunkSpec::new(eta, omega, halo).unwrap();
            let model = chunk_peak_model(&spec, &chain, s).unwrap();
            let measured = measured_transient(&chain, &spec, s);
            assert_eq!(model, measured, "eta {eta} omega {omega}");
        }
    }

    #[test]
    fn peak_model_geometry() {
        let chain = BlockChain::new("g", vec![conv(2, 2, 3, 1), ChainOp::Act]);
        let s = Shape5::new(1, 1, 2, 8, 8).unwrap();
        let unchunked = chain.activation_bytes(s).unwrap();
        let one = ChunkSpec::new(1, 1, Halo::Exact).unwrap();
        assert_eq!(chunk_peak_model(&one, &chain, s).unwrap(), unchunked);

        let tile = s.with_hw(4, 4);
        assert_eq!(chain.activation_bytes(tile).unwrap() * 4, unchunked);

        // doubling omega with a fixed halo of h: padded width W/ω + 2h → W/(2ω) + 2h
        let s16 = s.with_hw(16, 16);
        let g2 = TileGrid::for_chain(s16, &ChunkSpec::new(4, 2, Halo::Fixed(1)).unwrap(), &chain)
            .unwrap();
        let g4 = TileGrid::for_chain(s16, &ChunkSpec::new(4, 4, Halo::Fixed(1)).unwrap(), &chain)
            .unwrap();
        for (g, omega) in [(&g2, 2), (&g4, 4)] {
            for t in &g.tiles {
                let halo_sides = usize::from(t.core.x0 > 0) + usize::from(t.core.x1 < 16);
                assert_eq!(t.padded.width(), 16 / omega + halo_sides);
            }
        }
        assert!(
            chain.activation_bytes(s16.with_hw(4, 6)).unwrap()
                < chain.activation_bytes(s16.with_hw(4, 10)).unwrap()
        );
    }
}
