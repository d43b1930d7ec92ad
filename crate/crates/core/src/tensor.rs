//! Dense 5-D tensors with ledger-visible allocations.
//!
//! Layout is row-major `{b, t, c, h, w}`. Every [`Tensor5`] owns one ledger
//! allocation: constructing one records an `Alloc`, dropping it records the
//! matching `Free`. Tensors are not `Clone`; use [`Tensor5::duplicate`] so
//! the copy is accounted for.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ledger::{AllocId, Ledger};
use crate::rng::NormalStream;

pub const ELEM_BYTES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape5 {
    pub b: usize,
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub fn new(b: usize, t: usize, c: usize, h: usize, w: usize) -> Result<Shape5> {
        let s = Shape5 { b, t, c, h, w };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.b, self.t, self.c, self.h, self.w];
        if dims.contains(&0) {
            return Err(Error::InvalidShape(format!("{self} has a zero extent")));
        }
        dims.iter()
            .try_fold(ELEM_BYTES as usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape(format!("{self} overflows")))?;
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.b * self.t * self.c * self.h * self.w
    }

    pub fn bytes(&self) -> u64 {
        self.numel() as u64 * ELEM_BYTES
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_c(self, c: usize) -> Shape5 {
        Shape5 { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Shape5 {
        Shape5 { h, w, ..self }
    }

    pub fn with_b(self, b: usize) -> Shape5 {
        Shape5 { b, ..self }
    }

    fn index(&self, b: usize, t: usize, c: usize, y: usize, x: usize) -> usize {
        (((b * self.t + t) * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {}, {})",
            self.b, self.t, self.c, self.h, self.w
        )
    }
}

/// Half-open spatial window `[y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Region {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Region {
    pub fn new(y0: usize, y1: usize, x0: usize, x1: usize) -> Region {
        Region { y0, y1, x0, x1 }
    }

    pub fn full(h: usize, w: usize) -> Region {
        Region::new(0, h, 0, w)
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    fn check_within(&self, h: usize, w: usize) -> Result<()> {
        if self.y0 >= self.y1 || self.x0 >= self.x1 || self.y1 > h || self.x1 > w {
            return Err(Error::OutOfBounds(format!(
                "region {self:?} not within {h}x{w}"
            )));
        }
        Ok(())
    }
}

/// Square convolution kernels, `weights[o][i][ky][kx]`, plus a per-output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl KernelBank {
    pub fn new(
        c_out: usize,
        c_in: usize,
        k: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if k.is_multiple_of(2) || k == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel size {k} must be odd"
            )));
        }
        if c_out == 0 || c_in == 0 {
            return Err(Error::InvalidArgument(
                "kernel channel counts must be ≥ 1".into(),
            ));
        }
        if weights.len() != c_out * c_in * k * k || bias.len() != c_out {
            return Err(Error::ShapeMismatch(format!(
                "kernel bank {c_out}x{c_in}x{k}x{k} given {} weights / {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(KernelBank {
            c_out,
            c_in,
            k,
            weights,
            bias,
        })
    }

    /// Normal weights scaled by `1/√fan_in`, zero bias.
    pub fn random(c_out: usize, c_in: usize, k: usize, seed: u64) -> Result<Self> {
        let n = c_out * c_in * k * k;
        let mut weights = vec![0.0; n];
        NormalStream::new(seed).fill(&mut weights);
        let scale = 1.0 / ((c_in * k * k) as f32).sqrt();
        for v in &mut weights {
            *v *= scale;
        }
        KernelBank::new(c_out, c_in, k, weights, vec![0.0; c_out])
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != self.c_out {
            return Err(Error::ShapeMismatch("bias length".into()));
        }
        self.bias = bias;
        Ok(self)
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Multiply-accumulates for one application over `h × w` pixels of one
    /// (b, t) slab.
    pub fn macs_per_slab(&self, h: usize, w: usize) -> u64 {
        (self.k * self.k * self.c_in * self.c_out * h * w) as u64
    }
}

struct AllocHandle {
    id: AllocId,
    ledger: Ledger,
}

impl Drop for AllocHandle {
    fn drop(&mut self) {
        self.ledger.release(self.id);
    }
}

pub struct Tensor5 {
    shape: Shape5,
    data: Vec<f32>,
    handle: AllocHandle,
}

impl fmt::Debug for Tensor5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor5")
            .field("shape", &self.shape)
            .field("alloc_id", &self.handle.id)
            .finish()
    }
}

impl Tensor5 {
    fn build(ledger: &Ledger, shape: Shape5, data: Vec<f32>) -> Result<Tensor5> {
        shape.validate()?;
        debug_assert_eq!(data.len(), shape.numel());
        let id = ledger.alloc(shape.bytes())?;
        Ok(Tensor5 {
            shape,
            data,
            handle: AllocHandle {
                id,
                ledger: Arc::clone(ledger),
            },
        })
    }

    pub fn zeros(ledger: &Ledger, shape: Shape5) -> Result<Tensor5> {
        shape.validate()?;
        Tensor5::build(ledger, shape, vec![0.0; shape.numel()])
    }

    pub fn filled(ledger: &Ledger, shape: Shape5, value: f32) -> Result<Tensor5> {
        shape.validate()?;
        Tensor5::build(ledger, shape, vec![value; shape.numel()])
    }

    pub fn from_vec(ledger: &Ledger, shape: Shape5, data: Vec<f32>) -> Result<Tensor5> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape}",
                data.len()
            )));
        }
        Tensor5::build(ledger, shape, data)
    }

    /// Standard-normal tensor; the same `(shape, seed)` is bit-identical.
    pub fn randn(ledger: &Ledger, shape: Shape5, seed: u64) -> Result<Tensor5> {
        shape.validate()?;
        let mut data = vec![0.0; shape.numel()];
        NormalStream::new(seed).fill(&mut data);
        Tensor5::build(ledger, shape, data)
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ledger(&self) -> &Ledger {
        &self.handle.ledger
    }

    pub fn alloc_id(&self) -> AllocId {
        self.handle.id
    }

    pub fn bytes(&self) -> u64 {
        self.shape.bytes()
    }

    pub fn at(&self, b: usize, t: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(b, t, c, y, x)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn duplicate(&self) -> Result<Tensor5> {
        Tensor5::build(self.ledger(), self.shape, self.data.clone())
    }

    /// Reinterpret with a new shape of equal element count. No ledger events.
    pub fn reshape(mut self, shape: Shape5) -> Result<Tensor5> {
        shape.validate()?;
        if shape.numel() != self.shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} to {shape}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Copy the buffer into a fresh allocation, as a tier transfer would.
    pub(crate) fn rehome(&mut self) {
        let copy = self.data.as_slice().to_vec();
        self.data = copy;
    }

    fn derive(&self, shape: Shape5, data: Vec<f32>) -> Result<Tensor5> {
        Tensor5::build(self.ledger(), shape, data)
    }

    /// Per-(b,t) 2-D cross-correlation with zero "same" padding. Each output
    /// starts from the bias and accumulates in `(channel, ky, kx)` ascending
    /// order, so results are bit-reproducible.
    pub fn conv2d(&self, bank: &KernelBank) -> Result<Tensor5> {
        self.conv2d_labelled(bank, None)
    }

    pub fn conv2d_labelled(&self, bank: &KernelBank, label: Option<&str>) -> Result<Tensor5> {
        let s = self.shape;
        if bank.c_in != s.c {
            return Err(Error::ChannelMismatch {
                expected: bank.c_in,
                got: s.c,
            });
        }
        let out_shape = s.with_c(bank.c_out);
        let hw = s.plane();
        let (h, w, k, c_in, c_out) = (s.h, s.w, bank.k, s.c, bank.c_out);
        let pad = (k / 2) as isize;
        let mut out = vec![0.0f32; out_shape.numel()];
        let input = &self.data;
        out.par_chunks_mut(hw).enumerate().for_each(|(idx, plane)| {
            let bt = idx / c_out;
            let o = idx % c_out;
            plane.fill(bank.bias[o]);
            for ci in 0..c_in {
                let inp = &input[(bt * c_in + ci) * hw..][..hw];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = bank.weights[((o * c_in + ci) * k + ky) * k + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let out_row = &mut plane[y * w + x0..y * w + x1];
                            let sx0 = (x0 as isize + dx) as usize;
                            let in_row = &inp[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            for (o_v, &i_v) in out_row.iter_mut().zip(in_row) {
                                *o_v += wv * i_v;
                            }
                        }
                    }
                }
            }
        });
        let t = self.derive(out_shape, out)?;
        self.ledger()
            .charge_macs(label, bank.macs_per_slab(h, w) * (s.b * s.t) as u64);
        Ok(t)
    }

    /// 2×2 mean pool.
    pub fn downsample2(&self) -> Result<Tensor5> {
        let s = self.shape;
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::InvalidShape(format!(
                "downsample needs even extents, got {}x{}",
                s.h, s.w
            )));
        }
        let (oh, ow) = (s.h / 2, s.w / 2);
        let out_shape = s.with_hw(oh, ow);
        let mut out = vec![0.0f32; out_shape.numel()];
        for (plane_idx, dst) in out.chunks_mut(oh * ow).enumerate() {
            let src = &self.data[plane_idx * s.plane()..][..s.plane()];
            for y in 0..oh {
                for x in 0..ow {
                    let a = src[2 * y * s.w + 2 * x];
                    let b = src[2 * y * s.w + 2 * x + 1];
                    let c = src[(2 * y + 1) * s.w + 2 * x];
                    let d = src[(2 * y + 1) * s.w + 2 * x + 1];
                    dst[y * ow + x] = (a + b + c + d) * 0.25;
                }
            }
        }
        self.derive(out_shape, out)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&self) -> Result<Tensor5> {
        let s = self.shape;
        let (oh, ow) = (s.h * 2, s.w * 2);
        let out_shape = s.with_hw(oh, ow);
        out_shape.validate()?;
        let mut out = vec![0.0f32; out_shape.numel()];
        for (plane_idx, dst) in out.chunks_mut(oh * ow).enumerate() {
            let src = &self.data[plane_idx * s.plane()..][..s.plane()];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y / 2) * s.w + x / 2];
                }
            }
        }
        self.derive(out_shape, out)
    }

    /// Channel concatenation; `a` occupies the leading channel slab.
    pub fn concat_channels(a: &Tensor5, b: &Tensor5) -> Result<Tensor5> {
        Tensor5::concat_channels_slabs(a, &[b])
    }

    /// Channel concatenation where the second operand is given as per-batch
    /// slabs (each with `b == 1`, or one tensor covering all of `a.b`).
    pub fn concat_channels_slabs(a: &Tensor5, slabs: &[&Tensor5]) -> Result<Tensor5> {
        let sa = a.shape;
        let per_slab: Vec<(usize, &Tensor5)> = if slabs.len() == 1 && slabs[0].shape.b == sa.b {
            (0..sa.b).map(|bi| (bi, slabs[0])).collect()
        } else if slabs.len() == sa.b && slabs.iter().all(|s| s.shape.b == 1) {
            slabs.iter().map(|&s| (0, s)).collect()
        } else {
            return Err(Error::ShapeMismatch(format!(
                "cannot concat {} batch slabs onto batch {}",
                slabs.len(),
                sa.b
            )));
        };
        let cb = slabs[0].shape.c;
        for s in slabs {
            let sb = s.shape;
            if sb.t != sa.t || sb.h != sa.h || sb.w != sa.w || sb.c != cb {
                return Err(Error::ShapeMismatch(format!("concat of {sa} with {sb}")));
            }
        }
        let out_shape = sa.with_c(sa.c + cb);
        let hw = sa.plane();
        let mut out = Vec::with_capacity(out_shape.numel());
        for (bi, &(src_b, src)) in per_slab.iter().enumerate() {
            for ti in 0..sa.t {
                let a_off = (bi * sa.t + ti) * sa.c * hw;
                out.extend_from_slice(&a.data[a_off..a_off + sa.c * hw]);
                let b_off = (src_b * sa.t + ti) * cb * hw;
                out.extend_from_slice(&src.data[b_off..b_off + cb * hw]);
            }
        }
        a.derive(out_shape, out)
    }

    /// Stack tensors along the batch axis.
    pub fn concat_batch(parts: &[&Tensor5]) -> Result<Tensor5> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch concat".into()))?;
        let s0 = first.shape;
        let mut b = 0;
        for p in parts {
            let s = p.shape;
            if (s.t, s.c, s.h, s.w) != (s0.t, s0.c, s0.h, s0.w) {
                return Err(Error::ShapeMismatch(format!("batch concat {s0} with {s}")));
            }
            b += s.b;
        }
        let mut out = Vec::with_capacity(s0.numel() / s0.b * b);
        for p in parts {
            out.extend_from_slice(&p.data);
        }
        first.derive(s0.with_b(b), out)
    }

    /// Consume the tensor and return one tensor per batch index. The ledger
    /// sees the original freed before the slabs are allocated.
    pub fn split_batch(self) -> Result<Vec<Tensor5>> {
        let s = self.shape;
        let ledger = Arc::clone(self.ledger());
        let Tensor5 { data, handle, .. } = self;
        drop(handle);
        let slab = s.numel() / s.b;
        let slab_shape = s.with_b(1);
        data.chunks(slab)
            .map(|chunk| Tensor5::build(&ledger, slab_shape, chunk.to_vec()))
            .collect()
    }

    /// Copy of batch index `bi` (shape with `b == 1`).
    pub fn batch_slab(&self, bi: usize) -> Result<Tensor5> {
        let s = self.shape;
        if bi >= s.b {
            return Err(Error::OutOfBounds(format!("batch index {bi} of {}", s.b)));
        }
        let slab = s.numel() / s.b;
        self.derive(s.with_b(1), self.data[bi * slab..(bi + 1) * slab].to_vec())
    }

    /// Overwrite batch index `bi` with `src` (which must have `b == 1`).
    pub fn put_batch_slab(&mut self, bi: usize, src: &Tensor5) -> Result<()> {
        let s = self.shape;
        if bi >= s.b {
            return Err(Error::OutOfBounds(format!("batch index {bi} of {}", s.b)));
        }
        if src.shape != s.with_b(1) {
            return Err(Error::ShapeMismatch(format!("slab {} into {s}", src.shape)));
        }
        let slab = s.numel() / s.b;
        self.data[bi * slab..(bi + 1) * slab].copy_from_slice(&src.data);
        Ok(())
    }

    fn check_same(&self, other: &Tensor5, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{op}: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor5) -> Result<Tensor5> {
        self.check_same(other, "add")?;
        let out = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        self.derive(self.shape, out)
    }

    pub fn sub(&self, other: &Tensor5) -> Result<Tensor5> {
        self.check_same(other, "sub")?;
        let out = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        self.derive(self.shape, out)
    }

    pub fn scale(&self, alpha: f32) -> Result<Tensor5> {
        self.map(|v| v * alpha)
    }

    /// `alpha * self + beta * other`, evaluated per element in that order.
    pub fn axpby(&self, alpha: f32, other: &Tensor5, beta: f32) -> Result<Tensor5> {
        self.check_same(other, "axpby")?;
        let out = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        self.derive(self.shape, out)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Result<Tensor5> {
        self.map(|v| v / (1.0 + (-v).exp()))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Tensor5> {
        let out = self.data.iter().map(|&v| f(v)).collect();
        self.derive(self.shape, out)
    }

    /// Per-channel affine `x * scale[c] + shift[c]`.
    pub fn film(&self, scale: &[f32], shift: &[f32]) -> Result<Tensor5> {
        let s = self.shape;
        if scale.len() != s.c || shift.len() != s.c {
            return Err(Error::ChannelMismatch {
                expected: s.c,
                got: scale.len(),
            });
        }
        let hw = s.plane();
        let mut out = Vec::with_capacity(s.numel());
        for (plane_idx, src) in self.data.chunks(hw).enumerate() {
            let c = plane_idx % s.c;
            let (a, b) = (scale[c], shift[c]);
            out.extend(src.iter().map(|&v| v * a + b));
        }
        self.derive(s, out)
    }

    /// Add a per-channel constant to one batch index, returning a new tensor.
    pub fn add_channel_bias(&self, batch: usize, bias: &[f32]) -> Result<Tensor5> {
        let s = self.shape;
        if bias.len() != s.c {
            return Err(Error::ChannelMismatch {
                expected: s.c,
                got: bias.len(),
            });
        }
        if batch >= s.b {
            return Err(Error::OutOfBounds(format!("batch {batch} of {}", s.b)));
        }
        let hw = s.plane();
        let mut out = self.data.clone();
        for (plane_idx, dst) in out.chunks_mut(hw).enumerate() {
            let bi = plane_idx / (s.t * s.c);
            if bi == batch {
                let c = plane_idx % s.c;
                for v in dst {
                    *v += bias[c];
                }
            }
        }
        self.derive(s, out)
    }

    pub fn crop_spatial(&self, region: Region) -> Result<Tensor5> {
        let s = self.shape;
        region.check_within(s.h, s.w)?;
        let out_shape = s.with_hw(region.height(), region.width());
        let mut out = Vec::with_capacity(out_shape.numel());
        for src in self.data.chunks(s.plane()) {
            for y in region.y0..region.y1 {
                out.extend_from_slice(&src[y * s.w + region.x0..y * s.w + region.x1]);
            }
        }
        self.derive(out_shape, out)
    }

    /// Overwrite the window of `self` at `offset` (y, x) with all of `src`.
    pub fn paste_spatial(&mut self, src: &Tensor5, offset: (usize, usize)) -> Result<()> {
        let ss = src.shape;
        self.paste_window(src, Region::full(ss.h, ss.w), offset)
    }

    /// Overwrite a window of `self` with `src_region` of `src`.
    pub fn paste_window(
        &mut self,
        src: &Tensor5,
        src_region: Region,
        offset: (usize, usize),
    ) -> Result<()> {
        let (d, s) = (self.shape, src.shape);
        if (d.b, d.t, d.c) != (s.b, s.t, s.c) {
            return Err(Error::ShapeMismatch(format!("paste {s} into {d}")));
        }
        src_region.check_within(s.h, s.w)?;
        let dst_region = Region::new(
            offset.0,
            offset.0 + src_region.height(),
            offset.1,
            offset.1 + src_region.width(),
        );
        dst_region.check_within(d.h, d.w)?;
        let n = src_region.width();
        for (dst_plane, src_plane) in self
            .data
            .chunks_mut(d.plane())
            .zip(src.data.chunks(s.plane()))
        {
            for (dy, sy) in (src_region.y0..src_region.y1).enumerate() {
                let drow = (offset.0 + dy) * d.w + offset.1;
                let srow = sy * s.w + src_region.x0;
                dst_plane[drow..drow + n].copy_from_slice(&src_plane[srow..srow + n]);
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor5) -> Result<f32> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn bit_eq(&self, other: &Tensor5) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
