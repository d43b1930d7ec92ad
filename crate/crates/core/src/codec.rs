//! Frame-wise toy encoder / decoder.
//!
//! Neither network mixes frames, so decoding one frame at a time gives the
//! same bits as decoding the whole merged batch at once.

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chunk::{BlockChain, ChainOp};
use crate::error::{Error, Result};
use crate::ledger::StageTag;
use crate::rng::{derive_seed, NormalStream};
use crate::tensor::{KernelBank, Shape5, Tensor5};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub latent_channels: usize,
    pub image_channels: usize,
    pub hidden_channels: usize,
    pub upsample_stages: usize,
    pub weight_seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            latent_channels: 4,
            image_channels: 3,
            hidden_channels: 16,
            upsample_stages: 2,
            weight_seed: 77,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.upsample_stages == 0 {
            return Err(Error::InvalidArgument(
                "codec needs at least one upsample stage".into(),
            ));
        }
        if self.latent_channels == 0 || self.image_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::InvalidArgument(
                "codec channel counts must be ≥ 1".into(),
            ));
        }
        Ok(())
    }

    pub fn factor(&self) -> usize {
        1 << self.upsample_stages
    }
}

fn conv(c_in: usize, c_out: usize, seed: u64) -> Result<ChainOp> {
    let mut bias = NormalStream::new(derive_seed(seed, 1));
    let bias = (0..c_out).map(|_| 0.1 * bias.next_normal()).collect();
    Ok(ChainOp::Conv(Arc::new(
        KernelBank::random(c_out, c_in, 3, seed)?.with_bias(bias)?,
    )))
}

/// Latents with batch and frame axes merged: shape `(B·T, 1, C, H, W)`,
/// element `(b, t)` at merged index `b·T + t`.
pub struct LatentBatch {
    pub merged: Tensor5,
    pub batch: usize,
    pub frames: usize,
}

/// Reinterpret `(B, T, ...)` as `(B·T, 1, ...)`. No copy, no ledger events.
pub fn merge_bt(latents: Tensor5) -> Result<LatentBatch> {
    let s = latents.shape();
    let merged = latents.reshape(Shape5::new(s.b * s.t, 1, s.c, s.h, s.w)?)?;
    Ok(LatentBatch {
        merged,
        batch: s.b,
        frames: s.t,
    })
}

impl LatentBatch {
    pub fn unmerge(self) -> Result<Tensor5> {
        let s = self.merged.shape();
        self.merged
            .reshape(Shape5::new(self.batch, self.frames, s.c, s.h, s.w)?)
    }
}

pub struct Codec {
    cfg: CodecConfig,
    encoder: BlockChain,
    decoder: BlockChain,
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Result<Codec> {
        cfg.validate()?;
        let seed = |i: u64| derive_seed(cfg.weight_seed, i);
        let (lat, img, hid) = (cfg.latent_channels, cfg.image_channels, cfg.hidden_channels);
        let mut enc = vec![conv(img, hid, seed(0))?, ChainOp::Act];
        for i in 0..cfg.upsample_stages {
            enc.extend([
                ChainOp::Down,
                conv(hid, hid, seed(10 + i as u64))?,
                ChainOp::Act,
            ]);
        }
        enc.push(conv(hid, lat, seed(1))?);
        let mut dec = vec![conv(lat, hid, seed(2))?, ChainOp::Act];
        for i in 0..cfg.upsample_stages {
            dec.extend([
                ChainOp::Up,
                conv(hid, hid, seed(20 + i as u64))?,
                ChainOp::Act,
            ]);
        }
        dec.push(conv(hid, img, seed(3))?);
        Ok(Codec {
            cfg,
            encoder: BlockChain::new("encoder", enc),
            decoder: BlockChain::new("decoder", dec),
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn decoder_chain(&self) -> &BlockChain {
        &self.decoder
    }

    /// Latent shape for frames of shape `s`.
    pub fn latent_shape(&self, s: Shape5) -> Result<Shape5> {
        let f = self.cfg.factor();
        if !s.h.is_multiple_of(f) || !s.w.is_multiple_of(f) {
            return Err(Error::InvalidShape(format!(
                "frame {}x{} not divisible by {f}",
                s.h, s.w
            )));
        }
        Shape5::new(s.b, s.t, self.cfg.latent_channels, s.h / f, s.w / f)
    }

    /// Frame-wise downsampling encoder; runs under the Encode stage.
    pub fn encode(&self, frames: &Tensor5) -> Result<Tensor5> {
        let s = frames.shape();
        if s.c != self.cfg.image_channels {
            return Err(Error::ChannelMismatch {
                expected: self.cfg.image_channels,
                got: s.c,
            });
        }
        self.latent_shape(s)?;
        enter(frames, StageTag::Encode);
        self.encoder.run(frames)
    }

    fn check_latent(&self, lat: &LatentBatch) -> Result<()> {
        let s = lat.merged.shape();
        if s.c != self.cfg.latent_channels {
            return Err(Error::ChannelMismatch {
                expected: self.cfg.latent_channels,
                got: s.c,
            });
        }
        if s.t != 1 || s.b != lat.batch * lat.frames {
            return Err(Error::ShapeMismatch(format!("merged latents {s}")));
        }
        Ok(())
    }

    fn output_shape(&self, lat: &LatentBatch) -> Result<Shape5> {
        let s = lat.merged.shape();
        let f = self.cfg.factor();
        Shape5::new(
            lat.batch,
            lat.frames,
            self.cfg.image_channels,
            s.h * f,
            s.w * f,
        )
    }

    /// Decode every merged frame in one pass.
    pub fn decode_batch(&self, lat: &LatentBatch) -> Result<Tensor5> {
        self.check_latent(lat)?;
        enter(&lat.merged, StageTag::Decode);
        let out_shape = self.output_shape(lat)?;
        self.decoder.run(&lat.merged)?.reshape(out_shape)
    }

    /// Decode one merged frame at a time into a preallocated output.
    pub fn decode_sliced(&self, lat: &LatentBatch) -> Result<Tensor5> {
        self.check_latent(lat)?;
        enter(&lat.merged, StageTag::Decode);
        let out_shape = self.output_shape(lat)?;
        let n = lat.merged.shape().b;
        if n == 1 {
            return self.decoder.run(&lat.merged)?.reshape(out_shape);
        }
        let mut out = Tensor5::zeros(
            lat.merged.ledger(),
            Shape5 {
                t: 1,
                ..out_shape.with_b(n)
            },
        )?;
        for i in 0..n {
            let y = {
                let frame = lat.merged.batch_slab(i)?;
                self.decoder.run(&frame)?
            };
            out.put_batch_slab(i, &y)?;
        }
        out.reshape(out_shape)
    }

    /// Bytes live while decoding one frame (its latent slab plus the
    /// decoder's activations).
    pub fn frame_working_set(&self, lat: &LatentBatch) -> Result<u64> {
        let s = lat.merged.shape().with_b(1);
        Ok(s.bytes() + self.decoder.activation_bytes(s)?)
    }
}

fn enter(t: &Tensor5, stage: StageTag) {
    if t.ledger().stage() != stage {
        t.ledger().enter_stage(stage);
    }
}

/// Plain frames outside the ledger, `{t, c, h, w}` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Video {
    /// Batch index `b` of a decoded tensor.
    pub fn from_tensor(x: &Tensor5, b: usize) -> Result<Video> {
        let s = x.shape();
        if b >= s.b {
            return Err(Error::OutOfBounds(format!("batch index {b} of {}", s.b)));
        }
        let n = s.numel() / s.b;
        Ok(Video {
            t: s.t,
            c: s.c,
            h: s.h,
            w: s.w,
            data: x.data()[b * n..(b + 1) * n].to_vec(),
        })
    }

    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn header_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".hdr");
        PathBuf::from(p)
    }

    /// Raw little-endian f32 values plus a `<path>.hdr` sidecar holding
    /// `t c h w`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        std::fs::write(
            Video::header_path(path),
            format!("{} {} {} {}\n", self.t, self.c, self.h, self.w),
        )?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Video> {
        let hdr = std::fs::read_to_string(Video::header_path(path))?;
        let dims: Vec<usize> = hdr
            .split_whitespace()
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad header {hdr:?}")))
            })
            .collect::<Result<_>>()?;
        let [t, c, h, w] = dims[..] else {
            return Err(Error::InvalidArgument(format!("bad header {hdr:?}")));
        };
        let mut raw = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut raw)?;
        if raw.len() != t * c * h * w * 4 {
            return Err(Error::InvalidArgument(format!(
                "{} bytes for a {t}x{c}x{h}x{w} video",
                raw.len()
            )));
        }
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Video { t, c, h, w, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{MemLedger, Tier};

    fn latents(l: &crate::ledger::Ledger, b: usize, t: usize) -> Tensor5 {
        Tensor5::randn(l, Shape5::new(b, t, 4, 4, 4).unwrap(), 11).unwrap()
    }

    #[test]
    fn encode_shapes_and_zero_input() {
        let l = MemLedger::real();
        let c = Codec::new(CodecConfig::default()).unwrap();
        let x = Tensor5::zeros(&l, Shape5::new(1, 2, 3, 16, 16).unwrap()).unwrap();
        let z = c.encode(&x).unwrap();
        assert_eq!(z.shape(), Shape5::new(1, 2, 4, 4, 4).unwrap());
        assert!(z.is_finite());
        assert!(z.data().iter().any(|v| *v != 0.0));
        assert!(l.peak(StageTag::Encode, Tier::Fast) > 0);
        let bad = Tensor5::zeros(&l, Shape5::new(1, 1, 3, 10, 16).unwrap()).unwrap();
        assert!(c.encode(&bad).is_err());
    }

    #[test]
    fn merge_index_order() {
        let l = MemLedger::real();
        let x = latents(&l, 2, 3);
        let copy = x.duplicate().unwrap();
        let m = merge_bt(x).unwrap();
        assert_eq!(m.merged.shape().b, 6);
        for b in 0..2 {
            for t in 0..3 {
                assert_eq!(m.merged.at(b * 3 + t, 0, 1, 2, 3), copy.at(b, t, 1, 2, 3));
            }
        }
        let n = l.event_count();
        let back = m.unmerge().unwrap();
        assert_eq!(l.event_count(), n);
        assert!(back.bit_eq(&copy));
    }

    #[test]
    fn sliced_equals_batch() {
        let l = MemLedger::real();
        let c = Codec::new(CodecConfig::default()).unwrap();
        let m = merge_bt(latents(&l, 2, 3)).unwrap();
        let a = c.decode_batch(&m).unwrap();
        let b = c.decode_sliced(&m).unwrap();
        assert_eq!(a.shape(), Shape5::new(2, 3, 3, 16, 16).unwrap());
        assert!(a.bit_eq(&b));
        assert!(a.bit_eq(&c.decode_batch(&m).unwrap()));
    }

    #[test]
    fn frame_independence() {
        let l = MemLedger::real();
        let c = Codec::new(CodecConfig::default()).unwrap();
        let x = latents(&l, 1, 4);
        let mut v = x.data().to_vec();
        let per = v.len() / 4;
        v[2 * per + 5] += 1.0;
        let y = Tensor5::from_vec(&l, x.shape(), v).unwrap();
        let a = Video::from_tensor(&c.decode_batch(&merge_bt(x).unwrap()).unwrap(), 0).unwrap();
        let b = Video::from_tensor(&c.decode_batch(&merge_bt(y).unwrap()).unwrap(), 0).unwrap();
        let changed: Vec<usize> = (0..4).filter(|i| a.frame(*i) != b.frame(*i)).collect();
        assert_eq!(changed, vec![2]);
    }

    fn decode_peak(t: usize, sliced: bool) -> (u64, u64) {
        let l = MemLedger::real();
        let c = Codec::new(CodecConfig::default()).unwrap();
        let m = merge_bt(latents(&l, 1, t)).unwrap();
        let y = if sliced {
            c.decode_sliced(&m)
        } else {
            c.decode_batch(&m)
        }
        .unwrap();
        let ws = c.frame_working_set(&m).unwrap();
        let out = y.bytes();
        drop(y);
        let peak = l.peak(StageTag::Decode, Tier::Fast);
        (peak, out + ws)
    }

    #[test]
    fn batch_peak_is_linear_in_frames() {
        let (p1, _) = decode_peak(1, false);
        let (p8, _) = decode_peak(8, false);
        assert_eq!(p8, 8 * p1);
    }

    #[test]
    fn sliced_peak_law() {
        for t in [1, 4, 8] {
            let (batch, _) = decode_peak(t, false);
            let (sliced, extra) = decode_peak(t, true);
            assert!(
                sliced <= batch / t as u64 + extra,
                "T={t}: {sliced} vs {batch}/{t} + {extra}"
            );
            if t > 1 {
                assert!(sliced < batch);
            }
        }
    }

    #[test]
    fn single_frame_ledgers_match() {
        let l1 = MemLedger::real();
        let l2 = MemLedger::real();
        let c = Codec::new(CodecConfig::default()).unwrap();
        let a = c
            .decode_batch(&merge_bt(latents(&l1, 1, 1)).unwrap())
            .unwrap();
        let b = c
            .decode_sliced(&merge_bt(latents(&l2, 1, 1)).unwrap())
            .unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(l1.report().peaks, l2.report().peaks);
    }

    #[test]
    fn video_file_roundtrip() {
        let l = MemLedger::real();
        let x = Tensor5::randn(&l, Shape5::new(1, 2, 3, 4, 5).unwrap(), 3).unwrap();
        let v = Video::from_tensor(&x, 0).unwrap();
        let dir = std::env::temp_dir().join(format!("codec-rt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("v.f32");
        v.write(&p).unwrap();
        assert_eq!(
            std::fs::read_to_string(dir.join("v.f32.hdr"))
                .unwrap()
                .trim(),
            "2 3 4 5"
        );
        assert_eq!(Video::read(&p).unwrap(), v);
        std::fs::remove_dir_all(dir).unwrap();
    }
}
