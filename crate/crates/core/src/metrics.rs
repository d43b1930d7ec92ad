//! Full-reference frame metrics.
//!
//! PSNR is capped at [`PSNR_CAP`] so identical frames give a finite value.
//! SSIM uses a 7×7 uniform window over every fully-contained position,
//! population (1/N) moments, `C1 = (0.01 L)²`, `C2 = (0.03 L)²`, and averages
//! over positions and channels.

use serde::{Deserialize, Serialize};

use crate::codec::Video;
use crate::error::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;

/// One frame: `c` planes of `h × w` values.
#[derive(Debug, Clone, Copy)]
pub struct Frame<'a> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: &'a [f32],
}

impl<'a> Frame<'a> {
    pub fn new(c: usize, h: usize, w: usize, data: &'a [f32]) -> Result<Frame<'a>> {
        if data.len() != c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {c}x{h}x{w} frame",
                data.len()
            )));
        }
        Ok(Frame { c, h, w, data })
    }

    fn same_shape(&self, o: &Frame) -> Result<()> {
        if (self.c, self.h, self.w) != (o.c, o.h, o.w) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.c, self.h, self.w, o.c, o.h, o.w
            )));
        }
        Ok(())
    }
}

fn check_range(data_range: f64) -> Result<()> {
    if !(data_range.is_finite() && data_range > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "data range {data_range} must be > 0"
        )));
    }
    Ok(())
}

pub fn psnr(a: &Frame, b: &Frame, data_range: f64) -> Result<f64> {
    a.same_shape(b)?;
    check_range(data_range)?;
    let mse = a
        .data
        .iter()
        .zip(b.data)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

pub fn ssim(a: &Frame, b: &Frame, data_range: f64) -> Result<f64> {
    a.same_shape(b)?;
    check_range(data_range)?;
    let k = SSIM_WINDOW;
    if a.h < k || a.w < k {
        return Err(Error::InvalidShape(format!(
            "{}x{} frame is smaller than the {k}x{k} window",
            a.h, a.w
        )));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let n = (k * k) as f64;
    let plane = a.h * a.w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..a.c {
        let pa = &a.data[ch * plane..(ch + 1) * plane];
        let pb = &b.data[ch * plane..(ch + 1) * plane];
        for y0 in 0..=a.h - k {
            for x0 in 0..=a.w - k {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        let va = pa[y * a.w + x] as f64;
                        let vb = pb[y * a.w + x] as f64;
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub per_frame: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl MetricSeries {
    pub fn from_values(per_frame: Vec<f64>) -> MetricSeries {
        let n = per_frame.len().max(1) as f64;
        MetricSeries {
            mean: per_frame.iter().sum::<f64>() / n,
            min: per_frame.iter().copied().fold(f64::INFINITY, f64::min),
            max: per_frame.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            per_frame,
        }
    }
}

/// `metric` applied frame by frame with a data range of 1.0.
pub fn video_series(metric: Metric, a: &Video, b: &Video) -> Result<MetricSeries> {
    if a.t != b.t {
        return Err(Error::ShapeMismatch(format!("{} frames vs {}", a.t, b.t)));
    }
    let mut vals = Vec::with_capacity(a.t);
    for i in 0..a.t {
        let fa = Frame::new(a.c, a.h, a.w, a.frame(i))?;
        let fb = Frame::new(b.c, b.h, b.w, b.frame(i))?;
        vals.push(match metric {
            Metric::Psnr => psnr(&fa, &fb, 1.0)?,
            Metric::Ssim => ssim(&fa, &fb, 1.0)?,
        });
    }
    Ok(MetricSeries::from_values(vals))
}

/// `frame_index,psnr,ssim` rows.
pub fn metric_csv(psnr: &MetricSeries, ssim: &MetricSeries) -> Result<String> {
    if psnr.per_frame.len() != ssim.per_frame.len() {
        return Err(Error::ShapeMismatch("series lengths differ".into()));
    }
    let mut out = String::from("frame_index,psnr,ssim\n");
    for (i, (p, s)) in psnr.per_frame.iter().zip(&ssim.per_frame).enumerate() {
        out.push_str(&format!("{i},{p},{s}\n"));
    }
    Ok(out)
}
