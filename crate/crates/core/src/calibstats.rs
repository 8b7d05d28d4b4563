//! Activation statistics and error metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Running per-channel statistics at one collection point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointStats {
    pub channels: usize,
    pub min: Vec<f32>,
    pub max: Vec<f32>,
    /// Per-channel count of strictly negative samples.
    pub neg: Vec<u64>,
    /// Per-channel count of strictly positive samples.
    pub pos: Vec<u64>,
    /// Samples seen per channel (rows observed).
    pub count: u64,
}

impl PointStats {
    pub fn new(channels: usize) -> Self {
        PointStats {
            channels,
            min: vec![f32::INFINITY; channels],
            max: vec![f32::NEG_INFINITY; channels],
            neg: vec![0; channels],
            pos: vec![0; channels],
            count: 0,
        }
    }

    pub fn observe(&mut self, x: &Tensor) -> Result<()> {
        if x.cols() != self.channels {
            return Err(Error::Shape(format!(
                "observed width {} at a {}-channel point",
                x.cols(),
                self.channels
            )));
        }
        for r in 0..x.rows() {
            for (c, &v) in x.row(r).iter().enumerate() {
                self.min[c] = self.min[c].min(v);
                self.max[c] = self.max[c].max(v);
                if v < 0.0 {
                    self.neg[c] += 1;
                } else if v > 0.0 {
                    self.pos[c] += 1;
                }
            }
        }
        self.count += x.rows() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &PointStats) -> Result<()> {
        if other.channels != self.channels {
            return Err(Error::Shape("merging stats of different widths".into()));
        }
        for c in 0..self.channels {
            self.min[c] = self.min[c].min(other.min[c]);
            self.max[c] = self.max[c].max(other.max[c]);
            self.neg[c] += other.neg[c];
            self.pos[c] += other.pos[c];
        }
        self.count += other.count;
        Ok(())
    }

    fn require_data(&self) -> Result<()> {
        if self.count == 0 {
            Err(Error::InvalidArgument("statistics are empty".into()))
        } else {
            Ok(())
        }
    }

    /// `(min, max)` over channels `[start, start + len)`.
    pub fn range(&self, start: usize, len: usize) -> Result<(f32, f32)> {
        self.require_data()?;
        if len == 0 || start + len > self.channels {
            return Err(Error::Shape(format!(
                "channel range {start}+{len} out of {}",
                self.channels
            )));
        }
        let lo = self.min[start..start + len].iter().copied().fold(f32::INFINITY, f32::min);
        let hi = self.max[start..start + len].iter().copied().fold(f32::NEG_INFINITY, f32::max);
        Ok((lo, hi))
    }

    pub fn amax(&self) -> Result<f32> {
        let (lo, hi) = self.range(0, self.channels)?;
        Ok(lo.abs().max(hi.abs()))
    }

    pub fn channel_amax(&self) -> Result<Vec<f32>> {
        self.require_data()?;
        Ok(self
            .min
            .iter()
            .zip(&self.max)
            .map(|(a, b)| a.abs().max(b.abs()))
            .collect())
    }

    pub fn neg_ratio(&self, c: usize) -> f64 {
        self.neg[c] as f64 / self.count.max(1) as f64
    }

    pub fn pos_ratio(&self, c: usize) -> f64 {
        self.pos[c] as f64 / self.count.max(1) as f64
    }
}

/// Statistics for every collection point, keyed by node id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibStats {
    pub points: BTreeMap<String, PointStats>,
}

impl CalibStats {
    pub fn observe(&mut self, point: &str, x: &Tensor) -> Result<()> {
        self.points
            .entry(point.to_string())
            .or_insert_with(|| PointStats::new(x.cols()))
            .observe(x)
    }

    pub fn merge(&mut self, other: &CalibStats) -> Result<()> {
        for (k, v) in &other.points {
            match self.points.get_mut(k) {
                Some(p) => p.merge(v)?,
                None => {
                    self.points.insert(k.clone(), v.clone());
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, point: &str) -> Option<&PointStats> {
        self.points.get(point)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarityRow {
    pub point: String,
    pub channels: usize,
    pub mean_neg_ratio: f64,
    pub mean_pos_ratio: f64,
}

impl PolarityRow {
    /// `channels, neg / pos` with three decimals.
    pub fn display_ratio(&self) -> String {
        format!(
            "{}, {:.3} / {:.3}",
            self.channels, self.mean_neg_ratio, self.mean_pos_ratio
        )
    }
}

pub fn polarity_row(point: &str, s: &PointStats) -> Result<PolarityRow> {
    s.require_data()?;
    let n = s.channels as f64;
    Ok(PolarityRow {
        point: point.to_string(),
        channels: s.channels,
        mean_neg_ratio: (0..s.channels).map(|c| s.neg_ratio(c)).sum::<f64>() / n,
        mean_pos_ratio: (0..s.channels).map(|c| s.pos_ratio(c)).sum::<f64>() / n,
    })
}

/// One row per collection point, in key order.
pub fn polarity_table(stats: &CalibStats) -> Result<Vec<PolarityRow>> {
    if stats.points.is_empty() {
        return Err(Error::InvalidArgument("statistics are empty".into()));
    }
    stats.points.iter().map(|(k, s)| polarity_row(k, s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    Frobenius,
    Psnr,
    Ssim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReportRow {
    pub layer: String,
    pub metric: Metric,
    #[serde(with = "finite_or_sentinel")]
    pub value: f64,
}

/// Non-finite values (PSNR of identical inputs) serialize as the string `"inf"`.
mod finite_or_sentinel {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            v.serialize(s)
        } else {
            "inf".serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum V {
            N(f64),
            S(String),
        }
        match V::deserialize(d)? {
            V::N(v) => Ok(v),
            V::S(s) if s == "inf" => Ok(f64::INFINITY),
            V::S(s) => Err(serde::de::Error::custom(format!("bad metric value {s}"))),
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "metric on {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sum_sq_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// `‖a − b‖_F`.
pub fn frobenius(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    Ok(sum_sq_diff(a, b).sqrt())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    Ok(sum_sq_diff(a, b) / a.len() as f64)
}

/// `10·log10(range² / mse)`; `+∞` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::InvalidArgument("data_range must be positive".into()));
    }
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / m).log10()
    })
}

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean SSIM over every `window × window` patch (stride 1) of the matrix
/// views, using population statistics. Windows are clipped to the matrix
/// extent when it is smaller.
pub fn ssim(a: &Tensor, b: &Tensor, window: usize, k1: f64, k2: f64, data_range: f64) -> Result<f64> {
    same_shape(a, b)?;
    if !(data_range > 0.0) || window == 0 {
        return Err(Error::InvalidArgument("ssim needs positive window and data_range".into()));
    }
    let (rows, cols) = (a.rows(), a.cols());
    let (wr, wc) = (window.min(rows), window.min(cols));
    let c1 = (k1 * data_range).powi(2);
    let c2 = (k2 * data_range).powi(2);
    let (ad, bd) = (a.data(), b.data());
    let n = (wr * wc) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=rows - wr {
        for c0 in 0..=cols - wc {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + wr {
                for c in c0..c0 + wc {
                    let x = ad[r * cols + c] as f64;
                    let y = bd[r * cols + c] as f64;
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM with the default 8×8 window and constants.
pub fn ssim_default(a: &Tensor, b: &Tensor, data_range: f64) -> Result<f64> {
    ssim(a, b, SSIM_WINDOW, SSIM_K1, SSIM_K2, data_range)
}
