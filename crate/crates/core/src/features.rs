//! Fixed local-feature extraction.
//!
//! A frozen bank of small correlation kernels is applied with replicate
//! padding, followed by half-rectification and per-channel standardization.
//! The default bank holds first-derivative-of-Gaussian kernels at four
//! orientations and two scales plus one Gaussian smoother; any other bank
//! (for example exported first-block convolution weights) can be loaded from a
//! tensor file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Image;
use crate::io::{self, TensorFile};

/// Lower bound on a channel variance before standardization.
pub const VARIANCE_FLOOR: f64 = 1e-8;

const DEFAULT_KERNEL: usize = 7;
const DEFAULT_SCALES: [f64; 2] = [1.0, 2.0];
/// Unit directions `(dy, dx)` for 0, 90, 180 and 270 degrees, with y pointing down.
const DIRECTIONS: [(f64, f64); 4] = [(0.0, 1.0), (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0)];
/// Default kernels are quantized to multiples of `2^-QUANT_BITS`; every such
/// weight is exactly representable in `f32`.
const QUANT_BITS: i32 = 22;

/// Frozen filter weights, laid out `[n_filters][channels][k][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    n_filters: usize,
    channels: usize,
    kernel_size: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
    smoothing_filter: Option<usize>,
}

/// Metadata record stored alongside bank weights in a tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankMetadata {
    pub kind: String,
    pub n_filters: usize,
    pub channels: usize,
    pub kernel_size: usize,
    #[serde(default)]
    pub bias: Vec<f32>,
    #[serde(default)]
    pub smoothing_filter: Option<usize>,
}

impl FilterBank {
    pub fn new(
        n_filters: usize,
        channels: usize,
        kernel_size: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
        smoothing_filter: Option<usize>,
    ) -> Result<Self> {
        if n_filters == 0 {
            return Err(Error::param("n_filters", "must be at least 1"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::param(
                "channels",
                format!("must be 1 or 3, got {channels}"),
            ));
        }
        if kernel_size.is_multiple_of(2) {
            return Err(Error::param(
                "kernel_size",
                format!("must be odd, got {kernel_size}"),
            ));
        }
        let expected = n_filters * channels * kernel_size * kernel_size;
        if weights.len() != expected {
            return Err(Error::shape(
                format!("{expected} weights"),
                weights.len().to_string(),
            ));
        }
        if bias.len() != n_filters {
            return Err(Error::shape(
                format!("{n_filters} biases"),
                bias.len().to_string(),
            ));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("filter weight"));
        }
        if smoothing_filter.is_some_and(|s| s >= n_filters) {
            return Err(Error::param("smoothing_filter", "index out of range"));
        }
        Ok(FilterBank {
            n_filters,
            channels,
            kernel_size,
            weights,
            bias,
            smoothing_filter,
        })
    }

    pub fn n_filters(&self) -> usize {
        self.n_filters
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Index of the DC-passing smoother, when the bank has one.
    pub fn smoothing_filter(&self) -> Option<usize> {
        self.smoothing_filter
    }

    /// Weights of filter `f` on channel `c`, row-major `k x k`.
    pub fn kernel(&self, f: usize, c: usize) -> &[f32] {
        let kk = self.kernel_size * self.kernel_size;
        let start = (f * self.channels + c) * kk;
        &self.weights[start..start + kk]
    }

    /// Sum of filter `f` over all channels and taps.
    pub fn filter_sum(&self, f: usize) -> f64 {
        (0..self.channels)
            .flat_map(|c| self.kernel(f, c).iter())
            .map(|&w| f64::from(w))
            .sum()
    }

    pub fn metadata(&self) -> BankMetadata {
        BankMetadata {
            kind: "filter_bank".into(),
            n_filters: self.n_filters,
            channels: self.channels,
            kernel_size: self.kernel_size,
            bias: self.bias.clone(),
            smoothing_filter: self.smoothing_filter,
        }
    }

    pub fn to_tensor(&self) -> Result<TensorFile> {
        let k = self.kernel_size;
        TensorFile::new(
            vec![self.n_filters, self.channels, k, k],
            self.weights.clone(),
            Some(serde_json::to_string(&self.metadata())?),
        )
    }

    pub fn from_tensor(t: &TensorFile) -> Result<Self> {
        let meta: BankMetadata = match t.metadata_json()? {
            Some(v) => serde_json::from_value(v)
                .map_err(|e| Error::param("metadata", format!("not a filter bank record: {e}")))?,
            None => {
                return Err(Error::param(
                    "metadata",
                    "filter bank file carries no metadata",
                ))
            }
        };
        if meta.kind != "filter_bank" {
            return Err(Error::param(
                "metadata",
                format!("kind is {:?}, expected \"filter_bank\"", meta.kind),
            ));
        }
        if meta.kernel_size.is_multiple_of(2) {
            return Err(Error::param(
                "kernel_size",
                format!("declared kernel size {} is even", meta.kernel_size),
            ));
        }
        let declared = vec![
            meta.n_filters,
            meta.channels,
            meta.kernel_size,
            meta.kernel_size,
        ];
        if t.dims != declared {
            return Err(Error::shape(
                format!("dims {declared:?} declared in metadata"),
                format!("{:?}", t.dims),
            ));
        }
        let bias = if meta.bias.is_empty() {
            vec![0.0; meta.n_filters]
        } else {
            meta.bias
        };
        FilterBank::new(
            meta.n_filters,
            meta.channels,
            meta.kernel_size,
            t.values.clone(),
            bias,
            meta.smoothing_filter,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_tensor(&self.to_tensor()?, path)
    }
}

/// Loads a bank from a tensor file whose metadata declares its shape.
pub fn load_bank(path: impl AsRef<Path>) -> Result<FilterBank> {
    FilterBank::from_tensor(&io::read_tensor(path)?)
}

/// Rounds half away from zero so that `q(-x) = -q(x)` exactly.
fn quantize(v: f64, bits: i32) -> i64 {
    (v * f64::powi(2.0, bits)).round() as i64
}

fn derivative_kernel(k: usize, sigma: f64, dir: (f64, f64)) -> Vec<i64> {
    let r = (k / 2) as f64;
    let mut raw = Vec::with_capacity(k * k);
    let mut norm = 0.0;
    for i in 0..k {
        for j in 0..k {
            let (py, px) = (i as f64 - r, j as f64 - r);
            let proj = py * dir.0 + px * dir.1;
            let g = (-(py * py + px * px) / (2.0 * sigma * sigma)).exp();
            raw.push(proj * g);
            norm += proj * proj * g;
        }
    }
    // unit response to a unit-slope ramp along `dir`
    raw.iter().map(|v| quantize(v / norm, QUANT_BITS)).collect()
}

fn smoothing_kernel(k: usize, sigma: f64) -> Vec<i64> {
    let r = (k / 2) as f64;
    let mut raw = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let (py, px) = (i as f64 - r, j as f64 - r);
            raw.push((-(py * py + px * px) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = raw.iter().sum();
    let mut q: Vec<i64> = raw
        .iter()
        .map(|v| quantize(v / total, QUANT_BITS))
        .collect();
    let drift = (1i64 << QUANT_BITS) - q.iter().sum::<i64>();
    q[k * k / 2] += drift;
    q
}

/// Splits each quantized spatial weight over `channels` so the channel weights
/// sum back to it exactly.
fn spread_channels(spatial: &[i64], channels: usize) -> Vec<f32> {
    let scale = f64::powi(2.0, -QUANT_BITS);
    let c = channels as i64;
    let mut out = Vec::with_capacity(spatial.len() * channels);
    for ch in 0..c {
        for &w in spatial {
            let part = w.div_euclid(c) + i64::from(ch < w.rem_euclid(c));
            out.push((part as f64 * scale) as f32);
        }
    }
    out
}

/// Gaussian-derivative bank for `channels`-channel images: derivatives at 0,
/// 90, 180 and 270 degrees for sigma 1 and 2, then a sigma-1 smoother (filter
/// index 8), all 7x7 with zero bias.
pub fn default_bank(channels: usize) -> Result<FilterBank> {
    if channels != 1 && channels != 3 {
        return Err(Error::param(
            "channels",
            format!("must be 1 or 3, got {channels}"),
        ));
    }
    let k = DEFAULT_KERNEL;
    let mut spatial = Vec::new();
    for &sigma in &DEFAULT_SCALES {
        for &dir in &DIRECTIONS {
            spatial.push(derivative_kernel(k, sigma, dir));
        }
    }
    spatial.push(smoothing_kernel(k, 1.0));
    let n = spatial.len();
    let weights = spatial
        .iter()
        .flat_map(|s| spread_channels(s, channels))
        .collect();
    FilterBank::new(n, channels, k, weights, vec![0.0; n], Some(n - 1))
}

/// Multi-channel responses on the source image grid, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Replicate-padded copies of every image channel.
fn padded_planes(img: &Image, r: usize) -> Vec<Vec<f64>> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    (0..c)
        .map(|ch| {
            let mut p = Vec::with_capacity(ph * pw);
            for py in 0..ph {
                let y = py.saturating_sub(r).min(h - 1);
                for px in 0..pw {
                    let x = px.saturating_sub(r).min(w - 1);
                    p.push(img.get(y, x, ch));
                }
            }
            p
        })
        .collect()
}

/// Correlation plus bias, before rectification: one `h x w` plane per filter.
pub fn raw_responses(img: &Image, bank: &FilterBank) -> Result<Vec<Vec<f64>>> {
    if img.channels() != bank.channels {
        return Err(Error::ChannelMismatch {
            expected: bank.channels,
            actual: img.channels(),
        });
    }
    let (h, w) = (img.height(), img.width());
    let k = bank.kernel_size;
    let r = k / 2;
    let pw = w + 2 * r;
    let padded = padded_planes(img, r);
    let mut out = Vec::with_capacity(bank.n_filters);
    for f in 0..bank.n_filters {
        let mut plane = vec![f64::from(bank.bias[f]); h * w];
        for (c, pad) in padded.iter().enumerate() {
            let kern = bank.kernel(f, c);
            for y in 0..h {
                let dst = &mut plane[y * w..(y + 1) * w];
                for a in 0..k {
                    for b in 0..k {
                        let wt = f64::from(kern[a * k + b]);
                        if wt == 0.0 {
                            continue;
                        }
                        let src = &pad[(y + a) * pw + b..(y + a) * pw + b + w];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
        out.push(plane);
    }
    Ok(out)
}

/// Intermediate values kept for back-propagating through [`extract`].
#[derive(Debug, Clone)]
pub(crate) struct ExtractionTape {
    /// Pre-activation responses, per filter.
    pub pre: Vec<Vec<f64>>,
    pub standardized: FeatureMap,
    pub std: Vec<f64>,
    pub floored: Vec<bool>,
}

pub(crate) fn extract_with_tape(img: &Image, bank: &FilterBank) -> Result<ExtractionTape> {
    let pre = raw_responses(img, bank)?;
    let (h, w) = (img.height(), img.width());
    let n = (h * w) as f64;
    let mut data = Vec::with_capacity(bank.n_filters * h * w);
    let mut std = Vec::with_capacity(bank.n_filters);
    let mut floored = Vec::with_capacity(bank.n_filters);
    for plane in &pre {
        let start = data.len();
        data.extend(plane.iter().map(|v| v.max(0.0)));
        let rect = &mut data[start..];
        let mean = rect.iter().sum::<f64>() / n;
        let var = rect.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is_floored = var < VARIANCE_FLOOR;
        let s = var.max(VARIANCE_FLOOR).sqrt();
        let inv = 1.0 / s;
        rect.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        std.push(s);
        floored.push(is_floored);
    }
    Ok(ExtractionTape {
        pre,
        standardized: FeatureMap {
            height: h,
            width: w,
            channels: bank.n_filters,
            data,
        },
        std,
        floored,
    })
}

/// Rectified, standardized responses of `img` to every filter of `bank`.
pub fn extract(img: &Image, bank: &FilterBank) -> Result<FeatureMap> {
    extract_with_tape(img, bank).map(|t| t.standardized)
}

/// Gradient of a scalar loss with respect to the input image, given its
/// gradient with respect to the standardized features. Returns one plane per
/// image channel.
pub(crate) fn backprop(
    tape: &ExtractionTape,
    grad_features: &[f64],
    bank: &FilterBank,
) -> Vec<Vec<f64>> {
    let fm = &tape.standardized;
    let (h, w) = (fm.height, fm.width);
    let n = h * w;
    let k = bank.kernel_size;
    let r = k / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut grad_pad = vec![vec![0.0; ph * pw]; bank.channels];
    let mut grad_pre = vec![0.0; n];
    for f in 0..bank.n_filters {
        let g = &grad_features[f * n..(f + 1) * n];
        let z = fm.plane(f);
        let inv_s = 1.0 / tape.std[f];
        let mean_g = g.iter().sum::<f64>() / n as f64;
        let mean_gz = if tape.floored[f] {
            0.0
        } else {
            g.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / n as f64
        };
        let mut any = false;
        for ((gp, (&gi, &zi)), &pre) in grad_pre.iter_mut().zip(g.iter().zip(z)).zip(&tape.pre[f]) {
            *gp = if pre > 0.0 {
                any = true;
                inv_s * (gi - mean_g - zi * mean_gz)
            } else {
                0.0
            };
        }
        if !any {
            continue;
        }
        for (c, gpad) in grad_pad.iter_mut().enumerate() {
            let kern = bank.kernel(f, c);
            for y in 0..h {
                let src = &grad_pre[y * w..(y + 1) * w];
                for a in 0..k {
                    for b in 0..k {
                        let wt = f64::from(kern[a * k + b]);
                        if wt == 0.0 {
                            continue;
                        }
                        let dst = &mut gpad[(y + a) * pw + b..(y + a) * pw + b + w];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
    }
    // fold the replicated border back onto the edge pixels
    grad_pad
        .into_iter()
        .map(|gpad| {
            let mut out = vec![0.0; n];
            for py in 0..ph {
                let y = py.saturating_sub(r).min(h - 1);
                for px in 0..pw {
                    let x = px.saturating_sub(r).min(w - 1);
                    out[y * w + x] += gpad[py * pw + px];
                }
            }
            out
        })
        .collect()
}
