//! 2-D field containers and the sampling primitives shared by every other
//! module.
//!
//! Coordinates are always `(row y, column x)`. A [`DisplacementField`] stores
//! `u` with the induced map `phi(x) = x + u(x)`. Sampling outside the image
//! replicates the border.

use crate::error::{Error, Result};

/// An `height x width x channels` intensity image, row-major with channels
/// interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image, rejecting wrong lengths and values outside `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if channels != 1 && channels != 3 {
            return Err(Error::param(
                "channels",
                format!("must be 1 or 3, got {channels}"),
            ));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                format!("{} values", height * width * channels),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image intensity"));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("data", "intensities must lie in [0, 1]"));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]`. Non-finite values
    /// are still rejected.
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f64>,
    ) -> Result<Self> {
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Image::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    /// Single-channel image from a generator `f(y, x)`; values are clamped.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        check_dims(height, width)?;
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Image::from_clamped(height, width, 1, data)
    }

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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Extracts one channel as a planar buffer.
    pub fn channel_plane(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// Mean over channels, per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let inv = 1.0 / self.channels as f64;
        self.data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() * inv)
            .collect()
    }

    /// Gray image with one channel per pixel replicated `channels` times.
    pub fn replicate_gray(&self, channels: usize) -> Result<Image> {
        if self.channels != 1 {
            return Err(Error::ChannelMismatch {
                expected: 1,
                actual: self.channels,
            });
        }
        let data = self
            .data
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, channels))
            .collect();
        Image::new(self.height, self.width, channels, data)
    }

    /// Copies the `h x w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::shape(
                format!("crop inside {}x{}", self.height, self.width),
                format!("window {h}x{w} at ({y0},{x0})"),
            ));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Image::new(h, w, c, data)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub(crate) fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Per-pixel displacement `u = (dy, dx)` in pixel units, stored as two planes.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    height: usize,
    width: usize,
    dy: Vec<f64>,
    dx: Vec<f64>,
}

impl DisplacementField {
    pub fn new(height: usize, width: usize, dy: Vec<f64>, dx: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        let n = height * width;
        if dy.len() != n || dx.len() != n {
            return Err(Error::shape(
                format!("2 planes of {n}"),
                format!("{} and {}", dy.len(), dx.len()),
            ));
        }
        if dy.iter().chain(dx.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("displacement component"));
        }
        Ok(DisplacementField {
            height,
            width,
            dy,
            dx,
        })
    }

    /// Field from a generator returning `(dy, dx)` at `(y, x)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        f: impl Fn(usize, usize) -> (f64, f64),
    ) -> Result<Self> {
        check_dims(height, width)?;
        let mut dy = Vec::with_capacity(height * width);
        let mut dx = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(y, x);
                dy.push(a);
                dx.push(b);
            }
        }
        DisplacementField::new(height, width, dy, dx)
    }

    pub fn constant(height: usize, width: usize, dy: f64, dx: f64) -> Result<Self> {
        DisplacementField::from_fn(height, width, |_, _| (dy, dx))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub(crate) fn dy_mut(&mut self) -> &mut [f64] {
        &mut self.dy
    }

    pub(crate) fn dx_mut(&mut self) -> &mut [f64] {
        &mut self.dx
    }

    pub fn into_planes(self) -> (Vec<f64>, Vec<f64>) {
        (self.dy, self.dx)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.dy[i], self.dx[i])
    }

    pub fn same_shape(&self, other: &DisplacementField) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Multiplies every component by `s`.
    pub fn scaled(&self, s: f64) -> DisplacementField {
        DisplacementField {
            height: self.height,
            width: self.width,
            dy: self.dy.iter().map(|v| v * s).collect(),
            dx: self.dx.iter().map(|v| v * s).collect(),
        }
    }

    /// Largest Euclidean displacement magnitude.
    pub fn max_norm(&self) -> f64 {
        self.dy
            .iter()
            .zip(&self.dx)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }

    /// Mean `(dy, dx)` over the pixels at least `margin` away from the border.
    pub fn interior_mean(&self, margin: usize) -> (f64, f64) {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
        for y in margin..self.height.saturating_sub(margin) {
            for x in margin..self.width.saturating_sub(margin) {
                let (a, b) = self.at(y, x);
                sy += a;
                sx += b;
                n += 1;
            }
        }
        if n == 0 {
            return (0.0, 0.0);
        }
        (sy / n as f64, sx / n as f64)
    }

    pub(crate) fn shape_string(&self) -> String {
        format!("{}x{}", self.height, self.width)
    }
}

/// A real value per pixel (Jacobian determinants, noise images).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if values.len() != height * width {
            return Err(Error::shape(
                format!("{} values", height * width),
                format!("{} values", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scalar field value"));
        }
        Ok(ScalarField {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Bilinear resampling of the values on the corner-aligned grid, without
    /// any magnitude rescaling.
    pub fn resample(&self, new_h: usize, new_w: usize) -> Result<ScalarField> {
        check_dims(new_h, new_w)?;
        let values = resample_plane(&self.values, self.height, self.width, new_h, new_w);
        ScalarField::new(new_h, new_w, values)
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimensions {
            height,
            width,
            reason: "both dimensions must be at least 1",
        });
    }
    Ok(())
}

/// Bilinear stencil along one axis: the two neighbouring indices, the weight of
/// the upper neighbour, and whether the coordinate lies inside the grid (so
/// that moving it moves the sample).
#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisTap {
    pub i0: usize,
    pub i1: usize,
    pub t: f64,
    pub active: bool,
}

#[inline]
pub(crate) fn axis_tap(c: f64, n: usize) -> AxisTap {
    if n == 1 {
        return AxisTap {
            i0: 0,
            i1: 0,
            t: 0.0,
            active: false,
        };
    }
    let hi = (n - 1) as f64;
    let active = (0.0..=hi).contains(&c);
    let cc = c.clamp(0.0, hi);
    // The last lattice line uses the cell below it, so the derivative there is
    // one-sided from the inside.
    let i0 = (cc.floor() as usize).min(n - 2);
    AxisTap {
        i0,
        i1: i0 + 1,
        t: cc - i0 as f64,
        active,
    }
}

/// Bilinear sample of a planar buffer together with its partial derivatives
/// with respect to `y` and `x`. Derivatives vanish along clamped axes.
#[inline]
pub(crate) fn sample_plane_grad(
    plane: &[f64],
    width: usize,
    ty: AxisTap,
    tx: AxisTap,
) -> (f64, f64, f64) {
    let a00 = plane[ty.i0 * width + tx.i0];
    let a01 = plane[ty.i0 * width + tx.i1];
    let a10 = plane[ty.i1 * width + tx.i0];
    let a11 = plane[ty.i1 * width + tx.i1];
    let top = (1.0 - tx.t) * a00 + tx.t * a01;
    let bot = (1.0 - tx.t) * a10 + tx.t * a11;
    let v = (1.0 - ty.t) * top + ty.t * bot;
    let gy = if ty.active { bot - top } else { 0.0 };
    let gx = if tx.active {
        (a01 - a00) + ty.t * ((a11 - a10) - (a01 - a00))
    } else {
        0.0
    };
    (v, gy, gx)
}

#[inline]
pub(crate) fn sample_plane(plane: &[f64], width: usize, ty: AxisTap, tx: AxisTap) -> f64 {
    let a00 = plane[ty.i0 * width + tx.i0];
    let a01 = plane[ty.i0 * width + tx.i1];
    let a10 = plane[ty.i1 * width + tx.i0];
    let a11 = plane[ty.i1 * width + tx.i1];
    let top = (1.0 - tx.t) * a00 + tx.t * a01;
    let bot = (1.0 - tx.t) * a10 + tx.t * a11;
    (1.0 - ty.t) * top + ty.t * bot
}

/// Bilinear interpolation of one channel at `(y, x)` with border replication.
pub fn bilinear_sample(img: &Image, y: f64, x: f64, channel: usize) -> Result<f64> {
    if channel >= img.channels {
        return Err(Error::ChannelMismatch {
            expected: img.channels,
            actual: channel + 1,
        });
    }
    if !y.is_finite() || !x.is_finite() {
        return Err(Error::NonFinite("sample coordinate"));
    }
    let ty = axis_tap(y, img.height);
    let tx = axis_tap(x, img.width);
    let c = img.channels;
    let px = |yy: usize, xx: usize| img.data[(yy * img.width + xx) * c + channel];
    let top = (1.0 - tx.t) * px(ty.i0, tx.i0) + tx.t * px(ty.i0, tx.i1);
    let bot = (1.0 - tx.t) * px(ty.i1, tx.i0) + tx.t * px(ty.i1, tx.i1);
    Ok((1.0 - ty.t) * top + ty.t * bot)
}

/// Zero displacement of the given size.
pub fn identity_field(height: usize, width: usize) -> Result<DisplacementField> {
    check_dims(height, width)?;
    let n = height * width;
    Ok(DisplacementField {
        height,
        width,
        dy: vec![0.0; n],
        dx: vec![0.0; n],
    })
}

/// Backward warp: `out(x) = img(x + u(x))`, per channel, clamped to `[0, 1]`.
pub fn warp(img: &Image, field: &DisplacementField) -> Result<Image> {
    if img.height != field.height || img.width != field.width {
        return Err(Error::shape(img.shape_string(), field.shape_string()));
    }
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut out = Vec::with_capacity(img.data.len());
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (uy, ux) = (field.dy[i], field.dx[i]);
            if uy == 0.0 && ux == 0.0 {
                out.extend_from_slice(&img.data[i * c..(i + 1) * c]);
                continue;
            }
            let ty = axis_tap(y as f64 + uy, h);
            let tx = axis_tap(x as f64 + ux, w);
            for ch in 0..c {
                let px = |yy: usize, xx: usize| img.data[(yy * w + xx) * c + ch];
                let top = (1.0 - tx.t) * px(ty.i0, tx.i0) + tx.t * px(ty.i0, tx.i1);
                let bot = (1.0 - tx.t) * px(ty.i1, tx.i0) + tx.t * px(ty.i1, tx.i1);
                out.push(((1.0 - ty.t) * top + ty.t * bot).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Image {
        height: h,
        width: w,
        channels: c,
        data: out,
    })
}

/// `outer ∘ inner`: `u(x) = u_inner(x) + u_outer(x + u_inner(x))`.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    if !outer.same_shape(inner) {
        return Err(Error::shape(outer.shape_string(), inner.shape_string()));
    }
    let (h, w) = (inner.height, inner.width);
    let mut dy = Vec::with_capacity(h * w);
    let mut dx = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let ty = axis_tap(y as f64 + inner.dy[i], h);
            let tx = axis_tap(x as f64 + inner.dx[i], w);
            dy.push(inner.dy[i] + sample_plane(&outer.dy, w, ty, tx));
            dx.push(inner.dx[i] + sample_plane(&outer.dx, w, ty, tx));
        }
    }
    Ok(DisplacementField {
        height: h,
        width: w,
        dy,
        dx,
    })
}

/// Finite-difference derivative of a plane along y at `(y, x)`: central in the
/// interior, one-sided at the borders.
#[inline]
fn diff_y(p: &[f64], h: usize, w: usize, y: usize, x: usize) -> f64 {
    if y == 0 {
        p[w + x] - p[x]
    } else if y == h - 1 {
        p[y * w + x] - p[(y - 1) * w + x]
    } else {
        0.5 * (p[(y + 1) * w + x] - p[(y - 1) * w + x])
    }
}

#[inline]
fn diff_x(p: &[f64], w: usize, y: usize, x: usize) -> f64 {
    let r = y * w;
    if x == 0 {
        p[r + 1] - p[r]
    } else if x == w - 1 {
        p[r + x] - p[r + x - 1]
    } else {
        0.5 * (p[r + x + 1] - p[r + x - 1])
    }
}

/// `det(I + ∇u)` per pixel.
pub fn jacobian_det(field: &DisplacementField) -> Result<ScalarField> {
    let (h, w) = (field.height, field.width);
    if h < 2 || w < 2 {
        return Err(Error::InvalidDimensions {
            height: h,
            width: w,
            reason: "Jacobian needs at least 2 pixels along each axis",
        });
    }
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dyy = diff_y(&field.dy, h, w, y, x);
            let dyx = diff_x(&field.dy, w, y, x);
            let dxy = diff_y(&field.dx, h, w, y, x);
            let dxx = diff_x(&field.dx, w, y, x);
            values.push((1.0 + dyy) * (1.0 + dxx) - dyx * dxy);
        }
    }
    ScalarField::new(h, w, values)
}

/// Bilinear resampling of a planar buffer on the corner-aligned grid.
pub(crate) fn resample_plane(
    plane: &[f64],
    old_h: usize,
    old_w: usize,
    new_h: usize,
    new_w: usize,
) -> Vec<f64> {
    let ratio = |old: usize, new: usize| {
        if new <= 1 || old <= 1 {
            0.0
        } else {
            (old - 1) as f64 / (new - 1) as f64
        }
    };
    let (ry, rx) = (ratio(old_h, new_h), ratio(old_w, new_w));
    let taps_x: Vec<AxisTap> = (0..new_w).map(|j| axis_tap(j as f64 * rx, old_w)).collect();
    let mut out = Vec::with_capacity(new_h * new_w);
    for i in 0..new_h {
        let ty = axis_tap(i as f64 * ry, old_h);
        for tx in &taps_x {
            out.push(sample_plane(plane, old_w, ty, *tx));
        }
    }
    out
}

/// Displacement rescale factor for an axis resized from `old` to `new` pixels.
pub(crate) fn axis_scale(old: usize, new: usize) -> f64 {
    if old == 1 {
        new as f64
    } else {
        (new as f64 - 1.0) / (old as f64 - 1.0)
    }
}

/// Resizes a field to `new_h x new_w`, rescaling displacement magnitudes so
/// they stay in target-pixel units.
pub fn resample_field(
    field: &DisplacementField,
    new_h: usize,
    new_w: usize,
) -> Result<DisplacementField> {
    check_dims(new_h, new_w)?;
    let (h, w) = (field.height, field.width);
    if h == new_h && w == new_w {
        return Ok(field.clone());
    }
    let sy = axis_scale(h, new_h);
    let sx = axis_scale(w, new_w);
    let mut dy = resample_plane(&field.dy, h, w, new_h, new_w);
    let mut dx = resample_plane(&field.dx, h, w, new_h, new_w);
    dy.iter_mut().for_each(|v| *v *= sy);
    dx.iter_mut().for_each(|v| *v *= sx);
    DisplacementField::new(new_h, new_w, dy, dx)
}

/// Halves an image by 2x2 block averaging. A trailing odd row or column is
/// averaged over the smaller residual block.
pub fn downsample_image(img: &Image, factor: usize) -> Result<Image> {
    if factor != 2 {
        return Err(Error::param(
            "factor",
            format!("only 2 is supported, got {factor}"),
        ));
    }
    let (h, w, c) = (img.height, img.width, img.channels);
    if h < 2 || w < 2 {
        return Err(Error::InvalidDimensions {
            height: h,
            width: w,
            reason: "downsampling needs at least 2 pixels along each axis",
        });
    }
    let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
    let mut data = Vec::with_capacity(nh * nw * c);
    for by in 0..nh {
        let ys = 2 * by..(2 * by + 2).min(h);
        for bx in 0..nw {
            let xs = 2 * bx..(2 * bx + 2).min(w);
            let count = (ys.len() * xs.len()) as f64;
            for ch in 0..c {
                let mut acc = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        acc += img.get(y, x, ch);
                    }
                }
                data.push((acc / count).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(nh, nw, c, data)
}
