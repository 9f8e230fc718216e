//! Instance-wise variational registration.
//!
//! The objective is `MSE(F, M ∘ φ) + α · L_smooth(φ)` where the similarity is
//! measured either on intensities or on fixed-bank features of the warped
//! image, and `L_smooth` is the mean L1 norm of the forward differences of
//! the displacement. The field is parametrized directly or as a stationary
//! velocity integrated by scaling and squaring, and optimized coarse to fine
//! with bias-corrected adaptive-moment descent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, FeatureMap, FilterBank};
use crate::grid::{self, axis_tap, sample_plane_grad, DisplacementField, Image};
use crate::metrics::{self, MetricsReport};
use crate::svf::{self, VelocityField};

/// Which quantity the MSE term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    IntensityMse,
    FeatureMse,
}

/// What the optimizer updates: the displacement itself, or a stationary
/// velocity whose exponential is the displacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    Displacement,
    Svf,
}

/// Registration settings. Serialized as flat JSON with these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    pub alpha: f64,
    pub similarity: Similarity,
    pub levels: usize,
    pub iters_per_level: usize,
    pub step: f64,
    pub moment_decay: [f64; 2],
    pub epsilon: f64,
    pub parametrization: Parametrization,
    pub svf_steps: u32,
    pub seed: u64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            alpha: 0.01,
            similarity: Similarity::FeatureMse,
            levels: 3,
            iters_per_level: 200,
            step: 0.5,
            moment_decay: [0.9, 0.999],
            epsilon: 1e-8,
            parametrization: Parametrization::Svf,
            svf_steps: 7,
            seed: 0,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::param("alpha", "must be finite and >= 0"));
        }
        if self.levels == 0 {
            return Err(Error::param("levels", "must be at least 1"));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::param("step", "must be finite and > 0"));
        }
        if self.moment_decay.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::param(
                "moment_decay",
                "both rates must lie in [0, 1)",
            ));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::param("epsilon", "must be > 0"));
        }
        if self.parametrization == Parametrization::Svf && !(1..=12).contains(&self.svf_steps) {
            return Err(Error::param("svf_steps", "must lie in [1, 12]"));
        }
        Ok(())
    }
}

/// The three parts of the objective; `total = sim + alpha * smooth`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub sim: f64,
    pub smooth: f64,
}

/// Output of [`register`].
#[derive(Debug, Clone)]
pub struct RegResult {
    /// Estimated displacement at the input resolution.
    pub field: DisplacementField,
    /// The velocity whose exponential is `field`, for the svf parametrization.
    pub velocity: Option<VelocityField>,
    /// `moving ∘ φ`.
    pub warped: Image,
    /// Accepted total loss after every iteration, all levels concatenated.
    pub loss_trace: Vec<f64>,
    /// Index into `loss_trace` where each level starts, coarsest first.
    pub level_starts: Vec<usize>,
    pub metrics: MetricsReport,
}

/// Mean over all `2·H·W` field elements of the absolute forward differences
/// along y and x.
pub fn smoothness_loss(field: &DisplacementField) -> Result<f64> {
    let (h, w) = (field.height(), field.width());
    if h < 2 || w < 2 {
        return Err(Error::InvalidDimensions {
            height: h,
            width: w,
            reason: "smoothness needs at least 2 pixels along each axis",
        });
    }
    let mut acc = 0.0;
    for plane in [field.dy(), field.dx()] {
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                if y + 1 < h {
                    acc += (plane[(y + 1) * w + x] - v).abs();
                }
                if x + 1 < w {
                    acc += (plane[y * w + x + 1] - v).abs();
                }
            }
        }
    }
    Ok(acc / (2 * h * w) as f64)
}

/// Subgradient of [`smoothness_loss`], with `sign(0) = 0`, added into `gy, gx`
/// after scaling by `weight`.
fn add_smoothness_grad(field: &DisplacementField, weight: f64, gy: &mut [f64], gx: &mut [f64]) {
    let (h, w) = (field.height(), field.width());
    let c = weight / (2 * h * w) as f64;
    for (plane, grad) in [(field.dy(), gy), (field.dx(), gx)] {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if y + 1 < h {
                    let s = sign(plane[i + w] - plane[i]) * c;
                    grad[i + w] += s;
                    grad[i] -= s;
                }
                if x + 1 < w {
                    let s = sign(plane[i + 1] - plane[i]) * c;
                    grad[i + 1] += s;
                    grad[i] -= s;
                }
            }
        }
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean squared difference between two images.
pub fn similarity_mse(fixed: &Image, warped: &Image) -> Result<f64> {
    metrics::mean_squared_error(fixed, warped)
}

/// Mean squared difference between two feature maps.
pub fn feature_mse(fixed: &FeatureMap, warped: &FeatureMap) -> Result<f64> {
    if fixed.channels() != warped.channels()
        || fixed.height() != warped.height()
        || fixed.width() != warped.width()
    {
        return Err(Error::shape(
            format!("{}x{}x{}", fixed.channels(), fixed.height(), fixed.width()),
            format!(
                "{}x{}x{}",
                warped.channels(),
                warped.height(),
                warped.width()
            ),
        ));
    }
    let n = fixed.data().len() as f64;
    Ok(fixed
        .data()
        .iter()
        .zip(warped.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// One pyramid level of the objective: fixed data is prepared once, the
/// parameter varies.
pub struct Objective<'a> {
    fixed: &'a Image,
    moving: &'a Image,
    fixed_features: Option<FeatureMap>,
    bank: &'a FilterBank,
    alpha: f64,
    similarity: Similarity,
    parametrization: Parametrization,
    svf_steps: u32,
}

/// Loss and gradient at one parameter value, plus the displacement used.
pub struct Evaluation {
    pub parts: LossParts,
    pub grad: Option<DisplacementField>,
    pub field: DisplacementField,
}

impl<'a> Objective<'a> {
    pub fn new(
        fixed: &'a Image,
        moving: &'a Image,
        config: &RegConfig,
        bank: &'a FilterBank,
    ) -> Result<Self> {
        if !fixed.same_shape(moving) {
            return Err(Error::shape(fixed.shape_string(), moving.shape_string()));
        }
        let fixed_features = match config.similarity {
            Similarity::FeatureMse => Some(features::extract(fixed, bank)?),
            Similarity::IntensityMse => None,
        };
        Ok(Objective {
            fixed,
            moving,
            fixed_features,
            bank,
            alpha: config.alpha,
            similarity: config.similarity,
            parametrization: config.parametrization,
            svf_steps: config.svf_steps,
        })
    }

    fn check_param(&self, param: &DisplacementField) -> Result<()> {
        if param.height() != self.fixed.height() || param.width() != self.fixed.width() {
            return Err(Error::shape(
                self.fixed.shape_string(),
                param.shape_string(),
            ));
        }
        Ok(())
    }

    /// Loss parts (and the gradient with respect to `param` when
    /// `with_grad`). For the svf parametrization `param` is the velocity.
    pub fn evaluate(&self, param: &DisplacementField, with_grad: bool) -> Result<Evaluation> {
        self.check_param(param)?;
        let (h, w) = (param.height(), param.width());
        let c = self.moving.channels();

        // displacement, keeping the squaring chain for the svf adjoint
        let chain = match self.parametrization {
            Parametrization::Displacement => vec![param.clone()],
            Parametrization::Svf => {
                let k = self.svf_steps;
                let mut chain = Vec::with_capacity(k as usize + 1);
                chain.push(param.scaled(1.0 / f64::powi(2.0, k as i32)));
                for _ in 0..k {
                    let last = chain.last().unwrap();
                    let next = grid::compose(last, last)?;
                    chain.push(next);
                }
                chain
            }
        };
        let field = chain.last().unwrap();

        // warp, remembering the moving-image gradient at each sample point
        let planes: Vec<Vec<f64>> = (0..c).map(|ch| self.moving.channel_plane(ch)).collect();
        let mut warped = vec![0.0; h * w * c];
        let mut dwarp = if with_grad {
            vec![(0.0, 0.0); h * w * c]
        } else {
            Vec::new()
        };
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (uy, ux) = field.at(y, x);
                let ty = axis_tap(y as f64 + uy, h);
                let tx = axis_tap(x as f64 + ux, w);
                for (ch, plane) in planes.iter().enumerate() {
                    let (v, gy, gx) = sample_plane_grad(plane, w, ty, tx);
                    warped[i * c + ch] = v.clamp(0.0, 1.0);
                    if with_grad {
                        dwarp[i * c + ch] = (gy, gx);
                    }
                }
            }
        }
        let warped = Image::new(h, w, c, warped)?;

        // similarity and its gradient with respect to the warped intensities
        let (sim, grad_warped) = match self.similarity {
            Similarity::IntensityMse => {
                let n = warped.data().len() as f64;
                let resid: Vec<f64> = warped
                    .data()
                    .iter()
                    .zip(self.fixed.data())
                    .map(|(a, b)| a - b)
                    .collect();
                let sim = resid.iter().map(|r| r * r).sum::<f64>() / n;
                let grad = with_grad.then(|| resid.iter().map(|r| 2.0 * r / n).collect::<Vec<_>>());
                (sim, grad)
            }
            Similarity::FeatureMse => {
                let fixed_fm = self.fixed_features.as_ref().expect("prepared in new()");
                let tape = features::extract_with_tape(&warped, self.bank)?;
                let n = fixed_fm.data().len() as f64;
                let resid: Vec<f64> = tape
                    .standardized
                    .data()
                    .iter()
                    .zip(fixed_fm.data())
                    .map(|(a, b)| a - b)
                    .collect();
                let sim = resid.iter().map(|r| r * r).sum::<f64>() / n;
                let grad = with_grad.then(|| {
                    let gz: Vec<f64> = resid.iter().map(|r| 2.0 * r / n).collect();
                    let per_channel = features::backprop(&tape, &gz, self.bank);
                    let mut inter = vec![0.0; h * w * c];
                    for (ch, plane) in per_channel.iter().enumerate() {
                        for (i, g) in plane.iter().enumerate() {
                            inter[i * c + ch] = *g;
                        }
                    }
                    inter
                });
                (sim, grad)
            }
        };
        let smooth = smoothness_loss(field)?;
        let parts = LossParts {
            total: sim + self.alpha * smooth,
            sim,
            smooth,
        };
        let Some(grad_warped) = grad_warped else {
            return Ok(Evaluation {
                parts,
                grad: None,
                field: field.clone(),
            });
        };

        // chain rule through bilinear sampling
        let mut gy = vec![0.0; h * w];
        let mut gx = vec![0.0; h * w];
        for i in 0..h * w {
            for ch in 0..c {
                let g = grad_warped[i * c + ch];
                let (dy, dx) = dwarp[i * c + ch];
                gy[i] += g * dy;
                gx[i] += g * dx;
            }
        }
        add_smoothness_grad(field, self.alpha, &mut gy, &mut gx);

        if self.parametrization == Parametrization::Svf {
            for k in (0..chain.len() - 1).rev() {
                (gy, gx) = compose_self_adjoint(&chain[k], &gy, &gx);
            }
            let s = 1.0 / f64::powi(2.0, self.svf_steps as i32);
            gy.iter_mut().chain(gx.iter_mut()).for_each(|g| *g *= s);
        }
        Ok(Evaluation {
            parts,
            grad: Some(DisplacementField::new(h, w, gy, gx)?),
            field: field.clone(),
        })
    }

    pub fn warped(&self, field: &DisplacementField) -> Result<Image> {
        grid::warp(self.moving, field)
    }
}

/// Given `dL/du'` for `u' = compose(u, u)`, returns `dL/du`.
fn compose_self_adjoint(u: &DisplacementField, gy: &[f64], gx: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (u.height(), u.width());
    let (uy, ux) = (u.dy(), u.dx());
    // identity term of u'(x) = u(x) + u(x + u(x))
    let mut oy = gy.to_vec();
    let mut ox = gx.to_vec();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let ty = axis_tap(y as f64 + uy[i], h);
            let tx = axis_tap(x as f64 + ux[i], w);
            let (a, b) = (gy[i], gx[i]);
            // the sampled field as data
            let (wy1, wx1) = (ty.t, tx.t);
            let (wy0, wx0) = (1.0 - wy1, 1.0 - wx1);
            let nodes = [
                (ty.i0 * w + tx.i0, wy0 * wx0),
                (ty.i0 * w + tx.i1, wy0 * wx1),
                (ty.i1 * w + tx.i0, wy1 * wx0),
                (ty.i1 * w + tx.i1, wy1 * wx1),
            ];
            for (j, wt) in nodes {
                oy[j] += a * wt;
                ox[j] += b * wt;
            }
            // the sample location
            let (_, dyy, dyx) = sample_plane_grad(uy, w, ty, tx);
            let (_, dxy, dxx) = sample_plane_grad(ux, w, ty, tx);
            oy[i] += a * dyy + b * dxy;
            ox[i] += a * dyx + b * dxx;
        }
    }
    (oy, ox)
}

/// Objective parts at `param` (the velocity, for the svf parametrization),
/// using the default bank for feature similarity.
pub fn reg_loss(
    fixed: &Image,
    moving: &Image,
    param: &DisplacementField,
    config: &RegConfig,
) -> Result<LossParts> {
    let bank = features::default_bank(fixed.channels())?;
    Objective::new(fixed, moving, config, &bank)?
        .evaluate(param, false)
        .map(|e| e.parts)
}

/// Exact gradient of [`reg_loss`] with respect to every component of `param`.
pub fn loss_gradient(
    fixed: &Image,
    moving: &Image,
    param: &DisplacementField,
    config: &RegConfig,
) -> Result<DisplacementField> {
    let bank = features::default_bank(fixed.channels())?;
    let eval = Objective::new(fixed, moving, config, &bank)?.evaluate(param, true)?;
    Ok(eval.grad.expect("gradient requested"))
}

/// Image pyramid, finest first, stopping before any side drops under `min_side`.
fn pyramid(img: &Image, levels: usize, min_side: usize) -> Result<Vec<Image>> {
    let mut out = vec![img.clone()];
    while out.len() < levels {
        let last = out.last().unwrap();
        if last.height().div_ceil(2) < min_side || last.width().div_ceil(2) < min_side {
            break;
        }
        let next = grid::downsample_image(last, 2)?;
        out.push(next);
    }
    Ok(out)
}

const MIN_PYRAMID_SIDE: usize = 8;
/// Width, in pixels of the current level, of the Gaussian applied to the
/// gradient before the moment update. Keeps the parameter smooth enough for
/// its exponential to stay free of folds.
const GRADIENT_SIGMA: f64 = 2.0;
/// A level ends early once rejections shrink the step below this fraction of
/// the configured step.
const MIN_STEP_FRACTION: f64 = 1e-3;

/// Separable Gaussian filter of a plane in place, replicating the border.
fn gaussian_smooth(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / total).collect();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * row[clamp(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * tmp[clamp(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Registers `moving` onto `fixed` with the default filter bank.
pub fn register(fixed: &Image, moving: &Image, config: &RegConfig) -> Result<RegResult> {
    let bank = features::default_bank(fixed.channels())?;
    register_with_bank(fixed, moving, config, &bank)
}

/// Registers `moving` onto `fixed`: returns the displacement `u` such that
/// `moving(x + u(x))` matches `fixed(x)`.
pub fn register_with_bank(
    fixed: &Image,
    moving: &Image,
    config: &RegConfig,
    bank: &FilterBank,
) -> Result<RegResult> {
    config.validate()?;
    if !fixed.same_shape(moving) {
        return Err(Error::shape(fixed.shape_string(), moving.shape_string()));
    }
    if config.similarity == Similarity::FeatureMse && bank.channels() != fixed.channels() {
        return Err(Error::ChannelMismatch {
            expected: bank.channels(),
            actual: fixed.channels(),
        });
    }
    if fixed.height() < 2 || fixed.width() < 2 {
        return Err(Error::InvalidDimensions {
            height: fixed.height(),
            width: fixed.width(),
            reason: "registration needs at least 2 pixels along each axis",
        });
    }
    let min_side = MIN_PYRAMID_SIDE.min(fixed.height()).min(fixed.width());
    let fixed_pyr = pyramid(fixed, config.levels, min_side)?;
    let moving_pyr = pyramid(moving, config.levels, min_side)?;

    let [beta1, beta2] = config.moment_decay;
    let mut param: Option<DisplacementField> = None;
    let mut loss_trace = Vec::new();
    let mut level_starts = Vec::new();

    for (level, (f_img, m_img)) in fixed_pyr.iter().zip(&moving_pyr).enumerate().rev() {
        let (h, w) = (f_img.height(), f_img.width());
        let mut p = match param.take() {
            None => grid::identity_field(h, w)?,
            Some(prev) => grid::resample_field(&prev, h, w)?,
        };
        level_starts.push(loss_trace.len());
        let objective = Objective::new(f_img, m_img, config, bank)?;
        let mut current = objective.evaluate(&p, true)?;
        if !current.parts.total.is_finite() {
            return Err(Error::NumericalAbort {
                level,
                iteration: 0,
            });
        }
        let n = h * w;
        let mut adam = Adam {
            m: vec![0.0; 2 * n],
            v: vec![0.0; 2 * n],
            t: 0,
        };
        let mut lr = config.step;
        for iteration in 0..config.iters_per_level {
            let grad = current.grad.as_ref().expect("gradient requested");
            let mut g: Vec<f64> = grad.dy().iter().chain(grad.dx()).copied().collect();
            let (gy, gx) = g.split_at_mut(n);
            gaussian_smooth(gy, h, w, GRADIENT_SIGMA);
            gaussian_smooth(gx, h, w, GRADIENT_SIGMA);
            let t = adam.t + 1;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let mut m = adam.m.clone();
            let mut v = adam.v.clone();
            let mut trial = p.clone();
            let mut flat: Vec<f64> = p.dy().iter().chain(p.dx()).copied().collect();
            for k in 0..2 * n {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                flat[k] -= lr * mhat / (vhat.sqrt() + config.epsilon);
            }
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalAbort { level, iteration });
            }
            trial.dy_mut().copy_from_slice(&flat[..n]);
            trial.dx_mut().copy_from_slice(&flat[n..]);
            let eval = objective.evaluate(&trial, true)?;
            if eval.parts.total.is_nan() {
                return Err(Error::NumericalAbort { level, iteration });
            }
            if eval.parts.total <= current.parts.total {
                p = trial;
                current = eval;
                adam = Adam { m, v, t };
            } else {
                lr *= 0.5;
            }
            loss_trace.push(current.parts.total);
            if lr < config.step * MIN_STEP_FRACTION {
                break;
            }
        }
        param = Some(p);
    }

    let param = param.expect("at least one level");
    let (field, velocity) = match config.parametrization {
        Parametrization::Displacement => (param, None),
        Parametrization::Svf => {
            let v = VelocityField::from_field(param);
            (svf::integrate_svf(&v, config.svf_steps)?, Some(v))
        }
    };
    let warped = grid::warp(moving, &field)?;
    let metrics = metrics::evaluate_pair(fixed, &warped, &field)?;
    Ok(RegResult {
        field,
        velocity,
        warped,
        loss_trace,
        level_starts,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(n: usize, rng: &mut ChaCha8Rng) -> Image {
        // smooth-ish content so the warp gradients are not dominated by kinks
        let (a, b, c) = (
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
            rng.random::<f64>(),
        );
        let base = Image::from_fn(n, n, |y, x| {
            0.5 + 0.3 * ((a * y as f64 * 0.4 + c).sin() * (b * x as f64 * 0.3).cos())
        })
        .unwrap();
        let data = base
            .data()
            .iter()
            .map(|v| (v + 0.1 * rng.random::<f64>()).clamp(0.0, 1.0))
            .collect();
        Image::new(n, n, 1, data).unwrap()
    }

    fn random_field(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> DisplacementField {
        let dy = (0..n * n)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        let dx = (0..n * n)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        DisplacementField::new(n, n, dy, dx).unwrap()
    }

    fn config(similarity: Similarity, parametrization: Parametrization) -> RegConfig {
        RegConfig {
            similarity,
            parametrization,
            ..RegConfig::default()
        }
    }

    const COMBOS: [(Similarity, Parametrization); 4] = [
        (Similarity::IntensityMse, Parametrization::Displacement),
        (Similarity::IntensityMse, Parametrization::Svf),
        (Similarity::FeatureMse, Parametrization::Displacement),
        (Similarity::FeatureMse, Parametrization::Svf),
    ];

    #[test]
    fn smoothness_examples() {
        let f = DisplacementField::new(2, 2, vec![0.0, 0.0, 1.0, 1.0], vec![0.0; 4]).unwrap();
        assert!((smoothness_loss(&f).unwrap() - 0.25).abs() < 1e-15);
        let c = DisplacementField::constant(5, 4, 2.0, -1.0).unwrap();
        assert_eq!(smoothness_loss(&c).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_field(6, 2.0, &mut rng);
        let shifted = DisplacementField::from_fn(6, 6, |y, x| {
            let (a, b) = r.at(y, x);
            (a + 0.25, b - 0.5)
        })
        .unwrap();
        let (p, q) = (
            smoothness_loss(&r).unwrap(),
            smoothness_loss(&shifted).unwrap(),
        );
        assert!((p - q).abs() < 1e-12);
        assert!(smoothness_loss(&DisplacementField::constant(1, 4, 0.0, 0.0).unwrap()).is_err());
    }

    #[test]
    fn similarity_examples() {
        let a = Image::new(1, 2, 1, vec![0.0, 0.5]).unwrap();
        let b = Image::new(1, 2, 1, vec![0.5, 0.5]).unwrap();
        assert!((similarity_mse(&a, &b).unwrap() - 0.125).abs() < 1e-15);
        assert_eq!(similarity_mse(&a, &a).unwrap(), 0.0);
        let zero = Image::filled(3, 3, 1, 0.0).unwrap();
        let one = Image::filled(3, 3, 1, 1.0).unwrap();
        assert_eq!(similarity_mse(&zero, &one).unwrap(), 1.0);
        assert!(similarity_mse(&zero, &a).is_err());
        let bank = features::default_bank(1).unwrap();
        let fa = features::extract(&zero, &bank).unwrap();
        let fb = features::extract(&a, &bank).unwrap();
        assert!(feature_mse(&fa, &fb).is_err());
    }

    #[test]
    fn loss_parts_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = noise_image(8, &mut rng);
        let m = noise_image(8, &mut rng);
        let zero = grid::identity_field(8, 8).unwrap();
        for (s, p) in COMBOS {
            let cfg = config(s, p);
            let same = reg_loss(&f, &f, &zero, &cfg).unwrap();
            assert_eq!((same.total, same.sim, same.smooth), (0.0, 0.0, 0.0));
            let g = loss_gradient(&f, &f, &zero, &cfg).unwrap();
            assert_eq!(g.max_norm(), 0.0);

            let parts = reg_loss(&f, &m, &random_field(8, 1.0, &mut rng), &cfg).unwrap();
            assert_eq!(parts.total, parts.sim + 0.01 * parts.smooth);
        }
        let plain = reg_loss(
            &f,
            &m,
            &zero,
            &config(Similarity::IntensityMse, Parametrization::Svf),
        )
        .unwrap();
        assert_eq!(plain.total, similarity_mse(&f, &m).unwrap());
    }

    /// Smallest |forward difference| of either component of a field.
    fn min_forward_gap(u: &DisplacementField) -> f64 {
        let (h, w) = (u.height(), u.width());
        let mut gap = f64::INFINITY;
        for plane in [u.dy(), u.dx()] {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if y + 1 < h {
                        gap = gap.min((plane[i + w] - plane[i]).abs());
                    }
                    if x + 1 < w {
                        gap = gap.min((plane[i + 1] - plane[i]).abs());
                    }
                }
            }
        }
        gap
    }

    const RELU_GAP: f64 = 3e-4;

    /// Smallest distance from a sample coordinate `p + u(p)` to the pixel
    /// lattice, where bilinear sampling has its kinks.
    fn min_lattice_gap(u: &DisplacementField) -> f64 {
        let mut gap = f64::INFINITY;
        for y in 0..u.height() {
            for x in 0..u.width() {
                let (a, b) = u.at(y, x);
                for c in [y as f64 + a, x as f64 + b] {
                    gap = gap.min((c - c.round()).abs());
                }
            }
        }
        gap
    }

    /// A random parameter whose loss is smooth within the finite-difference
    /// stencil: every L1 term stays away from zero and every bilinear sample
    /// stays away from the lattice, for the final field and each squaring step.
    fn differentiable_field(
        moving: &Image,
        cfg: &RegConfig,
        rng: &mut ChaCha8Rng,
    ) -> DisplacementField {
        let n = moving.height();
        let h = 1e-4;
        'draw: loop {
            let param = random_field(n, 1.2, rng);
            let mut stages = vec![(param.clone(), h)];
            if cfg.parametrization == Parametrization::Svf {
                let k = cfg.svf_steps as i32;
                let s = 0.5f64.powi(k);
                stages = vec![(param.scaled(s), h * s)];
                for _ in 0..k {
                    let (last, dh) = stages.last().unwrap();
                    stages.push((grid::compose(last, last).unwrap(), 2.0 * dh));
                }
            }
            for (u, dh) in &stages {
                if min_lattice_gap(u) < 20.0 * dh {
                    continue 'draw;
                }
            }
            let field = &stages.last().unwrap().0;
            if min_forward_gap(field) < 1e-2 {
                continue;
            }
            if cfg.similarity == Similarity::FeatureMse {
                let bank = features::default_bank(1).unwrap();
                let warped = grid::warp(moving, field).unwrap();
                let raw = features::raw_responses(&warped, &bank).unwrap();
                if raw.iter().flatten().any(|z| z.abs() < RELU_GAP) {
                    continue;
                }
            }
            return param;
        }
    }

    fn fd_check(s: Similarity, p: Parametrization, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = noise_image(8, &mut rng);
        let m = noise_image(8, &mut rng);
        let cfg = config(s, p);
        let param = differentiable_field(&m, &cfg, &mut rng);
        let grad = loss_gradient(&f, &m, &param, &cfg).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for comp in 0..2 {
            for i in 0..64 {
                let mut plus = param.clone();
                let mut minus = param.clone();
                let (pp, mm) = if comp == 0 {
                    (&mut plus.dy_mut()[i], &mut minus.dy_mut()[i])
                } else {
                    (&mut plus.dx_mut()[i], &mut minus.dx_mut()[i])
                };
                *pp += h;
                *mm -= h;
                let lp = reg_loss(&f, &m, &plus, &cfg).unwrap().total;
                let lm = reg_loss(&f, &m, &minus, &cfg).unwrap().total;
                let fd = (lp - lm) / (2.0 * h);
                let an = if comp == 0 {
                    grad.dy()[i]
                } else {
                    grad.dx()[i]
                };
                if an.abs() > 1e-6 {
                    worst = worst.max((an - fd).abs() / an.abs());
                }
            }
        }
        assert!(worst < 1e-4, "{s:?}/{p:?} seed {seed}: {worst}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (k, (s, p)) in COMBOS.into_iter().enumerate() {
            for j in 0..2 {
                fd_check(s, p, 100 + k as u64 + 10 * j);
            }
        }
    }

    #[test]
    fn gradient_is_linear_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = noise_image(8, &mut rng);
        let m = noise_image(8, &mut rng);
        let param = random_field(8, 1.0, &mut rng);
        let full = loss_gradient(
            &f,
            &m,
            &param,
            &config(Similarity::IntensityMse, Parametrization::Displacement),
        )
        .unwrap();
        let no_reg = RegConfig {
            alpha: 0.0,
            ..config(Similarity::IntensityMse, Parametrization::Displacement)
        };
        let g0 = loss_gradient(&f, &m, &param, &no_reg).unwrap();
        let mut gs_y = vec![0.0; 64];
        let mut gs_x = vec![0.0; 64];
        add_smoothness_grad(&param, 1.0, &mut gs_y, &mut gs_x);
        for i in 0..64 {
            assert!((g0.dy()[i] + 0.01 * gs_y[i] - full.dy()[i]).abs() < 1e-12);
            assert!((g0.dx()[i] + 0.01 * gs_x[i] - full.dx()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_pair_stays_put() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = noise_image(32, &mut rng);
        let res = register(&f, &f, &RegConfig::default()).unwrap();
        assert!(res.field.max_norm() < 0.05);
        assert!((res.metrics.cc.unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn loss_trace_is_monotone_per_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = noise_image(32, &mut rng);
        let m = grid::warp(&f, &DisplacementField::constant(32, 32, 0.8, -1.1).unwrap()).unwrap();
        let cfg = RegConfig {
            iters_per_level: 40,
            ..RegConfig::default()
        };
        let res = register(&f, &m, &cfg).unwrap();
        assert_eq!(res.level_starts.len(), 3);
        let mut bounds = res.level_starts.clone();
        bounds.push(res.loss_trace.len());
        for w in bounds.windows(2) {
            let level = &res.loss_trace[w[0]..w[1]];
            assert!(level.windows(2).all(|p| p[1] <= p[0]));
        }
        assert!(res.loss_trace.iter().all(|v| v.is_finite()));
        let again = register(&f, &m, &cfg).unwrap();
        assert_eq!(res.field, again.field);
        assert_eq!(res.loss_trace, again.loss_trace);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let a = Image::filled(8, 8, 1, 0.5).unwrap();
        let b = Image::filled(8, 9, 1, 0.5).unwrap();
        assert!(register(&a, &b, &RegConfig::default()).is_err());
        let bad = RegConfig {
            step: 0.0,
            ..RegConfig::default()
        };
        assert!(register(&a, &a, &bad).is_err());
        let json = r#"{"alpha": 0.1, "bogus": 1}"#;
        assert!(serde_json::from_str::<RegConfig>(json).is_err());
        let cfg: RegConfig = serde_json::from_str(r#"{"similarity": "intensity_mse"}"#).unwrap();
        assert_eq!(cfg.similarity, Similarity::IntensityMse);
        assert_eq!(cfg.levels, 3);
    }
}
