//! Random stationary velocity fields and their group exponential.
//!
//! A velocity is drawn on a coarse `r_p x r_p` lattice with one standard
//! deviation per axis, `sigma ~ U(0, b_p)`, upsampled to the target grid and
//! integrated by scaling and squaring.
//!
//! The component normal to the image border is zeroed on the lattice rim, so
//! the flow slides along the border instead of leaving the domain. Without
//! this, clamped sampling breaks `exp(v) o exp(-v) = id` near the edges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, DisplacementField};
use crate::metrics;

/// Sampling hyperparameters for random diffeomorphisms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvfParams {
    /// Coarse lattice size per axis (`r_p`).
    pub coarse_res: usize,
    /// Upper bound of the per-axis standard deviation (`b_p`), in full
    /// resolution pixels.
    pub strength_bound: f64,
    pub squaring_steps: u32,
    pub target_h: usize,
    pub target_w: usize,
    pub seed: u64,
    /// Independent fields per image channel. Only 1 is supported: every
    /// channel is warped by the same deformation.
    pub n_fields: usize,
}

impl Default for SvfParams {
    fn default() -> Self {
        SvfParams {
            coarse_res: 8,
            strength_bound: 3.0,
            squaring_steps: 10,
            target_h: 224,
            target_w: 224,
            seed: 0,
            n_fields: 1,
        }
    }
}

impl SvfParams {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_res < 2 {
            return Err(Error::param("coarse_res", "must be at least 2"));
        }
        if !(self.strength_bound > 0.0 && self.strength_bound.is_finite()) {
            return Err(Error::param("strength_bound", "must be finite and > 0"));
        }
        if !(1..=12).contains(&self.squaring_steps) {
            return Err(Error::param("squaring_steps", "must lie in [1, 12]"));
        }
        if self.target_h == 0 || self.target_w == 0 {
            return Err(Error::param("target", "dimensions must be at least 1"));
        }
        if self.n_fields != 1 {
            return Err(Error::param(
                "n_fields",
                "only a single shared field is supported",
            ));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> SvfParams {
        SvfParams {
            seed,
            ..self.clone()
        }
    }
}

/// A stationary velocity field in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField(DisplacementField);

impl VelocityField {
    pub fn from_field(field: DisplacementField) -> Self {
        VelocityField(field)
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn as_field(&self) -> &DisplacementField {
        &self.0
    }

    pub fn into_field(self) -> DisplacementField {
        self.0
    }

    pub fn negated(&self) -> VelocityField {
        VelocityField(self.0.scaled(-1.0))
    }

    pub fn scaled(&self, s: f64) -> VelocityField {
        VelocityField(self.0.scaled(s))
    }
}

/// Draws the coarse `r_p x r_p` lattice in full-resolution pixel units.
/// Returns the lattice together with the per-axis standard deviations used.
pub fn sample_coarse<R: Rng + ?Sized>(
    params: &SvfParams,
    rng: &mut R,
) -> Result<(DisplacementField, [f64; 2])> {
    params.validate()?;
    let bound = params.strength_bound;
    let sigma = [rng.random_range(0.0..bound), rng.random_range(0.0..bound)];
    let r = params.coarse_res;
    let mut planes = [vec![0.0; r * r], vec![0.0; r * r]];
    for (plane, &s) in planes.iter_mut().zip(&sigma) {
        // sigma can be exactly zero at the lower end of U(0, b_p)
        if s > 0.0 {
            let normal = Normal::new(0.0, s).expect("positive finite sigma");
            for v in plane.iter_mut() {
                *v = normal.sample(rng);
            }
        }
    }
    let [dy, dx] = planes;
    Ok((DisplacementField::new(r, r, dy, dx)?, sigma))
}

/// Samples a velocity field at the target resolution.
///
/// Coarse values are in full-resolution pixels; they are converted to coarse
/// lattice units before [`grid::resample_field`] rescales them back, so the
/// upsampled field keeps the drawn magnitudes.
pub fn sample_svf<R: Rng + ?Sized>(params: &SvfParams, rng: &mut R) -> Result<VelocityField> {
    let (coarse, _) = sample_coarse(params, rng)?;
    let r = params.coarse_res;
    let sy = grid::axis_scale(r, params.target_h);
    let sx = grid::axis_scale(r, params.target_w);
    let (mut dy, mut dx) = coarse.into_planes();
    for i in 0..r {
        dy[i] = 0.0;
        dy[(r - 1) * r + i] = 0.0;
        dx[i * r] = 0.0;
        dx[i * r + r - 1] = 0.0;
    }
    let lattice = DisplacementField::new(
        r,
        r,
        dy.into_iter().map(|v| v / sy).collect(),
        dx.into_iter().map(|v| v / sx).collect(),
    )?;
    let full = grid::resample_field(&lattice, params.target_h, params.target_w)?;
    Ok(VelocityField(full))
}

/// `exp(v)` by scaling and squaring: `u_0 = v / 2^K`, then `K` self-compositions.
pub fn integrate_svf(v: &VelocityField, steps: u32) -> Result<DisplacementField> {
    if steps == 0 {
        return Err(Error::param("squaring_steps", "must be at least 1"));
    }
    let mut u = v.0.scaled(1.0 / f64::powi(2.0, steps as i32));
    for _ in 0..steps {
        u = grid::compose(&u, &u)?;
    }
    Ok(u)
}

/// Samples and integrates a random diffeomorphism from `params.seed`, returning
/// the velocity alongside the displacement.
pub fn random_diffeo_with_velocity(
    params: &SvfParams,
) -> Result<(VelocityField, DisplacementField)> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let v = sample_svf(params, &mut rng)?;
    let u = integrate_svf(&v, params.squaring_steps)?;
    if u.height() >= 2 && u.width() >= 2 {
        let folded = metrics::folding_percent(&u)?;
        if folded > 0.0 {
            eprintln!(
                "warning: random deformation (seed {}, b_p {}) folds {folded:.3}% of pixels; \
                 strength bound is too aggressive for r_p {}",
                params.seed, params.strength_bound, params.coarse_res
            );
        }
    }
    Ok((v, u))
}

pub fn random_diffeo(params: &SvfParams) -> Result<DisplacementField> {
    random_diffeo_with_velocity(params).map(|(_, u)| u)
}
