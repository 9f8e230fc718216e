//! Validation metrics: correlation coefficient, histogram mutual information
//! and the folding rate of a deformation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, DisplacementField, Image};

/// Histogram bins used by [`evaluate_pair`].
pub const DEFAULT_MI_BINS: usize = 32;

/// Metrics of one registered pair. `cc` is `None` when either image is
/// constant, where Pearson correlation is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cc: Option<f64>,
    /// Mutual information in bits.
    pub mi: f64,
    pub folding_percent: f64,
    pub mse: f64,
    pub n_pixels: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "cc,mi,folding_percent,mse,n_pixels";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.cc
                .map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}")),
            format_args!("{:.6}", self.mi),
            format_args!("{:.4}", self.folding_percent),
            format_args!("{:.8}", self.mse),
            self.n_pixels
        )
    }

    /// `CC(%|J|)` cell in the tables' convention, e.g. `0.9712(0.13)`.
    pub fn cc_cell(&self) -> String {
        match self.cc {
            Some(cc) => format!("{cc:.4}({:.2})", self.folding_percent),
            None => format!("undefined({:.2})", self.folding_percent),
        }
    }

    /// `MI(%|J|)` cell.
    pub fn mi_cell(&self) -> String {
        format!("{:.4}({:.2})", self.mi, self.folding_percent)
    }
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(a.shape_string(), b.shape_string()));
    }
    Ok(())
}

/// Pearson correlation over all pixels and channels jointly.
pub fn correlation_coefficient(a: &Image, b: &Image) -> Result<Option<f64>> {
    check_same(a, b)?;
    Ok(pearson(a.data(), b.data()))
}

pub(crate) fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[inline]
fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Entropy in bits of a histogram with total mass `total`. Counts are summed in
/// ascending order so the result does not depend on histogram layout.
fn entropy_bits(counts: &[u64], total: u64) -> f64 {
    let mut nz: Vec<u64> = counts.iter().copied().filter(|&c| c > 0).collect();
    nz.sort_unstable();
    let n = total as f64;
    let acc: f64 = nz.iter().map(|&c| (c as f64) * (c as f64).log2()).sum();
    n.log2() - acc / n
}

/// Shannon entropy in bits of an image's luminance histogram on `[0, 1]`.
pub fn entropy(img: &Image, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::param("bins", "must be at least 2"));
    }
    let lum = img.luminance();
    let mut h = vec![0u64; bins];
    for v in &lum {
        h[bin_of(*v, bins)] += 1;
    }
    Ok(entropy_bits(&h, lum.len() as u64))
}

/// `MI = H(a) + H(b) - H(a, b)` in bits from a hard `bins x bins` joint
/// histogram of the luminances.
pub fn mutual_information(a: &Image, b: &Image, bins: usize) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(a.shape_string(), b.shape_string()));
    }
    if bins < 2 {
        return Err(Error::param("bins", "must be at least 2"));
    }
    let (la, lb) = (a.luminance(), b.luminance());
    let mut joint = vec![0u64; bins * bins];
    let mut ha = vec![0u64; bins];
    let mut hb = vec![0u64; bins];
    for (x, y) in la.iter().zip(&lb) {
        let (i, j) = (bin_of(*x, bins), bin_of(*y, bins));
        ha[i] += 1;
        hb[j] += 1;
        joint[i * bins + j] += 1;
    }
    let n = la.len() as u64;
    let mi = entropy_bits(&ha, n) + entropy_bits(&hb, n) - entropy_bits(&joint, n);
    Ok(mi)
}

/// Percentage of pixels whose Jacobian determinant is non-positive.
pub fn folding_percent(field: &DisplacementField) -> Result<f64> {
    let det = grid::jacobian_det(field)?;
    let folded = det.values().iter().filter(|&&d| d <= 0.0).count();
    Ok(100.0 * folded as f64 / det.values().len() as f64)
}

pub fn mean_squared_error(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

pub fn evaluate_pair(
    fixed: &Image,
    warped: &Image,
    field: &DisplacementField,
) -> Result<MetricsReport> {
    if field.height() != fixed.height() || field.width() != fixed.width() {
        return Err(Error::shape(fixed.shape_string(), field.shape_string()));
    }
    Ok(MetricsReport {
        cc: correlation_coefficient(fixed, warped)?,
        mi: mutual_information(fixed, warped, DEFAULT_MI_BINS)?,
        folding_percent: folding_percent(field)?,
        mse: mean_squared_error(fixed, warped)?,
        n_pixels: fixed.pixels(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, v: &[f64]) -> Image {
        Image::new(h, w, 1, v.to_vec()).unwrap()
    }

    #[test]
    fn cc_examples() {
        let a = gray(2, 2, &[0.0, 0.25, 0.5, 0.75]);
        let b = gray(2, 2, &[0.25, 0.75, 0.5, 1.0]);
        // (0,1,2,3) vs (1,3,2,4), both scaled by 1/4
        let cc = correlation_coefficient(&a, &b).unwrap().unwrap();
        assert!((cc - 0.8).abs() < 1e-9);

        assert!((correlation_coefficient(&a, &a).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let inv = gray(2, 2, &[0.75, 0.5, 0.25, 0.0]);
        assert!((correlation_coefficient(&a, &inv).unwrap().unwrap() + 1.0).abs() < 1e-12);

        let flat = Image::filled(2, 2, 1, 0.4).unwrap();
        assert_eq!(correlation_coefficient(&a, &flat).unwrap(), None);
        assert!(correlation_coefficient(&a, &Image::filled(2, 3, 1, 0.1).unwrap()).is_err());
    }

    #[test]
    fn mi_two_pixel_example() {
        let a = gray(2, 1, &[0.1, 0.9]);
        let b = gray(2, 1, &[0.9, 0.1]);
        assert!((entropy(&a, 2).unwrap() - 1.0).abs() < 1e-12);
        assert!((mutual_information(&a, &b, 2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mi_self_equals_entropy() {
        let img = Image::from_fn(16, 16, |y, x| ((y * 7 + x * 3) % 23) as f64 / 22.0).unwrap();
        let h = entropy(&img, 32).unwrap();
        let mi = mutual_information(&img, &img, 32).unwrap();
        assert!((mi - h).abs() < 1e-9);
        assert!(mutual_information(&img, &img, 1).is_err());
    }

    #[test]
    fn mi_on_color_uses_luminance() {
        let c = Image::new(1, 2, 3, vec![0.0, 0.0, 0.3, 1.0, 1.0, 0.7]).unwrap();
        let g = gray(1, 2, &[0.1, 0.9]);
        assert!((mutual_information(&c, &g, 2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn folding_examples() {
        assert_eq!(
            folding_percent(&grid::identity_field(4, 4).unwrap()).unwrap(),
            0.0
        );
        let fold = DisplacementField::from_fn(5, 5, |y, _| (-2.0 * y as f64, 0.0)).unwrap();
        assert_eq!(folding_percent(&fold).unwrap(), 100.0);
    }

    #[test]
    fn report_matches_parts() {
        let a = Image::from_fn(8, 8, |y, x| (y + x) as f64 / 14.0).unwrap();
        let b = Image::from_fn(8, 8, |y, x| (y * x) as f64 / 49.0).unwrap();
        let f = grid::identity_field(8, 8).unwrap();
        let r = evaluate_pair(&a, &b, &f).unwrap();
        assert_eq!(r.cc, correlation_coefficient(&a, &b).unwrap());
        assert_eq!(r.mi, mutual_information(&a, &b, DEFAULT_MI_BINS).unwrap());
        assert_eq!(r.mse, mean_squared_error(&a, &b).unwrap());
        assert_eq!(r.folding_percent, 0.0);
        assert_eq!(r.n_pixels, 64);

        let same = evaluate_pair(&a, &a, &f).unwrap();
        assert_eq!(same.mse, 0.0);
        assert!((same.cc.unwrap() - 1.0).abs() < 1e-12);
        assert!(same.cc_cell().starts_with("1.0000("));
    }

    fn image_strategy() -> impl Strategy<Value = (Image, Image)> {
        (2usize..10, 2usize..10).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(0.0f64..=1.0, h * w),
                proptest::collection::vec(0.0f64..=1.0, h * w),
            )
                .prop_map(move |(a, b)| (gray(h, w, &a), gray(h, w, &b)))
        })
    }

    proptest! {
        #[test]
        fn mi_symmetric_and_bounded((a, b) in image_strategy(), bins in 2usize..40) {
            let ab = mutual_information(&a, &b, bins).unwrap();
            let ba = mutual_information(&b, &a, bins).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!(ab >= -1e-12);
            let bound = entropy(&a, bins).unwrap().min(entropy(&b, bins).unwrap());
            prop_assert!(ab <= bound + 1e-9);
        }

        #[test]
        fn cc_affine_invariant((a, b) in image_strategy(), p in 0.05f64..0.5, q in 0.0f64..0.5) {
            let scaled = Image::new(b.height(), b.width(), 1,
                b.data().iter().map(|v| p * v + q).collect()).unwrap();
            match (correlation_coefficient(&a, &b).unwrap(), correlation_coefficient(&a, &scaled).unwrap()) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
                (x, y) => prop_assert_eq!(x.is_none(), y.is_none()),
            }
        }

        #[test]
        fn folding_range(coef in -3.0f64..3.0, h in 2usize..8, w in 2usize..8) {
            let f = DisplacementField::from_fn(h, w, |y, x| (coef * (y * x) as f64 * 0.1, -coef * y as f64)).unwrap();
            let pct = folding_percent(&f).unwrap();
            prop_assert!((0.0..=100.0).contains(&pct));
            let det = grid::jacobian_det(&f).unwrap();
            prop_assert_eq!(pct == 0.0, det.values().iter().all(|&d| d > 0.0));
        }
    }
}
