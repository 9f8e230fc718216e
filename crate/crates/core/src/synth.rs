//! Synthetic training data: argmax-of-smooth-noise label maps, deformed pairs
//! and intensity-remapped (multi-modal) variants.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, DisplacementField, Image};
use crate::metrics::DEFAULT_MI_BINS;
use crate::svf::{self, SvfParams};

/// Label-map generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelMapParams {
    /// Number of noise fields `J`, hence the largest possible label count.
    pub n_labels: usize,
    /// Coarse noise lattice size per axis.
    pub coarse_res: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub crop: usize,
    pub seed: u64,
}

impl Default for LabelMapParams {
    fn default() -> Self {
        LabelMapParams {
            n_labels: 16,
            coarse_res: 8,
            map_h: 320,
            map_w: 320,
            crop: 224,
            seed: 0,
        }
    }
}

impl LabelMapParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_labels < 2 {
            return Err(Error::param("n_labels", "must be at least 2"));
        }
        if self.n_labels > u16::MAX as usize {
            return Err(Error::param("n_labels", "too many labels"));
        }
        if self.coarse_res < 2 {
            return Err(Error::param("coarse_res", "must be at least 2"));
        }
        if self.map_h < self.crop || self.map_w < self.crop || self.crop == 0 {
            return Err(Error::param(
                "map",
                "map must be at least as large as the crop",
            ));
        }
        Ok(())
    }
}

/// Per-pixel region labels in `[0, n_labels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    n_labels: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, n_labels: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions {
                height,
                width,
                reason: "both dimensions must be at least 1",
            });
        }
        if labels.len() != height * width {
            return Err(Error::shape(
                (height * width).to_string(),
                labels.len().to_string(),
            ));
        }
        if labels.iter().any(|&l| l as usize >= n_labels) {
            return Err(Error::param(
                "labels",
                format!("every label must be < {n_labels}"),
            ));
        }
        Ok(LabelMap {
            height,
            width,
            n_labels,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// Number of distinct labels present.
    pub fn distinct(&self) -> usize {
        let mut seen = vec![false; self.n_labels];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        seen.into_iter().filter(|&s| s).count()
    }
}

/// A fixed image, its deformed copy and the deformation between them.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub fixed: Image,
    /// `warp(fixed, truth)`.
    pub moving: Image,
    pub truth: DisplacementField,
    /// Seed that reproduces `truth` through [`svf::random_diffeo`].
    pub truth_seed: u64,
    pub moving_multimodal: Option<Image>,
}

/// Intensity remapping used to build multi-modal pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Recolor,
    Colorize,
}

/// Per-pixel argmax over noise fields upsampled to `h x w`; ties go to the
/// lowest index.
pub fn labelmap_from_noise(noise: &[grid::ScalarField], h: usize, w: usize) -> Result<LabelMap> {
    if noise.is_empty() {
        return Err(Error::param("noise", "need at least one field"));
    }
    let up: Vec<Vec<f64>> = noise
        .iter()
        .map(|f| f.resample(h, w).map(|s| s.values().to_vec()))
        .collect::<Result<_>>()?;
    let labels = (0..h * w)
        .map(|i| {
            let mut best = 0;
            for (j, field) in up.iter().enumerate().skip(1) {
                if field[i] > up[best][i] {
                    best = j;
                }
            }
            best as u16
        })
        .collect();
    LabelMap::new(h, w, noise.len(), labels)
}

/// `J` coarse standard-normal fields, bilinearly upsampled, per-pixel argmax.
pub fn synth_labelmap<R: Rng + ?Sized>(params: &LabelMapParams, rng: &mut R) -> Result<LabelMap> {
    params.validate()?;
    let r = params.coarse_res;
    let noise: Vec<grid::ScalarField> = (0..params.n_labels)
        .map(|_| {
            let values = (0..r * r).map(|_| StandardNormal.sample(rng)).collect();
            grid::ScalarField::new(r, r, values)
        })
        .collect::<Result<_>>()?;
    labelmap_from_noise(&noise, params.map_h, params.map_w)
}

const MAX_DRAWS: usize = 1000;

/// Assigns each label a random gray level; levels are at least `1/(4J)` apart.
pub fn labelmap_to_image<R: Rng + ?Sized>(map: &LabelMap, rng: &mut R) -> Result<Image> {
    let j = map.n_labels;
    let sep = 1.0 / (4.0 * j as f64);
    let mut levels: Vec<f64> = Vec::with_capacity(j);
    for _ in 0..j {
        let mut placed = false;
        for _ in 0..MAX_DRAWS {
            let v: f64 = rng.random();
            if levels.iter().all(|l| (l - v).abs() >= sep) {
                levels.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::param(
                "n_labels",
                format!("could not place {j} gray levels {sep} apart in {MAX_DRAWS} draws"),
            ));
        }
    }
    let data = map.labels.iter().map(|&l| levels[l as usize]).collect();
    Image::new(map.height, map.width, 1, data)
}

fn random_crop<R: Rng + ?Sized>(img: &Image, h: usize, w: usize, rng: &mut R) -> Result<Image> {
    if img.height() < h || img.width() < w {
        return Err(Error::shape(
            format!("image of at least {h}x{w}"),
            img.shape_string(),
        ));
    }
    let y0 = rng.random_range(0..=img.height() - h);
    let x0 = rng.random_range(0..=img.width() - w);
    img.crop(y0, x0, h, w)
}

fn crop_and_deform<R: Rng + ?Sized>(
    img: &Image,
    params: &SvfParams,
    rng: &mut R,
) -> Result<(Image, DisplacementField, u64)> {
    params.validate()?;
    let fixed = random_crop(img, params.target_h, params.target_w, rng)?;
    let truth_seed = rng.next_u64();
    let truth = svf::random_diffeo(&params.with_seed(truth_seed))?;
    Ok((fixed, truth, truth_seed))
}

/// Random `target_h x target_w` crop as the fixed image, warped by a random
/// diffeomorphism into the moving image.
pub fn make_pair<R: Rng + ?Sized>(
    img: &Image,
    params: &SvfParams,
    rng: &mut R,
) -> Result<PairSample> {
    let (fixed, truth, truth_seed) = crop_and_deform(img, params, rng)?;
    let moving = grid::warp(&fixed, &truth)?;
    Ok(PairSample {
        fixed,
        moving,
        truth,
        truth_seed,
        moving_multimodal: None,
    })
}

/// Like [`make_pair`], additionally warping a remapped copy of the fixed image
/// with the same deformation.
pub fn make_multimodal_pair<R: Rng + ?Sized>(
    img: &Image,
    params: &SvfParams,
    mode: Modality,
    rng: &mut R,
) -> Result<PairSample> {
    let (fixed, truth, truth_seed) = crop_and_deform(img, params, rng)?;
    let remapped = match mode {
        Modality::Recolor => recolor_random(&fixed, rng)?,
        Modality::Colorize => colorize_monotonic(&fixed, &Colormap::default())?,
    };
    let moving = grid::warp(&fixed, &truth)?;
    let moving_multimodal = Some(grid::warp(&remapped, &truth)?);
    Ok(PairSample {
        fixed,
        moving,
        truth,
        truth_seed,
        moving_multimodal,
    })
}

/// Most distinct intensities a label-style image may carry for recoloring.
pub const MAX_RECOLOR_LEVELS: usize = 256;

/// Replaces every distinct intensity by a fresh uniform draw through a lookup
/// table.
///
/// Each draw is uniform on `[0, 1]`, but draws are stratified over the
/// histogram bins used for mutual information: while there are at most
/// [`DEFAULT_MI_BINS`] levels, no two share a bin, so the remapping stays
/// injective at the metric's resolution.
pub fn recolor_random<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Result<Image> {
    if img.channels() != 1 {
        return Err(Error::ChannelMismatch {
            expected: 1,
            actual: img.channels(),
        });
    }
    let mut table: BTreeMap<u64, f64> = BTreeMap::new();
    for v in img.data() {
        table.insert(v.to_bits(), 0.0);
        if table.len() > MAX_RECOLOR_LEVELS {
            return Err(Error::param(
                "image",
                format!("more than {MAX_RECOLOR_LEVELS} distinct intensities; use colorize_monotonic for continuous-tone images"),
            ));
        }
    }
    let bins = DEFAULT_MI_BINS;
    let mut slots: Vec<usize> = Vec::with_capacity(table.len());
    while slots.len() < table.len() {
        let mut round: Vec<usize> = (0..bins).collect();
        round.shuffle(rng);
        slots.extend(round);
    }
    for (out, slot) in table.values_mut().zip(slots) {
        let u: f64 = rng.random();
        *out = ((slot as f64 + u) / bins as f64).min(1.0);
    }
    let data = img.data().iter().map(|v| table[&v.to_bits()]).collect();
    Image::new(img.height(), img.width(), 1, data)
}

/// A strictly increasing map `[0, 1] -> [0, 1]` for one color channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMap {
    /// `x^gamma`.
    Gamma(f64),
    /// Piecewise-linear through `(x, y)` knots spanning `x = 0..1`.
    Knots(Vec<(f64, f64)>),
}

impl ChannelMap {
    fn validate(&self) -> Result<()> {
        match self {
            ChannelMap::Gamma(g) if *g > 0.0 && g.is_finite() => Ok(()),
            ChannelMap::Gamma(g) => Err(Error::param("colormap", format!("gamma {g} is not > 0"))),
            ChannelMap::Knots(k) => {
                let ok = k.len() >= 2
                    && k.first().is_some_and(|p| p.0 == 0.0)
                    && k.last().is_some_and(|p| p.0 == 1.0)
                    && k.iter().all(|p| (0.0..=1.0).contains(&p.1))
                    && k.windows(2).all(|p| p[1].0 > p[0].0 && p[1].1 > p[0].1);
                if ok {
                    Ok(())
                } else {
                    Err(Error::param(
                        "colormap",
                        "knots must span [0, 1] and increase strictly in both coordinates",
                    ))
                }
            }
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        match self {
            ChannelMap::Gamma(g) => x.powf(*g),
            ChannelMap::Knots(k) => {
                let i = k.partition_point(|p| p.0 <= x).clamp(1, k.len() - 1);
                let (a, b) = (k[i - 1], k[i]);
                let t = (x - a.0) / (b.0 - a.0);
                (1.0 - t) * a.1 + t * b.1
            }
        }
    }
}

/// Three channel maps taking gray intensity to RGB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Colormap(pub [ChannelMap; 3]);

impl Default for Colormap {
    fn default() -> Self {
        Colormap([
            ChannelMap::Gamma(0.6),
            ChannelMap::Gamma(1.0),
            ChannelMap::Gamma(1.8),
        ])
    }
}

impl Colormap {
    pub fn identity() -> Self {
        Colormap([
            ChannelMap::Gamma(1.0),
            ChannelMap::Gamma(1.0),
            ChannelMap::Gamma(1.0),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        self.0.iter().try_for_each(ChannelMap::validate)
    }
}

/// Maps a gray image to color through strictly increasing channel maps.
pub fn colorize_monotonic(img: &Image, colormap: &Colormap) -> Result<Image> {
    if img.channels() != 1 {
        return Err(Error::ChannelMismatch {
            expected: 1,
            actual: img.channels(),
        });
    }
    colormap.validate()?;
    let mut data = Vec::with_capacity(img.data().len() * 3);
    for &v in img.data() {
        for map in &colormap.0 {
            data.push(map.eval(v));
        }
    }
    Image::from_clamped(img.height(), img.width(), 3, data)
}

pub const BOUNDARY_TOLERANCE: f64 = 1e-9;

/// Pixels whose value differs from a 4-neighbour in any channel by more than
/// [`BOUNDARY_TOLERANCE`], which absorbs interpolation round-off.
pub fn boundary_mask(img: &Image) -> Vec<bool> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let data = img.data();
    let differs = |a: usize, b: usize| {
        (0..c).any(|ch| (data[a * c + ch] - data[b * c + ch]).abs() > BOUNDARY_TOLERANCE)
    };
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            mask[i] = (x > 0 && differs(i, i - 1))
                || (x + 1 < w && differs(i, i + 1))
                || (y > 0 && differs(i, i - w))
                || (y + 1 < h && differs(i, i + w));
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_params(seed: u64) -> LabelMapParams {
        LabelMapParams {
            map_h: 96,
            map_w: 96,
            crop: 64,
            seed,
            ..LabelMapParams::default()
        }
    }

    #[test]
    fn hand_fixed_noise_matches_brute_force() {
        let p0 = grid::ScalarField::new(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let p1 = grid::ScalarField::new(2, 2, vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        let map = labelmap_from_noise(&[p0, p1], 4, 4).unwrap();
        // oracle: evaluate the bilinear upsampling by hand at every pixel
        for y in 0..4 {
            for x in 0..4 {
                let (fy, fx) = (y as f64 / 3.0, x as f64 / 3.0);
                let v1 = 2.0 * fy * (1.0 - fx);
                let want = if v1 > 1.0 { 1 } else { 0 };
                assert_eq!(map.get(y, x), want, "({y},{x})");
            }
        }
        assert_eq!(map.get(3, 0), 1);
        assert_eq!(map.get(0, 0), 0);
    }

    #[test]
    fn ties_go_to_lowest_label() {
        let p = grid::ScalarField::new(2, 2, vec![0.3, -1.0, 2.0, 0.0]).unwrap();
        let map = labelmap_from_noise(&[p.clone(), p], 5, 5).unwrap();
        assert!(map.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn labelmap_is_deterministic_and_bounded() {
        let p = small_params(3);
        let a = synth_labelmap(&p, &mut rng(3)).unwrap();
        let b = synth_labelmap(&p, &mut rng(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.labels().iter().all(|&l| (l as usize) < p.n_labels));
        assert!(a.distinct() >= 2);
        assert!(LabelMapParams {
            n_labels: 1,
            ..p.clone()
        }
        .validate()
        .is_err());
        assert!(LabelMapParams { map_h: 10, ..p }.validate().is_err());
    }

    #[test]
    fn gray_levels_one_per_label() {
        let map = synth_labelmap(&small_params(4), &mut rng(4)).unwrap();
        let img = labelmap_to_image(&map, &mut rng(5)).unwrap();
        let mut values: Vec<u64> = img.data().iter().map(|v| v.to_bits()).collect();
        values.sort_unstable();
        values.dedup();
        assert_eq!(values.len(), map.distinct());

        let single = LabelMap::new(3, 3, 1, vec![0; 9]).unwrap();
        let flat = labelmap_to_image(&single, &mut rng(1)).unwrap();
        assert!(flat.data().iter().all(|&v| v == flat.data()[0]));

        let other = labelmap_to_image(&map, &mut rng(6)).unwrap();
        assert_ne!(img, other);
        assert_eq!(boundary_mask(&img), boundary_mask(&other));
    }

    /// Generator stuck on a single value, so every second draw collides.
    struct Stuck;

    impl rand::RngCore for Stuck {
        fn next_u32(&mut self) -> u32 {
            7
        }
        fn next_u64(&mut self) -> u64 {
            7
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(7);
        }
    }

    #[test]
    fn failed_rejection_sampling_is_reported() {
        let map = LabelMap::new(1, 2, 2, vec![0, 1]).unwrap();
        assert!(labelmap_to_image(&map, &mut Stuck).is_err());
    }

    #[test]
    fn pair_geometry() {
        let map = synth_labelmap(&small_params(8), &mut rng(8)).unwrap();
        let img = labelmap_to_image(&map, &mut rng(9)).unwrap();
        let params = SvfParams {
            target_h: 64,
            target_w: 64,
            ..SvfParams::default()
        };
        let pair = make_pair(&img, &params, &mut rng(10)).unwrap();
        assert_eq!((pair.fixed.height(), pair.fixed.width()), (64, 64));
        assert_eq!(pair.moving, grid::warp(&pair.fixed, &pair.truth).unwrap());
        assert_eq!(metrics::folding_percent(&pair.truth).unwrap(), 0.0);
        let cc = metrics::correlation_coefficient(&pair.fixed, &pair.moving)
            .unwrap()
            .unwrap();
        assert!(cc < 1.0);

        let faint = SvfParams {
            strength_bound: 1e-300,
            ..params.clone()
        };
        let pair = make_pair(&img, &faint, &mut rng(10)).unwrap();
        assert_eq!(pair.moving, pair.fixed);

        let tiny = Image::filled(10, 10, 1, 0.5).unwrap();
        assert!(make_pair(&tiny, &params, &mut rng(1)).is_err());
    }

    #[test]
    fn recolor_preserves_geometry_and_information() {
        let map = synth_labelmap(&small_params(12), &mut rng(12)).unwrap();
        let img = labelmap_to_image(&map, &mut rng(13)).unwrap();
        let out = recolor_random(&img, &mut rng(14)).unwrap();
        assert_eq!(boundary_mask(&img), boundary_mask(&out));
        let h = metrics::entropy(&img, DEFAULT_MI_BINS).unwrap();
        let mi = metrics::mutual_information(&img, &out, DEFAULT_MI_BINS).unwrap();
        assert!((mi - h).abs() < 1e-9, "{mi} vs {h}");

        let flat = Image::filled(4, 4, 1, 0.25).unwrap();
        let re = recolor_random(&flat, &mut rng(1)).unwrap();
        assert!(re.data().iter().all(|&v| v == re.data()[0]));
        assert_ne!(re.data()[0], 0.25);

        let continuous = Image::from_fn(20, 20, |y, x| (y * 20 + x) as f64 / 399.0).unwrap();
        assert!(recolor_random(&continuous, &mut rng(1)).is_err());
        assert!(recolor_random(&Image::filled(2, 2, 3, 0.1).unwrap(), &mut rng(1)).is_err());
    }

    #[test]
    fn colorize_contracts() {
        let img = Image::from_fn(6, 7, |y, x| ((y * 7 + x) % 11) as f64 / 10.0).unwrap();
        let gray = colorize_monotonic(&img, &Colormap::identity()).unwrap();
        for (i, v) in img.data().iter().enumerate() {
            for c in 0..3 {
                assert_eq!(gray.data()[i * 3 + c], *v);
            }
        }
        let cmap = Colormap([
            ChannelMap::Knots(vec![(0.0, 0.1), (0.5, 0.2), (1.0, 0.9)]),
            ChannelMap::Gamma(0.6),
            ChannelMap::Gamma(1.8),
        ]);
        let ends = Image::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let c = colorize_monotonic(&ends, &cmap).unwrap();
        assert_eq!(&c.data()[..3], &[0.1, 0.0, 0.0]);
        assert_eq!(&c.data()[3..], &[0.9, 1.0, 1.0]);

        // rank order oracle
        let col = colorize_monotonic(&img, &cmap).unwrap();
        let n = img.pixels();
        for c in 0..3 {
            for i in 0..n {
                for j in 0..n {
                    let (a, b) = (img.data()[i], img.data()[j]);
                    let (p, q) = (col.data()[i * 3 + c], col.data()[j * 3 + c]);
                    assert_eq!(a.partial_cmp(&b), p.partial_cmp(&q));
                }
            }
        }

        let bad = Colormap([
            ChannelMap::Knots(vec![(0.0, 0.5), (1.0, 0.2)]),
            ChannelMap::Gamma(1.0),
            ChannelMap::Gamma(1.0),
        ]);
        assert!(colorize_monotonic(&img, &bad).is_err());
        let bad = Colormap([
            ChannelMap::Gamma(-1.0),
            ChannelMap::Gamma(1.0),
            ChannelMap::Gamma(1.0),
        ]);
        assert!(colorize_monotonic(&img, &bad).is_err());
    }

    #[test]
    fn multimodal_pair_shares_geometry() {
        let map = synth_labelmap(&small_params(20), &mut rng(20)).unwrap();
        let img = labelmap_to_image(&map, &mut rng(21)).unwrap();
        let params = SvfParams {
            target_h: 64,
            target_w: 64,
            ..SvfParams::default()
        };
        for mode in [Modality::Recolor, Modality::Colorize] {
            let pair = make_multimodal_pair(&img, &params, mode, &mut rng(22)).unwrap();
            let mm = pair.moving_multimodal.as_ref().unwrap();
            assert_eq!(boundary_mask(&pair.moving), boundary_mask(mm));
            let h = metrics::entropy(&pair.fixed, DEFAULT_MI_BINS).unwrap();
            let mi = metrics::mutual_information(&pair.fixed, mm, DEFAULT_MI_BINS).unwrap();
            assert!(mi < h);
        }

        let faint = SvfParams {
            strength_bound: 1e-300,
            ..params
        };
        let pair = make_multimodal_pair(&img, &faint, Modality::Colorize, &mut rng(3)).unwrap();
        let expect = colorize_monotonic(&pair.fixed, &Colormap::default()).unwrap();
        assert_eq!(pair.moving_multimodal.unwrap(), expect);
    }
}
