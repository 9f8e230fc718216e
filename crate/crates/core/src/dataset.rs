//! On-disk pair datasets: one directory per pair plus a JSON manifest.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/pair_0000/fixed.pgm
//! <dir>/pair_0000/moving.pgm
//! <dir>/pair_0000/moving_multimodal.{pgm,ppm}   (multi-modal datasets only)
//! <dir>/pair_0000/truth.wft
//! ```
//!
//! Sample `i` of a dataset with base seed `s` is generated from seed `s ^ i`,
//! so samples can be produced in any order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DisplacementField, Image};
use crate::io;
use crate::svf::{self, SvfParams};
use crate::synth::{self, LabelMapParams, Modality, PairSample};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const FORMAT_TAG: &str = "warpforge-dataset/1";

/// Where the fixed images of a dataset come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    LabelMaps(LabelMapParams),
    ImageDir { path: String },
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n: usize,
    pub seed: u64,
    pub source: Source,
    pub svf: SvfParams,
    pub modality: Option<Modality>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub seed: u64,
    pub truth_seed: u64,
    /// Source image for image-directory datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image: Option<String>,
    pub fixed: String,
    pub moving: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moving_multimodal: Option<String>,
    pub truth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub spec: DatasetSpec,
    pub samples: Vec<SampleEntry>,
}

/// Seed of sample `index`.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    base ^ index as u64
}

/// Builds a pair from a source image, shrinking the crop to the image when it
/// is smaller than the configured target.
pub fn pair_from_image(
    img: &Image,
    svf: &SvfParams,
    modality: Option<Modality>,
    seed: u64,
) -> Result<PairSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = SvfParams {
        target_h: svf.target_h.min(img.height()),
        target_w: svf.target_w.min(img.width()),
        ..svf.clone()
    };
    match modality {
        None => synth::make_pair(img, &params, &mut rng),
        Some(mode) => synth::make_multimodal_pair(img, &params, mode, &mut rng),
    }
}

/// Generates sample `index` of a label-map dataset.
pub fn generate_labelmap_sample(spec: &DatasetSpec, index: usize) -> Result<PairSample> {
    let Source::LabelMaps(lp) = &spec.source else {
        return Err(Error::param("source", "not a label-map dataset"));
    };
    let seed = sample_seed(spec.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lp = LabelMapParams { seed, ..lp.clone() };
    let params = SvfParams {
        target_h: lp.crop,
        target_w: lp.crop,
        ..spec.svf.clone()
    };
    let map = synth::synth_labelmap(&lp, &mut rng)?;
    let img = synth::labelmap_to_image(&map, &mut rng)?;
    match spec.modality {
        None => synth::make_pair(&img, &params, &mut rng),
        Some(mode) => synth::make_multimodal_pair(&img, &params, mode, &mut rng),
    }
}

/// Generates sample `index`. Image-directory sources cycle through `images`
/// (sorted, see [`list_images`]); the second value names the source image.
pub fn generate_sample(
    spec: &DatasetSpec,
    index: usize,
    images: &[PathBuf],
) -> Result<(PairSample, Option<String>)> {
    match &spec.source {
        Source::LabelMaps(_) => Ok((generate_labelmap_sample(spec, index)?, None)),
        Source::ImageDir { path } => {
            if images.is_empty() {
                return Err(Error::param(
                    "source",
                    format!("no .pgm/.ppm images in {path}"),
                ));
            }
            let img_path = &images[index % images.len()];
            let img = io::read_image(img_path)?;
            let pair = pair_from_image(
                &img,
                &spec.svf,
                spec.modality,
                sample_seed(spec.seed, index),
            )?;
            let name = img_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned());
            Ok((pair, name))
        }
    }
}

/// The field that undoes a sample's truth: `exp(-v)` for the velocity
/// regenerated from `truth_seed`, on an `height x width` grid.
pub fn inverse_truth(
    svf: &SvfParams,
    truth_seed: u64,
    height: usize,
    width: usize,
) -> Result<DisplacementField> {
    let params = SvfParams {
        target_h: height,
        target_w: width,
        seed: truth_seed,
        ..svf.clone()
    };
    let (v, _) = svf::random_diffeo_with_velocity(&params)?;
    svf::integrate_svf(&v.negated(), params.squaring_steps)
}

/// Sorted `.pgm`/`.ppm` files of a directory.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("pgm" | "ppm")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn pair_dir(index: usize) -> String {
    format!("pair_{index:04}")
}

/// Writes one pair under `root` and returns its manifest entry.
pub fn write_sample(
    root: &Path,
    index: usize,
    seed: u64,
    pair: &PairSample,
    source_image: Option<String>,
) -> Result<SampleEntry> {
    let rel = pair_dir(index);
    let dir = root.join(&rel);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    io::write_image(&pair.fixed, dir.join("fixed.pgm"))?;
    io::write_image(&pair.moving, dir.join("moving.pgm"))?;
    let moving_multimodal = match &pair.moving_multimodal {
        Some(img) => {
            let name = if img.channels() == 3 {
                "moving_multimodal.ppm"
            } else {
                "moving_multimodal.pgm"
            };
            io::write_image(img, dir.join(name))?;
            Some(format!("{rel}/{name}"))
        }
        None => None,
    };
    io::write_field(&pair.truth, dir.join("truth.wft"))?;
    Ok(SampleEntry {
        index,
        seed,
        truth_seed: pair.truth_seed,
        source_image,
        fixed: format!("{rel}/fixed.pgm"),
        moving: format!("{rel}/moving.pgm"),
        moving_multimodal,
        truth: format!("{rel}/truth.wft"),
    })
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    io::write_json(manifest, root.join(MANIFEST_NAME))
}

/// Generates and writes a whole dataset sequentially.
pub fn write_dataset(root: &Path, spec: &DatasetSpec) -> Result<Manifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let images = match &spec.source {
        Source::ImageDir { path } => list_images(Path::new(path))?,
        Source::LabelMaps(_) => Vec::new(),
    };
    let mut samples = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let (pair, name) = generate_sample(spec, i, &images)?;
        samples.push(write_sample(
            root,
            i,
            sample_seed(spec.seed, i),
            &pair,
            name,
        )?);
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        spec: spec.clone(),
        samples,
    };
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::param(
            "manifest",
            format!("unknown format {:?}", manifest.format),
        ));
    }
    Ok(manifest)
}

/// One pair read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub entry: SampleEntry,
    pub fixed: Image,
    pub moving: Image,
    pub moving_multimodal: Option<Image>,
    pub truth: DisplacementField,
}

pub fn load_pair(root: &Path, entry: &SampleEntry) -> Result<LoadedPair> {
    Ok(LoadedPair {
        entry: entry.clone(),
        fixed: io::read_image(root.join(&entry.fixed))?,
        moving: io::read_image(root.join(&entry.moving))?,
        moving_multimodal: entry
            .moving_multimodal
            .as_ref()
            .map(|p| io::read_image(root.join(p)))
            .transpose()?,
        truth: io::read_field(root.join(&entry.truth))?,
    })
}
