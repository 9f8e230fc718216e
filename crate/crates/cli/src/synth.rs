use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use warpforge::dataset::{self, DatasetSpec, Manifest, SampleEntry, Source};
use warpforge::{LabelMapParams, Modality, SvfParams};

use crate::error::{CliError, CliResult};
use crate::pipeline::create_dir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityArg {
    None,
    Recolor,
    Colorize,
}

impl ModalityArg {
    pub fn modality(self) -> Option<Modality> {
        match self {
            ModalityArg::None => None,
            ModalityArg::Recolor => Some(Modality::Recolor),
            ModalityArg::Colorize => Some(Modality::Colorize),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityArg::None => "none",
            ModalityArg::Recolor => "recolor",
            ModalityArg::Colorize => "colorize",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of pairs.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Upper bound of the per-axis velocity standard deviation, in pixels.
    #[arg(long, default_value_t = 3.0)]
    pub bp: f64,
    /// Coarse velocity lattice size per axis.
    #[arg(long, default_value_t = 8)]
    pub rp: usize,
    /// Number of label noise fields.
    #[arg(long, default_value_t = 16)]
    pub labels: usize,
    #[arg(long, value_enum, default_value_t = ModalityArg::None)]
    pub modality: ModalityArg,
    /// Take fixed images from this directory of PGM/PPM files instead of
    /// synthesizing label maps.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Side of the square fixed image.
    #[arg(long, default_value_t = 224)]
    pub size: usize,
    /// Side of the label map the fixed image is cropped from
    /// (default: 10/7 of `--size`).
    #[arg(long)]
    pub map_size: Option<usize>,
}

impl SynthArgs {
    pub fn spec(&self) -> DatasetSpec {
        let svf = SvfParams {
            coarse_res: self.rp,
            strength_bound: self.bp,
            target_h: self.size,
            target_w: self.size,
            ..SvfParams::default()
        };
        let source = match &self.images {
            Some(dir) => Source::ImageDir {
                path: dir.to_string_lossy().into_owned(),
            },
            None => {
                let map = self.map_size.unwrap_or((self.size * 10).div_ceil(7));
                Source::LabelMaps(LabelMapParams {
                    n_labels: self.labels,
                    map_h: map,
                    map_w: map,
                    crop: self.size,
                    seed: self.seed,
                    ..LabelMapParams::default()
                })
            }
        };
        DatasetSpec {
            n: self.n,
            seed: self.seed,
            source,
            svf,
            modality: self.modality.modality(),
        }
    }
}

/// Writes a dataset, generating pairs on the worker pool.
pub fn write_dataset(root: &Path, spec: &DatasetSpec) -> CliResult<Manifest> {
    if let Source::LabelMaps(lp) = &spec.source {
        lp.validate()?;
    }
    let images = match &spec.source {
        Source::ImageDir { path } => {
            let list = dataset::list_images(Path::new(path))?;
            if list.is_empty() && spec.n > 0 {
                return Err(CliError::invalid(format!("no .pgm/.ppm images in {path}")));
            }
            list
        }
        Source::LabelMaps(_) => Vec::new(),
    };
    create_dir(root)?;
    let entries: Vec<CliResult<SampleEntry>> = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let (pair, name) = dataset::generate_sample(spec, i, &images)?;
            Ok(dataset::write_sample(
                root,
                i,
                dataset::sample_seed(spec.seed, i),
                &pair,
                name,
            )?)
        })
        .collect();
    let manifest = Manifest {
        format: dataset::FORMAT_TAG.into(),
        spec: spec.clone(),
        samples: entries.into_iter().collect::<CliResult<_>>()?,
    };
    dataset::write_manifest(root, &manifest)?;
    Ok(manifest)
}

pub fn run(args: &SynthArgs) -> CliResult<()> {
    let manifest = write_dataset(&args.out, &args.spec())?;
    println!(
        "wrote {} pairs to {}",
        manifest.samples.len(),
        args.out.display()
    );
    Ok(())
}
