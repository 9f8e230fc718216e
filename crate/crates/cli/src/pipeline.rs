//! Per-pair registration and evaluation shared by `register`, `eval` and
//! `experiment`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use clap::ValueEnum;
use rayon::prelude::*;
use serde::Serialize;
use warpforge::dataset::{self, Manifest, SampleEntry};
use warpforge::grid::{self, DisplacementField};
use warpforge::metrics::{self, MetricsReport};
use warpforge::{features, FilterBank, Image, RegConfig, RegResult};

use crate::error::{CliError, CliResult};

/// Registration settings plus an optional replacement filter bank.
#[derive(Debug, Clone)]
pub struct Engine {
    pub config: RegConfig,
    pub bank: Option<FilterBank>,
}

impl Engine {
    pub fn new(config: RegConfig, bank_path: Option<&Path>) -> CliResult<Self> {
        let bank = bank_path.map(features::load_bank).transpose()?;
        Ok(Engine { config, bank })
    }

    pub fn register(&self, fixed: &Image, moving: &Image) -> CliResult<RegResult> {
        let bank = match &self.bank {
            Some(b) => b.clone(),
            None => features::default_bank(fixed.channels())?,
        };
        Ok(warpforge::register_with_bank(
            fixed,
            moving,
            &self.config,
            &bank,
        )?)
    }
}

/// Brings a gray/colour pair to a common channel count by replicating the
/// gray image.
pub fn match_channels(fixed: &Image, moving: &Image) -> CliResult<(Image, Image)> {
    match (fixed.channels(), moving.channels()) {
        (a, b) if a == b => Ok((fixed.clone(), moving.clone())),
        (1, b) => Ok((fixed.replicate_gray(b)?, moving.clone())),
        (a, 1) => Ok((fixed.clone(), moving.replicate_gray(a)?)),
        (a, b) => Err(CliError::invalid(format!(
            "cannot pair a {a}-channel image with a {b}-channel image"
        ))),
    }
}

/// Which field warps the moving image during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSource {
    /// No deformation: metrics of the unregistered pair.
    Identity,
    /// The exact inverse of the synthetic deformation.
    Truth,
    /// The field estimated by registration.
    Register,
}

#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub index: usize,
    pub before: MetricsReport,
    pub after: MetricsReport,
    pub fixed: Image,
    pub warped: Image,
}

impl PairOutcome {
    pub fn name(&self) -> String {
        format!("pair_{:04}", self.index)
    }
}

pub fn eval_pair(
    root: &Path,
    manifest: &Manifest,
    entry: &SampleEntry,
    source: FieldSource,
    multimodal: bool,
    engine: &Engine,
) -> CliResult<PairOutcome> {
    let pair = dataset::load_pair(root, entry)?;
    let moving = if multimodal {
        pair.moving_multimodal.ok_or_else(|| {
            CliError::invalid(format!(
                "pair {} has no multi-modal moving image",
                entry.index
            ))
        })?
    } else {
        pair.moving
    };
    let (fixed, moving) = match_channels(&pair.fixed, &moving)?;
    let (h, w) = (fixed.height(), fixed.width());
    let identity = grid::identity_field(h, w)?;
    let before = metrics::evaluate_pair(&fixed, &moving, &identity)?;
    let (after, warped) = match source {
        FieldSource::Identity => (before.clone(), moving),
        FieldSource::Truth => {
            let field = dataset::inverse_truth(&manifest.spec.svf, entry.truth_seed, h, w)?;
            evaluate_with(&fixed, &moving, &field)?
        }
        FieldSource::Register => {
            let res = engine.register(&fixed, &moving)?;
            (res.metrics, res.warped)
        }
    };
    Ok(PairOutcome {
        index: entry.index,
        before,
        after,
        fixed,
        warped,
    })
}

fn evaluate_with(
    fixed: &Image,
    moving: &Image,
    field: &DisplacementField,
) -> CliResult<(MetricsReport, Image)> {
    let warped = grid::warp(moving, field)?;
    Ok((metrics::evaluate_pair(fixed, &warped, field)?, warped))
}

/// Evaluates every pair of a dataset on the worker pool. On failure the error
/// of the lowest-indexed failing pair is returned.
pub fn evaluate_dataset(
    root: &Path,
    source: FieldSource,
    multimodal: bool,
    engine: &Engine,
) -> CliResult<Vec<PairOutcome>> {
    let manifest = dataset::read_manifest(root)?;
    let results: Vec<CliResult<PairOutcome>> = manifest
        .samples
        .par_iter()
        .map(|e| eval_pair(root, &manifest, e, source, multimodal, engine))
        .collect();
    results.into_iter().collect()
}

pub const TABLE_HEADER: &str =
    "pair,cc_before,mi_before,cc,mi,folding_percent,mse,n_pixels,cc_table,mi_table";

fn cc_text(cc: Option<f64>) -> String {
    cc.map_or_else(|| "undefined".into(), |v| format!("{v:.6}"))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Column means of a table; CC averages only the pairs where it is defined.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableMeans {
    pub pairs: usize,
    pub cc_before: Option<f64>,
    pub mi_before: f64,
    pub cc: Option<f64>,
    pub mi: f64,
    pub folding_percent: f64,
    pub mse: f64,
    pub n_pixels: f64,
}

impl TableMeans {
    pub fn of(rows: &[PairOutcome]) -> Option<Self> {
        if rows.is_empty() {
            return None;
        }
        let col = |f: fn(&PairOutcome) -> f64| mean(rows.iter().map(f)).unwrap_or(0.0);
        Some(TableMeans {
            pairs: rows.len(),
            cc_before: mean(rows.iter().filter_map(|r| r.before.cc)),
            mi_before: col(|r| r.before.mi),
            cc: mean(rows.iter().filter_map(|r| r.after.cc)),
            mi: col(|r| r.after.mi),
            folding_percent: col(|r| r.after.folding_percent),
            mse: col(|r| r.after.mse),
            n_pixels: col(|r| r.after.n_pixels as f64),
        })
    }
}

pub fn render_table(rows: &[PairOutcome]) -> String {
    let mut out = String::new();
    out.push_str(TABLE_HEADER);
    out.push('\n');
    for r in rows {
        let a = &r.after;
        let _ = writeln!(
            out,
            "{},{},{:.6},{},{:.6},{:.4},{:.8},{},{},{}",
            r.name(),
            cc_text(r.before.cc),
            r.before.mi,
            cc_text(a.cc),
            a.mi,
            a.folding_percent,
            a.mse,
            a.n_pixels,
            a.cc_cell(),
            a.mi_cell()
        );
    }
    if let Some(m) = TableMeans::of(rows) {
        let cc_cell = match m.cc {
            Some(cc) => format!("{cc:.4}({:.2})", m.folding_percent),
            None => format!("undefined({:.2})", m.folding_percent),
        };
        let _ = writeln!(
            out,
            "mean,{},{:.6},{},{:.6},{:.4},{:.8},{:.2},{},{:.4}({:.2})",
            cc_text(m.cc_before),
            m.mi_before,
            cc_text(m.cc),
            m.mi,
            m.folding_percent,
            m.mse,
            m.n_pixels,
            cc_cell,
            m.mi,
            m.folding_percent
        );
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

/// `.ppm` for colour images, `.pgm` otherwise.
pub fn image_ext(img: &Image) -> &'static str {
    if img.channels() == 3 {
        "ppm"
    } else {
        "pgm"
    }
}
