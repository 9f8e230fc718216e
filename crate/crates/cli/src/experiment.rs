//! Seeded multi-domain benchmark: one engine configuration applied unchanged
//! to every domain, repetition and modality.
//!
//! ```text
//! <out>/spec.json                   resolved spec, defaults filled in
//! <out>/report.json                 every run with its status and means
//! <out>/comparison.csv              multi-modal runs, one row per similarity
//! <out>/<domain>/rep_<r>/<modality>/data/...          the dataset
//! <out>/<domain>/rep_<r>/<modality>/<similarity>/eval.csv
//! <out>/<domain>/rep_<r>/<modality>/<similarity>/config.json
//! <out>/<domain>/rep_<r>/<modality>/<similarity>/overlays/*.ppm
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use warpforge::dataset::{DatasetSpec, Source};
use warpforge::{io, RegConfig, Similarity, SvfParams};

use crate::error::{CliError, CliResult};
use crate::overlay;
use crate::pipeline::{self, create_dir, Engine, FieldSource, PairOutcome, TableMeans};
use crate::synth::{self, ModalityArg};

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    /// Experiment spec (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    /// Directory name of the domain under the report root.
    pub name: String,
    #[serde(flatten)]
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub domains: Vec<Domain>,
    /// Pairs per dataset.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Repetition `r` uses base seed `seed + r`.
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_modalities")]
    pub modalities: Vec<ModalityArg>,
    #[serde(default)]
    pub svf: SvfParams,
    #[serde(default)]
    pub config: RegConfig,
    /// Similarities compared on multi-modal datasets. Mono-modal datasets
    /// use `config.similarity`.
    #[serde(default = "default_comparison")]
    pub comparison: Vec<Similarity>,
    /// Filter bank tensor file replacing the built-in bank.
    #[serde(default)]
    pub bank: Option<PathBuf>,
    #[serde(default = "default_overlays")]
    pub overlays: bool,
}

fn default_n() -> usize {
    4
}

fn default_repetitions() -> usize {
    1
}

fn default_modalities() -> Vec<ModalityArg> {
    vec![ModalityArg::None, ModalityArg::Recolor]
}

fn default_comparison() -> Vec<Similarity> {
    vec![Similarity::IntensityMse, Similarity::FeatureMse]
}

fn default_overlays() -> bool {
    true
}

impl ExperimentSpec {
    pub fn validate(&self) -> CliResult<()> {
        if self.domains.is_empty() {
            return Err(CliError::invalid("spec lists no domains"));
        }
        if self.repetitions == 0 {
            return Err(CliError::invalid("repetitions must be at least 1"));
        }
        if self.modalities.is_empty() {
            return Err(CliError::invalid("spec lists no modalities"));
        }
        if self.comparison.is_empty() {
            return Err(CliError::invalid("comparison lists no similarities"));
        }
        let mut names = HashSet::new();
        for d in &self.domains {
            let safe = !d.name.is_empty()
                && d.name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
                && d.name != "."
                && d.name != "..";
            if !safe {
                return Err(CliError::invalid(format!("bad domain name {:?}", d.name)));
            }
            if !names.insert(d.name.as_str()) {
                return Err(CliError::invalid(format!(
                    "duplicate domain name {:?}",
                    d.name
                )));
            }
            match &d.source {
                Source::ImageDir { path } if !Path::new(path).is_dir() => {
                    return Err(CliError::invalid(format!(
                        "domain {}: no directory {path}",
                        d.name
                    )));
                }
                Source::LabelMaps(lp) => lp.validate()?,
                _ => {}
            }
        }
        if let Some(b) = &self.bank {
            if !b.is_file() {
                return Err(CliError::invalid(format!("no bank file {}", b.display())));
            }
        }
        self.config.validate()?;
        Ok(())
    }
}

fn similarity_name(s: Similarity) -> &'static str {
    match s {
        Similarity::IntensityMse => "intensity_mse",
        Similarity::FeatureMse => "feature_mse",
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub domain: String,
    pub repetition: usize,
    pub modality: ModalityArg,
    pub similarity: Similarity,
    pub dir: String,
    pub error: Option<String>,
    pub means: Option<TableMeans>,
}

impl RunRecord {
    fn delta_mi(&self) -> Option<f64> {
        self.means.as_ref().map(|m| m.mi - m.mi_before)
    }
}

#[derive(Debug, Clone, Serialize)]
struct Report<'a> {
    runs: &'a [RunRecord],
    failures: usize,
}

pub fn load_spec(path: &Path) -> CliResult<ExperimentSpec> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    let spec: ExperimentSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

fn write_overlays(dir: &Path, rows: &[PairOutcome]) -> CliResult<()> {
    create_dir(dir)?;
    for r in rows {
        let name = r.name();
        io::write_image(
            &overlay::checkerboard(&r.fixed, &r.warped)?,
            dir.join(format!("{name}_checkerboard.ppm")),
        )?;
        io::write_image(
            &overlay::difference(&r.fixed, &r.warped)?,
            dir.join(format!("{name}_difference.ppm")),
        )?;
    }
    Ok(())
}

fn run_one(
    data: &Path,
    dir: &Path,
    multimodal: bool,
    engine: &Engine,
    overlays: bool,
) -> CliResult<Option<TableMeans>> {
    let rows = pipeline::evaluate_dataset(data, FieldSource::Register, multimodal, engine)?;
    create_dir(dir)?;
    pipeline::write_text(&dir.join("eval.csv"), &pipeline::render_table(&rows))?;
    io::write_json(&engine.config, dir.join("config.json"))?;
    if overlays {
        write_overlays(&dir.join("overlays"), &rows)?;
    }
    Ok(TableMeans::of(&rows))
}

/// Runs every sub-experiment, recording failures instead of stopping.
pub fn execute(spec: &ExperimentSpec, out: &Path) -> CliResult<Vec<RunRecord>> {
    create_dir(out)?;
    io::write_json(spec, out.join("spec.json"))?;
    let mut runs = Vec::new();
    for domain in &spec.domains {
        for rep in 0..spec.repetitions {
            for &modality in &spec.modalities {
                let rel = format!("{}/rep_{rep}/{}", domain.name, modality.name());
                let base = out.join(&rel);
                let data = base.join("data");
                let dataset_spec = DatasetSpec {
                    n: spec.n,
                    seed: spec.seed.wrapping_add(rep as u64),
                    source: domain.source.clone(),
                    svf: spec.svf.clone(),
                    modality: modality.modality(),
                };
                let generated = synth::write_dataset(&data, &dataset_spec);
                let similarities = match modality {
                    ModalityArg::None => vec![spec.config.similarity],
                    _ => spec.comparison.clone(),
                };
                for similarity in similarities {
                    let sim_name = similarity_name(similarity);
                    let mut record = RunRecord {
                        domain: domain.name.clone(),
                        repetition: rep,
                        modality,
                        similarity,
                        dir: format!("{rel}/{sim_name}"),
                        error: None,
                        means: None,
                    };
                    let config = RegConfig {
                        similarity,
                        ..spec.config.clone()
                    };
                    let outcome = match &generated {
                        Err(e) => Err(CliError::invalid(format!("dataset generation: {e}"))),
                        Ok(_) => Engine::new(config, spec.bank.as_deref()).and_then(|engine| {
                            run_one(
                                &data,
                                &base.join(sim_name),
                                modality != ModalityArg::None,
                                &engine,
                                spec.overlays,
                            )
                        }),
                    };
                    match outcome {
                        Ok(means) => record.means = means,
                        Err(e) => {
                            eprintln!("run {} failed: {e}", record.dir);
                            record.error = Some(e.to_string());
                        }
                    }
                    runs.push(record);
                }
            }
        }
    }
    let failures = runs.iter().filter(|r| r.error.is_some()).count();
    io::write_json(
        &Report {
            runs: &runs,
            failures,
        },
        out.join("report.json"),
    )?;
    pipeline::write_text(&out.join("comparison.csv"), &comparison_table(&runs))?;
    Ok(runs)
}

pub const COMPARISON_HEADER: &str =
    "domain,repetition,modality,similarity,pairs,cc_before,cc,mi_before,mi,delta_mi,folding_percent,status";

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(String::new, |x| format!("{x:.prec$}"))
}

fn comparison_table(runs: &[RunRecord]) -> String {
    let mut out = String::new();
    out.push_str(COMPARISON_HEADER);
    out.push('\n');
    for r in runs.iter().filter(|r| r.modality != ModalityArg::None) {
        let m = r.means.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.domain,
            r.repetition,
            r.modality.name(),
            similarity_name(r.similarity),
            m.map_or(0, |m| m.pairs),
            opt(m.and_then(|m| m.cc_before), 6),
            opt(m.and_then(|m| m.cc), 6),
            opt(m.map(|m| m.mi_before), 6),
            opt(m.map(|m| m.mi), 6),
            opt(r.delta_mi(), 6),
            opt(m.map(|m| m.folding_percent), 4),
            if r.error.is_some() { "failed" } else { "ok" }
        );
    }
    out
}

pub fn run(args: &ExperimentArgs) -> CliResult<()> {
    let spec = load_spec(&args.spec)?;
    let runs = execute(&spec, &args.out)?;
    let failed = runs.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} runs, {failed} failed; report in {}",
        runs.len(),
        args.out.display()
    );
    if failed > 0 {
        return Err(CliError::Partial(format!(
            "{failed} of {} runs failed",
            runs.len()
        )));
    }
    Ok(())
}
