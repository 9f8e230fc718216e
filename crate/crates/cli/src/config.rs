//! Registration settings: defaults, then the JSON file given by `--config`,
//! then individual flags.

use std::fs;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use warpforge::{Parametrization, RegConfig, Similarity};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimilarityArg {
    IntensityMse,
    FeatureMse,
}

impl From<SimilarityArg> for Similarity {
    fn from(s: SimilarityArg) -> Self {
        match s {
            SimilarityArg::IntensityMse => Similarity::IntensityMse,
            SimilarityArg::FeatureMse => Similarity::FeatureMse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ParametrizationArg {
    Displacement,
    Svf,
}

impl From<ParametrizationArg> for Parametrization {
    fn from(p: ParametrizationArg) -> Self {
        match p {
            ParametrizationArg::Displacement => Parametrization::Displacement,
            ParametrizationArg::Svf => Parametrization::Svf,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RegArgs {
    /// Flat JSON file with `RegConfig` fields; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Smoothness weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub similarity: Option<SimilarityArg>,
    #[arg(long, value_enum)]
    pub parametrization: Option<ParametrizationArg>,
    /// Pyramid levels.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Iterations per pyramid level.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Initial optimizer step size.
    #[arg(long)]
    pub step: Option<f64>,
    /// Scaling-and-squaring steps of the svf parametrization.
    #[arg(long)]
    pub svf_steps: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Filter bank tensor file replacing the built-in bank.
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

impl RegArgs {
    pub fn resolve(&self) -> CliResult<RegConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?
            }
            None => RegConfig::default(),
        };
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.similarity {
            cfg.similarity = v.into();
        }
        if let Some(v) = self.parametrization {
            cfg.parametrization = v.into();
        }
        if let Some(v) = self.levels {
            cfg.levels = v;
        }
        if let Some(v) = self.iters {
            cfg.iters_per_level = v;
        }
        if let Some(v) = self.step {
            cfg.step = v;
        }
        if let Some(v) = self.svf_steps {
            cfg.svf_steps = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
