use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use warpforge::grid;
use warpforge::metrics::{self, MetricsReport};
use warpforge::{io, RegConfig};

use crate::config::RegArgs;
use crate::error::CliResult;
use crate::pipeline::{create_dir, image_ext, match_channels, Engine};

#[derive(Debug, Clone, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub reg: RegArgs,
}

#[derive(Serialize)]
struct RegisterReport<'a> {
    before: &'a MetricsReport,
    after: &'a MetricsReport,
    final_loss: Option<f64>,
    iterations: usize,
    level_starts: &'a [usize],
    config: &'a RegConfig,
}

pub fn run(args: &RegisterArgs) -> CliResult<()> {
    let config = args.reg.resolve()?;
    let engine = Engine::new(config, args.reg.bank.as_deref())?;
    let (fixed, moving) = match_channels(
        &io::read_image(&args.fixed)?,
        &io::read_image(&args.moving)?,
    )?;
    let identity = grid::identity_field(fixed.height(), fixed.width())?;
    let before = metrics::evaluate_pair(&fixed, &moving, &identity)?;
    let res = engine.register(&fixed, &moving)?;

    create_dir(&args.out)?;
    io::write_image(
        &res.warped,
        args.out.join(format!("warped.{}", image_ext(&res.warped))),
    )?;
    io::write_field(&res.field, args.out.join("field.wft"))?;
    io::write_json(&engine.config, args.out.join("config.json"))?;
    let report = RegisterReport {
        before: &before,
        after: &res.metrics,
        final_loss: res.loss_trace.last().copied(),
        iterations: res.loss_trace.len(),
        level_starts: &res.level_starts,
        config: &engine.config,
    };
    io::write_json(&report, args.out.join("metrics.json"))?;
    println!(
        "cc {} -> {}, folding {:.4}%",
        fmt_cc(before.cc),
        fmt_cc(res.metrics.cc),
        res.metrics.folding_percent
    );
    Ok(())
}

fn fmt_cc(cc: Option<f64>) -> String {
    cc.map_or_else(|| "undefined".into(), |v| format!("{v:.4}"))
}
