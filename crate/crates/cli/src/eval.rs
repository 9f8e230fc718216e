use std::path::PathBuf;

use clap::Args;
use warpforge::io;

use crate::config::RegArgs;
use crate::error::CliResult;
use crate::pipeline::{self, create_dir, Engine, FieldSource};

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Dataset directory containing a manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `eval.csv` and `config.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = FieldSource::Register)]
    pub field: FieldSource,
    /// Use the multi-modal moving images.
    #[arg(long)]
    pub multimodal: bool,
    #[command(flatten)]
    pub reg: RegArgs,
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let config = args.reg.resolve()?;
    let engine = Engine::new(config, args.reg.bank.as_deref())?;
    let rows = pipeline::evaluate_dataset(&args.data, args.field, args.multimodal, &engine)?;
    create_dir(&args.out)?;
    let table = pipeline::render_table(&rows);
    pipeline::write_text(&args.out.join("eval.csv"), &table)?;
    io::write_json(&engine.config, args.out.join("config.json"))?;
    print!("{table}");
    Ok(())
}
