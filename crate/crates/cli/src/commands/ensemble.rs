//! `ensemble`: average two exported score tables pair by pair.

use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use xmatch_core::pipeline::{ensemble, read_scores, write_scores};
use xmatch_core::Error;

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    /// Two score tables, comma separated or repeated
    #[arg(long = "in", value_delimiter = ',', required = true)]
    pub inputs: Vec<PathBuf>,

    /// Output score table
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: EnsembleArgs) -> Result<u8> {
    if args.inputs.len() != 2 {
        return Err(Error::config(format!(
            "ensemble averages exactly two score tables, got {}",
            args.inputs.len()
        ))
        .into());
    }
    let a = read_scores(&args.inputs[0])?;
    let b = read_scores(&args.inputs[1])?;
    let merged = ensemble(&a, &b)?;
    write_scores(&args.out, &merged)?;
    println!(
        "wrote {} averaged scores to {}",
        merged.len(),
        args.out.display()
    );
    Ok(0)
}
