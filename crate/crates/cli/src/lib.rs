//! Library behind the `uniavatar` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod fuzzing;
pub mod inputs;
pub mod threads;
pub mod verify;

use clap::{Parser, Subcommand};

pub use config::{Preset, RunConfig};
pub use error::{CliError, Result};
pub use inputs::{parse_infer_inputs, InferInputs};

#[derive(Parser, Debug)]
#[command(name = "uniavatar", version, about = "Synthetic talking-portrait toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic face model.
    GenModel(commands::GenModelArgs),
    /// Generate a synthetic multi-clip dataset.
    GenData(commands::GenDataArgs),
    /// Render motion or illumination guidance for a parameter sequence.
    RenderGuidance(commands::RenderGuidanceArgs),
    /// Train stage 1 or 2 on a dataset.
    Train(commands::TrainArgs),
    /// Generate frames from a checkpoint.
    Infer(commands::InferArgs),
    /// Print encoder tap and illumination feature shapes.
    ShapeCheck(commands::ShapeCheckArgs),
    /// Run property suites and print a JSON report.
    Verify(commands::VerifyArgs),
}

/// Runs one command, returning the text for stdout and whether the run
/// passed. Only `verify` can report a failure without an error.
pub fn run(cmd: &Command) -> Result<(String, bool)> {
    use commands::*;
    match cmd {
        Command::GenModel(a) => Ok((format!("{}\n", gen_model(a)?.display()), true)),
        Command::GenData(a) => {
            let info = gen_data(a)?;
            Ok((format!("{} clips in {}\n", info.spec.num_clips(), a.out.display()), true))
        }
        Command::RenderGuidance(a) => {
            let recs = render_guidance(a)?;
            Ok((format!("{} images in {}\n", recs.len(), a.out.display()), true))
        }
        Command::Train(a) => {
            let r = run_train(a)?;
            Ok((
                format!(
                    "{}\n{}\nfinal loss_total {}\n",
                    r.checkpoint.display(),
                    r.log.display(),
                    r.final_loss
                ),
                true,
            ))
        }
        Command::Infer(a) => Ok((format!("{} frames in {}\n", run_infer(a)?.len(), a.out.display()), true)),
        Command::ShapeCheck(a) => Ok((shape_check(a)?.table(), true)),
        Command::Verify(a) => {
            let report = run_verify(a)?;
            Ok((format!("{}\n", serde_json::to_string_pretty(&report)?), report.passed))
        }
    }
}
