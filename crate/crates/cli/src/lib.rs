//! Command-line front end: dataset generation, training, evaluation,
//! ablation suites and report rendering.

pub mod args;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod svg;
pub mod table;

use std::path::PathBuf;

use anyhow::Result;

use args::{Cli, Command};

/// Runs one parsed command and returns the directory it wrote.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let root = &cli.output_root;
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a, root),
        Command::Train(a) => commands::train_cmd(a, root),
        Command::Eval(a) => commands::eval_cmd(a, root),
        Command::Ablate(a) => commands::ablate_cmd(a, root),
        Command::Report(a) => commands::report_cmd(a, root),
    }
}
