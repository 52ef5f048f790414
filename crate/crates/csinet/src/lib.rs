//! Files, threads and the command line around `csinet-core`.

pub mod cli;
pub mod config;
pub mod io;
pub mod parallel;
pub mod verify;

pub use csinet_core as core;

/// Parses `args` and runs the command; returns the exit status.
pub fn main_with(args: &[String], out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> anyhow::Result<i32> {
    let cli = cli::parse(args)?;
    cli::run(cli, out, err)
}
