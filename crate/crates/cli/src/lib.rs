//! Command line tools and the streaming session service.

pub mod commands;
pub mod protocol;
pub mod server;
pub mod session;

use std::ffi::OsString;

use clap::Parser;

/// Environment variable capping worker threads for batch parallelism.
pub const THREADS_ENV: &str = "FLUIDFORGE_THREADS";

/// Sizes the global worker pool from `FLUIDFORGE_THREADS` when set.
pub fn init_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var(THREADS_ENV) {
        let n: usize = value.trim().parse().map_err(|_| anyhow::anyhow!("{THREADS_ENV} must be a positive integer"))?;
        if n == 0 {
            anyhow::bail!("{THREADS_ENV} must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

/// Parses `argv`, runs the subcommand and prints its JSON summary. Returns
/// the process exit code: 0 on success, 1 on runtime failure, 2 on usage
/// errors.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match commands::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = init_threads().and_then(|()| commands::run(cli.command));
    match result {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
