//! Command-line grammar.

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use dircollect::docmodel::Timestamp;

#[derive(Debug, Parser)]
#[command(name = "dircollect", version, about = "Collects, archives and serves Tor directory documents")]
pub struct Cli {
    /// Config file; overrides DIRCOLLECT_CONFIG.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides `archive.root`.
    #[arg(long, global = true, value_name = "DIR")]
    pub archive_root: Option<PathBuf>,
    /// Overrides `serve.listen`.
    #[arg(long, global = true, value_name = "ADDR")]
    pub listen: Option<SocketAddr>,
    /// One collection pass instead of the scheduler loop (for `run`).
    #[arg(long, global = true)]
    pub once: bool,
    #[arg(long, global = true, value_name = "LEVEL", default_value = "info")]
    pub log_level: tracing::Level,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scheduler loop plus directory server until interrupted.
    Run,
    /// A single collection cycle.
    Once,
    /// Imports files or directory trees into the archive.
    Import { path: PathBuf },
    /// Rehashes archived files and counts missing references.
    Verify {
        /// `FROM..TO`, each `YYYY-MM-DD` or `YYYY-MM-DD HH:MM:SS`.
        #[arg(long, value_parser = parse_window)]
        window: Option<(Timestamp, Timestamp)>,
    },
    /// Regenerates index.json.
    Index,
    /// Serves the archive without collecting.
    Serve,
}

fn parse_time(s: &str) -> Result<Timestamp, String> {
    let s = s.trim().replace('T', " ");
    let full = if s.len() == 10 { format!("{s} 00:00:00") } else { s };
    Timestamp::parse(&full).map_err(|e| e.to_string())
}

pub fn parse_window(s: &str) -> Result<(Timestamp, Timestamp), String> {
    let (a, b) = s.split_once("..").ok_or("expected FROM..TO")?;
    let (from, to) = (parse_time(a)?, parse_time(b)?);
    if from > to {
        return Err(format!("window ends before it starts: {s}"));
    }
    Ok((from, to))
}
