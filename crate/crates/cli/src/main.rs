//! `dircollect` command-line tool.
//!
//! Exit codes: 0 success, 1 partial failure, 2 configuration or usage
//! error.

mod args;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use dircollect::archive::{Archive, IndexFile};
use dircollect::dirserver::{ArchiveStatus, DirServer};
use dircollect::docmodel::Timestamp;
use dircollect::scheduler::SystemClock;
use dircollect::service::{Collector, Config, ConfigError, ServiceError};
use serde_json::json;

use args::{Cli, Command};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Service(ServiceError),
    #[error("{0}")]
    Runtime(String),
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Config(c) => CliError::Config(c),
            other => CliError::Service(other),
        }
    }
}

impl From<dircollect::archive::ArchiveError> for CliError {
    fn from(e: dircollect::archive::ArchiveError) -> Self {
        CliError::Service(ServiceError::Archive(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Ok,
    Partial,
}

fn load_config(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = Config::load_resolved(cli.config.as_deref())?;
    if let Some(root) = &cli.archive_root {
        cfg.archive.root = root.clone();
    }
    if let Some(addr) = cli.listen {
        cfg.serve.listen = Some(addr);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_archive(cfg: &Config) -> Result<Arc<Archive>, CliError> {
    Ok(Arc::new(Archive::open_with_limit(&cfg.archive.root, cfg.limits.max_open_files)?))
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json value serializes"));
}

async fn shutdown_signal() {
    if tokio::signal::ctrl_c().await.is_err() {
        std::future::pending::<()>().await;
    }
}

async fn once(cfg: Config) -> Result<Status, CliError> {
    let collector = Collector::new(cfg, Arc::new(SystemClock))?;
    let report = collector.once().await;
    print(json!({ "once": report, "metrics": collector.metrics() }));
    Ok(if report.ok { Status::Ok } else { Status::Partial })
}

async fn execute(cli: &Cli) -> Result<Status, CliError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Once => once(cfg).await,
        Command::Run if cli.once => once(cfg).await,
        Command::Run => {
            let collector = Arc::new(Collector::new(cfg, Arc::new(SystemClock))?);
            for failure in collector.plugin_failures() {
                tracing::error!(error = %failure, "plugin failed to load");
            }
            collector.clone().run(None, shutdown_signal()).await?;
            Ok(if collector.plugin_failures().is_empty() { Status::Ok } else { Status::Partial })
        }
        Command::Import { path } => {
            let archive = open_archive(&cfg)?;
            let report = archive.import_path(path, Timestamp::now())?;
            archive.write_index(&previous_task_status(&archive))?;
            let status = if report.errors.is_empty() { Status::Ok } else { Status::Partial };
            print(json!({ "import": report }));
            Ok(status)
        }
        Command::Verify { window } => {
            let archive = open_archive(&cfg)?;
            let report = archive.verify_integrity(*window, cfg.thresholds.missing_ratio);
            let status = if report.is_clean() { Status::Ok } else { Status::Partial };
            print(json!({ "verify": report }));
            Ok(status)
        }
        Command::Index => {
            let archive = open_archive(&cfg)?;
            let path = archive.write_index(&previous_task_status(&archive))?;
            print(json!({ "index": path, "entries": archive.len() }));
            Ok(Status::Ok)
        }
        Command::Serve => {
            let addr = cfg.serve.listen.ok_or_else(|| ConfigError::Invalid("serve needs serve.listen or --listen".into()))?;
            let archive = open_archive(&cfg)?;
            let status = Arc::new(ArchiveStatus(archive.clone()));
            let server = DirServer::new(archive, Arc::new(SystemClock), status);
            let listener = tokio::net::TcpListener::bind(addr)
                .await
                .map_err(|e| CliError::Service(ServiceError::Listen(addr.to_string(), e)))?;
            server.serve(listener, shutdown_signal()).await.map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok(Status::Ok)
        }
    }
}

/// Task completion times recorded by the last index, if any.
fn previous_task_status(archive: &Archive) -> BTreeMap<String, Timestamp> {
    std::fs::read(archive.root().join("index.json"))
        .ok()
        .and_then(|b| serde_json::from_slice::<IndexFile>(&b).ok())
        .map(|i| i.task_status)
        .unwrap_or_default()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt().with_max_level(cli.log_level).with_writer(std::io::stderr).with_ansi(false).init();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    match rt.block_on(execute(&cli)) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(1),
        Err(e @ CliError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
