//! Collection, archival, indexing and serving of Tor directory documents.

pub mod docmodel;
pub mod docparse;
pub mod scheduler;
pub mod refchecker;
pub mod archive;
pub mod fetcher;
pub mod plugins;
pub mod dirserver;
pub mod service;

#[cfg(test)]
mod testutil;
