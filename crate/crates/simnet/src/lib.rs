//! Simulated Tor directory network for end-to-end tests of the collector.
//!
//! A [`scenario::SimScenario`] describes authorities, relays, faults and
//! accelerated voting periods. [`generate`] turns it into documents,
//! [`server`] serves them over HTTP on a virtual clock and [`harness`] runs
//! a collector against the result.

pub mod generate;
pub mod harness;
pub mod scenario;
pub mod server;
