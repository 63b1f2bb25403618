//! Command-line front end: run configuration, scene corpora on disk and the
//! command implementations behind the `sbss` binary.

pub mod commands;
pub mod corpus;
pub mod spec;
