//! Helpers shared by the integration tests and the acceptance run.
#![allow(dead_code)]

pub mod corpus;
pub mod oracle;
pub mod runs;
