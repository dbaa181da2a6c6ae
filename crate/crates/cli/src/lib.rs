//! Control service and command-line front end for the task farm.

pub mod api;
pub mod hub;
pub mod report;

pub use api::{router, serve};
pub use hub::{Hub, HubConfig, HubError};
