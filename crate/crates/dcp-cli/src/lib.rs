//! Library half of the `dcp` binary: flat config-file handling lives here so
//! the integration tests can check the key table against the config struct.

pub mod config;
