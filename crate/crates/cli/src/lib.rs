pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod output;
