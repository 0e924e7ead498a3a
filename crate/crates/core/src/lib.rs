//! Bid-pacing control for second-price ad auctions.

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod controllers;
pub mod dp;
pub mod error;
pub mod landscape;
pub mod market;
pub mod training;

pub use error::{Error, Result};
