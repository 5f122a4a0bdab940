// SPDX-License-Identifier: Apache-2.0

//! Physics-informed short-term load forecasting.

pub mod ingest;
pub mod time;

pub use time::{Hour, HourRange};
pub mod linalg;
pub mod nn;
pub mod physics;
pub mod forecaster;
pub mod ensemble;
pub mod extreme_events;
pub mod evaluation;
pub mod attribution;
pub mod synthetic;
pub mod pipeline;
