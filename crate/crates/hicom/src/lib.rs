//! Dataset generation, training, evaluation and explanation on top of
//! `hicom-core`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod explain;
pub mod generate;
pub mod ingest;
pub mod io;
pub mod plot;
pub mod train;
