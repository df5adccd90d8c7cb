pub mod adapters;
pub mod api;
pub mod bus;
pub mod clock;
pub mod config;
pub mod improve;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod models;
pub mod ops;
pub mod store;
pub mod twin;
pub mod whatif;
