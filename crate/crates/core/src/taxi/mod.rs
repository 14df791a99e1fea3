//! Spatial taxi pricing: trip ingestion and cleaning, the empirical grid
//! model, the price-multiplier game and the pricing experiment.

pub mod experiment;
pub mod fixture;
pub mod grid;
pub mod ingest;
pub mod model;
pub mod pricing;

pub use experiment::{
    run_pricing_experiment, write_pricing_csv, PricingExperimentConfig, PricingReport, PricingRow,
};
pub use grid::{bin_to_cell, GridSpec};
pub use ingest::{ingest_trips, IngestConfig, IngestReport, RejectionTally, TripRecord};
pub use model::{build_grid_model, GridModel, GridModelConfig};
pub use pricing::{
    pricing_reward, ActionSpace, DefaultKernel, KernelParams, PricingEnv, ProfitKernel,
};
