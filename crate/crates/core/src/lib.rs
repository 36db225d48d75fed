//! Trend-driven scheduling of an ensemble of fuzzers.
//!
//! A campaign repeatedly measures how fast each member fuzzer is gaining
//! coverage, then hands the CPU to whichever fuzzers are currently ahead.
//! Fuzzers are either real processes ([`adapter::process`]) or simulated
//! ones ([`sim`]) that run on a virtual clock.

pub mod adapter;
pub mod bitmap;
pub mod config;
pub mod scheduler;
pub mod sim;
pub mod store;
pub mod sync;
pub mod telemetry;

use thiserror::Error;

pub use bitmap::{CoverageBitmap, RawHitMap};
pub use config::{CampaignConfig, ConfigError};
pub use scheduler::{Campaign, CampaignResult, Policy, RoundRecord, ScheduleConfig};
pub use sim::Scenario;
pub use store::{CorpusStore, FsStore, MemStore, SharedStore};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Bitmap(#[from] bitmap::BitmapError),
    #[error(transparent)]
    Adapter(#[from] adapter::AdapterError),
    #[error(transparent)]
    Sync(#[from] sync::SyncError),
    #[error(transparent)]
    Scenario(#[from] sim::ScenarioError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
        let context = context.into();
        move |source| Error::Io { context, source }
    }
}
