//! Web service that runs the ranking study: consent and demographics,
//! per-participant randomized pair and overlay orders, region annotation,
//! blinded ranking, and export in the format the analysis reads.

pub mod api;
pub mod export;
pub mod mask;
pub mod session;
pub mod stimuli;
pub mod store;

pub use api::{router, serve, AppState};
pub use export::{export, Export};
pub use mask::{Mask, RleMask};
pub use stimuli::{Stimuli, StudyConfig};
pub use store::{Demographics, Store};
