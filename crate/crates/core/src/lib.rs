//! Decoy-state BB84 key-rate analysis for gigahertz-clocked systems.
//!
//! The crate is organised as a pipeline:
//!
//! * [`model`]: configuration, tallies and measured gains,
//! * [`decoy`]: the three-intensity decoy bounds and worst-case key rate,
//! * [`channel`]: closed-form expected gains versus fiber length,
//! * [`sim`]: a gate-level Monte Carlo of the transmitter and the gated
//!   two-detector receiver,
//! * [`sifting`]: the classical exchange that turns detections into tallies,
//! * [`optimizer`]: search for the signal and decoy intensities,
//! * [`conf`]: the flat text file formats used by the command-line tool.
//!
//! ```
//! use decoy_qkd::decoy::analyze;
//! use decoy_qkd::model::{GainStatistics, SessionConfig};
//!
//! let bounds = analyze(&GainStatistics::TABLE1, &SessionConfig::default()).unwrap();
//! assert!((0.95e6..1.07e6).contains(&bounds.secure_rate_bps));
//! ```

pub mod channel;
pub mod conf;
pub mod decoy;
pub mod model;
pub mod optimizer;
pub mod sifting;
pub mod sim;

pub use model::{
    ChannelConfig, DetectorConfig, GainStatistics, IntensityClass, SecurityBounds, SessionConfig,
    SessionTally, SourceConfig,
};

/// The guide's chapters, compiled so their examples run as doctests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/decoy-bounds.md")]
    struct DecoyBounds;
    #[doc = include_str!("../../../book/src/finite-size.md")]
    struct FiniteSize;
    #[doc = include_str!("../../../book/src/channel-model.md")]
    struct ChannelModel;
    #[doc = include_str!("../../../book/src/simulator.md")]
    struct Simulator;
    #[doc = include_str!("../../../book/src/sifting.md")]
    struct Sifting;
    #[doc = include_str!("../../../book/src/optimizer.md")]
    struct Optimizer;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
