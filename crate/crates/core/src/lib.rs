//! Media-over-IP frame transport with source discovery, and a relay that
//! passes streams through untouched while tagging the audio on a side chain.

pub mod bench;
pub mod cli;
pub mod discovery;
pub mod frames;
pub mod relay;
pub mod sources;
pub mod stats;
pub mod tagging;
pub mod transport;
pub mod windowing;
