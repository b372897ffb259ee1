//! OFDM radar sensing when target echoes arrive after the cyclic prefix.
//!
//! * [`params`]: scenario configuration and per-target link quantities
//! * [`waveform`]: constellations and random symbol frames
//! * [`echo`]: structured ISI/ICI echo synthesis and a time-domain reference
//! * [`analytics`]: closed-form SINR, sidelobe and covariance predictions
//! * [`rdm`]: range-Doppler maps, CA-CFAR and the SIC-DFT estimator
//! * [`esprit`]: spatial smoothing, subspace ESPRIT and SIC-ESPRIT
//! * [`experiment`]: Monte-Carlo sweeps, metrics and output files

pub mod analytics;
pub mod cli;
pub mod dsp;
pub mod echo;
pub mod error;
pub mod esprit;
pub mod experiment;
pub mod params;
pub mod rdm;
pub mod waveform;

pub use error::{Error, Result};
