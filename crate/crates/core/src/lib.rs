//! Sticky HDP-HMM with a hurdle invariant-wrapped-Poisson emission for
//! discrete wind speed and direction time series.
//!
//! * [`circular`]: the discrete circle and the IWP law with winding numbers.
//! * [`emission`]: the Poisson/hurdle/IWP regime law and latent cells.
//! * [`hdp`]: beam-sampler machinery for the sticky HDP-HMM.
//! * [`gibbs`]: full conditionals and the chain runner.
//! * [`simulate`]: synthetic datasets.
//! * [`io`], [`config`], [`summary`], [`cli`]: files and reporting.

pub mod circular;
pub mod cli;
pub mod config;
pub mod emission;
pub mod error;
pub mod gibbs;
pub mod hdp;
pub mod io;
pub mod sampling;
pub mod simulate;
pub mod summary;

pub use error::{Error, Result};
