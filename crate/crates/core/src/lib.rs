//! Block compressive-sensing reconstruction with a dynamic, path-controllable
//! unfolded proximal-gradient network.
//!
//! The crate is organised bottom-up:
//!
//! * [`sensing`] builds the row-orthonormal operator and the block geometry;
//! * [`layers`] holds the convolution/affine primitives with their backward passes;
//! * [`selector`] turns features and a μ code into execute/skip gates;
//! * [`network`] composes the gated stages into the full reconstruction;
//! * [`training`] owns losses, the optimiser and the data pipeline;
//! * [`evaluation`] provides PSNR/SSIM, FLOPs accounting and benchmarking;
//! * [`checkpoint`] persists trained networks.
//!
//! ```
//! use unfoldcs::prelude::*;
//! use rand::SeedableRng;
//!
//! let phi = generate_phi(0.25, BLOCK_PIXELS, 0).unwrap();
//! let image = ndarray::Array2::from_shape_fn((40, 40), |(i, j)| ((i + j) % 7) as f64 / 6.0);
//! let layout = BlockLayout::new(40, 40, BLOCK_SIZE, DEBLOCK_STRIDE).unwrap();
//! let meas = sample(image.view(), &phi, &layout).unwrap();
//!
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
//! let config = NetworkConfig { stages: 2, channels: 8, ..NetworkConfig::default() };
//! let net = Network::new(config, &mut rng).unwrap();
//! let mu = ModulationInput::preset(0.0005).unwrap();
//! let (recon, trace) = net.recover(&meas, &phi, &mu, Mode::Eval).unwrap();
//! assert_eq!(recon.dim(), (40, 40));
//! assert_eq!(trace.decisions.len(), 2);
//! ```

pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod layers;
pub mod network;
pub mod selector;
pub mod sensing;
pub mod training;

#[cfg(doctest)]
mod book;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::checkpoint::{Checkpoint, CheckpointMeta};
    pub use crate::error::{Error, Result};
    pub use crate::evaluation::{psnr, ssim, FlopsModel};
    pub use crate::layers::Parameters;
    pub use crate::network::{GateDecision, Mode, Network, NetworkConfig, PathTrace, Variant};
    pub use crate::selector::{GateNoise, ModulationInput, MU_PRESETS};
    pub use crate::sensing::{
        fold, generate_phi, initialize, sample, unfold, BlockLayout, MeasurementMatrix,
        Measurements, BLOCK_PIXELS, BLOCK_SIZE, DEBLOCK_STRIDE,
    };
}
