//! Directed causal-random-field image models based on mixtures of conditional
//! Gaussian scale mixtures over a Haar superpixel pyramid, with exact
//! maximum-likelihood training, causal sampling, and evaluation via
//! cross-entropy rates and the cross-multi-information rate.

pub mod error;
pub mod filterstats;
pub mod gsm_init;
pub mod image;
pub mod linalg;
pub mod mcgsm;
pub mod model;
pub mod neighborhoods;
pub mod pyramid;
pub mod rates;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use filterstats::{
    derivative_pair_responses, fit_lp_radial_gamma, lp_profile, whiten_pairs, LpFitResult,
};
pub use image::Image;
pub use mcgsm::McgsmParams;
pub use model::{MultiscaleModel, ScaleModel};
pub use neighborhoods::{
    causal_mask, extract_pairs, superpixel_mask, MaskSpec, NeighborhoodMask, PatchDataset,
};
pub use pyramid::{
    build_pyramid, collapse_pyramid, haar_forward, haar_inverse, Pyramid, SuperpixelImage,
};
pub use rates::{
    combine_rates, conditional_cross_entropy, cross_mir, marginal_entropy, EvalConfig, RateReport,
};
pub use sampler::{sample_coarse, sample_details, synthesize, SampleConfig};
pub use synth::{generate_dead_leaves, phase_scramble, DeadLeavesConfig};
pub use trainer::{train, TrainConfig};
