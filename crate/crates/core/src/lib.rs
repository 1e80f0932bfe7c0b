//! Dense orthogonal classification heads and the tooling around them:
//! construction and verification of frozen heads, a small reverse-mode
//! tensor engine, MLP encoders, center-based and worst-case losses,
//! norm-bounded attacks, MNIST ingestion and experiment drivers.

pub mod attacks;
pub mod data;
pub mod error;
pub mod gradcore;
pub mod harness;
pub mod losses;
pub mod models;
pub mod orthoweights;
pub mod rng;

pub use attacks::{AttackConfig, AttackMethod, AttackResult, Norm};
pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use gradcore::{DenseTensor, Tape, Var};
pub use losses::{LossConfig, LossMode};
pub use models::{Activation, EncoderSpec, ModelParams, Network};
pub use orthoweights::{
    build_hadamard, build_max_mahalanobis, min_pairwise_sqdist, optimal_sqdist, verify, ClassifierWeights,
    VerificationReport, WeightKind,
};
