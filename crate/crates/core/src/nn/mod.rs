//! Small dense networks with hand-written backward passes, a Gaussian
//! policy head, KL/Fisher machinery for trust-region steps, and Adam.

mod adam;
mod checkpoint;
mod gaussian;
mod mlp;

pub use adam::Adam;
pub use checkpoint::{NetCheckpoint, CHECKPOINT_VERSION};
pub use gaussian::{
    fisher_vector_product, gaussian_kl, gaussian_log_prob, FisherOperator, GaussianPolicy, GaussianPolicyOut,
};
pub use mlp::{FlatParams, ForwardCache, Layer, Mlp, MlpShape};
