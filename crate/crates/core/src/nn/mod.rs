//! Numerical substrate: parameter stores, layers with explicit backward
//! passes, attention, Gaussian policy math, Adam and gradient checking.
//!
//! All computation is `f64`. Every layer exposes `forward_cached` (or returns
//! a cache) and a `backward` that accumulates into its [`ParamStore`].

pub mod attention;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod ops;
pub mod store;

pub use attention::{AttentionCache, AttentionConfig, MultiHeadAttention};
pub use gradcheck::{finite_diff_check, BlockError, GradCheckOptions, GradCheckReport};
pub use layers::{Activation, LayerSpec, Linear, Mlp, MlpCache};
pub use ops::{gaussian_entropy, gaussian_logprob, gaussian_logprob_entropy, softmax, softmax_rows};
pub use store::{AdamConfig, ParamId, ParamStore};

