//! Reward learning from ranked, suboptimal demonstrations with a meta-learned
//! initialization, and policy optimization on the learned reward.
//!
//! The numeric core ([`reward_model`], [`losses`], [`meta`], [`autodiff`]) is
//! generic over [`Scalar`] (`f32` or `f64`); the aliases below name the common
//! instantiations. Environments, planning and policy optimization work in `f64`.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod autodiff;
pub mod config;
pub mod demos;
pub mod env;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod meta;
pub mod optim;
pub mod pipeline;
pub mod policy_opt;
pub mod reward_model;
pub mod scalar;
pub mod seed;
pub mod weights;

pub use config::RunConfig;
pub use demos::{PairDataset, RankedPair, Trajectory};
pub use env::{TaskDistribution, TaskSpec};
pub use error::{MlreError, Result};
pub use losses::{LossConfig, LossKind};
pub use meta::{MetaConfig, MetaRunState};
pub use policy_opt::{PolicyNet, PpoConfig};
pub use reward_model::{MetaGradMode, ParamVector, RewardNet};
pub use scalar::Scalar;

pub type RewardNet64 = RewardNet<f64>;
pub type RewardNet32 = RewardNet<f32>;
pub type ParamVector64 = ParamVector<f64>;
pub type ParamVector32 = ParamVector<f32>;
pub type MetaRunState64 = MetaRunState<f64>;
pub type MetaRunState32 = MetaRunState<f32>;
