//! Desk-scale latent-token driving stack: a deterministic 2D multi-agent
//! world with scripted scenarios and an expert oracle, a small
//! vision-language-action model over Gaussian latent tokens, two training
//! stages (joint pretraining, then autoregressive scenario rollout with
//! consistency losses and group-relative reinforcement), and closed/open-loop
//! evaluation harnesses.

pub mod autodiff;
pub mod config;
pub mod geometry;
pub mod grpo;
pub mod lang;
pub mod dataset;
pub mod evaluation;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod rollout;
pub mod world;

pub use autodiff::{Tape, Tensor, Var};
