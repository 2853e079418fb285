//! Patch-token transformer encoder with augmentation hook points.

pub mod config;
pub mod model;

pub use config::ModelConfig;
pub use model::{
    extract_patches, AttentionRecord, ForwardPass, ForwardTrace, Hooks, KvHook, Model, TokenHook,
};
