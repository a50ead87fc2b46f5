//! Knowledge delivery network (KDN) building blocks.
//!
//! Knowledge is handled as transformer KV caches keyed by the token text that
//! produced them. The crate is split the same way the running system is:
//!
//! - [`model`]: a deterministic attention-only reference transformer that
//!   produces KV caches and acts as the exactness oracle.
//! - [`codec`]: quantization, anchor/delta coding and lossless packing of caches.
//! - [`store`]: content-addressed, crash-recoverable chunk store with LRU eviction
//!   and offline edits.
//! - [`delivery`]: framed wire protocol, server, client and a virtual-clock link.
//! - [`blender`]: composition of independently cached segments with selective
//!   recomputation.
//! - [`cost`]: closed-form cost/delay model of fine-tuning, in-context learning
//!   and KV-cache reuse, with a trace simulator that cross-checks it.

pub mod blender;
pub mod codec;
pub mod cost;
pub mod delivery;
pub mod fixture;
pub mod model;
pub mod store;

pub use model::{HiddenStates, KvCache, Model, ModelConfig};
