//! Shared vocabulary for reference-oriented tensor storage.
//!
//! A *version* of a model is held by one or more *replicas*, each a full copy
//! owned by one model-parallel group and split into *shards*. This crate
//! defines how those are named ([`naming`], [`version`]), how a shard's
//! bytes are described and checksummed ([`manifest`], [`digest`]) and how
//! handles talk to the reference server ([`protocol`]).

pub mod codec;
pub mod digest;
mod error;
pub mod manifest;
pub mod naming;
pub mod protocol;
pub mod version;

pub use digest::{digest64, Digester};
pub use error::{Error, Result};
pub use manifest::{build_manifest, manifest_from_digests, CompactionConfig, TensorManifest};
pub use naming::{LocationInfo, RetentionRule, ShardCoord};
pub use protocol::{Directive, ErrorCode, FailureKind, Frame, Listing, Reply, Request, ServerError, SourceAssignment, Token, UpdateDecision};
pub use version::{resolve_version, VersionId, VersionSpec};
