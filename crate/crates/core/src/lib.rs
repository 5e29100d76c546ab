//! Deterministic synthetic multi-sensor data collection rig.
//!
//! The crate is organized around one data path: a tick-driven world server
//! ([`server`]) renders procedural sensor payloads from a seeded box-world
//! ([`world`]) and speaks a length-prefixed binary protocol ([`protocol`]);
//! a collection client ([`pipeline`]) matches payloads by frame number,
//! annotates visibility against the depth image ([`annotate`]), and stores
//! raw batches through memory-mapped writers ([`store`]); a harness
//! ([`bench`]) times the pipelined collector against a single-sequential
//! baseline.

pub mod annotate;
pub mod bench;
pub mod config;
pub mod geometry;
pub(crate) mod hash;
pub mod oracle;
pub mod pipeline;
pub mod protocol;
pub mod server;
pub mod store;
pub mod world;

pub use config::{RunConfig, SensorKind, SensorSpec, TimingPlan, ValidatedConfig};
pub use geometry::{Bbox2d, CameraIntrinsics, OrientedBox, Pose, RotationRpy, Transform, Vec3};
pub use world::{ActorClass, ActorState, DepthImage, LidarScan, WorldState};
