//! In-band network telemetry with data-plane event pre-filtering.
//!
//! Switch pipelines stamp, accumulate and strip INT metadata; the sink runs a
//! configurable detector and only reports events. A collector parses the
//! reports and hands them to a stream sink. `traffic` and `bench` provide the
//! synthetic microburst workloads and the measurement harness.

pub mod bench;
pub mod collector;
pub mod controlplane;
pub mod dataplane;
pub mod detection;
pub mod int_wire;
pub mod traffic;
