//! Stability diagnostics: adversarial STRF search, random-init divergence
//! probe, the long-sequence onset harness, and PSNR.

pub mod harness;
pub mod metrics;
pub mod probe;
pub mod strf;

pub use harness::{
    stability_harness, FailureInjector, FrameProcessor, HarnessConfig, IdentityProcessor,
    ModelProcessor, StabilityReport,
};
pub use metrics::{onset_deciles, psnr, Deciles};
pub use probe::{divergence_probe, GrowthClass, ProbeConfig, ProbeInput, ProbeTrace};
pub use strf::{strf_search, StrfConfig, StrfLoss, StrfReport, Verdict};
