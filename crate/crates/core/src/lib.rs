//! Execution harnesses for small language models.
//!
//! Tasks ([`task`]) run under a harness condition ([`harness`]) against a
//! model backend ([`backend`]). The [`engine`] drives the
//! plan → execute → verify → recover state machine, [`verify`] produces
//! verdicts, and [`store`] persists every traced run. Manual rubric scores
//! ([`scoring`]) join with runs to give TSR, VTSR and VCR ([`metrics`]).

pub mod backend;
pub mod cli;
pub mod config;
pub mod engine;
pub mod harness;
pub mod metrics;
pub mod scoring;
pub mod search;
pub mod store;
pub mod task;
pub mod verify;

pub use backend::{
    Backend, GenerationOutcome, GenerationRequest, MockBackend, ModelProfile, ScriptedBehavior, ScriptedResponse,
};
pub use engine::{Engine, RunRecord, StageRecord};
pub use harness::{HarnessCondition, StageKind};
pub use metrics::{Fraction, MetricsReport, Scope, Vcr};
pub use scoring::{ScoreSheet, ScoreValue, ScoredTask};
pub use store::ResultsStore;
pub use task::{TaskCategory, TaskSet, TaskSpec};
pub use verify::{FailureMode, Verdict, VerifierSet};
