//! Log-driven testing for self-organizing multiagent systems.
//!
//! Agents publish annotated [`log_model::LogEvent`]s through an in-process
//! [`topic_broker::Broker`]. Test applications bind queues with wildcard
//! patterns and check what they consume against state machines compiled by
//! [`trace_testkit`]. The system under test is the streetlight simulation in
//! [`streetlight_world`], whose controllers are evolved by [`neuroevolution`].

pub mod log_model;
pub mod neuroevolution;
pub mod streetlight_world;
pub mod topic_broker;
pub mod trace_testkit;
