//! Experiment driver: configuration, orchestration, artifact persistence.
