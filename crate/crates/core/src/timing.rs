//! Wall-clock accounting per training phase.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Accumulated seconds per named phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimer {
    pub phases: BTreeMap<String, f64>,
}

impl PhaseTimer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.add(phase, start.elapsed().as_secs_f64());
        out
    }

    pub fn add(&mut self, phase: &str, seconds: f64) {
        *self.phases.entry(phase.to_string()).or_insert(0.0) += seconds;
    }

    pub fn get(&self, phase: &str) -> f64 {
        self.phases.get(phase).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.phases.values().sum()
    }

    /// Fraction of the total spent in `phase`; zero when nothing was timed.
    pub fn share(&self, phase: &str) -> f64 {
        let t = self.total();
        if t > 0.0 {
            self.get(phase) / t
        } else {
            0.0
        }
    }
}
