use serde::{Deserialize, Serialize};

use crate::types::RawSession;

/// One step of a featureized sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub name: String,
    /// Seconds since the last entry of the previous step; 0 for the first step.
    pub dt: f64,
    pub occurrences: u32,
}

/// Incremental run-length featureizer, shared by the batch and live paths.
#[derive(Debug, Clone, Default)]
pub struct StepBuilder {
    steps: Vec<Step>,
    last_ts_ms: Option<i64>,
}

impl StepBuilder {
    pub fn push(&mut self, name: &str, ts_ms: i64) {
        match self.steps.last_mut() {
            Some(last) if last.name == name => last.occurrences += 1,
            _ => {
                let dt = self.last_ts_ms.map_or(0.0, |p| (ts_ms - p).max(0) as f64 / 1000.0);
                self.steps.push(Step { name: name.to_string(), dt, occurrences: 1 });
            }
        }
        self.last_ts_ms = Some(ts_ms);
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn into_steps(self) -> Vec<Step> {
        self.steps
    }
}

/// Collapses consecutive duplicate commands into one step each.
pub fn compute_features(session: &RawSession) -> Vec<Step> {
    let mut b = StepBuilder::default();
    for e in &session.entries {
        b.push(&e.message, e.timestamp.timestamp_millis());
    }
    b.into_steps()
}
