use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exploration stddev annealed linearly from `init` to `last` over `horizon` frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSchedule {
    pub init: f64,
    pub last: f64,
    pub horizon: u64,
}

impl ExplorationSchedule {
    pub fn new(init: f64, last: f64, horizon: u64) -> Self {
        Self { init, last, horizon }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.init >= self.last && self.last >= 0.0 && self.init.is_finite()) {
            return Err(Error::Config(format!(
                "exploration schedule needs init >= last >= 0, got {} -> {}",
                self.init, self.last
            )));
        }
        Ok(())
    }

    pub fn stddev(&self, frame: u64) -> f64 {
        if frame >= self.horizon {
            return self.last;
        }
        let mix = frame as f64 / self.horizon as f64;
        self.init + (self.last - self.init) * mix
    }
}
