//! Holder for oracle-only quantities. The planner and re-acquisition code take
//! no vault argument; the counters record who read what so a run can prove it.

use std::cell::Cell;

use serde::Serialize;

use crate::geometry::{Pose, Vec3};
use crate::oracle::SceneSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Scoring the model or reporting errors after the fact.
    Metrics,
    /// Anything that could feed back into a decision.
    Control,
}

#[derive(Debug, Default)]
pub struct TruthVault {
    initial_scene: Option<SceneSpec>,
    true_motion: Pose,
    metric_reads: Cell<usize>,
    control_reads: Cell<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TruthAudit {
    pub metric_reads: usize,
    pub control_reads: usize,
}

impl TruthAudit {
    pub fn clean(&self) -> bool {
        self.control_reads == 0
    }
}

impl TruthVault {
    pub fn new(initial_scene: SceneSpec) -> TruthVault {
        TruthVault {
            initial_scene: Some(initial_scene),
            true_motion: Pose::IDENTITY,
            metric_reads: Cell::new(0),
            control_reads: Cell::new(0),
        }
    }

    fn note(&self, purpose: Purpose) {
        let c = match purpose {
            Purpose::Metrics => &self.metric_reads,
            Purpose::Control => &self.control_reads,
        };
        c.set(c.get() + 1);
    }

    /// Records an executed object motion, composing onto earlier ones.
    pub fn record_motion(&mut self, executed: &Pose) {
        self.true_motion = executed.compose(&self.true_motion);
    }

    /// Cumulative true object motion since the start of the run.
    pub fn true_motion(&self, purpose: Purpose) -> Pose {
        self.note(purpose);
        self.true_motion
    }

    /// The scene as it was before any interaction; this is the model frame.
    pub fn initial_scene(&self, purpose: Purpose) -> &SceneSpec {
        self.note(purpose);
        self.initial_scene.as_ref().expect("vault built with a scene")
    }

    pub fn true_centroid(&self, purpose: Purpose) -> Vec3 {
        self.initial_scene(purpose).centroid()
    }

    pub fn audit(&self) -> TruthAudit {
        TruthAudit {
            metric_reads: self.metric_reads.get(),
            control_reads: self.control_reads.get(),
        }
    }
}
