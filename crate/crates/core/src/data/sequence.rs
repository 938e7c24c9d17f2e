use std::sync::Arc;

use super::{Result, SessionRecord, Split, Task};
use crate::model::{DyadInput, OceanVector};

/// One aligned T-chunk window of a session. All four feature views start at
/// `start`.
#[derive(Debug, Clone)]
pub struct SequenceSample {
    pub session: Arc<SessionRecord>,
    pub start: usize,
    pub len: usize,
}

impl SequenceSample {
    pub fn session_id(&self) -> &str {
        &self.session.session_id
    }

    pub fn task(&self) -> Task {
        self.session.task
    }

    pub fn to_dyad_input(&self) -> Result<DyadInput> {
        self.session.window(self.start, self.len)
    }

    /// Ground truth of A and B.
    pub fn targets(&self) -> [OceanVector; 2] {
        let [a, b] = &self.session.participants;
        [a.ground_truth, b.ground_truth]
    }
}

/// Windows at offsets `0, stride, 2·stride, …` with `start + t ≤ N`.
pub fn sample_sequences(session: &Arc<SessionRecord>, t: usize, stride: usize) -> Vec<SequenceSample> {
    let n = session.num_chunks();
    if t == 0 || stride == 0 || n < t {
        return Vec::new();
    }
    (0..=n - t)
        .step_by(stride)
        .map(|start| SequenceSample {
            session: Arc::clone(session),
            start,
            len: t,
        })
        .collect()
}

/// Windows of every session in `split`, in session order.
pub fn sample_dataset(sessions: &[Arc<SessionRecord>], split: Split, t: usize, stride: usize) -> Vec<SequenceSample> {
    sessions
        .iter()
        .filter(|s| s.split == split)
        .flat_map(|s| sample_sequences(s, t, stride))
        .collect()
}
