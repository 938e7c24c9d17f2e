//! JSON-lines session manifest.
//!
//! One object per line:
//!
//! ```text
//! {"session_id":"s000","task":"Talk","split":"train",
//!  "a":{"id":"p000","video":"features/s000_A_video.dyft","audio":"…","metadata":[…],"ocean":[…]},
//!  "b":{…}}
//! ```
//!
//! Feature paths are relative to the manifest's directory.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{read_feature_file, DataError, Result};
use crate::model::{DyadInput, OceanVector, Participant};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Animals,
    Ghost,
    Lego,
    Talk,
}

impl Task {
    /// Alphabetical, the order used in report tables.
    pub const ALL: [Task; 4] = [Task::Animals, Task::Ghost, Task::Lego, Task::Talk];

    pub fn name(self) -> &'static str {
        match self {
            Task::Animals => "Animals",
            Task::Ghost => "Ghost",
            Task::Lego => "Lego",
            Task::Talk => "Talk",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| DataError::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(DataError::Format(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestParticipant {
    pub id: String,
    pub video: String,
    pub audio: String,
    pub metadata: Vec<f64>,
    pub ocean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub session_id: String,
    pub task: String,
    pub split: Split,
    pub a: ManifestParticipant,
    pub b: ManifestParticipant,
}

#[derive(Debug, Clone)]
pub struct ParticipantTrack {
    pub participant_id: String,
    /// `[N × d_v]`
    pub video: Tensor,
    /// `[N × d_a]`
    pub audio: Tensor,
    /// `[1 × d_m]`
    pub metadata: Tensor,
    pub ground_truth: OceanVector,
}

impl ParticipantTrack {
    pub fn num_chunks(&self) -> usize {
        self.video.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct SessionRecord {
    pub session_id: String,
    pub task: Task,
    pub split: Split,
    /// Index 0 = A, 1 = B.
    pub participants: [ParticipantTrack; 2],
}

impl SessionRecord {
    /// Checks that all four feature sequences have the same length.
    pub fn new(session_id: String, task: Task, split: Split, participants: [ParticipantTrack; 2]) -> Result<Self> {
        let misaligned = |message: String| DataError::Alignment {
            session: session_id.clone(),
            message,
        };
        let n = participants[0].num_chunks();
        for (p, track) in Participant::BOTH.iter().zip(&participants) {
            let (nv, _) = track.video.dims2()?;
            let (na, _) = track.audio.dims2()?;
            if nv != n || na != n {
                return Err(misaligned(format!(
                    "participant {p:?} has {nv} video and {na} audio chunks, expected {n}"
                )));
            }
        }
        if participants[0].video.shape()[1] != participants[1].video.shape()[1]
            || participants[0].audio.shape()[1] != participants[1].audio.shape()[1]
            || participants[0].metadata.numel() != participants[1].metadata.numel()
        {
            return Err(misaligned("participants have different feature widths".into()));
        }
        Ok(Self {
            session_id,
            task,
            split,
            participants,
        })
    }

    pub fn num_chunks(&self) -> usize {
        self.participants[0].num_chunks()
    }

    /// `(d_v, d_a, d_m)`
    pub fn widths(&self) -> (usize, usize, usize) {
        let p = &self.participants[0];
        (p.video.shape()[1], p.audio.shape()[1], p.metadata.numel())
    }

    /// The chunk range `start..start + len` of both participants.
    pub fn window(&self, start: usize, len: usize) -> Result<DyadInput> {
        let slice = |t: &Tensor| t.slice_rows(start, len);
        let [a, b] = &self.participants;
        Ok(DyadInput::new(
            [slice(&a.video)?, slice(&b.video)?],
            Some([slice(&a.audio)?, slice(&b.audio)?]),
            [a.metadata.clone(), b.metadata.clone()],
        )
        .map_err(|e| DataError::Format(e.to_string()))?)
    }
}

fn load_track(base: &Path, entry: &ManifestParticipant, manifest: &Path, line: usize) -> Result<ParticipantTrack> {
    let bad = |message: String| DataError::Manifest {
        path: manifest.to_path_buf(),
        line,
        message,
    };
    let ground_truth = OceanVector::from_slice(&entry.ocean).map_err(|e| bad(format!("{}: {e}", entry.id)))?;
    if entry.metadata.is_empty() || entry.metadata.iter().any(|v| !v.is_finite()) {
        return Err(bad(format!("{}: metadata must be a nonempty finite vector", entry.id)));
    }
    Ok(ParticipantTrack {
        participant_id: entry.id.clone(),
        video: read_feature_file(base.join(&entry.video))?,
        audio: read_feature_file(base.join(&entry.audio))?,
        metadata: Tensor::new(&[1, entry.metadata.len()], entry.metadata.clone())?,
        ground_truth,
    })
}

/// Parses the manifest and loads every referenced feature file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SessionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut sessions: Vec<SessionRecord> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(raw).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let task: Task = entry.task.parse()?;
        let tracks = [
            load_track(base, &entry.a, path, line)?,
            load_track(base, &entry.b, path, line)?,
        ];
        let session = SessionRecord::new(entry.session_id, task, entry.split, tracks)?;
        if let Some(first) = sessions.first() {
            if first.widths() != session.widths() {
                let message = format!("feature widths {:?} differ from {:?}", session.widths(), first.widths());
                return Err(DataError::Alignment {
                    session: session.session_id,
                    message,
                });
            }
        }
        sessions.push(session);
    }
    Ok(sessions)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).map_err(|e| DataError::Format(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(&out).map_err(|e| DataError::io(path, e))
}
