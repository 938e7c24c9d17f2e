//! Synthetic dyads with linearly planted trait signal.
//!
//! Every participant draws five standard-normal traits. Trait `i` is written
//! into feature channels according to its plant sources, each source owning
//! its own block of [`PLANT_BLOCK`] channels:
//!
//! | source            | stream  | channels   | where                                   |
//! |-------------------|---------|------------|-----------------------------------------|
//! | `own_video`       | video   | `0..5`     | own track, every chunk                  |
//! | `partner_video`   | video   | `5..10`    | the *partner's* track, every chunk      |
//! | `sparse_temporal` | video   | `10..15`   | own track, a random 20% of chunks       |
//! | `own_audio`       | audio   | `0..5`     | own track, every chunk                  |
//!
//! Gaussian noise is added to every channel. Metadata channel `j < 5` is
//! `metadata_signal · trait_j` plus unit noise; the rest is unit noise.
//! Values are rounded to single precision so that a dataset read back from
//! disk equals the one generated in memory.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    write_feature_file, write_manifest, DataError, ManifestEntry, ManifestParticipant, ParticipantTrack, Result,
    SessionRecord, Split, Task,
};
use crate::model::{OceanVector, NUM_TRAITS};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const PLANT_BLOCK: usize = NUM_TRAITS;
pub const SPARSE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plant {
    OwnVideo,
    OwnAudio,
    PartnerVideo,
    SparseTemporal,
}

impl Plant {
    fn video_offset(self) -> Option<usize> {
        match self {
            Plant::OwnVideo => Some(0),
            Plant::PartnerVideo => Some(PLANT_BLOCK),
            Plant::SparseTemporal => Some(2 * PLANT_BLOCK),
            Plant::OwnAudio => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_sessions: usize,
    pub chunks_per_session: usize,
    pub d_v: usize,
    pub d_a: usize,
    pub d_m: usize,
    pub noise_std: f64,
    pub signal_scale: f64,
    pub metadata_signal: f64,
    /// Plant sources of each of the five traits.
    pub plants: Vec<Vec<Plant>>,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_sessions: 40,
            chunks_per_session: 24,
            d_v: 20,
            d_a: 10,
            d_m: 21,
            noise_std: 0.5,
            signal_scale: 1.0,
            metadata_signal: 0.5,
            plants: vec![
                vec![Plant::OwnVideo],
                vec![Plant::OwnAudio],
                vec![Plant::PartnerVideo],
                vec![Plant::SparseTemporal],
                vec![Plant::OwnVideo, Plant::OwnAudio],
            ],
            train_fraction: 0.6,
            val_fraction: 0.2,
        }
    }
}

impl SyntheticSpec {
    /// Same source for all five traits.
    pub fn with_plant(mut self, plant: Plant) -> Self {
        self.plants = vec![vec![plant]; NUM_TRAITS];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.n_sessions == 0 || self.chunks_per_session == 0 {
            return bad("n_sessions and chunks_per_session must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and nonnegative, got {}", self.noise_std));
        }
        if !self.signal_scale.is_finite() || !self.metadata_signal.is_finite() {
            return bad("signal scales must be finite".into());
        }
        if self.plants.len() != NUM_TRAITS || self.plants.iter().any(Vec::is_empty) {
            return bad("every one of the five traits needs at least one plant source".into());
        }
        let all = self.plants.iter().flatten();
        let need_v = all
            .clone()
            .filter_map(|p| p.video_offset())
            .map(|o| o + PLANT_BLOCK)
            .max()
            .unwrap_or(0);
        if self.d_v < need_v.max(1) {
            return bad(format!("d_v = {} is too narrow for the planted blocks (need {need_v})", self.d_v));
        }
        let need_a = if all.clone().any(|&p| p == Plant::OwnAudio) { PLANT_BLOCK } else { 1 };
        if self.d_a < need_a {
            return bad(format!("d_a = {} is too narrow (need {need_a})", self.d_a));
        }
        if self.d_m == 0 || (self.metadata_signal != 0.0 && self.d_m < NUM_TRAITS) {
            return bad(format!("d_m = {} is too narrow", self.d_m));
        }
        let (tr, va) = (self.train_fraction, self.val_fraction);
        if !(0.0..=1.0).contains(&tr) || !(0.0..=1.0).contains(&va) || tr + va > 1.0 {
            return bad("split fractions must lie in [0, 1] and sum to at most 1".into());
        }
        Ok(())
    }

    fn split_of(&self, index: usize) -> Split {
        let n = self.n_sessions as f64;
        let n_train = (n * self.train_fraction).round() as usize;
        let n_val = (n * self.val_fraction).round() as usize;
        if index < n_train {
            Split::Train
        } else if index < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

fn round32(v: f64) -> f64 {
    f64::from(v as f32)
}

struct Draft {
    traits: [f64; NUM_TRAITS],
    video: Vec<f64>,
    audio: Vec<f64>,
    metadata: Vec<f64>,
}

/// Generates `spec.n_sessions` sessions from one seeded stream.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<SessionRecord>> {
    spec.validate()?;
    let mut rng = RngStream::new(seed);
    let n = spec.chunks_per_session;
    let s = spec.signal_scale;
    let mut sessions = Vec::with_capacity(spec.n_sessions);

    for k in 0..spec.n_sessions {
        let mut drafts: Vec<Draft> = (0..2)
            .map(|_| {
                let traits: [f64; NUM_TRAITS] = std::array::from_fn(|_| round32(rng.normal()));
                let metadata = (0..spec.d_m)
                    .map(|j| {
                        let signal = if j < NUM_TRAITS { spec.metadata_signal * traits[j] } else { 0.0 };
                        signal + rng.normal()
                    })
                    .collect();
                let video = (0..n * spec.d_v).map(|_| spec.noise_std * rng.normal()).collect();
                let audio = (0..n * spec.d_a).map(|_| spec.noise_std * rng.normal()).collect();
                Draft {
                    traits,
                    video,
                    audio,
                    metadata,
                }
            })
            .collect();

        for p in 0..2 {
            let traits = drafts[p].traits;
            // a fixed-size random subset of chunks per participant
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let n_sparse = ((n as f64) * SPARSE_FRACTION).round().max(1.0) as usize;
            let sparse = &order[..n_sparse.min(n)];

            for (i, sources) in spec.plants.iter().enumerate() {
                for &plant in sources {
                    let v = s * traits[i];
                    match plant {
                        Plant::OwnVideo | Plant::PartnerVideo => {
                            let target = if plant == Plant::OwnVideo { p } else { 1 - p };
                            let ch = plant.video_offset().expect("video plant") + i;
                            for t in 0..n {
                                drafts[target].video[t * spec.d_v + ch] += v;
                            }
                        }
                        Plant::SparseTemporal => {
                            let ch = plant.video_offset().expect("video plant") + i;
                            for &t in sparse {
                                drafts[p].video[t * spec.d_v + ch] += v;
                            }
                        }
                        Plant::OwnAudio => {
                            for t in 0..n {
                                drafts[p].audio[t * spec.d_a + i] += v;
                            }
                        }
                    }
                }
            }
        }

        let session_id = format!("s{k:03}");
        let task = Task::ALL[k % Task::ALL.len()];
        let mut tracks = Vec::with_capacity(2);
        for (p, d) in drafts.into_iter().enumerate() {
            tracks.push(ParticipantTrack {
                participant_id: format!("{session_id}_{}", ["A", "B"][p]),
                video: Tensor::new(&[n, spec.d_v], d.video.into_iter().map(round32).collect())?,
                audio: Tensor::new(&[n, spec.d_a], d.audio.into_iter().map(round32).collect())?,
                metadata: Tensor::new(&[1, spec.d_m], d.metadata.into_iter().map(round32).collect())?,
                ground_truth: OceanVector(d.traits),
            });
        }
        let b = tracks.pop().expect("two tracks");
        let a = tracks.pop().expect("two tracks");
        sessions.push(SessionRecord::new(session_id, task, spec.split_of(k), [a, b])?);
    }
    Ok(sessions)
}

/// Writes feature files under `dir/features/` and `dir/manifest.jsonl`.
/// Returns the manifest path.
pub fn write_dataset(sessions: &[SessionRecord], dir: impl AsRef<Path>) -> Result<std::path::PathBuf> {
    let dir = dir.as_ref();
    let features = dir.join("features");
    fs::create_dir_all(&features).map_err(|e| DataError::io(&features, e))?;
    let mut entries = Vec::with_capacity(sessions.len());
    for s in sessions {
        let mut parts = Vec::with_capacity(2);
        for (track, label) in s.participants.iter().zip(["A", "B"]) {
            let video = format!("features/{}_{label}_video.dyft", s.session_id);
            let audio = format!("features/{}_{label}_audio.dyft", s.session_id);
            write_feature_file(&track.video, dir.join(&video))?;
            write_feature_file(&track.audio, dir.join(&audio))?;
            parts.push(ManifestParticipant {
                id: track.participant_id.clone(),
                video,
                audio,
                metadata: track.metadata.values().to_vec(),
                ocean: track.ground_truth.values().to_vec(),
            });
        }
        let b = parts.pop().expect("two participants");
        let a = parts.pop().expect("two participants");
        entries.push(ManifestEntry {
            session_id: s.session_id.clone(),
            task: s.task.name().to_string(),
            split: s.split,
            a,
            b,
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Convenience: sessions behind shared pointers, as sampling expects.
pub fn into_shared(sessions: Vec<SessionRecord>) -> Vec<Arc<SessionRecord>> {
    sessions.into_iter().map(Arc::new).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;

    fn small(plant: Plant, noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_sessions: 6,
            chunks_per_session: 10,
            noise_std: noise,
            metadata_signal: 0.0,
            ..SyntheticSpec::default()
        }
        .with_plant(plant)
    }

    fn channel_mean(t: &Tensor, ch: usize) -> f64 {
        let (n, _) = t.dims2().unwrap();
        (0..n).map(|r| t.row(r).unwrap()[ch]).sum::<f64>() / n as f64
    }

    #[test]
    fn validation() {
        assert!(SyntheticSpec::default().validate().is_ok());
        let mut s = SyntheticSpec::default();
        s.plants[2].clear();
        assert!(s.validate().is_err());
        let s = SyntheticSpec {
            noise_std: -1.0,
            ..SyntheticSpec::default()
        };
        assert!(s.validate().is_err());
        let s = SyntheticSpec {
            d_v: 9,
            ..SyntheticSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn noiseless_own_video_is_exactly_decodable() {
        let sessions = generate_synthetic(&small(Plant::OwnVideo, 0.0), 1).unwrap();
        for s in &sessions {
            for track in &s.participants {
                for i in 0..NUM_TRAITS {
                    let m = channel_mean(&track.video, i);
                    let truth = track.ground_truth.values()[i];
                    assert!((m - truth).abs() <= 1e-6 * truth.abs().max(1.0), "{m} vs {truth}");
                }
            }
        }
    }

    #[test]
    fn partner_plant_lives_only_in_partner_features() {
        let sessions = generate_synthetic(&small(Plant::PartnerVideo, 0.0), 2).unwrap();
        for s in &sessions {
            for p in 0..2 {
                let own = &s.participants[p];
                let partner = &s.participants[1 - p];
                for i in 0..NUM_TRAITS {
                    // own features carry the partner's trait, not one's own
                    assert_eq!(channel_mean(&own.video, PLANT_BLOCK + i), partner.ground_truth.values()[i]);
                    assert_eq!(channel_mean(&own.video, i), 0.0);
                }
                assert!(own.audio.values().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn sparse_plant_covers_a_fifth_of_chunks() {
        let sessions = generate_synthetic(&small(Plant::SparseTemporal, 0.0), 3).unwrap();
        for s in &sessions {
            for track in &s.participants {
                let ch = 2 * PLANT_BLOCK;
                let hits = (0..10).filter(|&t| track.video.row(t).unwrap()[ch] != 0.0).count();
                assert_eq!(hits, 2);
            }
        }
    }

    #[test]
    fn least_squares_decode_recovers_own_video_trait() {
        let spec = SyntheticSpec {
            n_sessions: 50,
            noise_std: 0.1,
            signal_scale: 1.0,
            ..small(Plant::OwnVideo, 0.1)
        };
        let sessions = generate_synthetic(&spec, 4).unwrap();
        for i in 0..NUM_TRAITS {
            let (xs, ys): (Vec<f64>, Vec<f64>) = sessions
                .iter()
                .flat_map(|s| s.participants.iter())
                .map(|t| (channel_mean(&t.video, i), t.ground_truth.values()[i]))
                .unzip();
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
            let slope = sxy / sxx;
            let icpt = my - slope * mx;
            let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - icpt - slope * x).powi(2)).sum();
            let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
            let r2 = 1.0 - ss_res / ss_tot;
            assert!(r2 > 0.9, "trait {i}: R² = {r2}");
        }
    }

    #[test]
    fn splits_follow_fractions() {
        let spec = SyntheticSpec {
            n_sessions: 10,
            ..SyntheticSpec::default()
        };
        let sessions = generate_synthetic(&spec, 0).unwrap();
        let count = |sp| sessions.iter().filter(|s| s.split == sp).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (6, 2, 2));
        assert_eq!(sessions[1].task, Task::Ghost);
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_same_bytes_and_disk_matches_memory() {
        let spec = SyntheticSpec {
            n_sessions: 3,
            chunks_per_session: 6,
            ..SyntheticSpec::default()
        };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let sessions = generate_synthetic(&spec, 7).unwrap();
        let manifest = write_dataset(&sessions, d1.path()).unwrap();
        write_dataset(&generate_synthetic(&spec, 7).unwrap(), d2.path()).unwrap();
        assert_eq!(dir_bytes(d1.path()), dir_bytes(d2.path()));

        let loaded = load_manifest(manifest).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in sessions.iter().zip(&loaded) {
            assert_eq!(a.session_id, b.session_id);
            for p in 0..2 {
                assert!(a.participants[p].video.bitwise_eq(&b.participants[p].video));
                assert!(a.participants[p].audio.bitwise_eq(&b.participants[p].audio));
                assert!(a.participants[p].metadata.bitwise_eq(&b.participants[p].metadata));
                assert_eq!(a.participants[p].ground_truth, b.participants[p].ground_truth);
            }
        }

        let other = tempfile::tempdir().unwrap();
        write_dataset(&generate_synthetic(&spec, 8).unwrap(), other.path()).unwrap();
        assert_ne!(dir_bytes(d1.path()), dir_bytes(other.path()));
    }
}
