//! K-shot temporal tasks, meta-test episodes and the move decomposition.

use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{mix_seed, ClipRecord, Dataset, Split};
use crate::types::{validate_task, DancingMove, ReferenceFrame, Sequence, Task};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Shot count: the reference frame plus `shots - 1` support frames.
    pub shots: usize,
    /// Minimum number of frames between the support end and the query start.
    pub interval: usize,
    /// Query length during meta-training; `None` means the support length.
    pub query_len: Option<usize>,
    pub episode_query_len: usize,
    pub episodes_per_person: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            shots: 5,
            interval: 5,
            query_len: None,
            episode_query_len: 50,
            episodes_per_person: 20,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots < 2 {
            return Err(Error::Config(format!("shots must be at least 2, got {}", self.shots)));
        }
        if self.episode_query_len < 2 {
            return Err(Error::Config("episode query needs at least 2 frames".into()));
        }
        if self.query_len == Some(0) {
            return Err(Error::Config("query length must be positive".into()));
        }
        Ok(())
    }

    pub fn support_len(&self) -> usize {
        self.shots - 1
    }

    pub fn train_query_len(&self) -> usize {
        self.query_len.unwrap_or(self.support_len())
    }

    pub fn with_shots(&self, shots: usize) -> Self {
        Self {
            shots,
            ..self.clone()
        }
    }
}

/// Frame pairs covering `len` frames: `(0,1), (2,3), ...`, plus a final
/// overlapping `(len-2, len-1)` when `len` is odd.
pub fn move_pairs(len: usize) -> Result<Vec<(usize, usize)>> {
    if len < 2 {
        return Err(Error::Length(format!("a move needs 2 frames, sequence has {len}")));
    }
    let mut pairs: Vec<(usize, usize)> = (0..len / 2).map(|i| (2 * i, 2 * i + 1)).collect();
    if len % 2 == 1 {
        pairs.push((len - 2, len - 1));
    }
    Ok(pairs)
}

pub fn moves_of(seq: &Sequence) -> Result<Vec<DancingMove<'_>>> {
    seq.validate()?;
    Ok(move_pairs(seq.len())?
        .into_iter()
        .map(|(a, b)| DancingMove {
            first: a,
            frames: (&seq.frames[a], &seq.frames[b]),
            poses: (&seq.poses[a], &seq.poses[b]),
            flow: seq.flows.as_ref().map(|f| &f[a]),
        })
        .collect())
}

/// Cuts `[start, start + len)` out of a clip.
pub fn slice_sequence(clip: &ClipRecord, start: usize, len: usize) -> Result<Sequence> {
    if len == 0 || start + len > clip.len() {
        return Err(Error::Length(format!(
            "window [{start}, {}) exceeds clip {} of {} frames",
            start + len,
            clip.clip_id,
            clip.len()
        )));
    }
    Ok(Sequence {
        person_id: clip.person_id.clone(),
        clip_id: clip.clip_id.clone(),
        start_index: start,
        frames: clip.frames[start..start + len].to_vec(),
        poses: clip.poses[start..start + len].to_vec(),
        flows: clip.flows.as_ref().map(|f| f[start..start + len - 1].to_vec()),
    })
}

/// Index-level description of a task; enough to rebuild it from the dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub person_id: String,
    pub clip_id: String,
    pub reference_index: usize,
    pub support_len: usize,
    pub query_start: usize,
    pub query_len: usize,
    pub interval: usize,
}

impl TaskRecord {
    pub fn of(task: &Task) -> Self {
        Self {
            person_id: task.person_id.clone(),
            clip_id: task.clip_id.clone(),
            reference_index: task.reference.index,
            support_len: task.support.len(),
            query_start: task.query.start_index,
            query_len: task.query.len(),
            interval: task.interval,
        }
    }

    pub fn shots(&self) -> usize {
        self.support_len + 1
    }

    pub fn build(&self, clip: &ClipRecord) -> Result<Task> {
        if clip.clip_id != self.clip_id || clip.person_id != self.person_id {
            return Err(Error::Structure(format!(
                "record for {}/{} applied to clip {}/{}",
                self.person_id, self.clip_id, clip.person_id, clip.clip_id
            )));
        }
        let r = self.reference_index;
        if r >= clip.len() {
            return Err(Error::Length(format!("reference index {r} outside clip {}", clip.clip_id)));
        }
        let task = Task {
            person_id: clip.person_id.clone(),
            clip_id: clip.clip_id.clone(),
            reference: ReferenceFrame {
                index: r,
                frame: clip.frames[r].clone(),
                pose: clip.poses[r].clone(),
            },
            support: slice_sequence(clip, r + 1, self.support_len)?,
            query: slice_sequence(clip, self.query_start, self.query_len)?,
            interval: self.interval,
        };
        validate_task(&task)?;
        Ok(task)
    }

    pub fn resolve(&self, dataset: &Dataset) -> Result<Task> {
        let clip = dataset
            .find_clip(&self.clip_id)
            .ok_or_else(|| Error::Structure(format!("clip {} not in dataset", self.clip_id)))?;
        self.build(clip)
    }
}

fn sample_from(
    clips: &[&ClipRecord],
    shots: usize,
    interval: usize,
    query_len: usize,
    rng: &mut impl Rng,
) -> Result<Task> {
    let need = shots + interval + query_len;
    let eligible: Vec<&ClipRecord> = clips.iter().copied().filter(|c| c.len() >= need).collect();
    if eligible.is_empty() {
        return Err(Error::NoEligibleClip(format!(
            "no clip has the {need} frames needed for {shots} shots, interval {interval} and query {query_len}"
        )));
    }
    let clip = eligible[rng.gen_range(0..eligible.len())];
    let reference = rng.gen_range(0..=clip.len() - need);
    let earliest_query = reference + shots + interval;
    let query_start = rng.gen_range(earliest_query..=clip.len() - query_len);
    TaskRecord {
        person_id: clip.person_id.clone(),
        clip_id: clip.clip_id.clone(),
        reference_index: reference,
        support_len: shots - 1,
        query_start,
        query_len,
        interval,
    }
    .build(clip)
}

/// Draws a meta-training task uniformly over eligible clips, then over
/// window offsets within the clip.
pub fn sample_task(clips: &[ClipRecord], cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<Task> {
    cfg.validate()?;
    let refs: Vec<&ClipRecord> = clips.iter().collect();
    sample_from(&refs, cfg.shots, cfg.interval, cfg.train_query_len(), rng)
}

/// One meta-test trial.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub episode_id: usize,
    pub task: Task,
}

/// Like [`sample_task`], restricted to one person with the long episode query.
pub fn sample_episode(
    clips: &[ClipRecord],
    cfg: &SamplerConfig,
    person_id: &str,
    episode_id: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    cfg.validate()?;
    let own: Vec<&ClipRecord> = clips.iter().filter(|c| c.person_id == person_id).collect();
    if own.is_empty() {
        return Err(Error::NoEligibleClip(format!("person {person_id} has no clips")));
    }
    let task = sample_from(&own, cfg.shots, cfg.interval, cfg.episode_query_len, rng)?;
    Ok(Episode { episode_id, task })
}

/// The full meta-test protocol: `episodes_per_person` episodes for every
/// test person, numbered consecutively.
pub fn build_episodes(dataset: &Dataset, cfg: &SamplerConfig, seed: u64) -> Result<Vec<Episode>> {
    let persons = dataset.person_ids(Split::Test);
    let mut out = Vec::with_capacity(persons.len() * cfg.episodes_per_person);
    for (p, person) in persons.iter().enumerate() {
        for k in 0..cfg.episodes_per_person {
            let mut rng = StdRng::seed_from_u64(mix_seed(seed, &[3, cfg.shots as u64, p as u64, k as u64]));
            out.push(sample_episode(&dataset.test, cfg, person, out.len(), &mut rng)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: usize,
    #[serde(flatten)]
    pub task: TaskRecord,
}

pub fn save_episodes(episodes: &[Episode], path: &Path) -> Result<()> {
    let records: Vec<EpisodeRecord> = episodes
        .iter()
        .map(|e| EpisodeRecord {
            episode_id: e.episode_id,
            task: TaskRecord::of(&e.task),
        })
        .collect();
    crate::synth::write_atomic(path, serde_json::to_string_pretty(&records)?.as_bytes())
}

pub fn load_episodes(path: &Path, dataset: &Dataset) -> Result<Vec<Episode>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<EpisodeRecord> =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    records
        .iter()
        .map(|r| {
            Ok(Episode {
                episode_id: r.episode_id,
                task: r.task.resolve(dataset)?,
            })
        })
        .collect()
}
