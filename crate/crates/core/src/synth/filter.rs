//! Removal of frames that show a partial body or no motion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FlowField, Frame, PoseMap};

/// One clip with its frames, pose maps and the flows between neighbours.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub person_id: String,
    pub clip_id: String,
    pub frames: Vec<Frame>,
    pub poses: Vec<PoseMap>,
    /// `flows[i]` relates frames `i` and `i + 1`; absent for imported clips.
    pub flows: Option<Vec<FlowField>>,
    /// Index of every frame in the clip as originally generated.
    pub kept_indices: Vec<usize>,
}

impl ClipRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// A run of at least this many motionless frames is removed.
    pub static_frames: usize,
    /// Mean joint displacement (pixels) below which a frame counts as motionless.
    pub motion_threshold: f64,
    /// The silhouette must stay this many pixels away from the border.
    pub border_margin: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            static_frames: 5,
            motion_threshold: 0.5,
            border_margin: 1,
        }
    }
}

fn full_body_visible(pose: &PoseMap, margin: usize) -> bool {
    if pose.keypoints().iter().any(|k| !k.visible) {
        return false;
    }
    let res = pose.resolution();
    let silhouette = pose.channel(pose.channels() - 1);
    (0..res.height).all(|y| {
        (0..res.width).all(|x| {
            let inner = y >= margin
                && x >= margin
                && y + margin < res.height
                && x + margin < res.width;
            inner || silhouette[y * res.width + x] == 0.0
        })
    })
}

fn joint_motion(a: &PoseMap, b: &PoseMap) -> f64 {
    let (ka, kb) = (a.keypoints(), b.keypoints());
    if ka.is_empty() {
        return f64::INFINITY;
    }
    ka.iter()
        .zip(kb)
        .map(|(p, q)| ((p.x - q.x) as f64).hypot((p.y - q.y) as f64))
        .sum::<f64>()
        / ka.len() as f64
}

/// Which frames survive both rules.
pub fn keep_mask(poses: &[PoseMap], cfg: &FilterConfig) -> Vec<bool> {
    let n = poses.len();
    // The first frame has no predecessor and so never counts as motionless.
    let still: Vec<bool> = (0..n)
        .map(|i| i > 0 && joint_motion(&poses[i - 1], &poses[i]) < cfg.motion_threshold)
        .collect();
    let mut keep: Vec<bool> = poses
        .iter()
        .map(|p| full_body_visible(p, cfg.border_margin))
        .collect();
    let mut i = 0;
    while i < n {
        if !still[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && still[i] {
            i += 1;
        }
        if i - start >= cfg.static_frames.max(1) {
            keep[start..i].iter_mut().for_each(|k| *k = false);
        }
    }
    keep
}

/// Removes invalid frames and splits the clip where frames were removed.
///
/// Sub-clips shorter than two frames are dropped. When the clip splits, each
/// part gets `_<k>` appended to its id; a single survivor keeps the original
/// id, which makes the filter idempotent.
pub fn filter_invalid_frames(clip: &ClipRecord, cfg: &FilterConfig) -> Result<Vec<ClipRecord>> {
    if clip.is_empty() {
        return Err(Error::EmptyClip(format!("clip {} has no frames", clip.clip_id)));
    }
    let keep = keep_mask(&clip.poses, cfg);
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < keep.len() {
        if keep[i] {
            let s = i;
            while i < keep.len() && keep[i] {
                i += 1;
            }
            if i - s >= 2 {
                runs.push((s, i));
            }
        } else {
            i += 1;
        }
    }
    if runs.is_empty() {
        return Err(Error::EmptyClip(format!(
            "no valid frames survive filtering of clip {}",
            clip.clip_id
        )));
    }
    let split = runs.len() > 1;
    Ok(runs
        .iter()
        .enumerate()
        .map(|(k, &(s, e))| ClipRecord {
            person_id: clip.person_id.clone(),
            clip_id: if split {
                format!("{}_{k}", clip.clip_id)
            } else {
                clip.clip_id.clone()
            },
            frames: clip.frames[s..e].to_vec(),
            poses: clip.poses[s..e].to_vec(),
            flows: clip.flows.as_ref().map(|f| f[s..e - 1].to_vec()),
            kept_indices: clip.kept_indices[s..e].to_vec(),
        })
        .collect())
}
