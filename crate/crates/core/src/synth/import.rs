//! Import of externally extracted poses: frames plus per-frame keypoint
//! files, laid out as `<root>/<train|test>/<person_id>/<clip_id>/NNNN.png`
//! with a `NNNN.json` next to every frame.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::types::{Keypoint, Resolution};

use super::dataset::{load_frame_png, write_clip, DatasetManifest, Split, MANIFEST_VERSION};
use super::filter::{filter_invalid_frames, ClipRecord, FilterConfig};
use super::render::{Renderer, POSE_CHANNELS};
use super::skeleton::{Skeleton, JOINT_COUNT, LIMB_COUNT};

#[derive(Deserialize)]
struct KeypointFile {
    keypoints: Vec<Keypoint>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn read_keypoints(path: &Path) -> Result<[[f64; 2]; JOINT_COUNT]> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: KeypointFile = serde_json::from_slice(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if file.keypoints.len() != JOINT_COUNT {
        return Err(Error::format(
            path,
            format!("expected {JOINT_COUNT} keypoints, found {}", file.keypoints.len()),
        ));
    }
    let mut joints = [[0.0; 2]; JOINT_COUNT];
    for (j, k) in joints.iter_mut().zip(&file.keypoints) {
        if !k.x.is_finite() || !k.y.is_finite() {
            return Err(Error::format(path, "keypoint coordinates must be finite"));
        }
        *j = [k.x as f64, k.y as f64];
    }
    Ok(joints)
}

/// Reads one clip directory, rasterizing a pose map from every keypoint file.
pub fn import_clip(dir: &Path, person_id: &str, clip_id: &str, res: Resolution) -> Result<ClipRecord> {
    let renderer = Renderer::new(res);
    let mut frames = Vec::new();
    let mut poses = Vec::new();
    for png in sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
    {
        let kp = png.with_extension("json");
        if !kp.exists() {
            return Err(Error::format(&png, "frame has no keypoint file"));
        }
        let skel = Skeleton {
            joints: read_keypoints(&kp)?,
            limb_angles: [0.0; LIMB_COUNT],
        };
        frames.push(load_frame_png(&png, res)?);
        poses.push(renderer.pose_map(&skel)?);
    }
    if frames.is_empty() {
        return Err(Error::EmptyClip(format!("{} holds no frames", dir.display())));
    }
    Ok(ClipRecord {
        person_id: person_id.to_string(),
        clip_id: clip_id.to_string(),
        kept_indices: (0..frames.len()).collect(),
        frames,
        poses,
        flows: None,
    })
}

/// Imports every clip under `input`, filters invalid frames and writes a
/// flow-free dataset with its manifest to `out`.
pub fn import_dataset(input: &Path, out: &Path, res: Resolution, filter: &FilterConfig) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for (split, name) in [(Split::Train, "train"), (Split::Test, "test")] {
        let split_dir = input.join(name);
        if !split_dir.is_dir() {
            return Err(Error::format(&split_dir, "missing split directory"));
        }
        for person_dir in sorted_entries(&split_dir)?.into_iter().filter(|p| p.is_dir()) {
            let person = person_dir.file_name().unwrap().to_string_lossy().into_owned();
            for clip_dir in sorted_entries(&person_dir)?.into_iter().filter(|p| p.is_dir()) {
                let clip_id = format!("{person}_{}", clip_dir.file_name().unwrap().to_string_lossy());
                let clip = import_clip(&clip_dir, &person, &clip_id, res)?;
                let parts = match filter_invalid_frames(&clip, filter) {
                    Ok(parts) => parts,
                    Err(Error::EmptyClip(msg)) => {
                        log::warn!("skipping {clip_id}: {msg}");
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                for part in parts {
                    entries.push(write_clip(out, &part, split)?);
                }
            }
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.into(),
        resolution: res,
        pose_channels: POSE_CHANNELS,
        seed: 0,
        clips: entries,
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}
