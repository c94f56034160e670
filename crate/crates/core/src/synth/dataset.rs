//! Corpus generation, on-disk layout and loading.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FlowField, Frame, Keypoint, PoseMap, Resolution};

use super::filter::{filter_invalid_frames, keep_mask, ClipRecord, FilterConfig};
use super::render::{Renderer, POSE_CHANNELS};
use super::skeleton::{make_identity, make_motion_with, MotionOptions};

pub const MANIFEST_VERSION: &str = "dataset/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub resolution: Resolution,
    pub train_identities: usize,
    pub test_identities: usize,
    pub clips_per_identity: usize,
    pub clip_len: usize,
    /// Test clips are longer so a long query still fits after the support.
    pub test_clip_len: usize,
    /// Chance that a training clip ends in a freeze for the filter to remove.
    pub hold_probability: f64,
    pub hold_frames: usize,
    pub filter: FilterConfig,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            resolution: Resolution::default(),
            train_identities: 20,
            test_identities: 5,
            clips_per_identity: 4,
            clip_len: 60,
            test_clip_len: 80,
            hold_probability: 0.25,
            hold_frames: 10,
            filter: FilterConfig::default(),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_identities == 0 || self.test_identities == 0 || self.clips_per_identity == 0 {
            return Err(Error::Config("dataset needs train and test identities with clips".into()));
        }
        if self.clip_len < 2 || self.test_clip_len < 2 {
            return Err(Error::Config("clips need at least 2 frames".into()));
        }
        if self.resolution.height < 8 || self.resolution.width < 4 {
            return Err(Error::Config(format!(
                "resolution {}x{} is too small",
                self.resolution.height, self.resolution.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Mixes a seed with a stream of ids into an independent seed.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed;
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn person_id(index: usize) -> String {
    format!("p{index:03}")
}

/// Renders one raw clip: every frame, pose map and flow, before filtering.
pub fn render_clip(
    renderer: &Renderer,
    person_seed: u64,
    motion_seed: u64,
    len: usize,
    opts: &MotionOptions,
    person_id: &str,
    clip_id: &str,
) -> Result<ClipRecord> {
    let person = make_identity(person_seed);
    let motion = make_motion_with(motion_seed, len, opts)?;
    let poses = motion.poses();
    // Cheap pelvis check up front so doomed motions are not rasterized.
    for p in &poses {
        renderer.check_root(&renderer.skeleton(&person, p))?;
    }
    let mut frames = Vec::with_capacity(len);
    let mut maps = Vec::with_capacity(len);
    for p in &poses {
        let (f, m) = renderer.render_frame(&person, p)?;
        frames.push(f);
        maps.push(m);
    }
    let flows = poses
        .windows(2)
        .map(|w| renderer.render_flow(&person, &w[0], &w[1]))
        .collect();
    Ok(ClipRecord {
        person_id: person_id.to_string(),
        clip_id: clip_id.to_string(),
        frames,
        poses: maps,
        flows: Some(flows),
        kept_indices: (0..len).collect(),
    })
}

const MAX_ATTEMPTS: u64 = 64;

/// Runs the frame filter on pose maps alone, so motions that would be
/// rejected are never fully rendered.
fn poses_survive_filter(
    cfg: &DatasetConfig,
    renderer: &Renderer,
    person_seed: u64,
    motion_seed: u64,
    len: usize,
    opts: &MotionOptions,
    min_len: usize,
) -> Result<bool> {
    let person = make_identity(person_seed);
    let motion = make_motion_with(motion_seed, len, opts)?;
    let mut maps = Vec::with_capacity(len);
    for p in motion.poses() {
        let skel = renderer.skeleton(&person, &p);
        if renderer.check_root(&skel).is_err() {
            return Ok(false);
        }
        maps.push(renderer.pose_map(&skel)?);
    }
    let keep = keep_mask(&maps, &cfg.filter);
    let runs: Vec<usize> = keep
        .split(|k| !k)
        .map(<[bool]>::len)
        .filter(|&n| n >= 2)
        .collect();
    Ok(runs.len() == 1 && runs[0] >= min_len)
}

/// Generates one filtered clip, redrawing the motion until filtering leaves
/// a single contiguous clip of at least `min_len` frames.
fn generate_clip(
    cfg: &DatasetConfig,
    renderer: &Renderer,
    person_index: usize,
    clip_index: usize,
    split: Split,
) -> Result<ClipRecord> {
    let pid = person_id(person_index);
    let cid = format!("{pid}_c{clip_index:02}");
    let person_seed = mix_seed(cfg.seed, &[1, person_index as u64]);
    let (len, opts) = match split {
        Split::Train => (
            cfg.clip_len,
            MotionOptions {
                hold_probability: cfg.hold_probability,
                hold_frames: cfg.hold_frames,
                ..MotionOptions::default()
            },
        ),
        Split::Test => (cfg.test_clip_len, MotionOptions::default()),
    };
    // A trailing freeze of `hold_frames` frames loses all but its first frame.
    let min_len = match split {
        Split::Train => len.saturating_sub(cfg.hold_frames).max(2),
        Split::Test => len,
    };
    for attempt in 0..MAX_ATTEMPTS {
        let motion_seed = mix_seed(cfg.seed, &[2, person_index as u64, clip_index as u64, attempt]);
        if !poses_survive_filter(cfg, renderer, person_seed, motion_seed, len, &opts, min_len)? {
            continue;
        }
        let raw = match render_clip(renderer, person_seed, motion_seed, len, &opts, &pid, &cid) {
            Ok(c) => c,
            Err(Error::OutOfFrame(_)) => continue,
            Err(e) => return Err(e),
        };
        match filter_invalid_frames(&raw, &cfg.filter) {
            Ok(mut parts) if parts.len() == 1 && parts[0].len() >= min_len => {
                return Ok(parts.remove(0));
            }
            Ok(_) | Err(Error::EmptyClip(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Config(format!(
        "could not generate a valid clip {cid} in {MAX_ATTEMPTS} attempts"
    )))
}

/// Generates the whole corpus in memory: `(train clips, test clips)`.
pub fn generate_clips(cfg: &DatasetConfig) -> Result<(Vec<ClipRecord>, Vec<ClipRecord>)> {
    cfg.validate()?;
    let renderer = Renderer::new(cfg.resolution);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let total = cfg.train_identities + cfg.test_identities;
    for p in 0..total {
        let split = if p < cfg.train_identities {
            Split::Train
        } else {
            Split::Test
        };
        for c in 0..cfg.clips_per_identity {
            let clip = generate_clip(cfg, &renderer, p, c, split)?;
            match split {
                Split::Train => train.push(clip),
                Split::Test => test.push(clip),
            }
        }
    }
    Ok((train, test))
}

/// File references of one clip, relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub person_id: String,
    pub clip_id: String,
    pub split: Split,
    pub num_frames: usize,
    pub kept_indices: Vec<usize>,
    pub frames: Vec<String>,
    pub poses: Vec<String>,
    pub keypoints: String,
    pub flows: Option<Vec<String>>,
    pub masks: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub resolution: Resolution,
    pub pose_channels: usize,
    pub seed: u64,
    pub clips: Vec<ClipEntry>,
}

impl DatasetManifest {
    pub fn clips_in(&self, split: Split) -> impl Iterator<Item = &ClipEntry> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn person_ids(&self, split: Split) -> Vec<String> {
        let mut ids: Vec<String> = self.clips_in(split).map(|c| c.person_id.clone()).collect();
        ids.dedup();
        ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(path, format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }
}

/// Writes to a sibling temp file, then renames over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds values to the 8-bit grid used on disk.
pub fn quantize(values: &[f32]) -> Vec<f32> {
    values.iter().map(|&v| to_u8(v) as f32 / 255.0).collect()
}

pub fn save_frame_png(frame: &Frame, path: &Path) -> Result<()> {
    let Resolution { height, width } = frame.resolution();
    let plane = height * width;
    let px = frame.pixels();
    let img = RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = y as usize * width + x as usize;
        image::Rgb([to_u8(px[i]), to_u8(px[plane + i]), to_u8(px[2 * plane + i])])
    });
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_frame_png(path: &Path, res: Resolution) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    if img.dimensions() != (res.width as u32, res.height as u32) {
        return Err(Error::format(
            path,
            format!("expected {}x{} image, found {:?}", res.width, res.height, img.dimensions()),
        ));
    }
    let plane = res.pixels();
    let mut px = vec![0f32; 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * res.width + x as usize;
        for c in 0..3 {
            px[c * plane + i] = p.0[c] as f32 / 255.0;
        }
    }
    Frame::new(res, px)
}

/// Pose channels are tiled left to right into one grayscale image.
pub fn save_pose_png(pose: &PoseMap, path: &Path) -> Result<()> {
    let Resolution { height, width } = pose.resolution();
    let c = pose.channels();
    let img = GrayImage::from_fn((c * width) as u32, height as u32, |x, y| {
        let (ch, xx) = (x as usize / width, x as usize % width);
        image::Luma([to_u8(pose.channel(ch)[y as usize * width + xx])])
    });
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_pose_png(path: &Path, res: Resolution, channels: usize, keypoints: Vec<Keypoint>) -> Result<PoseMap> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_luma8();
    if img.dimensions() != ((channels * res.width) as u32, res.height as u32) {
        return Err(Error::format(path, format!("unexpected pose image size {:?}", img.dimensions())));
    }
    let plane = res.pixels();
    let mut data = vec![0f32; channels * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let (ch, xx) = (x as usize / res.width, x as usize % res.width);
        data[ch * plane + y as usize * res.width + xx] = p.0[0] as f32 / 255.0;
    }
    PoseMap::new(res, channels, data, keypoints)
}

pub fn save_mask_png(flow: &FlowField, path: &Path) -> Result<()> {
    let Resolution { height, width } = flow.resolution();
    let m = flow.mask();
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([if m[y as usize * width + x as usize] > 0.5 { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Raw flow: `u32` height and width (little endian), then `[2, H, W]` `f32`.
pub fn save_flow_raw(flow: &FlowField, path: &Path) -> Result<()> {
    let res = flow.resolution();
    let mut bytes = Vec::with_capacity(8 + 4 * flow.flow().len());
    bytes.extend_from_slice(&(res.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(res.width as u32).to_le_bytes());
    for v in flow.flow() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_flow(flow_path: &Path, mask_path: &Path, res: Resolution) -> Result<FlowField> {
    let bytes = fs::read(flow_path).map_err(|e| Error::io(flow_path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(flow_path, "truncated flow header"));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if (h, w) != (res.height, res.width) || bytes.len() != 8 + 8 * h * w {
        return Err(Error::format(flow_path, format!("flow is {h}x{w} with {} bytes", bytes.len())));
    }
    let flow = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mask_img = image::open(mask_path)
        .map_err(|e| Error::format(mask_path, e.to_string()))?
        .to_luma8();
    let mask = mask_img.pixels().map(|p| if p.0[0] > 127 { 1.0 } else { 0.0 }).collect();
    FlowField::new(res, flow, mask).map_err(|e| Error::format(flow_path, e.to_string()))
}

/// Writes one clip's files under `root` and returns its manifest entry.
pub fn write_clip(root: &Path, clip: &ClipRecord, split: Split) -> Result<ClipEntry> {
    let rel_dir = PathBuf::from(match split {
        Split::Train => "train",
        Split::Test => "test",
    })
    .join(&clip.clip_id);
    let dir = root.join(&rel_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let rel = |name: String| rel_dir.join(name).to_string_lossy().replace('\\', "/");
    let mut frames = Vec::new();
    let mut poses = Vec::new();
    for (i, (f, p)) in clip.frames.iter().zip(&clip.poses).enumerate() {
        let fname = format!("frame_{i:04}.png");
        save_frame_png(f, &dir.join(&fname))?;
        frames.push(rel(fname));
        let pname = format!("pose_{i:04}.png");
        save_pose_png(p, &dir.join(&pname))?;
        poses.push(rel(pname));
    }
    let keypoints: Vec<&[Keypoint]> = clip.poses.iter().map(|p| p.keypoints()).collect();
    let kp_path = dir.join("keypoints.json");
    fs::write(&kp_path, serde_json::to_vec(&keypoints)?).map_err(|e| Error::io(&kp_path, e))?;
    let (flows, masks) = match &clip.flows {
        None => (None, None),
        Some(list) => {
            let mut fl = Vec::new();
            let mut ms = Vec::new();
            for (i, f) in list.iter().enumerate() {
                let fname = format!("flow_{i:04}.bin");
                save_flow_raw(f, &dir.join(&fname))?;
                fl.push(rel(fname));
                let mname = format!("mask_{i:04}.png");
                save_mask_png(f, &dir.join(&mname))?;
                ms.push(rel(mname));
            }
            (Some(fl), Some(ms))
        }
    };
    Ok(ClipEntry {
        person_id: clip.person_id.clone(),
        clip_id: clip.clip_id.clone(),
        split,
        num_frames: clip.len(),
        kept_indices: clip.kept_indices.clone(),
        frames,
        poses,
        keypoints: rel("keypoints.json".into()),
        flows,
        masks,
    })
}

/// Generates the corpus and writes it under `out`, returning the manifest
/// (also saved as `out/manifest.json`).
pub fn build_dataset(cfg: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    let (train, test) = generate_clips(cfg)?;
    let mut entries = Vec::with_capacity(train.len() + test.len());
    for c in &train {
        entries.push(write_clip(out, c, Split::Train)?);
    }
    for c in &test {
        entries.push(write_clip(out, c, Split::Test)?);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.into(),
        resolution: cfg.resolution,
        pose_channels: POSE_CHANNELS,
        seed: cfg.seed,
        clips: entries,
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// Reads every file referenced by one manifest entry.
pub fn load_clip(root: &Path, manifest: &DatasetManifest, entry: &ClipEntry) -> Result<ClipRecord> {
    let res = manifest.resolution;
    let kp_path = root.join(&entry.keypoints);
    let kp_text = fs::read(&kp_path).map_err(|e| Error::io(&kp_path, e))?;
    let keypoints: Vec<Vec<Keypoint>> =
        serde_json::from_slice(&kp_text).map_err(|e| Error::format(&kp_path, e.to_string()))?;
    if keypoints.len() != entry.frames.len() || entry.poses.len() != entry.frames.len() {
        return Err(Error::format(&kp_path, "frame, pose and keypoint counts differ"));
    }
    let frames = entry
        .frames
        .iter()
        .map(|f| load_frame_png(&root.join(f), res))
        .collect::<Result<Vec<_>>>()?;
    let poses = entry
        .poses
        .iter()
        .zip(keypoints)
        .map(|(p, k)| load_pose_png(&root.join(p), res, manifest.pose_channels, k))
        .collect::<Result<Vec<_>>>()?;
    let flows = match (&entry.flows, &entry.masks) {
        (Some(fl), Some(ms)) => Some(
            fl.iter()
                .zip(ms)
                .map(|(f, m)| load_flow(&root.join(f), &root.join(m), res))
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };
    Ok(ClipRecord {
        person_id: entry.person_id.clone(),
        clip_id: entry.clip_id.clone(),
        frames,
        poses,
        flows,
        kept_indices: entry.kept_indices.clone(),
    })
}

/// All clips of a corpus held in memory, split by person.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub resolution: Resolution,
    pub train: Vec<ClipRecord>,
    pub test: Vec<ClipRecord>,
}

fn quantize_clip(clip: ClipRecord) -> Result<ClipRecord> {
    let frames = clip
        .frames
        .iter()
        .map(|f| Frame::new(f.resolution(), quantize(f.pixels())))
        .collect::<Result<Vec<_>>>()?;
    let poses = clip
        .poses
        .iter()
        .map(|p| {
            PoseMap::new(
                p.resolution(),
                p.channels(),
                quantize(p.data()),
                p.keypoints().to_vec(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClipRecord {
        frames,
        poses,
        ..clip
    })
}

impl Dataset {
    /// Wraps generated clips, rounding frames and pose maps exactly as a
    /// write/read round trip through PNG would.
    pub fn from_clips(resolution: Resolution, train: Vec<ClipRecord>, test: Vec<ClipRecord>) -> Result<Self> {
        Ok(Self {
            resolution,
            train: train.into_iter().map(quantize_clip).collect::<Result<_>>()?,
            test: test.into_iter().map(quantize_clip).collect::<Result<_>>()?,
        })
    }

    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        let (train, test) = generate_clips(cfg)?;
        Self::from_clips(cfg.resolution, train, test)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut train = Vec::new();
        let mut test = Vec::new();
        for entry in &manifest.clips {
            let clip = load_clip(root, &manifest, entry)?;
            match entry.split {
                Split::Train => train.push(clip),
                Split::Test => test.push(clip),
            }
        }
        Ok(Self {
            resolution: manifest.resolution,
            train,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &[ClipRecord] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Distinct person ids of a split in first-appearance order.
    pub fn person_ids(&self, split: Split) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for c in self.split(split) {
            if !ids.contains(&c.person_id) {
                ids.push(c.person_id.clone());
            }
        }
        ids
    }

    /// True when every clip carries flows.
    pub fn has_flows(&self) -> bool {
        self.train.iter().chain(&self.test).all(|c| c.flows.is_some())
    }

    pub fn find_clip(&self, clip_id: &str) -> Option<&ClipRecord> {
        self.train.iter().chain(&self.test).find(|c| c.clip_id == clip_id)
    }
}
