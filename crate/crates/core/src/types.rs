//! Domain values shared by every stage: frames, pose maps, flows, sequences
//! and temporal tasks.

use gradgraph::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame size in pixels. Portrait by default (32 wide, 64 tall).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Default for Resolution {
    fn default() -> Self {
        Self {
            height: 64,
            width: 32,
        }
    }
}

impl Resolution {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn max_side(&self) -> usize {
        self.height.max(self.width)
    }
}

fn check_unit_range(what: &str, values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        Some(i) => Err(Error::Shape(format!(
            "{what} value {} at {i} outside [0, 1]",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// RGB image in `[0, 1]`, stored channel-major as `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    res: Resolution,
    pixels: Vec<f32>,
}

impl Frame {
    pub fn new(res: Resolution, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != 3 * res.pixels() {
            return Err(Error::Shape(format!(
                "frame needs {} values for {}x{}, got {}",
                3 * res.pixels(),
                res.height,
                res.width,
                pixels.len()
            )));
        }
        check_unit_range("frame", &pixels)?;
        Ok(Self { res, pixels })
    }

    pub fn filled(res: Resolution, value: f32) -> Self {
        Self {
            res,
            pixels: vec![value.clamp(0.0, 1.0); 3 * res.pixels()],
        }
    }

    pub fn resolution(&self) -> Resolution {
        self.res
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.res.height + y) * self.res.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[3, self.res.height, self.res.width],
            self.pixels.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Converts a `[3, H, W]` tensor, clamping tiny excursions outside `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [3, h, w] => {
                let pixels = t.data().iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect();
                Frame::new(Resolution::new(*h, *w), pixels)
            }
            s => Err(Error::Shape(format!("frame tensor must be [3, H, W], got {s:?}"))),
        }
    }
}

/// A 2-D joint location in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub visible: bool,
}

/// Rasterized pose: `[C, H, W]` channels in `[0, 1]` plus the keypoints they
/// were drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseMap {
    res: Resolution,
    channels: usize,
    data: Vec<f32>,
    keypoints: Vec<Keypoint>,
}

impl PoseMap {
    pub fn new(
        res: Resolution,
        channels: usize,
        data: Vec<f32>,
        keypoints: Vec<Keypoint>,
    ) -> Result<Self> {
        if data.len() != channels * res.pixels() {
            return Err(Error::Shape(format!(
                "pose map needs {} values, got {}",
                channels * res.pixels(),
                data.len()
            )));
        }
        check_unit_range("pose map", &data)?;
        for (i, k) in keypoints.iter().enumerate() {
            let inside = k.x >= 0.0
                && k.y >= 0.0
                && k.x < res.width as f32
                && k.y < res.height as f32;
            if k.visible && !inside {
                return Err(Error::Shape(format!(
                    "visible keypoint {i} at ({}, {}) lies outside the frame",
                    k.x, k.y
                )));
            }
        }
        Ok(Self {
            res,
            channels,
            data,
            keypoints,
        })
    }

    pub fn resolution(&self) -> Resolution {
        self.res
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.res.pixels();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn keypoints(&self) -> &[Keypoint] {
        &self.keypoints
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.channels, self.res.height, self.res.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }
}

/// Dense displacement field for a frame pair `(t, t+1)`.
///
/// Defined on the grid of frame `t+1`: `flow(x)` points to where the content
/// at `x` was in frame `t`, so backward-warping frame `t` by it reproduces
/// frame `t+1`. `mask` is 1 where that correspondence is valid.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    res: Resolution,
    flow: Vec<f32>,
    mask: Vec<f32>,
}

impl FlowField {
    pub fn new(res: Resolution, flow: Vec<f32>, mask: Vec<f32>) -> Result<Self> {
        if flow.len() != 2 * res.pixels() || mask.len() != res.pixels() {
            return Err(Error::Shape(format!(
                "flow field {}x{} needs {} flow and {} mask values, got {} and {}",
                res.height,
                res.width,
                2 * res.pixels(),
                res.pixels(),
                flow.len(),
                mask.len()
            )));
        }
        let limit = res.max_side() as f32;
        let p = res.pixels();
        for i in 0..p {
            let (u, v) = (flow[i], flow[p + i]);
            if !u.is_finite() || !v.is_finite() || (u * u + v * v).sqrt() > limit {
                return Err(Error::Shape(format!("flow vector ({u}, {v}) at {i} is invalid")));
            }
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Shape("occlusion mask must be 0 or 1".into()));
        }
        Ok(Self { res, flow, mask })
    }

    pub fn zeros(res: Resolution) -> Self {
        Self {
            res,
            flow: vec![0.0; 2 * res.pixels()],
            mask: vec![1.0; res.pixels()],
        }
    }

    pub fn resolution(&self) -> Resolution {
        self.res
    }

    /// `[2, H, W]`: horizontal then vertical displacement.
    pub fn flow(&self) -> &[f32] {
        &self.flow
    }

    pub fn mask(&self) -> &[f32] {
        &self.mask
    }

    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.res.width + x;
        (self.flow[i], self.flow[self.res.pixels() + i])
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[2, self.res.height, self.res.width],
            self.flow.iter().map(|&v| v as f64).collect(),
        )
    }
}

/// Consecutive frames of one clip, with the flows between neighbours when
/// they are known.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub person_id: String,
    pub clip_id: String,
    pub start_index: usize,
    pub frames: Vec<Frame>,
    pub poses: Vec<PoseMap>,
    /// `flows[i]` relates `frames[i]` and `frames[i + 1]`.
    pub flows: Option<Vec<FlowField>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// One past the last absolute clip index.
    pub fn end_index(&self) -> usize {
        self.start_index + self.frames.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Structure(format!("sequence of {} is empty", self.clip_id)));
        }
        if self.frames.len() != self.poses.len() {
            return Err(Error::Structure(format!(
                "sequence has {} frames but {} poses",
                self.frames.len(),
                self.poses.len()
            )));
        }
        if let Some(flows) = &self.flows {
            if flows.len() + 1 != self.frames.len() {
                return Err(Error::Structure(format!(
                    "sequence has {} frames but {} flows",
                    self.frames.len(),
                    flows.len()
                )));
            }
        }
        Ok(())
    }
}

/// The appearance anchor `(I0, P0)` of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceFrame {
    pub index: usize,
    pub frame: Frame,
    pub pose: PoseMap,
}

/// One temporal task: reference, support and query from one clip of one person.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub person_id: String,
    pub clip_id: String,
    pub reference: ReferenceFrame,
    pub support: Sequence,
    pub query: Sequence,
    /// Minimum gap in frames between the end of support and start of query.
    pub interval: usize,
}

impl Task {
    /// Shot count: the reference frame plus the support frames.
    pub fn shots(&self) -> usize {
        self.support.len() + 1
    }
}

/// Checks the structural invariants of a task.
pub fn validate_task(task: &Task) -> Result<()> {
    for (name, seq) in [("support", &task.support), ("query", &task.query)] {
        seq.validate()?;
        if seq.person_id != task.person_id {
            return Err(Error::Structure(format!(
                "{name} sequence belongs to person {} but the task to {}",
                seq.person_id, task.person_id
            )));
        }
        if seq.clip_id != task.clip_id {
            return Err(Error::Structure(format!(
                "{name} sequence comes from clip {} but the task from {}",
                seq.clip_id, task.clip_id
            )));
        }
    }
    if task.reference.index + 1 != task.support.start_index {
        return Err(Error::Structure(format!(
            "reference index {} does not immediately precede support start {}",
            task.reference.index, task.support.start_index
        )));
    }
    if task.query.start_index < task.support.end_index() {
        return Err(Error::Structure(format!(
            "query starts at {} inside the support span ending at {}",
            task.query.start_index,
            task.support.end_index()
        )));
    }
    if task.support.end_index() + task.interval > task.query.start_index {
        return Err(Error::Structure(format!(
            "query start {} is closer than {} frames to support end {}",
            task.query.start_index,
            task.interval,
            task.support.end_index()
        )));
    }
    let res = task.reference.frame.resolution();
    let all_frames = task.support.frames.iter().chain(&task.query.frames);
    if all_frames.into_iter().any(|f| f.resolution() != res) {
        return Err(Error::Structure("frames of one task differ in resolution".into()));
    }
    Ok(())
}

/// Two consecutive frames of one sequence, the unit of synthesis and loss.
#[derive(Clone, Copy, Debug)]
pub struct DancingMove<'a> {
    /// Position of the first frame within the owning sequence.
    pub first: usize,
    pub frames: (&'a Frame, &'a Frame),
    pub poses: (&'a PoseMap, &'a PoseMap),
    pub flow: Option<&'a FlowField>,
}

impl DancingMove<'_> {
    /// Absolute clip indices `(t, t + 1)` given the sequence start.
    pub fn indices(&self, start_index: usize) -> (usize, usize) {
        (start_index + self.first, start_index + self.first + 1)
    }
}
