//! Rasterization of frames, pose maps and ground-truth flow.

use crate::error::{Error, Result};
use crate::types::{FlowField, Frame, Keypoint, PoseMap, Resolution};

use super::skeleton::{
    forward_kinematics, BodyPose, PersonSpec, Skeleton, BACKGROUND, DRAW_ORDER, LIMB_COUNT,
    LIMB_JOINTS,
};

/// Pose channels: one per limb followed by the body silhouette.
pub const POSE_CHANNELS: usize = LIMB_COUNT + 1;

/// Subsample offsets within a pixel (2x2 supersampling).
const SUB: [f64; 2] = [-0.25, 0.25];

/// Two subsample flows closer than this are treated as one rigid motion.
const FLOW_AGREEMENT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq)]
struct LimbGeom {
    start: [f64; 2],
    dir: [f64; 2],
    len: f64,
    radius: f64,
}

impl LimbGeom {
    fn normal(&self) -> [f64; 2] {
        [-self.dir[1], self.dir[0]]
    }

    /// Limb-local `(along, across)` coordinates of a point.
    fn local(&self, p: [f64; 2]) -> (f64, f64) {
        let d = [p[0] - self.start[0], p[1] - self.start[1]];
        let n = self.normal();
        (d[0] * self.dir[0] + d[1] * self.dir[1], d[0] * n[0] + d[1] * n[1])
    }

    fn from_local(&self, along: f64, across: f64) -> [f64; 2] {
        let n = self.normal();
        [
            self.start[0] + along * self.dir[0] + across * n[0],
            self.start[1] + along * self.dir[1] + across * n[1],
        ]
    }

    /// Distance from a point to the limb's bone segment.
    fn distance(&self, p: [f64; 2]) -> f64 {
        let (along, across) = self.local(p);
        let t = along.clamp(0.0, self.len);
        if t == along {
            across.abs()
        } else {
            (along - t).hypot(across)
        }
    }
}

/// Posed figure ready to be sampled at arbitrary points.
struct Scene {
    limbs: [LimbGeom; LIMB_COUNT],
    /// `[min_x, min_y, max_x, max_y]` of each limb's capsule.
    bounds: [[f64; 4]; LIMB_COUNT],
}

impl Scene {
    fn new(person: &PersonSpec, skel: &Skeleton, height: usize) -> Self {
        let hs = height as f64;
        let limbs = std::array::from_fn(|l| {
            let (a, b) = LIMB_JOINTS[l];
            let (pa, pb) = (skel.joints[a], skel.joints[b]);
            let len = (pb[0] - pa[0]).hypot(pb[1] - pa[1]);
            let angle = skel.limb_angles[l];
            LimbGeom {
                start: pa,
                dir: [angle.sin(), angle.cos()],
                len,
                radius: person.limb_widths[l] * hs,
            }
        });
        let bounds = std::array::from_fn(|l| {
            let g: &LimbGeom = &limbs[l];
            let end = g.from_local(g.len, 0.0);
            [
                g.start[0].min(end[0]) - g.radius,
                g.start[1].min(end[1]) - g.radius,
                g.start[0].max(end[0]) + g.radius,
                g.start[1].max(end[1]) + g.radius,
            ]
        });
        Self { limbs, bounds }
    }

    /// Front-most limb covering `p`.
    fn label(&self, p: [f64; 2]) -> Option<usize> {
        DRAW_ORDER
            .iter()
            .rev()
            .copied()
            .find(|&l| {
                let b = &self.bounds[l];
                p[0] >= b[0]
                    && p[1] >= b[1]
                    && p[0] <= b[2]
                    && p[1] <= b[3]
                    && self.limbs[l].distance(p) <= self.limbs[l].radius
            })
    }
}

/// Renders frames, pose maps and flows at one resolution.
#[derive(Clone, Copy, Debug)]
pub struct Renderer {
    pub res: Resolution,
    /// Half-thickness of pose-map strokes, as a fraction of frame height.
    pub pose_radius: f64,
}

impl Renderer {
    pub fn new(res: Resolution) -> Self {
        Self {
            res,
            pose_radius: 0.02,
        }
    }

    pub fn skeleton(&self, person: &PersonSpec, pose: &BodyPose) -> Skeleton {
        forward_kinematics(person, pose, self.res.height, self.res.width)
    }

    fn in_frame(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] < self.res.width as f64 && p[1] < self.res.height as f64
    }

    /// Fails with `OutOfFrame` when the pelvis lies outside the frame.
    pub fn check_root(&self, skel: &Skeleton) -> Result<()> {
        let root = skel.joints[0];
        if !self.in_frame(root) {
            return Err(Error::OutOfFrame(format!(
                "pelvis at ({:.2}, {:.2}) outside {}x{}",
                root[0], root[1], self.res.height, self.res.width
            )));
        }
        Ok(())
    }

    /// Renders the figure over the gray background together with its pose map.
    ///
    /// Fails only when the pelvis leaves the frame; other joints outside the
    /// frame are clipped and reported as invisible keypoints.
    pub fn render_frame(&self, person: &PersonSpec, pose: &BodyPose) -> Result<(Frame, PoseMap)> {
        let skel = self.skeleton(person, pose);
        self.check_root(&skel)?;
        let scene = Scene::new(person, &skel, self.res.height);
        let frame = self.paint(person, &scene);
        let pose_map = self.pose_map(&skel)?;
        Ok((frame, pose_map))
    }

    fn color_at(&self, person: &PersonSpec, scene: &Scene, p: [f64; 2]) -> [f64; 3] {
        match scene.label(p) {
            None => [BACKGROUND; 3],
            Some(l) => {
                let (along, _) = scene.limbs[l].local(p);
                let period = person.stripe_period * self.res.height as f64;
                let m = 1.0 + person.stripe_amplitude * (std::f64::consts::TAU * along / period).sin();
                person.limb_colors[l].map(|c| (c * m).clamp(0.0, 1.0))
            }
        }
    }

    fn paint(&self, person: &PersonSpec, scene: &Scene) -> Frame {
        let Resolution { height, width } = self.res;
        let plane = height * width;
        let mut pixels = vec![0f32; 3 * plane];
        for y in 0..height {
            for x in 0..width {
                let mut acc = [0.0; 3];
                for dy in SUB {
                    for dx in SUB {
                        let c = self.color_at(person, scene, [x as f64 + dx, y as f64 + dy]);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                for k in 0..3 {
                    pixels[k * plane + y * width + x] = (acc[k] / 4.0) as f32;
                }
            }
        }
        Frame::new(self.res, pixels).expect("painted values lie in [0, 1]")
    }

    /// Appearance-free pose map: anti-aliased strokes of fixed thickness per
    /// limb, plus their union as a silhouette channel.
    pub fn pose_map(&self, skel: &Skeleton) -> Result<PoseMap> {
        let Resolution { height, width } = self.res;
        let plane = height * width;
        let radius = self.pose_radius * height as f64;
        let mut data = vec![0f32; POSE_CHANNELS * plane];
        for (l, &(a, b)) in LIMB_JOINTS.iter().enumerate() {
            let (pa, pb) = (skel.joints[a], skel.joints[b]);
            let len = (pb[0] - pa[0]).hypot(pb[1] - pa[1]);
            let limb = LimbGeom {
                start: pa,
                dir: if len > 0.0 {
                    [(pb[0] - pa[0]) / len, (pb[1] - pa[1]) / len]
                } else {
                    [0.0, 1.0]
                },
                len,
                radius,
            };
            for y in 0..height {
                for x in 0..width {
                    let d = limb.distance([x as f64, y as f64]);
                    let cover = (radius + 0.5 - d).clamp(0.0, 1.0) as f32;
                    let i = y * width + x;
                    data[l * plane + i] = cover;
                    let s = &mut data[LIMB_COUNT * plane + i];
                    *s = s.max(cover);
                }
            }
        }
        let keypoints = skel
            .joints
            .iter()
            .map(|&p| {
                let (x, y) = (p[0] as f32, p[1] as f32);
                Keypoint {
                    x,
                    y,
                    visible: x >= 0.0 && y >= 0.0 && x < width as f32 && y < height as f32,
                }
            })
            .collect();
        PoseMap::new(self.res, POSE_CHANNELS, data, keypoints)
    }

    /// Ground-truth flow from `pose_t` to `pose_next`, on the grid of the
    /// later frame and pointing back into the earlier one.
    ///
    /// Every subsample follows the rigid motion of the limb covering it
    /// (background stays put). A pixel is valid when each subsample's source
    /// lies inside the earlier frame and is covered by the same limb there,
    /// all subsample displacements agree, and the four earlier pixels read
    /// by bilinear sampling are each covered by that limb alone.
    pub fn render_flow(
        &self,
        person: &PersonSpec,
        pose_t: &BodyPose,
        pose_next: &BodyPose,
    ) -> FlowField {
        let Resolution { height, width } = self.res;
        let plane = height * width;
        let before = Scene::new(person, &self.skeleton(person, pose_t), height);
        let after = Scene::new(person, &self.skeleton(person, pose_next), height);
        let (max_x, max_y) = ((width - 1) as f64, (height - 1) as f64);
        // Label shared by all subsamples of an earlier-frame pixel, if any.
        let pure: Vec<Option<Option<usize>>> = (0..plane)
            .map(|i| {
                let (x, y) = ((i % width) as f64, (i / width) as f64);
                let first = before.label([x + SUB[0], y + SUB[0]]);
                let same = SUB
                    .iter()
                    .flat_map(|&dy| SUB.iter().map(move |&dx| (dx, dy)))
                    .all(|(dx, dy)| before.label([x + dx, y + dy]) == first);
                same.then_some(first)
            })
            .collect();
        let mut flow = vec![0f32; 2 * plane];
        let mut mask = vec![0f32; plane];
        for y in 0..height {
            for x in 0..width {
                let mut subs = Vec::with_capacity(4);
                let mut valid = true;
                for dy in SUB {
                    for dx in SUB {
                        let p = [x as f64 + dx, y as f64 + dy];
                        let label = after.label(p);
                        let src = match label {
                            None => p,
                            Some(l) if before.limbs[l] == after.limbs[l] => p,
                            Some(l) => {
                                let (along, across) = after.limbs[l].local(p);
                                before.limbs[l].from_local(along, across)
                            }
                        };
                        let inside = src[0] >= -0.5
                            && src[1] >= -0.5
                            && src[0] < max_x + 0.5
                            && src[1] < max_y + 0.5;
                        valid &= inside && before.label(src) == label;
                        subs.push((label.is_some(), [src[0] - p[0], src[1] - p[1]]));
                    }
                }
                let (u0, v0) = (subs[0].1[0], subs[0].1[1]);
                valid &= subs
                    .iter()
                    .all(|(_, f)| (f[0] - u0).abs() <= FLOW_AGREEMENT && (f[1] - v0).abs() <= FLOW_AGREEMENT);
                let fg: Vec<[f64; 2]> = subs.iter().filter(|s| s.0).map(|s| s.1).collect();
                let i = y * width + x;
                if !fg.is_empty() {
                    let n = fg.len() as f64;
                    flow[i] = (fg.iter().map(|f| f[0]).sum::<f64>() / n) as f32;
                    flow[plane + i] = (fg.iter().map(|f| f[1]).sum::<f64>() / n) as f32;
                }
                // The pixel's own sample point must not need border clamping.
                let (sx, sy) = (x as f64 + flow[i] as f64, y as f64 + flow[plane + i] as f64);
                valid &= sx >= 0.0 && sy >= 0.0 && sx <= max_x && sy <= max_y;
                // A moving pixel's bilinear sample must not blend across a
                // limb edge. Zero flow reads the pixel itself, which the
                // per-subsample label check already covers.
                let moving = flow[i] != 0.0 || flow[plane + i] != 0.0;
                if valid && moving {
                    let own = subs[0].0;
                    valid &= subs.iter().all(|s| s.0 == own);
                }
                if valid && moving {
                    let label = after.label([x as f64 + SUB[0], y as f64 + SUB[0]]);
                    let x0 = (sx.floor() as usize).min(width - 2);
                    let y0 = (sy.floor() as usize).min(height - 2);
                    valid &= [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .all(|(a, b)| pure[(y0 + a) * width + x0 + b] == Some(label));
                }
                mask[i] = if valid { 1.0 } else { 0.0 };
            }
        }
        FlowField::new(self.res, flow, mask).expect("rigid flow stays within the frame")
    }
}
