//! Articulated 2-D stick figure: identities, motions and forward kinematics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};

pub const JOINT_COUNT: usize = 15;
pub const LIMB_COUNT: usize = 10;

pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "pelvis",
    "neck",
    "head_top",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
];

pub const LIMB_NAMES: [&str; LIMB_COUNT] = [
    "torso",
    "head",
    "l_upper_arm",
    "l_forearm",
    "r_upper_arm",
    "r_forearm",
    "l_thigh",
    "l_shin",
    "r_thigh",
    "r_shin",
];

/// `(start joint, end joint)` of every limb.
pub const LIMB_JOINTS: [(usize, usize); LIMB_COUNT] = [
    (0, 1),
    (1, 2),
    (3, 4),
    (4, 5),
    (6, 7),
    (7, 8),
    (9, 10),
    (10, 11),
    (12, 13),
    (13, 14),
];

/// Limbs from back to front. Later limbs cover earlier ones.
pub const DRAW_ORDER: [usize; LIMB_COUNT] = [4, 5, 8, 9, 0, 1, 6, 7, 2, 3];

/// Absolute limb angle measured from straight down (`+y`), counter-clockwise
/// towards `+x`. Direction vector is `(sin a, cos a)`.
fn direction(a: f64) -> [f64; 2] {
    [a.sin(), a.cos()]
}

/// Angle of each limb relative to its parent at rest. The torso and head
/// point up; arms and legs hang down with a slight splay.
const REST_ANGLE: [f64; LIMB_COUNT] = [
    PI,
    0.0,
    0.3 - PI,
    0.0,
    -0.3 - PI,
    0.0,
    0.08 - PI,
    0.0,
    -0.08 - PI,
    0.0,
];

/// Parent limb whose absolute angle a limb is relative to.
const PARENT_LIMB: [Option<usize>; LIMB_COUNT] = [
    None,
    Some(0),
    Some(0),
    Some(2),
    Some(0),
    Some(4),
    Some(0),
    Some(6),
    Some(0),
    Some(8),
];

/// Appearance and proportions of one synthetic person.
///
/// Lengths, widths and offsets are fractions of the frame height so one
/// identity renders at any resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonSpec {
    pub limb_lengths: [f64; LIMB_COUNT],
    /// Capsule radius of each limb.
    pub limb_widths: [f64; LIMB_COUNT],
    pub limb_colors: [[f64; 3]; LIMB_COUNT],
    /// Stripe period along each limb and its relative amplitude.
    pub stripe_period: f64,
    pub stripe_amplitude: f64,
    pub shoulder_half_width: f64,
    pub hip_half_width: f64,
    /// Pelvis rest position as `(x / W, y / H)`.
    pub anchor: [f64; 2],
}

const BASE_LENGTHS: [f64; LIMB_COUNT] = [0.19, 0.085, 0.095, 0.085, 0.095, 0.085, 0.145, 0.135, 0.145, 0.135];
const BASE_WIDTHS: [f64; LIMB_COUNT] = [
    0.055, 0.05, 0.025, 0.022, 0.025, 0.022, 0.032, 0.028, 0.032, 0.028,
];

/// Background gray level of every frame.
pub const BACKGROUND: f64 = 0.5;

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // Rejection keeps every color clearly separated from the gray background.
    loop {
        let c = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let dist = c.iter().map(|v| (v - BACKGROUND).abs()).fold(0.0, f64::max);
        if dist >= 0.3 {
            return c;
        }
    }
}

/// Deterministic identity for `seed`.
pub fn make_identity(seed: u64) -> PersonSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let build = rng.gen_range(0.9..1.1);
    let mut limb_lengths = BASE_LENGTHS;
    for l in limb_lengths.iter_mut() {
        *l *= build * rng.gen_range(0.94..1.06);
    }
    let girth = rng.gen_range(0.85..1.2);
    let mut limb_widths = BASE_WIDTHS;
    for w in limb_widths.iter_mut() {
        *w *= girth;
    }
    // Shirt, skin and trousers: arms share a sleeve color, legs a trouser
    // color, with per-segment shading so limbs remain distinguishable.
    let shirt = random_color(&mut rng);
    let skin = random_color(&mut rng);
    let trousers = random_color(&mut rng);
    let shade = |c: [f64; 3], f: f64| c.map(|v| (v * f).clamp(0.0, 1.0));
    let limb_colors = [
        shirt,
        skin,
        shade(shirt, 0.9),
        skin,
        shade(shirt, 0.8),
        shade(skin, 0.85),
        trousers,
        shade(trousers, 0.85),
        shade(trousers, 0.75),
        shade(trousers, 0.65),
    ];
    PersonSpec {
        limb_lengths,
        limb_widths,
        limb_colors,
        stripe_period: rng.gen_range(0.1..0.16),
        stripe_amplitude: rng.gen_range(0.08..0.18),
        shoulder_half_width: 0.06 * girth,
        hip_half_width: 0.04 * girth,
        anchor: [0.5, rng.gen_range(0.55..0.58)],
    }
}

/// Skeleton configuration for one time step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BodyPose {
    /// Pelvis offset from the anchor, both axes in units of frame height.
    pub root: [f64; 2],
    /// Limb angles relative to the rest pose, radians.
    pub angles: [f64; LIMB_COUNT],
}

/// Joint positions in pixels (`x`, `y`), plus the absolute limb angles.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub joints: [[f64; 2]; JOINT_COUNT],
    pub limb_angles: [f64; LIMB_COUNT],
}

/// Forward kinematics at a frame of `height x width` pixels.
pub fn forward_kinematics(person: &PersonSpec, pose: &BodyPose, height: usize, width: usize) -> Skeleton {
    let hs = height as f64;
    let mut abs = [0.0; LIMB_COUNT];
    for l in 0..LIMB_COUNT {
        let parent = PARENT_LIMB[l].map_or(0.0, |p| abs[p]);
        abs[l] = parent + REST_ANGLE[l] + pose.angles[l];
    }
    let mut j = [[0.0; 2]; JOINT_COUNT];
    j[0] = [
        person.anchor[0] * width as f64 + pose.root[0] * hs,
        person.anchor[1] * hs + pose.root[1] * hs,
    ];
    let step = |from: [f64; 2], angle: f64, len: f64| {
        let d = direction(angle);
        [from[0] + d[0] * len * hs, from[1] + d[1] * len * hs]
    };
    j[1] = step(j[0], abs[0], person.limb_lengths[0]);
    j[2] = step(j[1], abs[1], person.limb_lengths[1]);
    // Shoulders and hips sit perpendicular to the torso axis. The torso
    // direction rotated a quarter turn points towards the figure's left.
    let side = direction(abs[0] - PI / 2.0);
    let offset = |p: [f64; 2], s: f64, half: f64| {
        [p[0] + s * side[0] * half * hs, p[1] + s * side[1] * half * hs]
    };
    j[3] = offset(j[1], 1.0, person.shoulder_half_width);
    j[6] = offset(j[1], -1.0, person.shoulder_half_width);
    j[9] = offset(j[0], 1.0, person.hip_half_width);
    j[12] = offset(j[0], -1.0, person.hip_half_width);
    for l in 2..LIMB_COUNT {
        let (a, b) = LIMB_JOINTS[l];
        j[b] = step(j[a], abs[l], person.limb_lengths[l]);
    }
    Skeleton {
        joints: j,
        limb_angles: abs,
    }
}

/// One sinusoid in a joint-angle or root trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude: f64,
    /// Cycles per frame.
    pub frequency: f64,
    pub phase: f64,
}

impl Wave {
    fn at(&self, t: f64) -> f64 {
        self.amplitude * (TAU * self.frequency * t + self.phase).sin()
    }
}

/// Procedural dance: each limb angle and root coordinate is a sum of waves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub length: usize,
    pub limb_waves: Vec<Vec<Wave>>,
    pub root_waves: [Vec<Wave>; 2],
    /// From this frame on the pose is held still (a freeze at the end).
    pub hold_from: Option<usize>,
}

/// Peak angle amplitude per limb, radians.
const LIMB_AMPLITUDE: [f64; LIMB_COUNT] = [0.1, 0.25, 0.7, 0.8, 0.7, 0.8, 0.3, 0.4, 0.3, 0.4];

#[derive(Clone, Debug, PartialEq)]
pub struct MotionOptions {
    /// Multiplies every amplitude. Zero gives a constant pose.
    pub amplitude_scale: f64,
    /// Probability of a trailing freeze.
    pub hold_probability: f64,
    pub hold_frames: usize,
}

impl Default for MotionOptions {
    fn default() -> Self {
        Self {
            amplitude_scale: 1.0,
            hold_probability: 0.0,
            hold_frames: 8,
        }
    }
}

/// Deterministic motion of `length` frames.
pub fn make_motion(seed: u64, length: usize) -> Result<MotionSpec> {
    make_motion_with(seed, length, &MotionOptions::default())
}

pub fn make_motion_with(seed: u64, length: usize, opts: &MotionOptions) -> Result<MotionSpec> {
    if length < 2 {
        return Err(Error::Length(format!("motion needs at least 2 frames, got {length}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tempo = rng.gen_range(0.05..0.08);
    let wave = |amp: f64, rng: &mut ChaCha8Rng| Wave {
        amplitude: amp * opts.amplitude_scale * rng.gen_range(0.5..1.0),
        frequency: tempo * rng.gen_range(0.6..1.6),
        phase: rng.gen_range(0.0..TAU),
    };
    let limb_waves = LIMB_AMPLITUDE
        .iter()
        .map(|&a| vec![wave(0.7 * a, &mut rng), wave(0.3 * a, &mut rng)])
        .collect();
    let root_waves = [
        vec![wave(0.035, &mut rng), wave(0.015, &mut rng)],
        vec![wave(0.02, &mut rng)],
    ];
    let hold_from = (opts.hold_frames > 0
        && opts.hold_frames < length
        && rng.gen::<f64>() < opts.hold_probability)
        .then(|| length - opts.hold_frames);
    Ok(MotionSpec {
        length,
        limb_waves,
        root_waves,
        hold_from,
    })
}

impl MotionSpec {
    pub fn pose_at(&self, t: usize) -> BodyPose {
        let t = self.hold_from.map_or(t, |h| t.min(h)) as f64;
        let sum = |ws: &[Wave]| ws.iter().map(|w| w.at(t)).sum::<f64>();
        let mut angles = [0.0; LIMB_COUNT];
        for (a, ws) in angles.iter_mut().zip(&self.limb_waves) {
            *a = sum(ws);
        }
        BodyPose {
            root: [sum(&self.root_waves[0]), sum(&self.root_waves[1])],
            angles,
        }
    }

    pub fn poses(&self) -> Vec<BodyPose> {
        (0..self.length).map(|t| self.pose_at(t)).collect()
    }
}

/// Mean joint displacement in pixels between two skeletons.
pub fn mean_joint_displacement(a: &Skeleton, b: &Skeleton) -> f64 {
    a.joints
        .iter()
        .zip(&b.joints)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .sum::<f64>()
        / JOINT_COUNT as f64
}
