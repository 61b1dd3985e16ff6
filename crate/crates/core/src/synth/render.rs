use crate::codec::PixelVideo;
use crate::error::{shape_err, Result};
use crate::numerics::{Rng, Tensor};
use crate::ppm::snap;

use super::{Appearance, PoseFrame, SceneSpec};

/// Side length of the square hand-normal patch.
pub const HAND_PATCH: usize = 5;
/// Hand keypoints are drawn in pure green; no limb uses this colour.
pub const HAND_KEYPOINT_COLOR: [f32; 3] = [0.0, 1.0, 0.0];
/// Torso, left upper arm, left forearm, right upper arm, right forearm.
pub const POSE_LIMB_COLORS: [[f32; 3]; 5] = [
    [1.0, 0.0, 0.0],
    [1.0, 0.6, 0.0],
    [1.0, 1.0, 0.0],
    [0.0, 0.6, 1.0],
    [0.0, 0.0, 1.0],
];
/// Pixels within this distance of a limb centre line are drawn.
const POSE_LINE_RADIUS: f32 = 1.0;
const TIP_LEN: f32 = 0.045;
const REST_ARM_ANGLE: f32 = 0.6;

type Pt = [f32; 2];

/// Joint positions of one frame in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub neck: Pt,
    pub pelvis: Pt,
    pub elbows: [Pt; 2],
    pub hands: [Pt; 2],
    /// End of the short hand-keypoint segment past each hand.
    pub tips: [Pt; 2],
    pub forearm_dirs: [Pt; 2],
    pub head: Pt,
    pub head_radius: f32,
    pub thickness: f32,
}

impl Skeleton {
    /// Places the figure, shifting it back inside the frame when needed.
    /// Returns the skeleton and whether a shift was applied.
    pub fn place(app: &Appearance, pose: &PoseFrame, h: usize, w: usize) -> (Self, bool) {
        let (hf, wf) = (h as f32, w as f32);
        let centre = [
            (app.anchor[0] + pose.shift[0]) * wf,
            (app.anchor[1] + pose.shift[1]) * hf,
        ];
        let axis = [pose.lean.sin(), pose.lean.cos()];
        let half = 0.5 * app.torso_len * hf;
        let neck = [centre[0] - half * axis[0], centre[1] - half * axis[1]];
        let pelvis = [centre[0] + half * axis[0], centre[1] + half * axis[1]];
        let mut elbows = [[0.0; 2]; 2];
        let mut hands = [[0.0; 2]; 2];
        let mut tips = [[0.0; 2]; 2];
        let mut forearm_dirs = [[0.0; 2]; 2];
        for side in 0..2 {
            let s = if side == 0 { -1.0 } else { 1.0 };
            let a = pose.lean + s * (REST_ARM_ANGLE + pose.shoulders[side]);
            let ua = app.upper_arm * hf;
            elbows[side] = [neck[0] + ua * a.sin(), neck[1] + ua * a.cos()];
            let b = a + s * pose.elbows[side];
            let dir = [b.sin(), b.cos()];
            let fa = app.forearm * hf;
            hands[side] = [elbows[side][0] + fa * dir[0], elbows[side][1] + fa * dir[1]];
            let tl = TIP_LEN * hf;
            tips[side] = [hands[side][0] + tl * dir[0], hands[side][1] + tl * dir[1]];
            forearm_dirs[side] = dir;
        }
        let head_radius = app.head_radius * hf;
        let thickness = app.thickness * hf;
        let lift = 1.1 * head_radius;
        let head = [neck[0] - lift * axis[0], neck[1] - lift * axis[1]];
        let mut sk = Self {
            neck,
            pelvis,
            elbows,
            hands,
            tips,
            forearm_dirs,
            head,
            head_radius,
            thickness,
        };
        let clamped = sk.clamp_into(h, w);
        (sk, clamped)
    }

    fn points_mut(&mut self) -> Vec<&mut Pt> {
        let [e0, e1] = &mut self.elbows;
        let [h0, h1] = &mut self.hands;
        let [t0, t1] = &mut self.tips;
        vec![&mut self.neck, &mut self.pelvis, e0, e1, h0, h1, t0, t1, &mut self.head]
    }

    fn clamp_into(&mut self, h: usize, w: usize) -> bool {
        let r = self.thickness;
        let hr = self.head_radius;
        let margin = (HAND_PATCH / 2) as f32 + 1.0;
        let mut lo = [f32::INFINITY; 2];
        let mut hi = [f32::NEG_INFINITY; 2];
        let mut grow = |p: Pt, pad: f32| {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k] - pad);
                hi[k] = hi[k].max(p[k] + pad);
            }
        };
        for p in [self.neck, self.pelvis]
            .iter()
            .chain(&self.elbows)
            .chain(&self.tips)
        {
            grow(*p, r);
        }
        for p in &self.hands {
            grow(*p, r.max(margin));
        }
        grow(self.head, hr);
        let limits = [w as f32, h as f32];
        let mut delta = [0.0f32; 2];
        for k in 0..2 {
            if hi[k] - lo[k] > limits[k] {
                delta[k] = 0.5 * (limits[k] - (hi[k] + lo[k]));
            } else if lo[k] < 0.0 {
                delta[k] = -lo[k];
            } else if hi[k] > limits[k] {
                delta[k] = limits[k] - hi[k];
            }
        }
        if delta == [0.0, 0.0] {
            return false;
        }
        for p in self.points_mut() {
            p[0] += delta[0];
            p[1] += delta[1];
        }
        true
    }

    /// Capsule segments making up the rendered body (head excluded).
    fn body_segments(&self) -> [(Pt, Pt, bool); 7] {
        [
            (self.neck, self.pelvis, true),
            (self.neck, self.elbows[0], false),
            (self.elbows[0], self.hands[0], false),
            (self.hands[0], self.tips[0], false),
            (self.neck, self.elbows[1], false),
            (self.elbows[1], self.hands[1], false),
            (self.hands[1], self.tips[1], false),
        ]
    }
}

/// Pose-render segments in drawing order, with their colours.
pub fn pose_limb_segments(sk: &Skeleton) -> Vec<(Pt, Pt, [f32; 3])> {
    vec![
        (sk.neck, sk.pelvis, POSE_LIMB_COLORS[0]),
        (sk.neck, sk.elbows[0], POSE_LIMB_COLORS[1]),
        (sk.elbows[0], sk.hands[0], POSE_LIMB_COLORS[2]),
        (sk.neck, sk.elbows[1], POSE_LIMB_COLORS[3]),
        (sk.elbows[1], sk.hands[1], POSE_LIMB_COLORS[4]),
        (sk.hands[0], sk.tips[0], HAND_KEYPOINT_COLOR),
        (sk.hands[1], sk.tips[1], HAND_KEYPOINT_COLOR),
    ]
}

/// Euclidean distance from `p` to the segment `a`-`b`.
pub fn segment_distance(p: Pt, a: Pt, b: Pt) -> f32 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (cx * cx + cy * cy).sqrt()
}

fn pixel_centre(x: usize, y: usize) -> Pt {
    [x as f32 + 0.5, y as f32 + 0.5]
}

/// Seeded sum of sinusoids per colour channel, static over time.
pub fn render_background(id: u64, h: usize, w: usize) -> Tensor {
    let mut rng = Rng::new(id);
    let mut data = vec![0.0f32; 3 * h * w];
    for ch in 0..3 {
        let base = rng.uniform_in(0.35, 0.65);
        let waves: Vec<[f32; 4]> = (0..2)
            .map(|_| {
                [
                    rng.uniform_in(-3.0, 3.0),
                    rng.uniform_in(-3.0, 3.0),
                    rng.uniform_in(0.0, std::f32::consts::TAU),
                    rng.uniform_in(0.05, 0.15),
                ]
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
                let mut val = base;
                for [fx, fy, ph, amp] in &waves {
                    val += amp * (std::f32::consts::TAU * (fx * u + fy * v) + ph).sin();
                }
                data[(ch * h + y) * w + x] = snap(val);
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("background shape")
}

pub struct TrackRender {
    pub video: PixelVideo,
    pub pose: PixelVideo,
    pub hand: PixelVideo,
    pub mask: Tensor,
    pub skeletons: Vec<Skeleton>,
    pub clamped: bool,
}

fn put(frame: &mut [f32], plane: usize, at: usize, rgb: [f32; 3]) {
    for ch in 0..3 {
        frame[ch * plane + at] = snap(rgb[ch]);
    }
}

/// Renders every frame of the spec's motion at `h × w`.
pub fn render_track(spec: &SceneSpec, h: usize, w: usize) -> Result<TrackRender> {
    if h == 0 || w == 0 || spec.motion.is_empty() {
        return Err(shape_err!(
            "cannot render {} frames at {h}x{w}",
            spec.motion.len()
        ));
    }
    let app = &spec.appearance;
    let bg = render_background(spec.background_id, h, w);
    let plane = h * w;
    let n = spec.motion.len();
    let mut video = Vec::with_capacity(n);
    let mut pose = Vec::with_capacity(n);
    let mut hand = Vec::with_capacity(n);
    let mut mask = vec![0.0f32; n * plane];
    let mut skeletons = Vec::with_capacity(n);
    let mut clamped = false;
    for (f, pf) in spec.motion.iter().enumerate() {
        let (sk, c) = Skeleton::place(app, pf, h, w);
        clamped |= c;
        let mut vf = bg.data().to_vec();
        let mut pfr = vec![0.0f32; 3 * plane];
        let mut hfr = vec![0.0f32; 3 * plane];
        let body = sk.body_segments();
        let limbs = pose_limb_segments(&sk);
        for y in 0..h {
            for x in 0..w {
                let p = pixel_centre(x, y);
                let at = y * w + x;
                let mut colour = None;
                for &(a, b, torso) in &body {
                    if segment_distance(p, a, b) <= sk.thickness {
                        colour = Some(if torso { app.torso_color } else { app.arm_color });
                        if torso {
                            break;
                        }
                    }
                }
                let (dx, dy) = (p[0] - sk.head[0], p[1] - sk.head[1]);
                if dx * dx + dy * dy <= sk.head_radius * sk.head_radius {
                    colour = Some(app.head_color);
                }
                if let Some(rgb) = colour {
                    put(&mut vf, plane, at, rgb);
                    mask[f * plane + at] = 1.0;
                }
                for &(a, b, rgb) in &limbs {
                    if segment_distance(p, a, b) <= POSE_LINE_RADIUS {
                        put(&mut pfr, plane, at, rgb);
                    }
                }
            }
        }
        let half = (HAND_PATCH / 2) as i64;
        for side in 0..2 {
            let c = sk.hands[side];
            let dir = sk.forearm_dirs[side];
            let (cx, cy) = (c[0].floor() as i64, c[1].floor() as i64);
            for v in -half..=half {
                for u in -half..=half {
                    let (x, y) = (cx + u, cy + v);
                    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        continue;
                    }
                    let along = u as f32 * dir[0] + v as f32 * dir[1];
                    let rgb = [
                        0.5 + 0.5 * dir[0],
                        0.5 + 0.5 * dir[1],
                        0.5 + 0.1 * along,
                    ];
                    put(&mut hfr, plane, y as usize * w + x as usize, rgb);
                }
            }
        }
        video.push(Tensor::new(vec![3, h, w], vf)?);
        pose.push(Tensor::new(vec![3, h, w], pfr)?);
        hand.push(Tensor::new(vec![3, h, w], hfr)?);
        skeletons.push(sk);
    }
    Ok(TrackRender {
        video: PixelVideo::from_frames(&video)?,
        pose: PixelVideo::from_frames(&pose)?,
        hand: PixelVideo::from_frames(&hand)?,
        mask: Tensor::new(vec![n, h, w], mask)?,
        skeletons,
        clamped,
    })
}

/// Clears the hand keypoints from a pose render, leaving the limbs.
pub fn strip_hand_keypoints(pose: &PixelVideo) -> PixelVideo {
    let (f, h, w) = pose.dims();
    let plane = f * h * w;
    let mut out = pose.clone();
    let d = out.frames.data_mut();
    for i in 0..plane {
        if (0..3).all(|ch| d[ch * plane + i] == HAND_KEYPOINT_COLOR[ch]) {
            for ch in 0..3 {
                d[ch * plane + i] = 0.0;
            }
        }
    }
    out
}
