//! Synthetic scenes with exact depth, rendered frames and simulated events.
//!
//! Scenes are textured planes and axis-aligned boxes seen by a translating
//! pinhole camera (x right, y down, z forward). Every ray hits the back wall,
//! so each pixel has a finite positive depth. Events come from per-pixel
//! log-intensity threshold crossings between temporally upsampled frames.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Event, EventStream, Polarity};
use crate::frame::GrayFrame;
use crate::objective::{DepthRaster, DepthSpace, LogDepthParams};
use crate::params::seeded_rng;

pub const LOG_EPS: f64 = 1e-3;
const NEAR: f64 = 1e-6;

pub type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Procedural texture: a product of sinusoids blended with a soft checker.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: f64,
    pub amplitude: f64,
    pub freq: [f64; 2],
    pub phase: [f64; 2],
    pub checker: f64,
}

impl Texture {
    pub fn flat(value: f64) -> Self {
        Self {
            base: value,
            amplitude: 0.0,
            freq: [0.0, 0.0],
            phase: [0.0, 0.0],
            checker: 1.0,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            base: rng.gen_range(0.35..0.65),
            amplitude: rng.gen_range(0.2..0.3),
            freq: [rng.gen_range(0.8..3.0), rng.gen_range(0.8..3.0)],
            phase: [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)],
            checker: rng.gen_range(0.6..2.0),
        }
    }

    pub fn sample(&self, u: f64, v: f64) -> f64 {
        let wave = (self.freq[0] * u + self.phase[0]).sin() * (self.freq[1] * v + self.phase[1]).cos();
        let s = std::f64::consts::PI / self.checker;
        let check = (3.0 * (s * u).sin() * (s * v).sin()).tanh();
        (self.base + self.amplitude * (0.6 * wave + 0.4 * check)).clamp(0.02, 0.98)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Points `X` with `normal . X = offset`; texture coordinates are the
    /// projections onto `u_axis` and `v_axis`.
    Plane {
        normal: Vec3,
        offset: f64,
        u_axis: Vec3,
        v_axis: Vec3,
    },
    Box { min: Vec3, max: Vec3 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub texture: Texture,
}

impl SceneObject {
    /// Ray parameter (equal to camera depth, since `dir.z = 1`) and texture
    /// value of the nearest hit in front of the camera.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        match &self.shape {
            Shape::Plane {
                normal,
                offset,
                u_axis,
                v_axis,
            } => {
                let denom = dot(*normal, dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (offset - dot(*normal, origin)) / denom;
                if t <= NEAR {
                    return None;
                }
                let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
                Some((t, self.texture.sample(dot(p, *u_axis), dot(p, *v_axis))))
            }
            Shape::Box { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis = 0;
                for a in 0..3 {
                    if dir[a].abs() < 1e-12 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (min[a] - origin[a]) / dir[a];
                    let t2 = (max[a] - origin[a]) / dir[a];
                    let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    if lo > t_near {
                        t_near = lo;
                        axis = a;
                    }
                    t_far = t_far.min(hi);
                }
                if t_near > t_far || t_near <= NEAR {
                    return None;
                }
                let p = [
                    origin[0] + t_near * dir[0],
                    origin[1] + t_near * dir[1],
                    origin[2] + t_near * dir[2],
                ];
                let (u, v) = match axis {
                    0 => (p[2], p[1]),
                    1 => (p[0], p[2]),
                    _ => (p[0], p[1]),
                };
                Some((t_near, self.texture.sample(u, v)))
            }
        }
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    pub fn centered(height: usize, width: usize, focal: f64) -> Self {
        Self {
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    /// Ray direction through the centre of pixel `(y, x)`, with unit z.
    pub fn ray(&self, y: usize, x: usize) -> Vec3 {
        [
            (x as f64 + 0.5 - self.cx) / self.focal,
            (y as f64 + 0.5 - self.cy) / self.focal,
            1.0,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub objects: Vec<SceneObject>,
    pub camera: Camera,
    /// Camera centre per step.
    pub trajectory: Vec<Vec3>,
    /// Lighting gain per step.
    pub gains: Vec<f64>,
}

impl SyntheticScene {
    pub fn steps(&self) -> usize {
        self.trajectory.len()
    }
}

/// Clean intensities (gain applied) and metric depth for every step.
pub fn render_sequence(
    scene: &SyntheticScene,
    height: usize,
    width: usize,
    params: LogDepthParams,
) -> Result<(Vec<GrayFrame>, Vec<DepthRaster>)> {
    if scene.gains.len() != scene.trajectory.len() {
        return Err(Error::Config(format!(
            "{} gains for {} trajectory steps",
            scene.gains.len(),
            scene.trajectory.len()
        )));
    }
    let mut frames = Vec::with_capacity(scene.steps());
    let mut depths = Vec::with_capacity(scene.steps());
    for (step, (&origin, &gain)) in scene.trajectory.iter().zip(&scene.gains).enumerate() {
        let mut intensity = Vec::with_capacity(height * width);
        let mut depth = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let dir = scene.camera.ray(y, x);
                let hit = scene
                    .objects
                    .iter()
                    .filter_map(|o| o.intersect(origin, dir))
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                let Some((t, value)) = hit else {
                    return Err(Error::Data(format!("pixel ({y}, {x}) at step {step} sees no surface")));
                };
                depth.push(t);
                intensity.push((gain * value).clamp(0.0, 1.0));
            }
        }
        frames.push(GrayFrame::new(height, width, intensity));
        depths.push(DepthRaster::dense(height, width, depth, DepthSpace::Meters, params));
    }
    Ok((frames, depths))
}

/// Threshold-crossing event simulation.
///
/// Each pixel keeps a fixed ladder of log-intensity levels `L0 + k C`
/// anchored at its first log intensity `ln(I + eps)`. Intensity is linearly
/// interpolated over `substeps` sub-intervals between frames; every level
/// crossed emits one event, positive when crossed upwards, timestamped by
/// linear interpolation and clamped into `(t_{k-1}, t_k]`.
pub fn simulate_events(frames: &[GrayFrame], timestamps: &[u64], threshold_c: f64, substeps: usize) -> Result<EventStream> {
    if !(threshold_c > 0.0 && threshold_c.is_finite()) {
        return Err(Error::Config(format!("contrast threshold must be positive, got {threshold_c}")));
    }
    if substeps == 0 {
        return Err(Error::Config("at least one substep is required".into()));
    }
    if frames.len() != timestamps.len() {
        return Err(Error::Config(format!(
            "{} frames but {} timestamps",
            frames.len(),
            timestamps.len()
        )));
    }
    if timestamps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("frame timestamps must be strictly increasing".into()));
    }
    let Some(first) = frames.first() else {
        return EventStream::new(Vec::new());
    };
    let (h, w) = (first.height, first.width);
    if frames.iter().any(|f| (f.height, f.width) != (h, w)) {
        return Err(Error::Config("frames differ in size".into()));
    }
    let anchor: Vec<f64> = first.data.iter().map(|&v| (v + LOG_EPS).ln()).collect();
    let level = |i: usize, v: f64| ((v + LOG_EPS).ln() - anchor[i]) / threshold_c;
    let mut events = Vec::new();
    for k in 1..frames.len() {
        let (prev, next) = (&frames[k - 1], &frames[k]);
        let (t0, t1) = (timestamps[k - 1], timestamps[k]);
        let span = (t1 - t0) as f64;
        for i in 0..h * w {
            let (a, b) = (prev.data[i], next.data[i]);
            if a == b {
                continue;
            }
            let (y, x) = ((i / w) as u32, (i % w) as u32);
            let mut u_prev = level(i, a);
            for s in 1..=substeps {
                let frac = s as f64 / substeps as f64;
                let u = level(i, a + frac * (b - a));
                let ta = t0 as f64 + span * (s - 1) as f64 / substeps as f64;
                let tb = t0 as f64 + span * frac;
                let stamp = |m: f64| {
                    let t = ta + (m - u_prev) / (u - u_prev) * (tb - ta);
                    (t.round() as u64).clamp(t0 + 1, t1)
                };
                if u > u_prev {
                    let mut m = u_prev.floor() + 1.0;
                    while m <= u {
                        events.push(Event::new(x, y, stamp(m), Polarity::Positive));
                        m += 1.0;
                    }
                } else if u < u_prev {
                    let mut m = u_prev.ceil() - 1.0;
                    while m >= u {
                        events.push(Event::new(x, y, stamp(m), Polarity::Negative));
                        m -= 1.0;
                    }
                }
                u_prev = u;
            }
        }
    }
    events.sort_by_key(|e| (e.t, e.y, e.x));
    EventStream::new(events)
}

/// Frames as a conventional camera would record them: additive Gaussian
/// read noise, clamped to `[0, 1]`.
pub fn observe_frames(intensities: &[GrayFrame], noise_std: f64, rng: &mut ChaCha8Rng) -> Vec<GrayFrame> {
    if noise_std <= 0.0 {
        return intensities.to_vec();
    }
    let normal = Normal::new(0.0, noise_std).expect("finite noise level");
    intensities
        .iter()
        .map(|f| {
            let data = f.data.iter().map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0)).collect();
            GrayFrame::new(f.height, f.width, data)
        })
        .collect()
}

/// Parameters of the random scene family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub frame_period_us: u64,
    pub threshold_c: f64,
    pub substeps: usize,
    pub gain: f64,
    pub noise_std: f64,
    pub boxes: usize,
    /// Lateral camera speed in metres per frame.
    pub speed: f64,
    pub params: LogDepthParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 24,
            frame_period_us: 50_000,
            threshold_c: 0.15,
            substeps: 10,
            gain: 1.0,
            noise_std: 0.02,
            boxes: 3,
            speed: 0.12,
            params: LogDepthParams::MVSEC,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config("need at least two frames".into()));
        }
        if self.frame_period_us == 0 {
            return Err(Error::Config("frame period must be positive".into()));
        }
        if !(self.threshold_c > 0.0) {
            return Err(Error::Config(format!("contrast threshold must be positive, got {}", self.threshold_c)));
        }
        if !(self.gain > 0.0) {
            return Err(Error::Config(format!("gain must be positive, got {}", self.gain)));
        }
        self.params.validate()
    }

    pub fn timestamps(&self) -> Vec<u64> {
        (0..self.frames as u64).map(|k| k * self.frame_period_us).collect()
    }
}

/// Random scene: a textured back wall and floor plus a few boxes, with a
/// camera sliding sideways and slightly forwards. The geometry depends only
/// on `seed`, never on the gain.
pub fn random_scene(cfg: &SynthConfig, seed: u64) -> SyntheticScene {
    let mut rng = seeded_rng(seed);
    let wall_z = rng.gen_range(25.0..45.0);
    let floor_y = rng.gen_range(1.2..2.0);
    let mut objects = vec![
        SceneObject {
            shape: Shape::Plane {
                normal: [0.0, 0.0, 1.0],
                offset: wall_z,
                u_axis: [1.0, 0.0, 0.0],
                v_axis: [0.0, 1.0, 0.0],
            },
            texture: Texture::random(&mut rng),
        },
        SceneObject {
            shape: Shape::Plane {
                normal: [0.0, 1.0, 0.0],
                offset: floor_y,
                u_axis: [1.0, 0.0, 0.0],
                v_axis: [0.0, 0.0, 1.0],
            },
            texture: Texture::random(&mut rng),
        },
    ];
    for _ in 0..cfg.boxes {
        let z = rng.gen_range(4.0..18.0);
        let half_w = rng.gen_range(0.4..1.4) * z / 10.0;
        let depth = rng.gen_range(0.5..2.0);
        let x = rng.gen_range(-0.45..0.45) * z;
        let top = rng.gen_range(-1.5..0.3) * z / 10.0 - 0.5;
        objects.push(SceneObject {
            shape: Shape::Box {
                min: [x - half_w, top, z],
                max: [x + half_w, floor_y, z + depth],
            },
            texture: Texture::random(&mut rng),
        });
    }
    let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let forward = rng.gen_range(0.0..0.05);
    let start = -dir * cfg.speed * cfg.frames as f64 / 2.0;
    let trajectory = (0..cfg.frames)
        .map(|k| [start + dir * cfg.speed * k as f64, 0.0, forward * k as f64])
        .collect();
    let focal = 0.9 * cfg.width as f64;
    SyntheticScene {
        objects,
        camera: Camera::centered(cfg.height, cfg.width, focal),
        trajectory,
        gains: vec![cfg.gain; cfg.frames],
    }
}

/// One rendered sequence with everything a loader would read from disk.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub frames: Vec<GrayFrame>,
    pub depths: Vec<DepthRaster>,
    pub events: EventStream,
    pub timestamps: Vec<u64>,
}

/// Render, simulate events from the clean intensities and add frame noise.
/// Noise uses its own stream derived from `seed`.
pub fn generate_sequence(cfg: &SynthConfig, seed: u64) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let scene = random_scene(cfg, seed);
    let (clean, depths) = render_sequence(&scene, cfg.height, cfg.width, cfg.params)?;
    let timestamps = cfg.timestamps();
    let events = simulate_events(&clean, &timestamps, cfg.threshold_c, cfg.substeps)?;
    let mut noise_rng = seeded_rng(seed ^ 0x6e6f_6973_6500_0000);
    let frames = observe_frames(&clean, cfg.noise_std, &mut noise_rng);
    Ok(SyntheticSequence {
        frames,
        depths,
        events,
        timestamps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wall(z: f64, texture: Texture) -> SceneObject {
        SceneObject {
            shape: Shape::Plane {
                normal: [0.0, 0.0, 1.0],
                offset: z,
                u_axis: [1.0, 0.0, 0.0],
                v_axis: [0.0, 1.0, 0.0],
            },
            texture,
        }
    }

    fn scene(objects: Vec<SceneObject>, trajectory: Vec<Vec3>) -> SyntheticScene {
        let n = trajectory.len();
        SyntheticScene {
            objects,
            camera: Camera::centered(16, 16, 14.0),
            trajectory,
            gains: vec![1.0; n],
        }
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let s = scene(vec![wall(10.0, Texture::flat(0.5))], vec![[0.0; 3]; 2]);
        let (_, depths) = render_sequence(&s, 16, 16, LogDepthParams::MVSEC).unwrap();
        assert!(depths[0].data.iter().all(|&d| (d - 10.0).abs() < 1e-12));
    }

    #[test]
    fn static_scene_gives_identical_frames() {
        let mut rng = seeded_rng(1);
        let s = scene(vec![wall(10.0, Texture::random(&mut rng))], vec![[0.3, 0.1, 0.0]; 3]);
        let (frames, _) = render_sequence(&s, 16, 16, LogDepthParams::MVSEC).unwrap();
        assert_eq!(frames[0], frames[1]);
        assert_eq!(frames[1], frames[2]);
    }

    #[test]
    fn nearer_box_occludes_wall() {
        let objects = vec![
            wall(20.0, Texture::flat(0.2)),
            SceneObject {
                shape: Shape::Box {
                    min: [-1.0, -1.0, 5.0],
                    max: [1.0, 1.0, 6.0],
                },
                texture: Texture::flat(0.8),
            },
        ];
        let s = scene(objects, vec![[0.0; 3]]);
        let (frames, depths) = render_sequence(&s, 16, 16, LogDepthParams::MVSEC).unwrap();
        assert!((depths[0].data[8 * 16 + 8] - 5.0).abs() < 1e-12);
        assert!((frames[0].at(8, 8) - 0.8).abs() < 1e-12);
        assert!((depths[0].data[0] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn missing_background_is_reported() {
        let s = scene(Vec::new(), vec![[0.0; 3]]);
        assert!(render_sequence(&s, 4, 4, LogDepthParams::MVSEC).is_err());
    }

    fn pixel_sequence(values: &[f64]) -> Vec<GrayFrame> {
        values.iter().map(|&v| GrayFrame::constant(1, 1, v)).collect()
    }

    #[test]
    fn constant_intensity_gives_no_events() {
        let frames = pixel_sequence(&[0.4, 0.4, 0.4]);
        let ev = simulate_events(&frames, &[0, 100, 200], 0.1, 10).unwrap();
        assert!(ev.is_empty());
    }

    #[test]
    fn two_and_a_half_thresholds_give_two_events() {
        let c: f64 = 0.2;
        let i0: f64 = 0.3;
        let i1 = (i0 + LOG_EPS) * (2.5 * c).exp() - LOG_EPS;
        let ev = simulate_events(&pixel_sequence(&[i0, i1]), &[0, 1000], c, 10).unwrap();
        assert_eq!(ev.len(), 2);
        assert!(ev.events().iter().all(|e| e.p == Polarity::Positive));
        assert!(ev.events().iter().all(|e| e.t > 0 && e.t <= 1000));
    }

    #[test]
    fn reversed_ramp_flips_polarities() {
        let up = [0.1, 0.3, 0.6, 0.9];
        let down: Vec<f64> = up.iter().rev().copied().collect();
        let ts = [0, 100, 200, 300];
        let a = simulate_events(&pixel_sequence(&up), &ts, 0.1, 10).unwrap();
        let b = simulate_events(&pixel_sequence(&down), &ts, 0.1, 10).unwrap();
        assert_eq!(a.len(), b.len());
        assert!(a.events().iter().all(|e| e.p == Polarity::Positive));
        assert!(b.events().iter().all(|e| e.p == Polarity::Negative));
    }

    #[test]
    fn bad_threshold_is_a_config_error() {
        let frames = pixel_sequence(&[0.4, 0.5]);
        assert!(matches!(simulate_events(&frames, &[0, 1], 0.0, 10), Err(Error::Config(_))));
        assert!(matches!(simulate_events(&frames, &[0, 1], -0.1, 10), Err(Error::Config(_))));
    }

    #[test]
    fn events_fall_in_their_frame_interval() {
        let cfg = SynthConfig {
            height: 16,
            width: 16,
            frames: 4,
            ..SynthConfig::default()
        };
        let seq = generate_sequence(&cfg, 4).unwrap();
        assert!(!seq.events.is_empty());
        let t_last = *seq.timestamps.last().unwrap();
        assert!(seq.events.events().iter().all(|e| e.t > 0 && e.t <= t_last));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            height: 16,
            width: 16,
            frames: 3,
            ..SynthConfig::default()
        };
        let a = generate_sequence(&cfg, 9).unwrap();
        let b = generate_sequence(&cfg, 9).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.depths, b.depths);
    }
}
