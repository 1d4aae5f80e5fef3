//! Procedural road scenes with ray-cast ground truth.
//!
//! World axes: x forward along the road, y left, z up. The road is three
//! lanes wide and centered on `y = 0`; the ego camera drives the middle
//! lane, actors drive the outer lanes, and box buildings line both sides.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::image::Image;
use crate::lidar::{render_condition, LidarRasterConfig};
use crate::painter::PainterSample;
use crate::scene::{actor_clouds, frame_file_name, BoundingBox, Camera, LidarFrame, LidarPoint, SceneBundle};

pub const LANE_WIDTH: f64 = 3.5;
pub const ROAD_HALF_WIDTH: f64 = 1.5 * LANE_WIDTH;
pub const SIDEWALK_EDGE: f64 = ROAD_HALF_WIDTH + 3.0;
pub const SKY: [f64; 3] = [0.55, 0.7, 0.9];
const LINE_HALF_WIDTH: f64 = 0.12;
const LIGHT: [f64; 3] = [0.4, 0.3, 0.866];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Trajectory {
    Straight,
    /// Constant-curvature arc (1/m, positive turns left).
    Curve { curvature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square pixels with the principal point at the image center.
    pub fn with_fov(width: usize, height: usize, horizontal_fov_deg: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * horizontal_fov_deg.to_radians()).tan();
        Self {
            width,
            height,
            fx: f,
            fy: f,
            cx: 0.5 * (width as f64 - 1.0),
            cy: 0.5 * (height as f64 - 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Road length covered by buildings (meters).
    pub extent: f64,
    pub actors: usize,
    pub frames: usize,
    /// Ego travel between frames (meters).
    pub frame_spacing: f64,
    pub frame_interval_s: f64,
    pub lidar_channels: usize,
    pub lidar_azimuth_steps: usize,
    /// Elevation range of the LiDAR fan (degrees).
    pub lidar_elevation_deg: [f64; 2],
    pub lidar_height: f64,
    pub lidar_range: f64,
    pub camera: Intrinsics,
    pub camera_height: f64,
    pub trajectory: Trajectory,
    /// Held-out novel views as (lateral, vertical) camera-frame offsets.
    pub holdout_offsets: Vec<[f64; 2]>,
    /// Every `holdout_stride`-th frame gets held-out views.
    pub holdout_stride: usize,
    /// Samples per pixel side for ground-truth images.
    pub supersample: usize,
    pub sync_tolerance_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            extent: 80.0,
            actors: 3,
            frames: 20,
            frame_spacing: 1.5,
            frame_interval_s: 0.1,
            lidar_channels: 48,
            lidar_azimuth_steps: 720,
            lidar_elevation_deg: [-30.0, 10.0],
            lidar_height: 1.9,
            lidar_range: 60.0,
            camera: Intrinsics::with_fov(128, 128, 70.0),
            camera_height: 1.6,
            trajectory: Trajectory::Straight,
            holdout_offsets: vec![[2.0, 0.0], [-2.0, 0.0], [3.0, 0.0], [0.0, 1.5]],
            holdout_stride: 2,
            supersample: 2,
            sync_tolerance_s: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::validation(f, m));
        if !(self.extent > 0.0) {
            return bad("extent", "must be positive");
        }
        if self.frames == 0 {
            return bad("frames", "must be at least 1");
        }
        if !(self.frame_spacing >= 0.0) || !(self.frame_interval_s > 0.0) {
            return bad("frame_spacing", "spacing must be >= 0 and interval > 0");
        }
        let c = &self.camera;
        if c.width == 0 || c.height == 0 || !(c.fx > 0.0) || !(c.fy > 0.0) {
            return bad("camera", "resolution and focal lengths must be positive");
        }
        if self.holdout_stride == 0 || self.supersample == 0 {
            return bad("holdout_stride", "holdout_stride and supersample must be at least 1");
        }
        if !(self.lidar_range > 0.0) || self.lidar_elevation_deg[0] >= self.lidar_elevation_deg[1] {
            return bad("lidar_elevation_deg", "needs a positive range and increasing elevation bounds");
        }
        if !(self.sync_tolerance_s >= 0.0) {
            return bad("sync_tolerance_s", "must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Material {
    Asphalt,
    LaneLine,
    Sidewalk,
    Grass,
    Wall(usize),
    Window,
    Roof(usize),
    ActorBody(usize),
    ActorGlass,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub material: Material,
}

/// Oriented box in the world.
#[derive(Debug, Clone, Copy, PartialEq)]
struct SolidBox {
    pose: Pose,
    half: Vector3<f64>,
    owner: Owner,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Owner {
    Building(usize),
    Actor(usize),
}

#[derive(Debug, Clone, PartialEq)]
struct ActorTrack {
    start: Vector3<f64>,
    velocity: f64,
    heading: f64,
    half: Vector3<f64>,
}

/// The static layout plus actor tracks; [`World::at_frame`] instantiates
/// actors at a given time.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    buildings: Vec<SolidBox>,
    building_colors: Vec<[f64; 3]>,
    actor_colors: Vec<[f64; 3]>,
    tracks: Vec<ActorTrack>,
    texture_seed: u64,
}

/// World with actors placed for one frame.
#[derive(Debug, Clone)]
pub struct FrameWorld<'a> {
    world: &'a World,
    actors: Vec<SolidBox>,
}

fn hash01(seed: u64, ix: i64, iy: i64) -> f64 {
    let mut h = seed ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear value noise in [0, 1] with unit cell size.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (tx, ty) = (x - fx, y - fy);
    let (ix, iy) = (fx as i64, fy as i64);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(tx), s(ty));
    let a = hash01(seed, ix, iy) * (1.0 - sx) + hash01(seed, ix + 1, iy) * sx;
    let b = hash01(seed, ix, iy + 1) * (1.0 - sx) + hash01(seed, ix + 1, iy + 1) * sx;
    a * (1.0 - sy) + b * sy
}

fn ray_box(b: &SolidBox, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>, Vector3<f64>)> {
    let rt = b.pose.rotation.transpose();
    let o = rt * (origin - b.pose.translation);
    let d = rt * dir;
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut axis = 0;
    let mut sign = 0.0;
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > b.half[k] {
                return None;
            }
            continue;
        }
        let ta = (-b.half[k] - o[k]) / d[k];
        let tb = (b.half[k] - o[k]) / d[k];
        let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
        if lo > t0 {
            t0 = lo;
            axis = k;
            sign = -d[k].signum();
        }
        t1 = t1.min(hi);
    }
    if t0 > t1 || t0 <= 1e-9 {
        return None;
    }
    let local = o + d * t0;
    let mut n = Vector3::zeros();
    n[axis] = sign;
    Some((t0, local, b.pose.rotation * n))
}

impl World {
    pub fn generate(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut buildings = Vec::new();
        let mut building_colors = Vec::new();
        let start = -15.0;
        for side in [1.0, -1.0] {
            let mut x = start;
            while x < cfg.extent {
                let length = rng.random_range(6.0..14.0);
                let depth = rng.random_range(6.0..10.0);
                let height = rng.random_range(5.0..14.0);
                let setback = SIDEWALK_EDGE + rng.random_range(0.5..3.0);
                let center = Vector3::new(x + 0.5 * length, side * (setback + 0.5 * depth), 0.5 * height);
                buildings.push(SolidBox {
                    pose: Pose {
                        rotation: Matrix3::identity(),
                        translation: center,
                    },
                    half: Vector3::new(0.5 * length, 0.5 * depth, 0.5 * height),
                    owner: Owner::Building(buildings.len()),
                });
                building_colors.push([
                    rng.random_range(0.35..0.95),
                    rng.random_range(0.3..0.9),
                    rng.random_range(0.25..0.85),
                ]);
                x += length + rng.random_range(1.0..5.0);
            }
        }
        let lanes = [LANE_WIDTH, -LANE_WIDTH];
        let mut tracks = Vec::new();
        let mut actor_colors = Vec::new();
        for k in 0..cfg.actors {
            let lane = lanes[k % 2];
            let forward = rng.random_bool(0.5);
            let half = Vector3::new(rng.random_range(1.9..2.4), rng.random_range(0.85..1.0), rng.random_range(0.7..0.9));
            let x0 = rng.random_range(5.0..cfg.extent.max(10.0));
            let speed = rng.random_range(1.0..6.0);
            tracks.push(ActorTrack {
                start: Vector3::new(x0, lane + rng.random_range(-0.3..0.3), half.z),
                velocity: if forward { speed } else { -speed },
                heading: if forward { 0.0 } else { std::f64::consts::PI },
                half,
            });
            let palette = [[0.8, 0.1, 0.1], [0.1, 0.2, 0.7], [0.9, 0.85, 0.2], [0.95, 0.95, 0.95], [0.1, 0.5, 0.2]];
            let base = palette[rng.random_range(0..palette.len())];
            actor_colors.push(base.map(|c: f64| (c + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0)));
        }
        Self {
            buildings,
            building_colors,
            actor_colors,
            tracks,
            texture_seed: rng.random(),
        }
    }

    pub fn actor_count(&self) -> usize {
        self.tracks.len()
    }

    /// Box-to-world pose and half extents of actor `k` at time `t`.
    pub fn actor_box(&self, k: usize, t: f64) -> (Pose, Vector3<f64>) {
        let tr = &self.tracks[k];
        let pose = Pose::from_axis_angle(
            Vector3::z(),
            tr.heading,
            tr.start + Vector3::new(tr.velocity * t, 0.0, 0.0),
        );
        (pose, tr.half)
    }

    pub fn at_time(&self, t: f64) -> FrameWorld<'_> {
        let actors = (0..self.tracks.len())
            .map(|k| {
                let (pose, half) = self.actor_box(k, t);
                SolidBox {
                    pose,
                    half,
                    owner: Owner::Actor(k),
                }
            })
            .collect();
        FrameWorld { world: self, actors }
    }

    fn ground_material(&self, x: f64, y: f64) -> Material {
        let ay = y.abs();
        if ay < ROAD_HALF_WIDTH + LINE_HALF_WIDTH {
            let edge = (ay - ROAD_HALF_WIDTH).abs() < LINE_HALF_WIDTH;
            let dashed = (ay - 0.5 * LANE_WIDTH).abs() < LINE_HALF_WIDTH && x.rem_euclid(6.0) < 3.0;
            if edge || dashed {
                Material::LaneLine
            } else {
                Material::Asphalt
            }
        } else if ay < SIDEWALK_EDGE {
            Material::Sidewalk
        } else {
            Material::Grass
        }
    }

    /// Albedo and LiDAR reflectivity at a surface point.
    pub fn surface(&self, m: Material, p: &Vector3<f64>) -> ([f64; 3], f64) {
        let seed = self.texture_seed;
        match m {
            Material::Asphalt => {
                let n = 0.7 * value_noise(seed, p.x * 2.0, p.y * 2.0) + 0.3 * value_noise(seed ^ 1, p.x * 7.0, p.y * 7.0);
                let g = 0.26 + 0.1 * n;
                ([g, g, g * 1.04], 0.12 + 0.06 * n)
            }
            Material::LaneLine => ([0.92, 0.92, 0.88], 0.95),
            Material::Sidewalk => {
                let joint = p.x.rem_euclid(1.5) < 0.06 || (p.y.abs() - ROAD_HALF_WIDTH).rem_euclid(1.5) < 0.06;
                let g = if joint { 0.45 } else { 0.62 + 0.06 * value_noise(seed ^ 2, p.x, p.y) };
                ([g, g * 0.98, g * 0.94], if joint { 0.3 } else { 0.4 })
            }
            Material::Grass => {
                let n = value_noise(seed ^ 3, p.x * 1.5, p.y * 1.5);
                ([0.2 + 0.1 * n, 0.42 + 0.15 * n, 0.15], 0.25 + 0.1 * n)
            }
            Material::Wall(i) => (self.building_colors[i], 0.55),
            Material::Roof(i) => (self.building_colors[i].map(|c| 0.5 * c), 0.45),
            Material::Window => ([0.12, 0.16, 0.24], 0.08),
            Material::ActorBody(k) => (self.actor_colors[k], 0.75),
            Material::ActorGlass => ([0.08, 0.1, 0.12], 0.05),
        }
    }
}

impl FrameWorld<'_> {
    /// Nearest surface along the ray; `dir` must be unit length.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<(f64, Vector3<f64>, Vector3<f64>, Owner)> = None;
        for b in self.world.buildings.iter().chain(&self.actors) {
            if let Some((t, local, n)) = ray_box(b, origin, dir) {
                if best.map_or(true, |(bt, ..)| t < bt) {
                    best = Some((t, local, n, b.owner));
                }
            }
        }
        if dir.z < -1e-12 {
            let t = -origin.z / dir.z;
            if t > 1e-9 && best.map_or(true, |(bt, ..)| t < bt) {
                let p = origin + dir * t;
                let m = self.world.ground_material(p.x, p.y);
                return Some(Hit {
                    distance: t,
                    point: Vector3::new(p.x, p.y, 0.0),
                    normal: Vector3::z(),
                    material: m,
                });
            }
        }
        let (t, local, normal, owner) = best?;
        let point = origin + dir * t;
        let material = match owner {
            Owner::Building(i) => {
                let b = &self.world.buildings[i];
                if normal.z > 0.5 {
                    Material::Roof(i)
                } else {
                    // Facade coordinates: along the wall and up from the ground.
                    let u = if normal.x.abs() > 0.5 { local.y } else { local.x };
                    let v = local.z + b.half.z;
                    let in_window = u.rem_euclid(3.0) > 0.9 && u.rem_euclid(3.0) < 2.2 && v.rem_euclid(3.2) > 1.0 && v.rem_euclid(3.2) < 2.3 && v < 2.0 * b.half.z - 0.6;
                    if in_window {
                        Material::Window
                    } else {
                        Material::Wall(i)
                    }
                }
            }
            Owner::Actor(k) => {
                let h = self.actors[k].half;
                let upper = local.z > 0.15 * h.z && local.z < 0.85 * h.z && normal.z.abs() < 0.5;
                if upper {
                    Material::ActorGlass
                } else {
                    Material::ActorBody(k)
                }
            }
        };
        Some(Hit {
            distance: t,
            point,
            normal,
            material,
        })
    }

    /// Flat diffuse shading; misses show the sky.
    pub fn shade(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> [f64; 3] {
        match self.cast(origin, dir) {
            None => SKY,
            Some(hit) => {
                let (albedo, _) = self.world.surface(hit.material, &hit.point);
                let l = Vector3::from(LIGHT).normalize();
                let k = 0.55 + 0.45 * hit.normal.dot(&l).max(0.0);
                albedo.map(|c| (c * k).clamp(0.0, 1.0))
            }
        }
    }

    /// Ground-truth image with `ss × ss` samples per pixel.
    pub fn render(&self, camera: &Camera, ss: usize) -> Image {
        let rows: Vec<Vec<[f64; 3]>> = (0..camera.height)
            .into_par_iter()
            .map(|y| {
                (0..camera.width)
                    .map(|x| {
                        let mut acc = [0.0; 3];
                        for sy in 0..ss {
                            for sx in 0..ss {
                                let u = x as f64 - 0.5 + (sx as f64 + 0.5) / ss as f64;
                                let v = y as f64 - 0.5 + (sy as f64 + 0.5) / ss as f64;
                                let d_cam = Vector3::new((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
                                let d = (camera.pose.rotation * d_cam).normalize();
                                let c = self.shade(&camera.pose.translation, &d);
                                for ch in 0..3 {
                                    acc[ch] += c[ch];
                                }
                            }
                        }
                        acc.map(|c| c / (ss * ss) as f64)
                    })
                    .collect()
            })
            .collect();
        let mut img = Image::new(camera.width, camera.height);
        for (y, row) in rows.into_iter().enumerate() {
            for (x, c) in row.into_iter().enumerate() {
                img.set(x, y, c);
            }
        }
        img
    }

    /// One full LiDAR sweep from `origin`; returns full-precision hits.
    pub fn sweep(&self, origin: &Vector3<f64>, cfg: &SynthConfig) -> Vec<LidarPoint> {
        let [lo, hi] = cfg.lidar_elevation_deg;
        let channels = cfg.lidar_channels;
        let steps = cfg.lidar_azimuth_steps;
        let rows: Vec<Vec<LidarPoint>> = (0..channels)
            .into_par_iter()
            .map(|c| {
                let el = if channels == 1 {
                    lo
                } else {
                    lo + (hi - lo) * c as f64 / (channels - 1) as f64
                }
                .to_radians();
                (0..steps)
                    .filter_map(|a| {
                        let az = std::f64::consts::TAU * a as f64 / steps as f64;
                        let d = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                        let hit = self.cast(origin, &d)?;
                        if hit.distance > cfg.lidar_range {
                            return None;
                        }
                        let (_, intensity) = self.world.surface(hit.material, &hit.point);
                        Some(LidarPoint {
                            position: hit.point,
                            intensity,
                        })
                    })
                    .collect()
            })
            .collect();
        rows.into_iter().flatten().collect()
    }
}

/// Ego pose along the trajectory at frame `i`: position on the ground and
/// heading (radians about +z).
pub fn ego_state(cfg: &SynthConfig, i: usize) -> (Vector3<f64>, f64) {
    let s = i as f64 * cfg.frame_spacing;
    match cfg.trajectory {
        Trajectory::Straight => (Vector3::new(s, 0.0, 0.0), 0.0),
        Trajectory::Curve { curvature } if curvature.abs() > 1e-12 => {
            let r = 1.0 / curvature;
            let th = s * curvature;
            (Vector3::new(r * th.sin(), r * (1.0 - th.cos()), 0.0), th)
        }
        Trajectory::Curve { .. } => (Vector3::new(s, 0.0, 0.0), 0.0),
    }
}

/// Camera-to-world rotation for a forward-looking camera with the given
/// heading: camera z along the heading, camera x to the right, y down.
pub fn camera_rotation(heading: f64) -> Matrix3<f64> {
    let (c, s) = (heading.cos(), heading.sin());
    let forward = Vector3::new(c, s, 0.0);
    let right = Vector3::new(s, -c, 0.0);
    let down = Vector3::new(0.0, 0.0, -1.0);
    Matrix3::from_columns(&[right, down, forward])
}

pub fn frame_camera(cfg: &SynthConfig, i: usize) -> Camera {
    let (p, h) = ego_state(cfg, i);
    let k = &cfg.camera;
    Camera {
        pose: Pose {
            rotation: camera_rotation(h),
            translation: p + Vector3::new(0.0, 0.0, cfg.camera_height),
        },
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        width: k.width,
        height: k.height,
    }
}

pub fn lidar_origin(cfg: &SynthConfig, i: usize) -> Vector3<f64> {
    ego_state(cfg, i).0 + Vector3::new(0.0, 0.0, cfg.lidar_height)
}

/// A held-out novel view with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutView {
    pub frame_index: usize,
    pub offset: [f64; 2],
    pub camera: Camera,
    pub image: Image,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub bundle: SceneBundle,
    pub holdout: Vec<HoldoutView>,
    pub world: World,
}

fn f32_round(p: &LidarPoint) -> LidarPoint {
    let r = |v: f64| v as f32 as f64;
    LidarPoint {
        position: p.position.map(r),
        intensity: r(p.intensity),
    }
}

/// Builds the world and renders every frame, sweep and held-out view.
/// Stored values are rounded to their on-disk precision so that the
/// in-memory bundle equals a reloaded one.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let world = World::generate(cfg);
    let n = cfg.frames;
    let times: Vec<f64> = (0..n).map(|i| i as f64 * cfg.frame_interval_s).collect();
    let cameras: Vec<Camera> = (0..n).map(|i| frame_camera(cfg, i)).collect();
    let mut images = Vec::with_capacity(n);
    let mut lidar = Vec::with_capacity(n);
    for i in 0..n {
        let fw = world.at_time(times[i]);
        images.push(fw.render(&cameras[i], cfg.supersample).quantized());
        let points = fw.sweep(&lidar_origin(cfg, i), cfg).iter().map(f32_round).collect();
        lidar.push(LidarFrame {
            frame_index: i,
            timestamp: times[i],
            points,
        });
    }
    let mut boxes = Vec::new();
    for k in 0..world.actor_count() {
        for (i, &t) in times.iter().enumerate() {
            let (pose, half) = world.actor_box(k, t);
            boxes.push(BoundingBox {
                pose,
                half_extents: half,
                actor_id: k,
                frame_index: i,
            });
        }
    }
    let mut holdout = Vec::new();
    for i in (0..n).step_by(cfg.holdout_stride) {
        let fw = world.at_time(times[i]);
        for &[lat, up] in &cfg.holdout_offsets {
            let camera = cameras[i].shifted(lat, up);
            holdout.push(HoldoutView {
                frame_index: i,
                offset: [lat, up],
                camera,
                image: fw.render(&camera, cfg.supersample).quantized(),
            });
        }
    }
    let bundle = SceneBundle {
        cameras,
        timestamps: times,
        lidar,
        boxes,
        images,
        actor_count: world.actor_count(),
        sync_tolerance: cfg.sync_tolerance_s,
    };
    bundle.validate()?;
    Ok(SynthOutput { bundle, holdout, world })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HoldoutJson {
    frame_index: usize,
    offset: [f64; 2],
    camera: crate::scene::CameraJson,
    image: String,
}

/// Writes `holdout/holdout.json` and one PPM per view.
pub fn write_holdout(views: &[HoldoutView], dir: &Path) -> Result<()> {
    let hd = dir.join("holdout");
    fs::create_dir_all(&hd)?;
    let mut entries = Vec::with_capacity(views.len());
    for (k, v) in views.iter().enumerate() {
        let name = frame_file_name(k, "ppm");
        v.image.write_ppm(&hd.join(&name))?;
        entries.push(HoldoutJson {
            frame_index: v.frame_index,
            offset: v.offset,
            camera: crate::scene::CameraJson::from_camera(&v.camera, 0.0),
            image: name,
        });
    }
    crate::scene::write_json(&hd.join("holdout.json"), &entries)
}

pub fn load_holdout(dir: &Path) -> Result<Vec<HoldoutView>> {
    let hd = dir.join("holdout");
    let entries: Vec<HoldoutJson> = crate::scene::read_json(&hd.join("holdout.json"))?;
    entries
        .into_iter()
        .map(|e| {
            let camera = e.camera.to_camera()?;
            Ok(HoldoutView {
                frame_index: e.frame_index,
                offset: e.offset,
                camera,
                image: Image::read_ppm(&hd.join(&e.image))?,
            })
        })
        .collect()
}

pub fn write_output(out: &SynthOutput, dir: &Path) -> Result<()> {
    crate::scene::write_bundle(&out.bundle, dir)?;
    write_holdout(&out.holdout, dir)
}

/// Fraction of image covered by dropout patches at severity 1.
pub const DROPOUT_BUDGET: f64 = 0.25;
const SMEAR_BUDGET: f64 = 0.3;

/// Rectangles drawn from `rng` until their union covers `target` pixels.
/// The draw sequence does not depend on `target`, so masks for smaller
/// targets are prefixes of masks for larger ones.
fn grow_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, target: usize, max_side: f64) -> (Vec<bool>, Vec<[usize; 4]>) {
    let mut mask = vec![false; w * h];
    let mut rects = Vec::new();
    let mut covered = 0;
    let mut guard = 0;
    while covered < target && guard < 100_000 {
        guard += 1;
        let rw = ((rng.random_range(0.05..max_side) * w as f64) as usize).max(1);
        let rh = ((rng.random_range(0.05..max_side) * h as f64) as usize).max(1);
        let x0 = rng.random_range(0..w.saturating_sub(rw).max(1));
        let y0 = rng.random_range(0..h.saturating_sub(rh).max(1));
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                if !mask[y * w + x] {
                    mask[y * w + x] = true;
                    covered += 1;
                }
            }
        }
        rects.push([x0, y0, rw, rh]);
    }
    (mask, rects)
}

fn is_lane_like(c: [f64; 3]) -> bool {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    max > 0.75 && max - min < 0.12
}

/// Seeded synthetic artifacts: directional smearing, erasure of bright
/// lane markings below the horizon, and black patch dropout, in that
/// order. Affected regions grow with `severity` ∈ [0, 1] and are nested.
pub fn corrupt(image: &Image, seed: u64, severity: f64) -> Image {
    let s = severity.clamp(0.0, 1.0);
    let (w, h) = (image.width, image.height);
    let n = w * h;
    let mut out = image.clone();
    if s == 0.0 || n == 0 {
        return out;
    }
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(k);
        r
    };

    // Smearing: average along a per-rectangle direction.
    let mut rng = stream(1);
    let (_, rects) = grow_mask(&mut rng, w, h, (SMEAR_BUDGET * s * n as f64).ceil() as usize, 0.35);
    let mut params = stream(2);
    for r in &rects {
        let len = params.random_range(3..9) as isize;
        let angle: f64 = params.random_range(0.0..std::f64::consts::PI);
        let (dx, dy) = (angle.cos(), angle.sin());
        let src = out.clone();
        for y in r[1]..(r[1] + r[3]).min(h) {
            for x in r[0]..(r[0] + r[2]).min(w) {
                let mut acc = [0.0; 3];
                let mut cnt = 0.0;
                for k in -len..=len {
                    let sx = (x as f64 + dx * k as f64).round();
                    let sy = (y as f64 + dy * k as f64).round();
                    if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                        let c = src.get(sx as usize, sy as usize);
                        for ch in 0..3 {
                            acc[ch] += c[ch];
                        }
                        cnt += 1.0;
                    }
                }
                out.set(x, y, acc.map(|v| v / cnt));
            }
        }
    }

    // Lane erasure: replace bright marking pixels with nearby road color.
    let mut rng = stream(3);
    let draws: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let src = out.clone();
    for y in h / 2..h {
        for x in 0..w {
            if draws[y * w + x] >= s || !is_lane_like(src.get(x, y)) {
                continue;
            }
            let mut acc = [0.0; 3];
            let mut cnt = 0.0;
            for r in 1..=(w / 8).max(4) {
                for sx in [x as isize - r as isize, (x + r) as isize] {
                    if sx >= 0 && (sx as usize) < w {
                        let c = src.get(sx as usize, y);
                        if !is_lane_like(c) {
                            for ch in 0..3 {
                                acc[ch] += c[ch];
                            }
                            cnt += 1.0;
                        }
                    }
                }
                if cnt >= 2.0 {
                    break;
                }
            }
            if cnt > 0.0 {
                out.set(x, y, acc.map(|v| v / cnt));
            }
        }
    }

    // Patch dropout.
    let mut rng = stream(4);
    let (mask, _) = grow_mask(&mut rng, w, h, (DROPOUT_BUDGET * s * n as f64).ceil() as usize, 0.3);
    for (i, &m) in mask.iter().enumerate() {
        if m {
            out.data[3 * i..3 * i + 3].copy_from_slice(&[0.0; 3]);
        }
    }
    out
}

/// Painter training triples: every frame and held-out view, corrupted at
/// a severity drawn uniformly from `severity`, with its LiDAR condition.
pub fn corruption_pairs(
    bundle: &SceneBundle,
    holdout: &[HoldoutView],
    severity: [f64; 2],
    seed: u64,
    lidar_cfg: &LidarRasterConfig,
) -> Result<Vec<PainterSample>> {
    if !(0.0..=1.0).contains(&severity[0]) || !(severity[0]..=1.0).contains(&severity[1]) {
        return Err(Error::validation("severity", "needs 0 <= lo <= hi <= 1"));
    }
    let clouds = actor_clouds(bundle)?;
    let views = bundle
        .cameras
        .iter()
        .zip(&bundle.images)
        .enumerate()
        .map(|(f, (c, i))| (f, *c, i))
        .chain(holdout.iter().map(|h| (h.frame_index, h.camera, &h.image)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jobs: Vec<_> = views
        .map(|(f, cam, img)| (f, cam, img, rng.random_range(severity[0]..=severity[1]), rng.random::<u64>()))
        .collect();
    jobs.into_par_iter()
        .map(|(f, cam, img, sev, s)| {
            let lidar = render_condition(bundle, &clouds, f, &cam, lidar_cfg)?
                .to_condition_image(lidar_cfg.near_depth)
                .quantized();
            Ok(PainterSample {
                artifact: corrupt(img, s, sev).quantized(),
                lidar,
                target: img.clone(),
            })
        })
        .collect()
}
