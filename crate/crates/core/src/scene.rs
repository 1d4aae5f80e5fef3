//! Capture data in a single world frame: cameras, LiDAR sweeps, actor boxes
//! and images, plus the on-disk bundle format.
//!
//! Bundle directory layout:
//!
//! ```text
//! meta.json            {frame_count, actor_count, sync_tolerance_s, lidar_timestamps?}
//! cameras.json         [{rotation[9], translation[3], fx, fy, cx, cy, width, height, timestamp}]
//! boxes.json           [{actor_id, frame_index, rotation[9], translation[3], half_extents[3]}]
//! lidar/NNNNNN.bin     "LPC1", u64 LE count, count x (x, y, z, intensity) f32 LE
//! images/NNNNNN.ppm    binary P6, 8 bit
//! ```
//!
//! `lidar_timestamps` lists one capture time per sweep file. When absent,
//! sweep `k` is taken to be captured with camera `k`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::image::Image;

pub const LIDAR_MAGIC: &[u8; 4] = b"LPC1";
pub const DEFAULT_SYNC_TOLERANCE: f64 = 0.05;

/// Pinhole camera. The pose maps camera coordinates (x right, y down,
/// z forward) to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub pose: Pose,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        self.pose.validate()?;
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::validation("camera.fx/fy", "focal lengths must be positive"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) {
            return Err(Error::validation("camera.cx", format!("{} outside [0, width)", self.cx)));
        }
        if !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::validation("camera.cy", format!("{} outside [0, height)", self.cy)));
        }
        Ok(())
    }

    /// World-to-camera rotation.
    pub fn view_rotation(&self) -> nalgebra::Matrix3<f64> {
        self.pose.rotation.transpose()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation.transpose() * (p - self.pose.translation)
    }

    /// Pinhole projection of a camera-space point with positive depth.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<(f64, f64)> {
        if p_cam.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.translation
    }

    pub fn right_axis(&self) -> Vector3<f64> {
        self.pose.rotation.column(0).into_owned()
    }

    pub fn up_axis(&self) -> Vector3<f64> {
        -self.pose.rotation.column(1).into_owned()
    }

    /// The same camera moved `lateral` meters along its right axis and
    /// `vertical` meters along its up axis.
    pub fn shifted(&self, lateral: f64, vertical: f64) -> Camera {
        let mut cam = *self;
        cam.pose.translation += self.right_axis() * lateral + self.up_axis() * vertical;
        cam
    }

    /// Copy with the resolution scaled by `factor` (intrinsics follow).
    pub fn scaled(&self, factor: f64) -> Camera {
        Camera {
            pose: self.pose,
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
            width: (self.width as f64 * factor).round() as usize,
            height: (self.height as f64 * factor).round() as usize,
        }
    }
}

/// Oriented box annotation of one actor at one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    /// Box-to-world transform.
    pub pose: Pose,
    pub half_extents: Vector3<f64>,
    pub actor_id: usize,
    pub frame_index: usize,
}

impl BoundingBox {
    /// Box-local coordinates of `p` if it lies inside the box (closed).
    pub fn local_if_inside(&self, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        let local = self.pose.inverse().transform_point(p);
        let inside = (0..3).all(|k| local[k].abs() <= self.half_extents[k]);
        inside.then_some(local)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub position: Vector3<f64>,
    pub intensity: f64,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self {
            position: Vector3::new(x, y, z),
            intensity,
        }
    }
}

/// A LiDAR sweep assigned to a camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarFrame {
    pub frame_index: usize,
    pub timestamp: f64,
    pub points: Vec<LidarPoint>,
}

/// An unsynchronized sweep as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarSweep {
    pub timestamp: f64,
    pub points: Vec<LidarPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub cameras: Vec<Camera>,
    /// Camera capture time per frame, seconds.
    pub timestamps: Vec<f64>,
    /// Synchronized sweeps, at most one per frame, ordered by frame.
    pub lidar: Vec<LidarFrame>,
    pub boxes: Vec<BoundingBox>,
    pub images: Vec<Image>,
    pub actor_count: usize,
    pub sync_tolerance: f64,
}

impl SceneBundle {
    pub fn frame_count(&self) -> usize {
        self.cameras.len()
    }

    pub fn lidar_for_frame(&self, frame: usize) -> Option<&LidarFrame> {
        self.lidar.iter().find(|l| l.frame_index == frame)
    }

    pub fn box_for(&self, actor: usize, frame: usize) -> Option<&BoundingBox> {
        self.boxes
            .iter()
            .find(|b| b.actor_id == actor && b.frame_index == frame)
    }

    pub fn total_points(&self) -> usize {
        self.lidar.iter().map(|l| l.points.len()).sum()
    }

    /// Keeps the listed frames, which must strictly increase, renumbering sweeps and boxes.
    pub fn select_frames(&self, frames: &[usize]) -> Result<SceneBundle> {
        let n = self.cameras.len();
        if let Some(&bad) = frames.iter().find(|&&f| f >= n) {
            return Err(Error::validation("frames", format!("frame {bad} out of range for {n} frames")));
        }
        if frames.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("frames", "frame indices must strictly increase"));
        }
        let slot = |f: usize| frames.iter().position(|&g| g == f);
        let lidar = self
            .lidar
            .iter()
            .filter_map(|l| {
                slot(l.frame_index).map(|k| LidarFrame {
                    frame_index: k,
                    ..l.clone()
                })
            })
            .collect();
        let boxes = self
            .boxes
            .iter()
            .filter_map(|b| {
                slot(b.frame_index).map(|k| BoundingBox {
                    frame_index: k,
                    ..*b
                })
            })
            .collect();
        let out = SceneBundle {
            cameras: frames.iter().map(|&f| self.cameras[f]).collect(),
            timestamps: frames.iter().map(|&f| self.timestamps[f]).collect(),
            lidar,
            boxes,
            images: frames.iter().map(|&f| self.images[f].clone()).collect(),
            actor_count: self.actor_count,
            sync_tolerance: self.sync_tolerance,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cameras.len();
        if self.timestamps.len() != n {
            return Err(Error::validation(
                "timestamps",
                format!("{} entries for {} frames", self.timestamps.len(), n),
            ));
        }
        if self.images.len() != n {
            return Err(Error::validation(
                "images",
                format!("{} entries for {} frames", self.images.len(), n),
            ));
        }
        for (i, cam) in self.cameras.iter().enumerate() {
            cam.validate().map_err(|e| Error::validation(format!("cameras[{i}]"), e.to_string()))?;
            let img = &self.images[i];
            if img.width != cam.width || img.height != cam.height {
                return Err(Error::validation(
                    format!("images[{i}]"),
                    format!(
                        "{}x{} image for a {}x{} camera",
                        img.width, img.height, cam.width, cam.height
                    ),
                ));
            }
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("timestamps", "camera timestamps must strictly increase"));
        }
        for w in self.lidar.windows(2) {
            if w[1].frame_index <= w[0].frame_index || w[1].timestamp <= w[0].timestamp {
                return Err(Error::validation(
                    "lidar",
                    "sweeps must be ordered by frame with increasing timestamps",
                ));
            }
        }
        for l in &self.lidar {
            if l.frame_index >= n {
                return Err(Error::validation(
                    "lidar.frame_index",
                    format!("{} >= frame_count {}", l.frame_index, n),
                ));
            }
            if let Some(p) = l.points.iter().find(|p| !(0.0..=1.0).contains(&p.intensity)) {
                return Err(Error::validation(
                    "lidar.intensity",
                    format!("{} outside [0, 1]", p.intensity),
                ));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.frame_index >= n {
                return Err(Error::validation(
                    format!("boxes[{i}].frame_index"),
                    format!("{} >= frame_count {}", b.frame_index, n),
                ));
            }
            if b.actor_id >= self.actor_count {
                return Err(Error::validation(
                    format!("boxes[{i}].actor_id"),
                    format!("{} >= actor_count {}", b.actor_id, self.actor_count),
                ));
            }
            if b.half_extents.iter().any(|&h| !(h > 0.0)) {
                return Err(Error::validation(
                    format!("boxes[{i}].half_extents"),
                    "must be positive",
                ));
            }
            b.pose
                .validate()
                .map_err(|e| Error::validation(format!("boxes[{i}].rotation"), e.to_string()))?;
        }
        Ok(())
    }
}

/// Assigns each sweep to the camera frame nearest in time. Sweeps farther
/// than `tolerance` from every camera are dropped; when several sweeps land
/// on one frame the closest is kept (earliest on ties).
pub fn synchronize(camera_times: &[f64], sweeps: Vec<LidarSweep>, tolerance: f64) -> Vec<LidarFrame> {
    let mut best: Vec<Option<(f64, LidarSweep)>> = vec![None; camera_times.len()];
    for sweep in sweeps {
        let nearest = camera_times
            .iter()
            .enumerate()
            .map(|(i, &t)| (i, (t - sweep.timestamp).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let Some((frame, dt)) = nearest else { continue };
        if dt > tolerance {
            continue;
        }
        match &best[frame] {
            Some((prev, _)) if *prev <= dt => {}
            _ => best[frame] = Some((dt, sweep)),
        }
    }
    best.into_iter()
        .enumerate()
        .filter_map(|(frame_index, s)| {
            s.map(|(_, sweep)| LidarFrame {
                frame_index,
                timestamp: sweep.timestamp,
                points: sweep.points,
            })
        })
        .collect()
}

/// Partition of one frame's LiDAR points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointSplit {
    /// World-frame points outside every actor box.
    pub background: Vec<LidarPoint>,
    /// Per-actor points in box-local coordinates, indexed by actor id.
    pub actors: Vec<Vec<LidarPoint>>,
}

/// Splits a frame's points into background and per-actor clouds. Points in
/// overlapping boxes go to the lowest actor id.
pub fn split_points(bundle: &SceneBundle, frame_index: usize) -> Result<PointSplit> {
    if frame_index >= bundle.frame_count() {
        return Err(Error::Argument(format!(
            "frame {frame_index} out of range for {} frames",
            bundle.frame_count()
        )));
    }
    let mut boxes: Vec<&BoundingBox> = bundle
        .boxes
        .iter()
        .filter(|b| b.frame_index == frame_index)
        .collect();
    boxes.sort_by_key(|b| b.actor_id);
    let inverses: Vec<(usize, Pose, Vector3<f64>)> = boxes
        .iter()
        .map(|b| (b.actor_id, b.pose.inverse(), b.half_extents))
        .collect();

    let mut split = PointSplit {
        background: Vec::new(),
        actors: vec![Vec::new(); bundle.actor_count],
    };
    let Some(frame) = bundle.lidar_for_frame(frame_index) else {
        return Ok(split);
    };
    for p in &frame.points {
        let hit = inverses.iter().find_map(|(id, inv, half)| {
            let local = inv.transform_point(&p.position);
            (0..3)
                .all(|k| local[k].abs() <= half[k])
                .then_some((*id, local))
        });
        match hit {
            Some((id, local)) => split.actors[id].push(LidarPoint {
                position: local,
                intensity: p.intensity,
            }),
            None => split.background.push(*p),
        }
    }
    Ok(split)
}

/// Box-local actor clouds accumulated over the whole sequence.
pub fn actor_clouds(bundle: &SceneBundle) -> Result<Vec<Vec<LidarPoint>>> {
    let mut clouds = vec![Vec::new(); bundle.actor_count];
    for frame in 0..bundle.frame_count() {
        let split = split_points(bundle, frame)?;
        for (cloud, pts) in clouds.iter_mut().zip(split.actors) {
            cloud.extend(pts);
        }
    }
    Ok(clouds)
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaJson {
    frame_count: usize,
    actor_count: usize,
    sync_tolerance_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lidar_timestamps: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct CameraJson {
    pub rotation: Vec<f64>,
    pub translation: Vec<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub timestamp: f64,
}

impl CameraJson {
    pub(crate) fn from_camera(cam: &Camera, timestamp: f64) -> Self {
        Self {
            rotation: cam.pose.rotation_row_major().to_vec(),
            translation: cam.pose.translation.iter().copied().collect(),
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            timestamp,
        }
    }

    pub(crate) fn to_camera(&self) -> Result<Camera> {
        Ok(Camera {
            pose: Pose::from_row_major(&self.rotation, &self.translation)?,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxJson {
    actor_id: usize,
    frame_index: usize,
    rotation: Vec<f64>,
    translation: Vec<f64>,
    half_extents: Vec<f64>,
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::format(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn frame_file_name(index: usize, ext: &str) -> String {
    format!("{index:06}.{ext}")
}

pub fn encode_lidar(points: &[LidarPoint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + points.len() * 16);
    out.extend_from_slice(LIDAR_MAGIC);
    out.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        for v in [p.position.x, p.position.y, p.position.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_lidar(bytes: &[u8], source: &Path) -> Result<Vec<LidarPoint>> {
    if bytes.len() < 12 || &bytes[..4] != LIDAR_MAGIC {
        return Err(Error::format(source, "missing LPC1 magic"));
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != count.saturating_mul(16) {
        return Err(Error::format(
            source,
            format!("header says {count} points but payload has {} bytes", body.len()),
        ));
    }
    let f = |i: usize| f64::from(f32::from_le_bytes(body[i..i + 4].try_into().expect("4 bytes")));
    Ok((0..count)
        .map(|k| {
            let o = k * 16;
            LidarPoint::new(f(o), f(o + 4), f(o + 8), f(o + 12))
        })
        .collect())
}

/// Reads and validates a bundle directory.
pub fn load_bundle(dir: &Path) -> Result<SceneBundle> {
    let meta: MetaJson = read_json(&dir.join("meta.json"))?;
    let cameras_path = dir.join("cameras.json");
    let cams: Vec<CameraJson> = read_json(&cameras_path)?;
    if cams.len() != meta.frame_count {
        return Err(Error::validation(
            "cameras",
            format!("{} cameras for frame_count {}", cams.len(), meta.frame_count),
        ));
    }
    let mut cameras = Vec::with_capacity(cams.len());
    for (i, c) in cams.iter().enumerate() {
        let cam = c
            .to_camera()
            .map_err(|e| Error::validation(format!("cameras[{i}]"), e.to_string()))?;
        cameras.push(cam);
    }
    let timestamps: Vec<f64> = cams.iter().map(|c| c.timestamp).collect();

    let boxes_path = dir.join("boxes.json");
    let raw_boxes: Vec<BoxJson> = if boxes_path.exists() {
        read_json(&boxes_path)?
    } else {
        Vec::new()
    };
    let mut boxes = Vec::with_capacity(raw_boxes.len());
    for (i, b) in raw_boxes.iter().enumerate() {
        let pose = Pose::from_row_major(&b.rotation, &b.translation)
            .map_err(|e| Error::validation(format!("boxes[{i}].rotation"), e.to_string()))?;
        if b.half_extents.len() != 3 {
            return Err(Error::format(&boxes_path, format!("boxes[{i}].half_extents needs 3 values")));
        }
        boxes.push(BoundingBox {
            pose,
            half_extents: Vector3::from_column_slice(&b.half_extents),
            actor_id: b.actor_id,
            frame_index: b.frame_index,
        });
    }

    let lidar_dir = dir.join("lidar");
    let sweep_count = match &meta.lidar_timestamps {
        Some(ts) => ts.len(),
        None => (0..)
            .take_while(|&k| lidar_dir.join(frame_file_name(k, "bin")).exists())
            .count(),
    };
    let mut sweeps = Vec::with_capacity(sweep_count);
    for k in 0..sweep_count {
        let path = lidar_dir.join(frame_file_name(k, "bin"));
        let bytes = fs::read(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        let points = decode_lidar(&bytes, &path)?;
        let timestamp = match &meta.lidar_timestamps {
            Some(ts) => ts[k],
            None => *timestamps.get(k).ok_or_else(|| {
                Error::format(&path, "sweep without timestamp has no matching camera")
            })?,
        };
        sweeps.push(LidarSweep { timestamp, points });
    }
    let lidar = synchronize(&timestamps, sweeps, meta.sync_tolerance_s);

    let mut images = Vec::with_capacity(meta.frame_count);
    for i in 0..meta.frame_count {
        let path: PathBuf = dir.join("images").join(frame_file_name(i, "ppm"));
        images.push(Image::read_ppm(&path).map_err(|e| match e {
            Error::Io(io) => Error::format(&path, io.to_string()),
            other => other,
        })?);
    }

    let bundle = SceneBundle {
        cameras,
        timestamps,
        lidar,
        boxes,
        images,
        actor_count: meta.actor_count,
        sync_tolerance: meta.sync_tolerance_s,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes a bundle in the directory format read by [`load_bundle`].
pub fn write_bundle(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("lidar"))?;
    fs::create_dir_all(dir.join("images"))?;
    let meta = MetaJson {
        frame_count: bundle.frame_count(),
        actor_count: bundle.actor_count,
        sync_tolerance_s: bundle.sync_tolerance,
        lidar_timestamps: Some(bundle.lidar.iter().map(|l| l.timestamp).collect()),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    let cams: Vec<CameraJson> = bundle
        .cameras
        .iter()
        .zip(&bundle.timestamps)
        .map(|(c, &t)| CameraJson::from_camera(c, t))
        .collect();
    write_json(&dir.join("cameras.json"), &cams)?;
    let boxes: Vec<BoxJson> = bundle
        .boxes
        .iter()
        .map(|b| BoxJson {
            actor_id: b.actor_id,
            frame_index: b.frame_index,
            rotation: b.pose.rotation_row_major().to_vec(),
            translation: b.pose.translation.iter().copied().collect(),
            half_extents: b.half_extents.iter().copied().collect(),
        })
        .collect();
    write_json(&dir.join("boxes.json"), &boxes)?;
    for (k, frame) in bundle.lidar.iter().enumerate() {
        fs::write(
            dir.join("lidar").join(frame_file_name(k, "bin")),
            encode_lidar(&frame.points),
        )?;
    }
    for (i, img) in bundle.images.iter().enumerate() {
        img.write_ppm(&dir.join("images").join(frame_file_name(i, "ppm")))?;
    }
    Ok(())
}
