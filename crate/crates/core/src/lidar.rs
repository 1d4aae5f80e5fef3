//! LiDAR condition images: temporal aggregation of background points,
//! reposing of actor clouds and z-buffered point rasterization.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::{split_points, BoundingBox, Camera, LidarPoint, SceneBundle};

pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_SPLAT_RADIUS: usize = 1;
/// Depth mapped to full brightness in the inverse-depth channel.
pub const DEFAULT_NEAR_DEPTH: f64 = 1.0;

/// Rasterized point cloud. Empty pixels hold depth 0 and intensity 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub intensity: Vec<f64>,
}

impl LidarImage {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            intensity: vec![0.0; width * height],
        }
    }

    pub fn filled_pixels(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    /// Three-channel conditioning image: normalized inverse depth,
    /// intensity and a validity mask.
    pub fn to_condition_image(&self, near: f64) -> Image {
        let mut img = Image::new(self.width, self.height);
        for (i, (&d, &s)) in self.depth.iter().zip(&self.intensity).enumerate() {
            if d > 0.0 {
                let inv = (near / d.max(near)).clamp(0.0, 1.0);
                img.data[3 * i..3 * i + 3].copy_from_slice(&[inv, s, 1.0]);
            }
        }
        img
    }

    /// Grayscale intensity preview.
    pub fn intensity_image(&self) -> Image {
        let mut img = Image::new(self.width, self.height);
        for (i, &s) in self.intensity.iter().enumerate() {
            img.data[3 * i..3 * i + 3].copy_from_slice(&[s, s, s]);
        }
        img
    }

    /// Depth as raw little-endian `f32`, row-major.
    pub fn depth_bytes(&self) -> Vec<u8> {
        self.depth
            .iter()
            .flat_map(|&d| (d as f32).to_le_bytes())
            .collect()
    }
}

/// Union of the background points of the frames in a symmetric window of
/// `window` frames around `frame_index`, clamped to the sequence.
pub fn aggregate_background(
    bundle: &SceneBundle,
    frame_index: usize,
    window: usize,
) -> Result<Vec<LidarPoint>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Argument(format!(
            "temporal window must be odd and positive, got {window}"
        )));
    }
    let n = bundle.frame_count();
    if frame_index >= n {
        return Err(Error::Argument(format!(
            "frame {frame_index} out of range for {n} frames"
        )));
    }
    let half = (window - 1) / 2;
    let lo = frame_index.saturating_sub(half);
    let hi = (frame_index + half).min(n - 1);
    let mut out = Vec::new();
    for f in lo..=hi {
        out.extend(split_points(bundle, f)?.background);
    }
    Ok(out)
}

/// Moves box-local actor points into the world with the box pose.
pub fn place_actor(actor_points: &[LidarPoint], bbox: &BoundingBox) -> Vec<LidarPoint> {
    actor_points
        .iter()
        .map(|p| LidarPoint {
            position: bbox.pose.transform_point(&p.position),
            intensity: p.intensity,
        })
        .collect()
}

struct Splat {
    depth: f64,
    intensity: f64,
    key: [f64; 3],
    u: i64,
    v: i64,
}

fn splat_order(a: &Splat, b: &Splat) -> Ordering {
    a.depth
        .total_cmp(&b.depth)
        .then(a.intensity.total_cmp(&b.intensity))
        .then(a.key[0].total_cmp(&b.key[0]))
        .then(a.key[1].total_cmp(&b.key[1]))
        .then(a.key[2].total_cmp(&b.key[2]))
}

/// Z-buffered point rasterization with square splats of Chebyshev radius
/// `splat_radius`. Equal depths resolve by a total order on point contents,
/// so the result does not depend on input order.
pub fn rasterize_points(points: &[LidarPoint], camera: &Camera, splat_radius: usize) -> LidarImage {
    let (w, h) = (camera.width as i64, camera.height as i64);
    let mut splats: Vec<Splat> = points
        .iter()
        .filter_map(|p| {
            let pc = camera.world_to_camera(&p.position);
            let (u, v) = camera.project(&pc)?;
            let (u, v) = (u.round(), v.round());
            if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
                return None;
            }
            Some(Splat {
                depth: pc.z,
                intensity: p.intensity,
                key: [p.position.x, p.position.y, p.position.z],
                u: u as i64,
                v: v as i64,
            })
        })
        .collect();
    splats.sort_unstable_by(splat_order);

    let mut img = LidarImage::empty(camera.width, camera.height);
    let r = splat_radius as i64;
    for s in &splats {
        for y in (s.v - r).max(0)..=(s.v + r).min(h - 1) {
            for x in (s.u - r).max(0)..=(s.u + r).min(w - 1) {
                let i = (y * w + x) as usize;
                if img.depth[i] == 0.0 {
                    img.depth[i] = s.depth;
                    img.intensity[i] = s.intensity;
                }
            }
        }
    }
    img
}

/// Rasterization settings for condition images.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LidarRasterConfig {
    pub window: usize,
    pub splat_radius: usize,
    pub near_depth: f64,
}

impl Default for LidarRasterConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            splat_radius: DEFAULT_SPLAT_RADIUS,
            near_depth: DEFAULT_NEAR_DEPTH,
        }
    }
}

/// All points visible at `frame_index`: the aggregated background plus each
/// actor's full-sequence cloud placed with its box at that frame.
pub fn frame_points(
    bundle: &SceneBundle,
    actor_clouds: &[Vec<LidarPoint>],
    frame_index: usize,
    window: usize,
) -> Result<Vec<LidarPoint>> {
    let mut pts = aggregate_background(bundle, frame_index, window)?;
    for (actor, cloud) in actor_clouds.iter().enumerate() {
        if let Some(b) = bundle.box_for(actor, frame_index) {
            pts.extend(place_actor(cloud, b));
        }
    }
    Ok(pts)
}

/// LiDAR condition for an arbitrary camera at `frame_index`.
pub fn render_condition(
    bundle: &SceneBundle,
    actor_clouds: &[Vec<LidarPoint>],
    frame_index: usize,
    camera: &Camera,
    cfg: &LidarRasterConfig,
) -> Result<LidarImage> {
    let pts = frame_points(bundle, actor_clouds, frame_index, cfg.window)?;
    Ok(rasterize_points(&pts, camera, cfg.splat_radius))
}
