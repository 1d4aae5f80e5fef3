//! Painted novel-view guidance and its on-disk cache.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::lidar::{render_condition, LidarRasterConfig};
use crate::painter::PainterModel;
use crate::scene::{actor_clouds, frame_file_name, read_json, write_json, Camera, CameraJson, SceneBundle};
use crate::splat::{render, GaussianScene, RenderOptions};

/// Anything that maps (artifact, LiDAR condition) to a repaired image.
pub trait GuidancePainter: Sync {
    fn paint_image(&self, artifact: &Image, lidar: &Image) -> Result<Image>;
}

impl GuidancePainter for PainterModel {
    fn paint_image(&self, artifact: &Image, lidar: &Image) -> Result<Image> {
        self.paint(artifact, lidar)
    }
}

/// Returns the artifact unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPainter;

impl GuidancePainter for IdentityPainter {
    fn paint_image(&self, artifact: &Image, _lidar: &Image) -> Result<Image> {
        Ok(artifact.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSample {
    pub camera: Camera,
    pub frame_index: usize,
    pub offset: [f64; 2],
    pub guidance: Image,
    pub lidar: Image,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GuidanceSet {
    pub samples: Vec<GuidanceSample>,
}

impl GuidanceSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes `guidance.json`, `guidance/NNNNNN.ppm` and `lidar/NNNNNN.ppm`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("guidance"))?;
        fs::create_dir_all(dir.join("lidar"))?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for (k, s) in self.samples.iter().enumerate() {
            let name = frame_file_name(k, "ppm");
            s.guidance.write_ppm(&dir.join("guidance").join(&name))?;
            s.lidar.write_ppm(&dir.join("lidar").join(&name))?;
            entries.push(Entry {
                frame_index: s.frame_index,
                offset: s.offset,
                camera: CameraJson::from_camera(&s.camera, 0.0),
                image: name,
            });
        }
        write_json(&dir.join("guidance.json"), &entries)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let entries: Vec<Entry> = read_json(&dir.join("guidance.json"))?;
        let samples = entries
            .into_iter()
            .map(|e| {
                Ok(GuidanceSample {
                    camera: e.camera.to_camera()?,
                    frame_index: e.frame_index,
                    offset: e.offset,
                    guidance: Image::read_ppm(&dir.join("guidance").join(&e.image))?,
                    lidar: Image::read_ppm(&dir.join("lidar").join(&e.image))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    frame_index: usize,
    offset: [f64; 2],
    camera: CameraJson,
    image: String,
}

/// For every frame and offset: shift the camera in its own frame, render
/// the artifact and the LiDAR condition, and paint. Images are stored at
/// 8-bit precision so that the cache reproduces them exactly.
pub fn make_guidance(
    scene: &GaussianScene,
    opts: &RenderOptions,
    bundle: &SceneBundle,
    painter: &dyn GuidancePainter,
    offsets: &[[f64; 2]],
    lidar_cfg: &LidarRasterConfig,
) -> Result<GuidanceSet> {
    let clouds = actor_clouds(bundle)?;
    let jobs: Vec<(usize, [f64; 2])> = (0..bundle.frame_count())
        .flat_map(|f| offsets.iter().map(move |&o| (f, o)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(f, offset)| {
            let camera = bundle.cameras[f].shifted(offset[0], offset[1]);
            let run = || -> Result<GuidanceSample> {
                let artifact = render(scene, f, &camera, opts).image;
                let lidar = render_condition(bundle, &clouds, f, &camera, lidar_cfg)?
                    .to_condition_image(lidar_cfg.near_depth)
                    .quantized();
                let guidance = painter.paint_image(&artifact.quantized(), &lidar)?.quantized();
                Ok(GuidanceSample {
                    camera,
                    frame_index: f,
                    offset,
                    guidance,
                    lidar,
                })
            };
            run().map_err(|e| Error::Frame {
                frame: f,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GuidanceSet { samples })
}
