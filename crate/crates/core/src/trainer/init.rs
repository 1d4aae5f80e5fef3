//! Gaussian initialization from LiDAR.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{actor_clouds, split_points, LidarPoint, SceneBundle};
use crate::splat::{Gaussian, GaussianScene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Starting voxel edge (meters) for downsampling.
    pub voxel_size: f64,
    /// Cap on background primitives; the voxel grows until it fits.
    pub max_background: usize,
    /// Cap on primitives per actor.
    pub max_per_actor: usize,
    /// Neighbors averaged for the isotropic scale.
    pub neighbors: usize,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.2,
            max_background: 20_000,
            max_per_actor: 1_500,
            neighbors: 3,
            opacity: 0.5,
            color: [0.5; 3],
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) || self.neighbors == 0 || !(self.opacity > 0.0 && self.opacity < 1.0) {
            return Err(Error::validation(
                "init",
                "voxel_size > 0, neighbors >= 1 and opacity in (0, 1) required",
            ));
        }
        Ok(())
    }
}

type Key = (i64, i64, i64);

fn key(p: &Vector3<f64>, cell: f64) -> Key {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

/// Voxel-grid centroids, grown until at most `max` remain. Output order
/// follows the voxel keys, so it is independent of input order.
pub fn voxel_downsample(points: &[LidarPoint], voxel: f64, max: usize) -> (Vec<Vector3<f64>>, f64) {
    let mut cell = voxel;
    loop {
        let mut acc: BTreeMap<Key, (Vector3<f64>, usize)> = BTreeMap::new();
        for p in points {
            let e = acc.entry(key(&p.position, cell)).or_insert((Vector3::zeros(), 0));
            e.0 += p.position;
            e.1 += 1;
        }
        if acc.len() <= max.max(1) {
            return (acc.into_values().map(|(s, n)| s / n as f64).collect(), cell);
        }
        cell *= 1.25;
    }
}

/// Mean distance to the `k` nearest neighbors of each point, searched in
/// a hash grid; isolated points fall back to the grid cell size.
pub fn mean_neighbor_distance(points: &[Vector3<f64>], k: usize, cell: f64) -> Vec<f64> {
    let mut grid: BTreeMap<Key, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p, cell)).or_default().push(i);
    }
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (cx, cy, cz) = key(p, cell);
            for reach in 1..=3i64 {
                let mut d: Vec<f64> = Vec::new();
                for dx in -reach..=reach {
                    for dy in -reach..=reach {
                        for dz in -reach..=reach {
                            if let Some(list) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                                d.extend(list.iter().filter(|&&j| j != i).map(|&j| (points[j] - p).norm()));
                            }
                        }
                    }
                }
                // Only distances within `reach` cells are guaranteed complete.
                d.retain(|&v| v <= reach as f64 * cell);
                if d.len() >= k {
                    d.sort_by(f64::total_cmp);
                    return d[..k].iter().sum::<f64>() / k as f64;
                }
            }
            cell
        })
        .collect()
}

fn seed_gaussians(points: &[Vector3<f64>], cell: f64, cfg: &InitConfig) -> Vec<Gaussian> {
    let scales = mean_neighbor_distance(points, cfg.neighbors, cell);
    points
        .iter()
        .zip(scales)
        .map(|(p, s)| Gaussian::isotropic([p.x, p.y, p.z], s.max(1e-3), cfg.opacity, cfg.color))
        .collect()
}

/// Background primitives from every frame's background points and actor
/// primitives from the box-local actor clouds.
pub fn init_from_lidar(bundle: &SceneBundle, cfg: &InitConfig) -> Result<GaussianScene> {
    cfg.validate()?;
    let mut background: Vec<LidarPoint> = Vec::new();
    for f in 0..bundle.frame_count() {
        background.extend(split_points(bundle, f)?.background);
    }
    let (bg_pts, bg_cell) = voxel_downsample(&background, cfg.voxel_size, cfg.max_background);
    let actors = actor_clouds(bundle)?
        .iter()
        .map(|cloud| {
            let (pts, cell) = voxel_downsample(cloud, 0.5 * cfg.voxel_size, cfg.max_per_actor);
            seed_gaussians(&pts, cell, cfg)
        })
        .collect();
    Ok(GaussianScene {
        background: seed_gaussians(&bg_pts, bg_cell, cfg),
        actors,
        actor_poses: GaussianScene::poses_from_bundle(bundle),
    })
}
