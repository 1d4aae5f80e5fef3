//! `scene.gsb` checkpoint codec.
//!
//! Layout (little-endian): `LPGS`, u32 version, u64 background count,
//! u64 actor count, background primitives, then per actor a u64 count and
//! its primitives. Each primitive is 14 f32 in optimizer space
//! (mean 3, log-scale 3, quaternion 4, opacity logit 1, color 3).
//! Actor poses are not stored; they come from the bundle's boxes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::gaussian::{Gaussian, GaussianScene};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LPGS";
const VERSION: u32 = 1;

pub fn write_scene(scene: &GaussianScene, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(scene.background.len() as u64).to_le_bytes())?;
    w.write_all(&(scene.actors.len() as u64).to_le_bytes())?;
    let put = |gs: &[Gaussian], w: &mut dyn Write| -> Result<()> {
        let mut buf = Vec::with_capacity(gs.len() * Gaussian::PARAMS * 4);
        for g in gs {
            for v in g.to_array() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    };
    put(&scene.background, &mut w)?;
    for actor in &scene.actors {
        w.write_all(&(actor.len() as u64).to_le_bytes())?;
        put(actor, &mut w)?;
    }
    Ok(())
}

/// Decodes a checkpoint; `file` is used in error messages only. The
/// returned scene has no actor poses.
pub fn read_scene(bytes: &[u8], file: &Path) -> Result<GaussianScene> {
    let mut r = bytes;
    let err = |m: &str| Error::format(file, m);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| err("truncated header"))?;
    if &magic != MAGIC {
        return Err(err("bad magic, expected LPGS"));
    }
    let version = read_u32(&mut r).ok_or_else(|| err("truncated header"))?;
    if version != VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let n_bg = read_u64(&mut r).ok_or_else(|| err("truncated header"))?;
    let n_actors = read_u64(&mut r).ok_or_else(|| err("truncated header"))?;
    let take = |n: u64, r: &mut &[u8], what: &str| -> Result<Vec<Gaussian>> {
        let need = (n as usize)
            .checked_mul(Gaussian::PARAMS * 4)
            .filter(|&b| b <= r.len())
            .ok_or_else(|| err(&format!("truncated {what} primitives")))?;
        let (head, tail) = r.split_at(need);
        *r = tail;
        Ok(head
            .chunks_exact(Gaussian::PARAMS * 4)
            .map(|c| {
                let mut a = [0.0; Gaussian::PARAMS];
                for (v, b) in a.iter_mut().zip(c.chunks_exact(4)) {
                    *v = f32::from_le_bytes(b.try_into().unwrap()) as f64;
                }
                Gaussian::from_array(&a)
            })
            .collect())
    };
    let background = take(n_bg, &mut r, "background")?;
    let mut actors = Vec::new();
    for k in 0..n_actors {
        let n = read_u64(&mut r).ok_or_else(|| err(&format!("truncated actor {k} header")))?;
        actors.push(take(n, &mut r, &format!("actor {k}"))?);
    }
    if !r.is_empty() {
        return Err(err("trailing bytes"));
    }
    Ok(GaussianScene {
        background,
        actors,
        actor_poses: Vec::new(),
    })
}

pub fn save_scene(scene: &GaussianScene, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_scene(scene, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<GaussianScene> {
    let bytes = fs::read(path)?;
    read_scene(&bytes, path)
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Option<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).ok()?;
    Some(u64::from_le_bytes(b))
}
