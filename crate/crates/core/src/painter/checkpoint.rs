//! `painter.lpm` codec.
//!
//! Layout (little-endian): `LPPM`, u32 version, u32 config length, config
//! JSON, u32 block count, then per block a u32 name length, the UTF-8
//! name, a u64 value count and the values as f32.

use std::fs;
use std::path::Path;

use super::model::{PainterConfig, PainterModel, ParamBlock};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LPPM";
const VERSION: u32 = 1;

pub fn encode_painter(model: &PainterModel) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.blocks.len() as u32).to_le_bytes());
    for b in &model.blocks {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.data.len() as u64).to_le_bytes());
        for &v in &b.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    file: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.bytes.len() {
            return Err(Error::format(self.file, format!("truncated {what}")));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_painter(bytes: &[u8], file: &Path) -> Result<PainterModel> {
    let mut r = Reader { bytes, file };
    if r.take(4, "header")? != MAGIC {
        return Err(Error::format(file, "bad magic, expected LPPM"));
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(Error::format(file, format!("unsupported version {version}")));
    }
    let n = r.u32("config length")? as usize;
    let config: PainterConfig = serde_json::from_slice(r.take(n, "config")?)
        .map_err(|e| Error::format(file, format!("config: {e}")))?;
    let count = r.u32("block count")? as usize;
    let mut blocks = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32("block name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "block name")?)
            .map_err(|_| Error::format(file, "block name is not UTF-8"))?
            .to_string();
        let values = r.u64("block size")? as usize;
        let raw = r.take(values.checked_mul(4).ok_or_else(|| Error::format(file, "block too large"))?, "block data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        blocks.push(ParamBlock {
            name,
            shape: vec![values],
            data,
        });
    }
    if !r.bytes.is_empty() {
        return Err(Error::format(file, "trailing bytes"));
    }
    PainterModel::from_blocks(config, blocks).map_err(|e| Error::format(file, e.to_string()))
}

pub fn save_painter(model: &PainterModel, path: &Path) -> Result<()> {
    fs::write(path, encode_painter(model)?)?;
    Ok(())
}

pub fn load_painter(path: &Path) -> Result<PainterModel> {
    decode_painter(&fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut cfg = PainterConfig::with_widths([4, 6], 3, 5);
        cfg.fusion_override = Some(0.25);
        let m = PainterModel::new(cfg, 9).unwrap();
        let a = encode_painter(&m).unwrap();
        let back = decode_painter(&a, Path::new("p.lpm")).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(encode_painter(&back).unwrap(), a);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let m = PainterModel::new(PainterConfig::with_widths([4, 6], 3, 5), 9).unwrap();
        let a = encode_painter(&m).unwrap();
        let e = decode_painter(&a[..a.len() - 1], Path::new("cut.lpm")).unwrap_err();
        assert!(e.to_string().contains("cut.lpm"));
        let mut bad = a.clone();
        bad[1] = b'x';
        assert!(decode_painter(&bad, Path::new("m.lpm")).is_err());
    }
}
