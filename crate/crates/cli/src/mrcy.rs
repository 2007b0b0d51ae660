//! MRCY dataset files: little-endian header
//! `"MRCY", version, count, H, W, C, classes` (u32 each after the magic),
//! then `count * C * H * W` f32 pixels and `count` u32 labels.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use simreuse_core::trainer::Dataset;

pub const MAGIC: &[u8; 4] = b"MRCY";
pub const VERSION: u32 = 1;

pub fn write(w: &mut impl Write, data: &Dataset) -> Result<()> {
    w.write_all(MAGIC)?;
    let header = [VERSION as usize, data.len(), data.height, data.width, data.channels, data.classes].map(|v| v as u32);
    for v in header {
        w.write_all(&v.to_le_bytes())?;
    }
    for x in &data.images {
        w.write_all(&x.to_le_bytes())?;
    }
    for l in &data.labels {
        w.write_all(&l.to_le_bytes())?;
    }
    Ok(())
}

pub fn read(r: &mut impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).context("truncated MRCY header")?;
    if &magic != MAGIC {
        bail!("not an MRCY file (magic {:?})", magic);
    }
    let mut header = [0u32; 6];
    for h in &mut header {
        *h = read_u32(r).context("truncated MRCY header")?;
    }
    let [version, count, h, w, c, classes] = header.map(|v| v as usize);
    ensure!(version == VERSION as usize, "MRCY version {} is not supported", version);
    let pixels = count
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .context("MRCY dimensions overflow")?;
    let mut raw = vec![0u8; pixels * 4];
    r.read_exact(&mut raw).context("truncated MRCY pixel data")?;
    let images = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let labels = (0..count).map(|_| read_u32(r)).collect::<std::io::Result<Vec<_>>>().context("truncated MRCY labels")?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    ensure!(rest.is_empty(), "{} trailing bytes after MRCY labels", rest.len());
    Ok(Dataset::new((c, h, w), classes, images, labels)?)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
    read(&mut std::io::BufReader::new(f)).with_context(|| format!("reading dataset {}", path.display()))
}

pub fn save(path: &Path, data: &Dataset) -> Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = std::io::BufWriter::new(f);
    write(&mut w, data)?;
    w.flush()?;
    Ok(())
}
