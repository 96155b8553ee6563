//! Raw little-endian float containers.
//!
//! `GHM1`: magic, u32 width, u32 height, u32 kind, u32 reserved, then
//! `width * height * planes` f32 values row-major. Kinds: 0 continuous
//! heatmap, 1 binary heatmap, 2 patch distribution (width = N, height = 1),
//! 3 image (reserved = channel count, channel-last).
//!
//! `GFL1`: magic, u32 width, u32 height, then the fx plane then the fy plane.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const GHM_MAGIC: &[u8; 4] = b"GHM1";
pub const GFL_MAGIC: &[u8; 4] = b"GFL1";

pub const KIND_CONTINUOUS: u32 = 0;
pub const KIND_BINARY: u32 = 1;
pub const KIND_DISTRIBUTION: u32 = 2;
pub const KIND_IMAGE: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GhmHeader {
    pub width: u32,
    pub height: u32,
    pub kind: u32,
    pub reserved: u32,
}

impl GhmHeader {
    fn planes(&self) -> usize {
        if self.kind == KIND_IMAGE {
            self.reserved.max(1) as usize
        } else {
            1
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Container { path: None, msg: msg.into() }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated payload: {e}")))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn write_f32s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_ghm(w: &mut impl Write, header: GhmHeader, values: &[f64]) -> Result<()> {
    let expected = header.width as usize * header.height as usize * header.planes();
    if values.len() != expected {
        return Err(Error::Shape(format!("GHM1 payload {} != {}", values.len(), expected)));
    }
    w.write_all(GHM_MAGIC)?;
    for v in [header.width, header.height, header.kind, header.reserved] {
        w.write_all(&v.to_le_bytes())?;
    }
    write_f32s(w, values)
}

pub fn read_ghm(r: &mut impl Read) -> Result<(GhmHeader, Vec<f64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GHM_MAGIC {
        return Err(bad(format!("expected magic GHM1, found {:?}", magic)));
    }
    let header = GhmHeader {
        width: read_u32(r)?,
        height: read_u32(r)?,
        kind: read_u32(r)?,
        reserved: read_u32(r)?,
    };
    if header.kind > KIND_IMAGE {
        return Err(bad(format!("unknown GHM1 kind {}", header.kind)));
    }
    let n = header.width as usize * header.height as usize * header.planes();
    let values = read_f32s(r, n)?;
    Ok((header, values))
}

pub fn write_gfl(w: &mut impl Write, width: u32, height: u32, fx: &[f64], fy: &[f64]) -> Result<()> {
    let n = width as usize * height as usize;
    if fx.len() != n || fy.len() != n {
        return Err(Error::Shape(format!("GFL1 planes must hold {n} values")));
    }
    w.write_all(GFL_MAGIC)?;
    w.write_all(&width.to_le_bytes())?;
    w.write_all(&height.to_le_bytes())?;
    write_f32s(w, fx)?;
    write_f32s(w, fy)
}

pub fn read_gfl(r: &mut impl Read) -> Result<(u32, u32, Vec<f64>, Vec<f64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GFL_MAGIC {
        return Err(bad(format!("expected magic GFL1, found {:?}", magic)));
    }
    let width = read_u32(r)?;
    let height = read_u32(r)?;
    let n = width as usize * height as usize;
    let fx = read_f32s(r, n)?;
    let fy = read_f32s(r, n)?;
    Ok((width, height, fx, fy))
}

pub fn write_image(w: &mut impl Write, img: &crate::image::Image) -> Result<()> {
    let header = GhmHeader {
        width: img.width as u32,
        height: img.height as u32,
        kind: KIND_IMAGE,
        reserved: img.channels as u32,
    };
    write_ghm(w, header, &img.data)
}

pub fn read_image(r: &mut impl Read) -> Result<crate::image::Image> {
    let (h, values) = read_ghm(r)?;
    if h.kind != KIND_IMAGE {
        return Err(bad(format!("expected image kind 3, found {}", h.kind)));
    }
    crate::image::Image::from_vec(h.width as usize, h.height as usize, h.planes(), values)
}

pub fn load_image(path: &std::path::Path) -> Result<crate::image::Image> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_image(&mut f).map_err(|e| match e {
        Error::Container { msg, .. } => Error::Container { path: Some(path.to_path_buf()), msg },
        other => other,
    })
}

pub fn save_image(path: &std::path::Path, img: &crate::image::Image) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_image(&mut f, img)?;
    f.flush()?;
    Ok(())
}
