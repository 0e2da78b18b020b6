//! Little-endian binary grid format.
//!
//! Layout: magic `RGRD`, `u32` version, three `u64` resolutions, six `f64`
//! bounds (min xyz, max xyz), then every voxel's raw density followed by
//! every voxel's raw RGB triple.

use std::io::{Read, Write};

use super::RadianceGrid;
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};

pub const GRID_MAGIC: [u8; 4] = *b"RGRD";
pub const GRID_VERSION: u32 = 1;

const MAX_VOXELS: u64 = 1 << 30;

pub fn write_grid<W: Write>(grid: &RadianceGrid, mut w: W) -> Result<()> {
    w.write_all(&GRID_MAGIC)?;
    w.write_all(&GRID_VERSION.to_le_bytes())?;
    for n in grid.resolution() {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    let b = grid.bounds();
    for v in [b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(grid.voxel_count() * 32);
    for v in grid.raw() {
        buf.extend_from_slice(&v[0].to_le_bytes());
    }
    for v in grid.raw() {
        for c in &v[1..] {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_grid<R: Read>(mut r: R) -> Result<RadianceGrid> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != GRID_MAGIC {
        return Err(Error::Format("not a radiance grid file (bad magic)".into()));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != GRID_VERSION {
        return Err(Error::Format(format!("unsupported grid version {version}")));
    }
    let mut res = [0usize; 3];
    let mut total: u64 = 1;
    for n in res.iter_mut() {
        let v = read_u64(&mut r)?;
        total = total.saturating_mul(v);
        *n = v as usize;
    }
    if total == 0 || total > MAX_VOXELS {
        return Err(Error::Format(format!("implausible grid resolution {res:?}")));
    }
    let mut bv = [0.0; 6];
    for v in bv.iter_mut() {
        *v = read_f64(&mut r)?;
    }
    let bounds = Aabb::new(Vec3::new(bv[0], bv[1], bv[2]), Vec3::new(bv[3], bv[4], bv[5]))
        .map_err(|e| Error::Format(format!("bad bounds: {e}")))?;
    let mut grid = RadianceGrid::new(res, bounds)?;
    let n = grid.voxel_count();
    let mut buf = vec![0u8; n * 32];
    r.read_exact(&mut buf)?;
    let f = |i: usize| f64::from_le_bytes(buf[i * 8..i * 8 + 8].try_into().unwrap());
    let data = grid.raw_mut();
    for (i, v) in data.iter_mut().enumerate() {
        v[0] = f(i);
        v[1] = f(n + 3 * i);
        v[2] = f(n + 3 * i + 1);
        v[3] = f(n + 3 * i + 2);
    }
    Ok(grid)
}
