//! File formats: raw images (`PATIMG01`), sinograms (`PATSIN01`), PGM and CSV.
//!
//! All binary integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::forward::Sinogram;
use crate::geometry::{Image, ImageGrid, ScanGeometry, PIXEL_MAX};

const IMAGE_MAGIC: &[u8; 8] = b"PATIMG01";
const SINOGRAM_MAGIC: &[u8; 8] = b"PATSIN01";

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_magic(r: &mut impl Read, magic: &[u8; 8], what: &str) -> Result<()> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    if &b != magic {
        return Err(Error::Format(format!("not a {what} file")));
    }
    Ok(())
}

pub fn encode_image(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * img.values().len());
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&(img.grid().n_side() as u32).to_le_bytes());
    out.extend_from_slice(&img.grid().extent().to_le_bytes());
    for v in img.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_image(mut bytes: &[u8]) -> Result<Image> {
    let r = &mut bytes;
    read_magic(r, IMAGE_MAGIC, "PATIMG01")?;
    let n_side = read_u32(r)? as usize;
    let extent = read_f64(r)?;
    let grid = ImageGrid::new(n_side, extent).map_err(|e| Error::Format(e.to_string()))?;
    let values = (0..grid.len())
        .map(|_| read_f64(r))
        .collect::<Result<Vec<_>>>()?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after image payload".into()));
    }
    Image::from_values(grid, values)
}

pub fn write_image_raw(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_image(img))?;
    Ok(())
}

pub fn read_image_raw(path: &Path) -> Result<Image> {
    decode_image(&std::fs::read(path)?)
}

/// 8-bit binary PGM of a `rows × cols` array given in row-major order.
/// Values are rounded and clamped to `0..=255`.
pub fn encode_pgm(rows: usize, cols: usize, row_major: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(
        row_major
            .iter()
            .map(|v| v.round().clamp(0.0, PIXEL_MAX) as u8),
    );
    out
}

/// Image as PGM in display orientation (row 0 at the top).
pub fn image_to_pgm(img: &Image) -> Vec<u8> {
    let n = img.grid().n_side();
    let mut row_major = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            row_major.push(img.get(row, col));
        }
    }
    encode_pgm(n, n, &row_major)
}

/// Sinogram as PGM: one image row per angle, linearly rescaled so the
/// maximum maps to 255.
pub fn sinogram_to_pgm(sino: &Sinogram) -> Vec<u8> {
    let max = sino.values().iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { PIXEL_MAX / max } else { 0.0 };
    let scaled: Vec<f64> = sino.values().iter().map(|v| v * scale).collect();
    encode_pgm(sino.scan().n_angles(), sino.scan().n_radii(), &scaled)
}

pub fn encode_sinogram(sino: &Sinogram) -> Vec<u8> {
    let scan = sino.scan();
    let mut out = Vec::new();
    out.extend_from_slice(SINOGRAM_MAGIC);
    out.extend_from_slice(&(scan.n_angles() as u32).to_le_bytes());
    out.extend_from_slice(&(scan.n_radii() as u32).to_le_bytes());
    for v in scan
        .angles()
        .iter()
        .chain(scan.radii())
        .chain(sino.values())
    {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_sinogram(mut bytes: &[u8]) -> Result<Sinogram> {
    let r = &mut bytes;
    read_magic(r, SINOGRAM_MAGIC, "PATSIN01")?;
    let n = read_u32(r)? as usize;
    let m = read_u32(r)? as usize;
    let angles = (0..n).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
    let radii = (0..m).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
    let values = (0..n * m)
        .map(|_| read_f64(r))
        .collect::<Result<Vec<_>>>()?;
    if !r.is_empty() {
        return Err(Error::Format(
            "trailing bytes after sinogram payload".into(),
        ));
    }
    let scan = ScanGeometry::new(angles, radii).map_err(|e| Error::Format(e.to_string()))?;
    Sinogram::new(scan, values)
}

pub fn write_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    std::fs::write(path, encode_sinogram(sino))?;
    Ok(())
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    decode_sinogram(&std::fs::read(path)?)
}

/// One CSV row per angle, one column per radius.
pub fn sinogram_to_csv(sino: &Sinogram) -> String {
    let mut out = String::new();
    for i in 0..sino.scan().n_angles() {
        let line: Vec<String> = sino.block(i).iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
