//! Little-endian binary file formats and key=value text formats.
//!
//! Magic headers are exactly 16 bytes. The flow file reuses the grid
//! format (3 channels plus validity).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{CameraIntrinsics, PointImage, RawCloud};
use crate::tensor::Tensor;

pub const CLOUD_MAGIC: &[u8; 16] = b"DGSF_CLOUD_V1\0\0\0";
pub const GRID_MAGIC: &[u8; 16] = b"DGSF_GRID_V1\0\0\0\0";
pub const IMG_MAGIC: &[u8; 16] = b"DGSF_IMG_V1\0\0\0\0\0";
pub const WTS_MAGIC: &[u8; 16] = b"DGSF_WTS_V1\0\0\0\0\0";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(4 * n)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(())
    }
}

fn expect_magic(r: &mut Reader, magic: &[u8; 16]) -> Result<()> {
    if r.take(16)? != magic {
        return Err(Error::Format("bad magic header".into()));
    }
    Ok(())
}

// ---- cloud ----

pub fn write_cloud(path: &Path, cloud: &RawCloud) -> Result<()> {
    let mut out = Vec::with_capacity(20 + cloud.points.len() * 12);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&(cloud.points.len() as u32).to_le_bytes());
    for p in &cloud.points {
        for &c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_cloud(path: &Path) -> Result<RawCloud> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    expect_magic(&mut r, CLOUD_MAGIC)?;
    let n = r.u32()? as usize;
    let flat = r.f32s(n * 3)?;
    r.done()?;
    Ok(RawCloud::new(
        flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    ))
}

// ---- grid (point image / flow) ----

pub fn write_grid(path: &Path, img: &PointImage) -> Result<()> {
    let mut out = Vec::with_capacity(24 + img.n_cells() * 13);
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&(img.h as u32).to_le_bytes());
    out.extend_from_slice(&(img.w as u32).to_le_bytes());
    for &c in img.coords_flat() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for &b in img.valid_mask() {
        out.push(b as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<PointImage> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    expect_magic(&mut r, GRID_MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let coords = r.f32s(h * w * 3)?;
    let valid: Vec<bool> = r.take(h * w)?.iter().map(|&b| b != 0).collect();
    r.done()?;
    PointImage::from_parts(h, w, coords, valid)
}

/// Flow grids reuse the grid format; validity marks supervised cells.
/// Unlike point images, flow vectors at invalid cells are zeroed but a
/// zero vector at a valid cell is meaningful, so we store as-is.
pub fn write_flow(path: &Path, h: usize, w: usize, flow: &[f32], valid: &[bool]) -> Result<()> {
    if flow.len() != h * w * 3 || valid.len() != h * w {
        return Err(Error::Shape("flow buffer sizes".into()));
    }
    let mut out = Vec::with_capacity(24 + h * w * 13);
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for &c in flow {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for &b in valid {
        out.push(b as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_flow(path: &Path) -> Result<(usize, usize, Vec<f32>, Vec<bool>)> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    expect_magic(&mut r, GRID_MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let flow = r.f32s(h * w * 3)?;
    let valid: Vec<bool> = r.take(h * w)?.iter().map(|&b| b != 0).collect();
    r.done()?;
    Ok((h, w, flow, valid))
}

// ---- image ----

pub fn write_image(path: &Path, h: usize, w: usize, rgb: &[f32]) -> Result<()> {
    if rgb.len() != h * w * 3 {
        return Err(Error::Shape("rgb buffer size".into()));
    }
    let mut out = Vec::with_capacity(24 + rgb.len() * 4);
    out.extend_from_slice(IMG_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for &c in rgb {
        out.extend_from_slice(&c.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    expect_magic(&mut r, IMG_MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let rgb = r.f32s(h * w * 3)?;
    r.done()?;
    Ok((h, w, rgb))
}

// ---- weights ----

pub fn write_weights(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(WTS_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        out.extend_from_slice(nb);
        let shape = if t.shape().is_empty() { vec![1] } else { t.shape().to_vec() };
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in &shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in tensors {
        for v in t.to_f32() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    expect_magic(&mut r, WTS_MAGIC)?;
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Format("weight name not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        manifest.push((name, dims));
    }
    let mut out = Vec::with_capacity(count);
    for (name, dims) in manifest {
        let n: usize = dims.iter().product();
        let data = r.f32s(n)?;
        out.push((name, Tensor::from_f32(&dims, &data)?));
    }
    r.done()?;
    Ok(out)
}

// ---- text formats ----

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value", ln + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn write_intrinsics(path: &Path, intr: &CameraIntrinsics) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "fx={}", intr.fx)?;
    writeln!(f, "fy={}", intr.fy)?;
    writeln!(f, "cx={}", intr.cx)?;
    writeln!(f, "cy={}", intr.cy)?;
    writeln!(f, "width={}", intr.width)?;
    writeln!(f, "height={}", intr.height)?;
    Ok(())
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let mut text = String::new();
    fs::File::open(path)?.read_to_string(&mut text)?;
    let kv = parse_kv(&text)?;
    let mut intr = CameraIntrinsics {
        fx: 0.0,
        fy: 0.0,
        cx: 0.0,
        cy: 0.0,
        width: 0,
        height: 0,
    };
    for (k, v) in kv {
        match k.as_str() {
            "fx" => intr.fx = v.parse().map_err(|_| Error::Format("fx".into()))?,
            "fy" => intr.fy = v.parse().map_err(|_| Error::Format("fy".into()))?,
            "cx" => intr.cx = v.parse().map_err(|_| Error::Format("cx".into()))?,
            "cy" => intr.cy = v.parse().map_err(|_| Error::Format("cy".into()))?,
            "width" => intr.width = v.parse().map_err(|_| Error::Format("width".into()))?,
            "height" => intr.height = v.parse().map_err(|_| Error::Format("height".into()))?,
            other => return Err(Error::Format(format!("unknown intrinsics key {other}"))),
        }
    }
    intr.validate()?;
    Ok(intr)
}

/// P6 PPM error map: green below the threshold, red above, black invalid.
pub fn write_ppm_error_map(
    path: &Path,
    h: usize,
    w: usize,
    epe: &[f32],
    valid: &[bool],
    threshold: f32,
) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    for i in 0..h * w {
        if !valid[i] {
            out.extend_from_slice(&[0, 0, 0]);
        } else if epe[i] < threshold {
            out.extend_from_slice(&[40, 200, 40]);
        } else {
            out.extend_from_slice(&[220, 40, 40]);
        }
    }
    fs::write(path, out)?;
    Ok(())
}
