//! `KSV1` frame files: magic, three little-endian `u32` dimensions, then a
//! row-major `f32` payload. Image stacks store `(frames, height, width)`;
//! feature sequences store `(frames, feature_dim, 0)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{expect_magic, read_f32s, read_u32, write_f32s, write_u32};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KSV1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameShape {
    Image { height: usize, width: usize },
    Features { dim: usize },
}

impl FrameShape {
    pub fn frame_len(self) -> usize {
        match self {
            FrameShape::Image { height, width } => height * width,
            FrameShape::Features { dim } => dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameFile {
    pub frames: usize,
    pub shape: FrameShape,
    pub data: Vec<f32>,
}

impl FrameFile {
    pub fn new(shape: FrameShape, data: Vec<f32>) -> Result<Self> {
        let n = shape.frame_len();
        if n == 0 || data.len() % n != 0 {
            return Err(Error::Shape { expected: format!("multiple of {n}"), actual: data.len().to_string() });
        }
        Ok(Self { frames: data.len() / n, shape, data })
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.shape.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        let (a, b) = match self.shape {
            FrameShape::Image { height, width } => (height, width),
            FrameShape::Features { dim } => (dim, 0),
        };
        write_u32(w, self.frames as u32)?;
        write_u32(w, a as u32)?;
        write_u32(w, b as u32)?;
        write_f32s(w, &self.data)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        expect_magic(r, MAGIC)?;
        let frames = read_u32(r)? as usize;
        let a = read_u32(r)? as usize;
        let b = read_u32(r)? as usize;
        let shape = if b == 0 { FrameShape::Features { dim: a } } else { FrameShape::Image { height: a, width: b } };
        let n = frames
            .checked_mul(shape.frame_len())
            .filter(|&n| n < 1 << 31)
            .ok_or_else(|| Error::Format(format!("implausible frame file size {frames}x{a}x{b}")))?;
        let data = read_f32s(r, n)?;
        Ok(Self { frames, shape, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::at(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::at(path, e))?;
        w.flush().map_err(|e| Error::at(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::at(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_kinds() {
        for shape in [FrameShape::Image { height: 2, width: 3 }, FrameShape::Features { dim: 4 }] {
            let data: Vec<f32> = (0..12).map(|v| v as f32 * 0.25).collect();
            let f = FrameFile::new(shape, data).unwrap();
            let mut buf = Vec::new();
            f.write_to(&mut buf).unwrap();
            assert_eq!(&buf[..4], MAGIC);
            assert_eq!(buf.len(), 16 + 12 * 4);
            assert_eq!(FrameFile::read_from(&mut buf.as_slice()).unwrap(), f);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"KSV2\0\0\0\0\0\0\0\0\0\0\0\0".to_vec();
        assert!(FrameFile::read_from(&mut buf.as_slice()).is_err());
    }
}
