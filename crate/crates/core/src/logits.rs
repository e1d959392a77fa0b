//! Per-pixel class scores and the SGLT tensor file format.
//!
//! SGLT layout, all integers and floats little-endian:
//!
//! ```text
//! offset 0   magic   b"SGLT"
//! offset 4   u32     version (1)
//! offset 8   u32     height
//! offset 12  u32     width
//! offset 16  u32     classes
//! offset 20  f32 * classes * height * width, class-major planes, rows within
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;

pub const SGLT_MAGIC: &[u8; 4] = b"SGLT";
pub const SGLT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Planar `classes x height x width` score tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    width: u32,
    height: u32,
    classes: u32,
    data: Vec<f32>,
}

impl LogitMap {
    pub fn new(width: u32, height: u32, classes: u32, data: Vec<f32>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Argument("logit map needs at least one class".into()));
        }
        let n = classes as usize * height as usize * width as usize;
        if data.len() != n {
            return Err(Error::Argument(format!(
                "logit data has {} values, expected {classes}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            classes,
            data,
        })
    }

    pub fn zeros(width: u32, height: u32, classes: u32) -> Self {
        Self::new(
            width,
            height,
            classes,
            vec![0.0; classes as usize * height as usize * width as usize],
        )
        .expect("consistent shape")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn classes(&self) -> u32 {
        self.classes
    }

    pub fn shape(&self) -> (u32, u32, u32) {
        (self.width, self.height, self.classes)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane_len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn plane(&self, class: u32) -> &[f32] {
        let n = self.plane_len();
        &self.data[class as usize * n..(class as usize + 1) * n]
    }

    pub fn plane_mut(&mut self, class: u32) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[class as usize * n..(class as usize + 1) * n]
    }

    pub fn get(&self, class: u32, x: u32, y: u32) -> f32 {
        self.plane(class)[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, class: u32, x: u32, y: u32, v: f32) {
        let w = self.width as usize;
        self.plane_mut(class)[y as usize * w + x as usize] = v;
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            let n = self.plane_len().max(1);
            let p = i % n;
            return Err(Error::Data(format!(
                "non-finite logit at class {}, pixel ({}, {})",
                i / n,
                p % self.width.max(1) as usize,
                p / self.width.max(1) as usize
            )));
        }
        Ok(())
    }

    pub fn to_sglt(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(SGLT_MAGIC);
        for v in [SGLT_VERSION, self.height, self.width, self.classes] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_sglt(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != SGLT_MAGIC {
            return Err(Error::Data("not an SGLT file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != SGLT_VERSION {
            return Err(Error::Data(format!("unsupported SGLT version {version}")));
        }
        let (height, width, classes) = (word(8), word(12), word(16));
        let n = classes as u64 * height as u64 * width as u64;
        let expect = HEADER_LEN as u64 + n * 4;
        if bytes.len() as u64 != expect {
            return Err(Error::Data(format!(
                "SGLT payload is {} bytes, header implies {expect}",
                bytes.len()
            )));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let map = Self::new(width, height, classes, data)?;
        map.check_finite()?;
        Ok(map)
    }

    pub fn read_sglt(path: &Path) -> Result<Self> {
        Self::from_sglt(&fsutil::read(path)?)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn write_sglt(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_sglt())
    }
}
