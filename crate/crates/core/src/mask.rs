//! Single-channel 8-bit class-index masks and their PNG encoding.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::label_space::LabelSpace;

/// Row-major class-index image tagged with the label space it lives in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
    space: String,
}

impl MaskImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>, space: impl Into<String>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::Argument(format!(
                "mask data has {} pixels, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            space: space.into(),
        })
    }

    pub fn filled(width: u32, height: u32, value: u8, space: impl Into<String>) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
            space: space.into(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn space(&self) -> &str {
        &self.space
    }

    pub fn with_space(mut self, space: impl Into<String>) -> Self {
        self.space = space.into();
        self
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub(crate) fn coord(&self, index: usize) -> (u32, u32) {
        let w = self.width.max(1) as usize;
        ((index % w) as u32, (index / w) as u32)
    }

    /// First pixel that is neither a class of `space` nor its void id.
    pub fn check_valid(&self, space: &LabelSpace, context: &str) -> Result<()> {
        let mut allowed = [false; 256];
        for c in space.classes() {
            if c.id < 256 {
                allowed[c.id as usize] = true;
            }
        }
        if let Some(i) = self.data.iter().position(|&v| !allowed[v as usize]) {
            let (x, y) = self.coord(i);
            return Err(Error::InvalidPixel {
                context: context.to_string(),
                x,
                y,
                value: self.data[i] as u32,
            });
        }
        Ok(())
    }

    /// Decode a grayscale or palette PNG; palette entries are read as raw indices.
    pub fn decode_png(bytes: &[u8], space: impl Into<String>) -> std::result::Result<Self, String> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::IDENTITY);
        let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
        let (color, depth) = reader.output_color_type();
        if depth != png::BitDepth::Eight
            || !matches!(color, png::ColorType::Grayscale | png::ColorType::Indexed)
        {
            return Err(format!(
                "expected a single-channel 8-bit PNG, found {color:?} at {depth:?}"
            ));
        }
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| "image too large".to_string())?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
        let (w, h) = (info.width, info.height);
        let stride = info.line_size;
        let mut data = Vec::with_capacity(w as usize * h as usize);
        for row in buf.chunks(stride).take(h as usize) {
            data.extend_from_slice(&row[..w as usize]);
        }
        MaskImage::new(w, h, data, space).map_err(|e| e.to_string())
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width, self.height);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().expect("in-memory PNG header");
            writer
                .write_image_data(&self.data)
                .expect("in-memory PNG data");
        }
        out
    }

    pub fn read_png(path: &Path, space: impl Into<String>) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        Self::decode_png(&bytes, space)
            .map_err(|m| Error::Data(format!("{}: {m}", path.display())))
    }

    /// Atomic write (temporary file plus rename).
    pub fn write_png(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.encode_png())
    }
}
