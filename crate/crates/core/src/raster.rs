//! Float rasters and the ZSR on-disk format.
//!
//! Layout (all little-endian):
//!
//! | offset | size | field                  |
//! |--------|------|------------------------|
//! | 0      | 4    | magic `ZSRF`           |
//! | 4      | 4    | width (u32)            |
//! | 8      | 4    | height (u32)           |
//! | 12     | 4    | channels (u32)         |
//! | 16     | 4·n  | samples (binary32)     |
//!
//! Samples are row-major with channels interleaved per pixel.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

pub const ZSR_MAGIC: &[u8; 4] = b"ZSRF";
pub const ZSR_HEADER_LEN: usize = 16;

/// Largest sample count a ZSR file may declare.
pub const MAX_SAMPLES: u64 = 1 << 31;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("bad magic {0:?}, expected \"ZSRF\"")]
    BadMagic([u8; 4]),
    #[error("file truncated: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("{found} bytes of trailing data after {expected}-byte raster")]
    TrailingData { expected: u64, found: u64 },
    #[error("dimensions {width}x{height}x{channels} exceed 2^31 samples")]
    DimensionOverflow { width: u32, height: u32, channels: u32 },
    #[error("data length {len} does not match {width}x{height}x{channels}")]
    ShapeMismatch { width: u32, height: u32, channels: u32, len: usize },
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
}

/// Row-major, channel-interleaved 32-bit float image.
///
/// NaN samples are legal and mean "no value" (used for missing depth).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: u32,
    height: u32,
    channels: u32,
    data: Vec<f32>,
}

fn sample_count(width: u32, height: u32, channels: u32) -> Result<usize, RasterError> {
    let n = width as u64 * height as u64 * channels as u64;
    if n > MAX_SAMPLES {
        return Err(RasterError::DimensionOverflow { width, height, channels });
    }
    Ok(n as usize)
}

impl Raster {
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<f32>) -> Result<Self, RasterError> {
        let n = sample_count(width, height, channels)?;
        if data.len() != n {
            return Err(RasterError::ShapeMismatch { width, height, channels, len: data.len() });
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: u32, height: u32, channels: u32, value: f32) -> Result<Self, RasterError> {
        let n = sample_count(width, height, channels)?;
        Ok(Self { width, height, channels, data: vec![value; n] })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Number of pixels (width·height).
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Sample at column `x`, row `y`, channel `c`.
    pub fn get(&self, x: u32, y: u32, c: u32) -> f32 {
        self.data[self.offset(x, y, c)]
    }

    pub fn set(&mut self, x: u32, y: u32, c: u32, value: f32) {
        let i = self.offset(x, y, c);
        self.data[i] = value;
    }

    fn offset(&self, x: u32, y: u32, c: u32) -> usize {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        ((y as usize * self.width as usize + x as usize) * self.channels as usize) + c as usize
    }

    /// Splits a multi-channel raster into single-channel planes.
    pub fn split_channels(&self) -> Vec<Raster> {
        let ch = self.channels as usize;
        (0..ch)
            .map(|c| Raster {
                width: self.width,
                height: self.height,
                channels: 1,
                data: self.data.iter().skip(c).step_by(ch).copied().collect(),
            })
            .collect()
    }

    /// Interleaves single-channel planes of equal size into one raster.
    pub fn stack_channels(planes: &[Raster]) -> Result<Raster, RasterError> {
        let first = planes.first().ok_or(RasterError::ShapeMismatch {
            width: 0,
            height: 0,
            channels: 0,
            len: 0,
        })?;
        let (w, h) = (first.width, first.height);
        for p in planes {
            if p.width != w || p.height != h || p.channels != 1 {
                return Err(RasterError::ShapeMismatch {
                    width: p.width,
                    height: p.height,
                    channels: p.channels,
                    len: p.data.len(),
                });
            }
        }
        let ch = planes.len();
        let mut data = vec![0.0f32; w as usize * h as usize * ch];
        for (c, p) in planes.iter().enumerate() {
            for (i, v) in p.data.iter().enumerate() {
                data[i * ch + c] = *v;
            }
        }
        Raster::new(w, h, ch as u32, data)
    }

    /// Encodes into ZSR bytes.
    pub fn to_zsr_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ZSR_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(ZSR_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.channels.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out
    }

    /// Decodes ZSR bytes. The buffer must hold exactly one raster.
    pub fn from_zsr_bytes(bytes: &[u8]) -> Result<Raster, RasterError> {
        if bytes.len() < 4 {
            return Err(RasterError::TruncatedFile { expected: ZSR_HEADER_LEN as u64, found: bytes.len() as u64 });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4-byte slice");
        if &magic != ZSR_MAGIC {
            return Err(RasterError::BadMagic(magic));
        }
        if bytes.len() < ZSR_HEADER_LEN {
            return Err(RasterError::TruncatedFile { expected: ZSR_HEADER_LEN as u64, found: bytes.len() as u64 });
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"));
        let (width, height, channels) = (word(4), word(8), word(12));
        let n = sample_count(width, height, channels)?;
        let expected = (ZSR_HEADER_LEN + 4 * n) as u64;
        let found = bytes.len() as u64;
        if found < expected {
            return Err(RasterError::TruncatedFile { expected, found });
        }
        if found > expected {
            return Err(RasterError::TrailingData { expected, found });
        }
        let data = bytes[ZSR_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
            .collect();
        Ok(Raster { width, height, channels, data })
    }
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster, RasterError> {
    let bytes = fs::read(path)?;
    Raster::from_zsr_bytes(&bytes)
}

pub fn write_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_all(&raster.to_zsr_bytes())?;
    f.flush()?;
    Ok(())
}
