//! `ImageGrid` and raster I/O.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// An `height × width × channels` grid of reals, nominally in `[-1, 1]`,
/// stored interleaved: `(y, x, c)` lives at `(y * width + x) * channels + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f64) -> Self {
        Self { height, width, channels, data: vec![v; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} grid",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rasterizes to 8-bit RGB: `[-1, 1]` maps affinely onto `[0, 255]`,
    /// rounding half to even, clamped.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.height * self.width * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let v = self.get(y, x, c.min(self.channels - 1));
                    out.push(to_u8(v));
                }
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(Error::Shape(format!("{} bytes for {height}x{width} RGB", rgb.len())));
        }
        let data = rgb.iter().map(|&b| b as f64 / 255.0 * 2.0 - 1.0).collect();
        Self::from_vec(height, width, 3, data)
    }
}

fn to_u8(v: f64) -> u8 {
    let scaled = ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round_ties_even();
    scaled as u8
}

pub fn write_png(path: &Path, img: &ImageGrid) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(&img.to_rgb8()).map_err(|e| png_err(path, e))?;
    Ok(())
}

/// Reads an 8-bit PNG as RGB in `[-1, 1]`; grayscale is replicated.
pub fn read_png(path: &Path) -> Result<ImageGrid> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| png_decode_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| png_decode_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let per = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => 3,
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for px in bytes.chunks_exact(per) {
        if per < 3 {
            rgb.extend_from_slice(&[px[0]; 3]);
        } else {
            rgb.extend_from_slice(&px[..3]);
        }
    }
    ImageGrid::from_rgb8(h, w, &rgb)
}

/// Reads a mask PNG: a pixel is `true` (regenerate) when its first channel
/// is above mid-gray.
pub fn read_mask_png(path: &Path) -> Result<Vec<bool>> {
    let img = read_png(path)?;
    Ok((0..img.height() * img.width()).map(|i| img.data()[i * 3] > 0.0).collect())
}

fn png_err(path: &Path, e: png::EncodingError) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn png_decode_err(path: &Path, e: png::DecodingError) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_mapping_rounds_half_even() {
        // -1 → 0, 1 → 255, and 0 → 127.5 which rounds to the even 128.
        let img = ImageGrid::from_vec(1, 3, 1, vec![-1.0, 1.0, 0.0]).unwrap();
        assert_eq!(img.to_rgb8(), vec![0, 0, 0, 255, 255, 255, 128, 128, 128]);
    }

    #[test]
    fn png_round_trip_is_quantized_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = ImageGrid::from_vec(2, 2, 3, (0..12).map(|i| i as f64 / 6.0 - 1.0).collect()).unwrap();
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }
}
