//! Frame and depth buffers plus their on-disk formats.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::geometry::Point2;

/// Per-pixel camera-frame depth; 0 marks "no hit".
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DepthHeader {
    width: u32,
    height: u32,
    dtype: String,
    layout: String,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width as usize * height as usize, "depth buffer size mismatch");
        Self { width, height, values }
    }

    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        Self::new(width, height, vec![value; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: f64) {
        let w = self.width as usize;
        self.values[y as usize * w + x as usize] = v;
    }

    /// Pixel cell containing `p`, if inside the map.
    pub fn cell_of(&self, p: &Point2) -> Option<(u32, u32)> {
        if !(p.x >= 0.0 && p.y >= 0.0) {
            return None;
        }
        let (x, y) = (p.x.floor(), p.y.floor());
        if x < f64::from(self.width) && y < f64::from(self.height) {
            Some((x as u32, y as u32))
        } else {
            None
        }
    }

    /// Nearest-cell lookup.
    pub fn sample(&self, p: &Point2) -> Option<f64> {
        self.cell_of(p).map(|(x, y)| self.get(x, y))
    }

    /// Writes `<stem>.bin` (row-major little-endian f32) and `<stem>.json`.
    pub fn write(&self, stem: &Path) -> io::Result<()> {
        let header = DepthHeader {
            width: self.width,
            height: self.height,
            dtype: "f32-le".into(),
            layout: "row-major".into(),
        };
        fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&header)?)?;
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(stem.with_extension("bin"), bytes)
    }

    pub fn read(stem: &Path) -> io::Result<Self> {
        let header: DepthHeader = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
        let bytes = fs::read(stem.with_extension("bin"))?;
        let n = header.width as usize * header.height as usize;
        if bytes.len() != n * 4 {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "depth payload size does not match header"));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Ok(Self::new(header.width, header.height, values))
    }
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("png encoding of an in-memory buffer");
    out.into_inner()
}

pub fn write_png(img: &RgbImage, path: &Path) -> io::Result<()> {
    fs::write(path, encode_png(img))
}

/// Binary P6 PPM.
pub fn write_ppm(img: &RgbImage, path: &Path) -> io::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", img.width(), img.height())?;
    f.write_all(img.as_raw())?;
    f.flush()
}

/// Box-filter downsample to `w x h` (integer block averages, truncated).
pub fn downsample(img: &RgbImage, w: u32, h: u32) -> RgbImage {
    let mut out = RgbImage::new(w, h);
    for oy in 0..h {
        for ox in 0..w {
            let x0 = ox * img.width() / w;
            let x1 = ((ox + 1) * img.width() / w).max(x0 + 1);
            let y0 = oy * img.height() / h;
            let y1 = ((oy + 1) * img.height() / h).max(y0 + 1);
            let mut acc = [0u64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = img.get_pixel(x, y);
                    for c in 0..3 {
                        acc[c] += u64::from(p[c]);
                    }
                }
            }
            let n = u64::from((x1 - x0) * (y1 - y0));
            out.put_pixel(ox, oy, image::Rgb([(acc[0] / n) as u8, (acc[1] / n) as u8, (acc[2] / n) as u8]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_cell_lookup() {
        let mut d = DepthMap::filled(4, 3, 1.0);
        d.set(2, 1, 7.0);
        assert_eq!(d.sample(&Point2::new(2.0, 1.0)), Some(7.0));
        assert_eq!(d.sample(&Point2::new(2.99, 1.99)), Some(7.0));
        assert_eq!(d.sample(&Point2::new(3.0, 1.5)), Some(1.0));
        assert_eq!(d.sample(&Point2::new(4.0, 0.0)), None);
        assert_eq!(d.sample(&Point2::new(-0.1, 0.0)), None);
        assert_eq!(d.sample(&Point2::new(f64::NAN, 0.0)), None);
    }

    #[test]
    fn depth_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = DepthMap::new(3, 2, vec![0.0, 1.5, 2.25, 10.0, 0.125, 3.0]);
        let stem = dir.path().join("depth_0000");
        d.write(&stem).unwrap();
        assert_eq!(DepthMap::read(&stem).unwrap(), d);
        assert_eq!(fs::metadata(stem.with_extension("bin")).unwrap().len(), 24);
    }

    #[test]
    fn ppm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(2, 1);
        img.put_pixel(1, 0, image::Rgb([1, 2, 3]));
        let path = dir.path().join("f.ppm");
        write_ppm(&img, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 0, 0, 1, 2, 3]);
    }

    #[test]
    fn png_decodes_back() {
        let mut img = RgbImage::new(3, 3);
        img.put_pixel(2, 2, image::Rgb([200, 100, 50]));
        let decoded = image::load_from_memory(&encode_png(&img)).unwrap().to_rgb8();
        assert_eq!(decoded, img);
    }

    #[test]
    fn downsample_block_means() {
        let mut img = RgbImage::new(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                img.put_pixel(x, y, image::Rgb([(x * 10) as u8, (y * 10) as u8, 0]));
            }
        }
        let small = downsample(&img, 2, 2);
        assert_eq!(small.get_pixel(0, 0).0, [5, 5, 0]);
        assert_eq!(small.get_pixel(1, 1).0, [25, 25, 0]);
    }
}
