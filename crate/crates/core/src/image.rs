//! Images with values in [0, 1] and binary PGM (P5) / PPM (P6) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, channels interleaved.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, &vec![0.0; channels])
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Self {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Invalid(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn set(&mut self, x: usize, y: usize, value: &[f64]) {
        self.pixel_mut(x, y).copy_from_slice(value);
    }

    /// Channel mean per pixel.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks(self.channels)
            .map(|p| p.iter().sum::<f64>() / self.channels as f64)
            .collect()
    }

    pub fn clamp01(mut self) -> Self {
        for x in &mut self.data {
            *x = x.clamp(0.0, 1.0);
        }
        self
    }

    /// Round every value to the nearest 8-bit level, as stored on disk.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for x in &mut out.data {
            *x = quantize(*x) as f64 / 255.0;
        }
        out
    }

    pub fn l2_distance(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn rotate90(&self) -> Image {
        let mut out = Image::new(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.height - 1 - y, x, self.pixel(x, y));
            }
        }
        out
    }

    /// Binary PNM: P5 for one channel, P6 for three, maxval 255.
    pub fn to_pnm(&self) -> Result<Vec<u8>> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => return Err(Error::Invalid(format!("cannot store {c}-channel image as PNM"))),
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&x| quantize(x)));
        Ok(out)
    }

    pub fn from_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
        let err = |msg: &str| Error::Image {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(err("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("bad header"))?);
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let channels = match fields[0] {
            "P5" => 1,
            "P6" => 3,
            m => return Err(err(&format!("unsupported magic {m}"))),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| err("bad header number"));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(err("only maxval 255 is supported"));
        }
        if w == 0 || h == 0 {
            return Err(err("zero-sized image"));
        }
        let n = w * h * channels;
        let raster = bytes.get(pos..pos + n).ok_or_else(|| err("truncated raster"))?;
        Image::from_data(w, h, channels, raster.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pnm()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_pnm(&bytes, path)
    }
}

pub fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_exact() {
        let img = Image::filled(2, 1, &[1.0, 0.0, 0.5]);
        let b = img.to_pnm().unwrap();
        assert_eq!(&b[..11], b"P6\n2 1\n255\n");
        assert_eq!(&b[11..], &[255, 0, 128, 255, 0, 128]);
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let mut img = Image::new(3, 2, 1);
        for (i, x) in img.data.iter_mut().enumerate() {
            *x = i as f64 / 7.3;
        }
        let b1 = img.to_pnm().unwrap();
        let back = Image::from_pnm(&b1, Path::new("mem")).unwrap();
        assert_eq!(back.to_pnm().unwrap(), b1);
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut b = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        b.extend([0u8, 255]);
        let img = Image::from_pnm(&b, Path::new("mem")).unwrap();
        assert_eq!(img.data, vec![0.0, 1.0]);
    }

    #[test]
    fn rejects_truncated_raster() {
        let b = b"P6\n2 2\n255\n\x00\x00".to_vec();
        assert!(Image::from_pnm(&b, Path::new("mem")).is_err());
    }

    #[test]
    fn rotate_four_times_is_identity() {
        let mut img = Image::new(3, 2, 1);
        img.set(2, 0, &[1.0]);
        let r = img.rotate90().rotate90().rotate90().rotate90();
        assert_eq!(r, img);
        assert_eq!(img.rotate90().width, 2);
    }
}
