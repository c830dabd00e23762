//! Grayscale frames and the binary PGM (P5) format.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major grayscale image with intensities nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayFrame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayFrame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "frame data length mismatch");
        Self { height, width, data }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_plane(self.height, self.width, self.data.clone())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// 8-bit binary PGM with maxval 255. Values are clamped to `[0, 1]`.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_pgm(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Read an 8-bit P5 image (maxval 255) and scale it to `[0, 1]`.
    pub fn read_pgm<R: Read>(reader: R) -> Result<Self> {
        let mut r = BufReader::new(reader);
        let magic = next_token(&mut r)?;
        if magic != "P5" {
            return Err(Error::Data(format!("expected P5 magic, found {magic:?}")));
        }
        let width: usize = parse_token(&mut r, "width")?;
        let height: usize = parse_token(&mut r, "height")?;
        let maxval: usize = parse_token(&mut r, "maxval")?;
        if maxval != 255 {
            return Err(Error::Data(format!("only maxval 255 is supported, found {maxval}")));
        }
        let mut bytes = vec![0u8; width * height];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Data(format!("truncated pixel data for {width}x{height} image")))?;
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Ok(Self::new(height, width, data))
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
        Self::read_pgm(file).map_err(|e| e.in_file(path))
    }
}

/// Next whitespace-delimited header token, skipping `#` comments. Consumes
/// exactly one whitespace byte after the token, as the format requires
/// before the raster.
fn next_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Data("unexpected end of PGM header".into()));
        }
        let c = byte[0];
        if c == b'#' && token.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(c as char);
    }
}

fn parse_token<R: BufRead, T: std::str::FromStr>(r: &mut R, what: &str) -> Result<T> {
    let tok = next_token(r)?;
    tok.parse()
        .map_err(|_| Error::Data(format!("bad PGM {what} {tok:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_quantizes_to_8_bits() {
        let f = GrayFrame::from_fn(3, 4, |y, x| (y * 4 + x) as f64 / 11.0);
        let mut buf = Vec::new();
        f.write_pgm(&mut buf).unwrap();
        let back = GrayFrame::read_pgm(&buf[..]).unwrap();
        assert_eq!((back.height, back.width), (3, 4));
        for (a, b) in f.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut buf = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        buf.extend_from_slice(&[0, 255]);
        let f = GrayFrame::read_pgm(&buf[..]).unwrap();
        assert_eq!(f.data, vec![0.0, 1.0]);
    }

    #[test]
    fn pgm_rejects_other_formats() {
        assert!(GrayFrame::read_pgm(&b"P2\n1 1\n255\n0"[..]).is_err());
        assert!(GrayFrame::read_pgm(&b"P5\n1 1\n65535\n\0\0"[..]).is_err());
        assert!(GrayFrame::read_pgm(&b"P5\n4 4\n255\n\0"[..]).is_err());
    }
}
