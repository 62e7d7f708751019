//! Binary PGM (`P5`) and PPM (`P6`) images.
//!
//! Pixels are exchanged as `(channels, height, width)` tensors in `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::Tensor;

/// Byte for an intensity in `[0, 1]`: `255·v` rounded half to even, clamped.
pub fn to_byte(v: f64) -> u8 {
    (255.0 * v).round_ties_even().clamp(0.0, 255.0) as u8
}

/// Raw 8-bit grayscale image.
pub fn encode_pgm(h: usize, w: usize, bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() != h * w {
        return Err(Error::Image(format!("expected {} pixels, got {}", h * w, bytes.len())));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    Ok(out)
}

/// `P5` for one channel, `P6` for three.
pub fn encode(img: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::Image(format!("expected a (c, h, w) image, got {:?}", img.shape())));
    };
    let v = img.values();
    match c {
        1 => encode_pgm(h, w, &v.iter().map(|&x| to_byte(x)).collect::<Vec<_>>()),
        3 => {
            let plane = h * w;
            let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
            for i in 0..plane {
                out.extend((0..3).map(|ch| to_byte(v[ch * plane + i])));
            }
            Ok(out)
        }
        _ => Err(Error::Image(format!("{c} channels cannot be stored as PGM/PPM"))),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn token(&mut self) -> Result<usize> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(Error::Image("truncated header".into())),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image(format!("bad header field at byte {start}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let c = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Image("not a binary PGM/PPM file".into())),
    };
    let mut hdr = Header { bytes, pos: 2 };
    let w = hdr.token()?;
    let h = hdr.token()?;
    let maxval = hdr.token()?;
    if !(1..=65535).contains(&maxval) || w == 0 || h == 0 {
        return Err(Error::Image(format!("unsupported header {w}x{h} maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = &bytes[hdr.pos + 1..];
    let width = if maxval > 255 { 2 } else { 1 };
    let n = w * h * c;
    if data.len() < n * width {
        return Err(Error::Image(format!("expected {} raster bytes, got {}", n * width, data.len())));
    }
    let sample = |i: usize| match width {
        1 => data[i] as f64,
        _ => u16::from_be_bytes([data[2 * i], data[2 * i + 1]]) as f64,
    };
    let plane = w * h;
    Tensor::from_fn(&[c, h, w], |idx| {
        let (ch, p) = (idx / plane, idx % plane);
        sample(p * c + ch) / maxval as f64
    })
}

pub fn read(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path)?).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn write(path: &Path, img: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode(img)?)?)
}

/// PGM/PPM files of a directory, sorted by file name.
pub fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm") || x.eq_ignore_ascii_case("ppm")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every image of a directory into one `(n, c, h, w)` batch.
pub fn read_dir(dir: &Path) -> Result<Tensor> {
    let files = list_dir(dir)?;
    if files.is_empty() {
        return Err(Error::Image(format!("no .pgm/.ppm files in {}", dir.display())));
    }
    let images = files.iter().map(|p| read(p)).collect::<Result<Vec<_>>>()?;
    let shape = images[0].shape().to_vec();
    if let Some((p, img)) = files.iter().zip(&images).find(|(_, i)| i.shape() != shape) {
        return Err(Error::Image(format!("{} is {:?}, expected {:?}", p.display(), img.shape(), shape)));
    }
    let batched = images.into_iter().map(|i| i.reshape(&[1, shape[0], shape[1], shape[2]])).collect::<Result<Vec<_>>>()?;
    Tensor::cat_batch(&batched.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_even() {
        assert_eq!(to_byte(0.5), 128);
        assert_eq!(to_byte(1.5 / 255.0 + 1e-12), 2);
        assert_eq!(to_byte(-0.1), 0);
        assert_eq!(to_byte(1.7), 255);
    }

    #[test]
    fn pgm_layout() {
        let bytes = encode(&Tensor::new(&[1, 2, 3], vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap()).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n3 2\n255\n".len() + 6);
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 51, 102, 153, 204, 255]);
    }

    #[test]
    fn round_trip_on_byte_grid() {
        for c in [1, 3] {
            let img = Tensor::from_fn(&[c, 4, 5], |i| ((i * 37) % 256) as f64 / 255.0).unwrap();
            let back = decode(&encode(&img).unwrap()).unwrap();
            assert_eq!(back.shape(), img.shape());
            assert!(back.max_abs_diff(&img).unwrap() < 1e-15);
        }
    }

    #[test]
    fn header_comments_and_wide_samples() {
        let mut bytes = b"P5 # c\n2 1\n# another\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x00, 0x00]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img.values(), &[1.0, 0.0]);
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P3\n1 1\n255\n0").is_err());
    }
}
