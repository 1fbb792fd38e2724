//! Netpbm PGM (`P2`/`P5`) and PPM (`P3`/`P6`) with maxval 255.

use std::fs;
use std::path::Path;

use super::{Image, ImageError};

pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_pnm(&bytes, &path.display().to_string())
}

/// Writes `P5` for grayscale and `P6` for colour images. Values are rounded
/// half-up to the nearest multiple of 1/255.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    fs::write(path, write_pnm(image)).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_pnm(image: &Image) -> Vec<u8> {
    let magic = if image.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    out
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn error(&self, offset: usize, message: impl Into<String>) -> ImageError {
        ImageError::Format {
            path: self.path.to_string(),
            offset,
            message: message.into(),
        }
    }

    /// Skips whitespace and, when `comments` is set, `#` comments.
    fn skip_space(&mut self, comments: bool) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if comments && b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self, comments: bool, what: &str) -> Result<(usize, &'a [u8]), ImageError> {
        self.skip_space(comments);
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || (comments && b == b'#') {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error(start, format!("unexpected end of data while reading {what}")));
        }
        Ok((start, &self.bytes[start..self.pos]))
    }

    fn number(&mut self, comments: bool, what: &str) -> Result<usize, ImageError> {
        let (offset, tok) = self.token(comments, what)?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| {
                self.error(
                    offset,
                    format!("expected {what}, found '{}'", String::from_utf8_lossy(tok)),
                )
            })
    }
}

pub fn parse_pnm(bytes: &[u8], path: &str) -> Result<Image, ImageError> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let (binary, channels) = match bytes.get(..2) {
        Some(b"P2") => (false, 1),
        Some(b"P3") => (false, 3),
        Some(b"P5") => (true, 1),
        Some(b"P6") => (true, 3),
        _ => return Err(cur.error(0, "not a PGM/PPM file (expected P2, P3, P5 or P6)")),
    };
    cur.pos = 2;
    if let Some(&b) = bytes.get(2) {
        if !(b.is_ascii_whitespace() || b == b'#') {
            return Err(cur.error(2, "expected whitespace after magic number"));
        }
    }
    let width_at = cur.pos;
    let width = cur.number(true, "width")?;
    let height = cur.number(true, "height")?;
    if width == 0 || height == 0 {
        return Err(cur.error(width_at, format!("empty image {width}x{height}")));
    }
    let maxval_at = {
        cur.skip_space(true);
        cur.pos
    };
    let maxval = cur.number(true, "maxval")?;
    if maxval != 255 {
        return Err(cur.error(maxval_at, format!("unsupported maxval {maxval}, only 255 is accepted")));
    }
    let count = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| cur.error(width_at, "image dimensions overflow"))?;

    let mut data = Vec::with_capacity(count);
    if binary {
        // Exactly one whitespace byte separates the header from the raster.
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(cur.error(cur.pos, "expected a single whitespace byte before raster data")),
        }
        let raster = &bytes[cur.pos..];
        if raster.len() < count {
            return Err(cur.error(
                cur.pos + raster.len(),
                format!("truncated raster: expected {count} bytes, found {}", raster.len()),
            ));
        }
        data.extend(raster[..count].iter().map(|&b| f64::from(b) / 255.0));
    } else {
        for i in 0..count {
            let (offset, tok) = cur.token(true, "sample").map_err(|_| {
                cur.error(
                    bytes.len(),
                    format!("truncated raster: expected {count} samples, found {i}"),
                )
            })?;
            let sample = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse::<u32>().ok())
                .ok_or_else(|| {
                    cur.error(offset, format!("invalid sample '{}'", String::from_utf8_lossy(tok)))
                })?;
            if sample > 255 {
                return Err(cur.error(offset, format!("sample {sample} exceeds maxval 255")));
            }
            data.push(f64::from(sample) / 255.0);
        }
    }
    Ok(Image::from_raw_unchecked(width, height, channels, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &[u8]) -> Result<Image, ImageError> {
        parse_pnm(s, "<mem>")
    }

    #[test]
    fn ascii_graymap() {
        let img = parse(b"P2\n1 1\n255\n255\n").unwrap();
        assert_eq!(img.shape(), (1, 1, 1));
        assert_eq!(img.data(), &[1.0]);
        let img = parse(b"P2 1 1 255 0").unwrap();
        assert_eq!(img.data(), &[0.0]);
    }

    #[test]
    fn ascii_pixmap_with_comments() {
        // Fixture bytes: "P3\n# two pixels\n2 1\n255\n255 0 0  0 0 255\n"
        let img = parse(b"P3\n# two pixels\n2 1\n255\n255 0 0  0 0 255\n").unwrap();
        assert_eq!(img.shape(), (2, 1, 3));
        assert_eq!(img.pixel(0, 0), &[1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(1, 0), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn binary_formats() {
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 51]);
        let img = parse(&bytes).unwrap();
        assert_eq!(img.data(), &[0.0, 0.2]);

        let mut bytes = b"P6 1 1 255 ".to_vec();
        bytes.extend([255u8, 0, 128]);
        let img = parse(&bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 128.0 / 255.0]);
    }

    #[test]
    fn header_errors_name_offsets() {
        let err = parse(b"P4\n1 1\n").unwrap_err();
        assert!(matches!(err, ImageError::Format { offset: 0, .. }), "{err}");

        let err = parse(b"P2\n1 1\n65535\n0\n").unwrap_err();
        match err {
            ImageError::Format { offset, message, .. } => {
                assert_eq!(offset, 7);
                assert!(message.contains("maxval"));
            }
            other => panic!("{other}"),
        }

        let err = parse(b"P2\nx 1\n255\n0\n").unwrap_err();
        assert!(matches!(err, ImageError::Format { offset: 3, .. }), "{err}");
    }

    #[test]
    fn truncated_data() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([1u8, 2, 3]);
        let err = parse(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert!(err.to_string().contains("byte 14"), "{err}");

        let err = parse(b"P2\n2 1\n255\n7\n").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let err = parse(b"P2\n1 1\n255\n256\n").unwrap_err();
        assert!(err.to_string().contains("exceeds"), "{err}");
    }

    #[test]
    fn save_rounds_half_up() {
        let img = Image::new(3, 1, 1, vec![1.0, 0.5, 0.0]).unwrap();
        let bytes = write_pnm(&img);
        assert!(bytes.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &[255, 128, 0]);
        let back = parse(&bytes).unwrap();
        assert_eq!(back.data(), &[1.0, 128.0 / 255.0, 0.0]);

        let rgb = Image::filled(1, 1, 3, 1.0).unwrap();
        assert!(write_pnm(&rgb).starts_with(b"P6"));
    }

    #[test]
    fn file_roundtrip_and_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = Image::new(2, 1, 3, vec![0.0, 1.0, 0.2, 0.4, 0.6, 0.8]).unwrap();
        save_image(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
        assert!(matches!(
            save_image(&img, dir.path().join("missing/a.ppm")),
            Err(ImageError::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn quantized_images_roundtrip(
            samples in prop::collection::vec(0u8..=255, 12),
            rgb in prop::bool::ANY,
        ) {
            let (w, c) = if rgb { (2, 3) } else { (6, 1) };
            let data: Vec<f64> = samples.iter().map(|&s| f64::from(s) / 255.0).collect();
            let img = Image::new(w, 2, c, data).unwrap();
            prop_assert_eq!(parse(&write_pnm(&img)).unwrap(), img);
        }
    }
}
