//! Grayscale images with intensities normalized to `[0, 1]`, plus PGM (P2/P5)
//! and 8-bit grayscale PNG readers and writers.
//!
//! Samples are mapped to `v / maxval` on load and quantized with
//! round-half-up (`floor(i * 255 + 0.5)`) on save, so an image that came from
//! 8-bit data survives a save/load cycle unchanged.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::InvalidImage(format!(
                "dimensions {height}x{width} below the 2x2 minimum"
            )));
        }
        if data.len() != height * width {
            return Err(Error::InvalidImage(format!(
                "{} samples for a {height}x{width} grid",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from a per-pixel function; values are clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height >= 2 && width >= 2, "images are at least 2x2");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(clamp_unit(f(r, c)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self::from_fn(height, width, |_, _| value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Applies `f` to every intensity and clamps the result into `[0, 1]`.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| clamp_unit(f(v))).collect(),
        }
    }

    pub(crate) fn from_raw_unchecked(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    /// 8-bit quantization with round-half-up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    PgmAscii,
    PgmBinary,
    PngGray8,
}

impl FromStr for ImageFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm-ascii" => Ok(Self::PgmAscii),
            "pgm-binary" => Ok(Self::PgmBinary),
            "png-gray8" => Ok(Self::PngGray8),
            other => Err(Error::InvalidImage(format!("unknown image format `{other}`"))),
        }
    }
}

impl fmt::Display for ImageFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PgmAscii => "pgm-ascii",
            Self::PgmBinary => "pgm-binary",
            Self::PngGray8 => "png-gray8",
        })
    }
}

impl ImageFormat {
    /// Sniffs the format from the leading magic bytes.
    pub fn detect(bytes: &[u8]) -> Option<Self> {
        match bytes {
            [b'P', b'2', ..] => Some(Self::PgmAscii),
            [b'P', b'5', ..] => Some(Self::PgmBinary),
            [0x89, b'P', b'N', b'G', ..] => Some(Self::PngGray8),
            _ => None,
        }
    }

    /// Format implied by a file extension (`.pgm` is written as binary PGM).
    pub fn from_extension(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "pgm" => Some(Self::PgmBinary),
            "png" => Some(Self::PngGray8),
            _ => None,
        }
    }
}

pub fn load_image(path: impl AsRef<Path>, format: ImageFormat) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, format)
}

/// Loads an image, detecting PGM/PNG from the file's magic bytes.
pub fn load_image_auto(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = ImageFormat::detect(&bytes)
        .ok_or_else(|| Error::MalformedHeader("unrecognized magic bytes".into()))?;
    decode_image(&bytes, format)
}

pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<GrayImage> {
    match format {
        ImageFormat::PgmAscii | ImageFormat::PgmBinary => decode_pgm(bytes, format),
        ImageFormat::PngGray8 => decode_png(bytes),
    }
}

pub fn save_image(img: &GrayImage, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(img, format)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_image(img: &GrayImage, format: ImageFormat) -> Result<Vec<u8>> {
    let pixels = img.to_u8();
    match format {
        ImageFormat::PgmAscii => {
            let mut out = format!("P2\n{} {}\n255\n", img.width, img.height);
            for row in pixels.chunks(img.width) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
            Ok(out.into_bytes())
        }
        ImageFormat::PgmBinary => {
            let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&pixels);
            Ok(out)
        }
        ImageFormat::PngGray8 => {
            let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, pixels)
                .ok_or_else(|| Error::Png("buffer size mismatch".into()))?;
            let mut out = std::io::Cursor::new(Vec::new());
            buf.write_to(&mut out, image::ImageFormat::Png)
                .map_err(|e| Error::Png(e.to_string()))?;
            Ok(out.into_inner())
        }
    }
}

struct PgmHeader {
    width: usize,
    height: usize,
    maxval: u32,
    /// Offset of the first payload byte.
    payload: usize,
}

fn decode_pgm(bytes: &[u8], format: ImageFormat) -> Result<GrayImage> {
    let magic = match format {
        ImageFormat::PgmAscii => b"P2",
        _ => b"P5",
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::MalformedHeader(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let header = parse_pgm_header(bytes)?;
    let n = header.width * header.height;
    let maxval = header.maxval as f64;
    let samples: Vec<u32> = match format {
        ImageFormat::PgmAscii => {
            let text = std::str::from_utf8(&bytes[header.payload..])
                .map_err(|_| Error::MalformedHeader("non-ASCII payload in P2 file".into()))?;
            let mut out = Vec::with_capacity(n);
            for tok in strip_comments(text).split_ascii_whitespace() {
                if out.len() == n {
                    break;
                }
                let v: u32 = tok
                    .parse()
                    .map_err(|_| Error::MalformedHeader(format!("bad sample `{tok}`")))?;
                out.push(v);
            }
            out
        }
        _ => {
            let payload = &bytes[header.payload..];
            if header.maxval < 256 {
                payload.iter().take(n).map(|&b| b as u32).collect()
            } else {
                payload
                    .chunks_exact(2)
                    .take(n)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
                    .collect()
            }
        }
    };
    if samples.len() < n {
        return Err(Error::TruncatedPayload {
            expected: n,
            found: samples.len(),
        });
    }
    if let Some(v) = samples.iter().find(|&&v| v > header.maxval) {
        return Err(Error::MalformedHeader(format!(
            "sample {v} exceeds maxval {}",
            header.maxval
        )));
    }
    GrayImage::new(
        header.height,
        header.width,
        samples.iter().map(|&v| v as f64 / maxval).collect(),
    )
}

fn strip_comments(text: &str) -> String {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .collect::<Vec<_>>()
        .join("\n")
}

fn parse_pgm_header(bytes: &[u8]) -> Result<PgmHeader> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::MalformedHeader("header ends early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader("expected a decimal header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedHeader("header field overflow".into()))?;
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => return Err(Error::MalformedHeader("missing header terminator".into())),
        None => {}
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::MalformedHeader(format!("maxval {maxval} out of range")));
    }
    if width < 2 || height < 2 {
        return Err(Error::MalformedHeader(format!(
            "dimensions {width}x{height} below 2x2"
        )));
    }
    Ok(PgmHeader {
        width,
        height,
        maxval: maxval as u32,
        payload: pos,
    })
}

fn decode_png(bytes: &[u8]) -> Result<GrayImage> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Png(e.to_string()))?;
    match decoded {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            GrayImage::from_u8(h as usize, w as usize, buf.as_raw())
        }
        other => Err(Error::NotGrayscale(format!("{:?}", other.color()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_pgm_normalizes_linearly() {
        let img = decode_image(b"P2\n2 2\n255\n0 85\n170 255\n", ImageFormat::PgmAscii).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn pgm_with_small_maxval() {
        let text = b"P2\n# comment line\n3 3\n15\n0 1 2\n3 4 5\n6 7 15\n";
        let img = decode_image(text, ImageFormat::PgmAscii).unwrap();
        assert_eq!(img.get(2, 2), 1.0);
        assert_eq!(img.get(0, 1), 1.0 / 15.0);
    }

    #[test]
    fn truncated_and_malformed_payloads_are_distinct() {
        let err = decode_image(b"P5\n4 4\n255\n\x00\x01", ImageFormat::PgmBinary).unwrap_err();
        assert!(matches!(err, Error::TruncatedPayload { expected: 16, found: 2 }));
        let err = decode_image(b"P5\nx 4\n255\n", ImageFormat::PgmBinary).unwrap_err();
        assert!(matches!(err, Error::MalformedHeader(_)));
        let err = decode_image(b"P2\n2 2\n255\n0 1 2\n", ImageFormat::PgmAscii).unwrap_err();
        assert!(matches!(err, Error::TruncatedPayload { .. }));
    }

    #[test]
    fn rgb_png_is_rejected() {
        let rgb = image::RgbImage::from_pixel(3, 3, image::Rgb([10, 20, 30]));
        let mut buf = std::io::Cursor::new(Vec::new());
        rgb.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        let err = decode_image(&buf.into_inner(), ImageFormat::PngGray8).unwrap_err();
        assert!(matches!(err, Error::NotGrayscale(_)));
    }

    #[test]
    fn half_gray_rounds_up() {
        let img = GrayImage::constant(3, 4, 0.5);
        assert!(img.to_u8().iter().all(|&b| b == 128));
    }

    #[test]
    fn binary_pgm_roundtrip_is_byte_exact() {
        let bytes: Vec<u8> = (0..20).map(|i| (i * 13 % 256) as u8).collect();
        let img = GrayImage::from_u8(4, 5, &bytes).unwrap();
        for format in [
            ImageFormat::PgmAscii,
            ImageFormat::PgmBinary,
            ImageFormat::PngGray8,
        ] {
            let encoded = encode_image(&img, format).unwrap();
            let back = decode_image(&encoded, format).unwrap();
            assert_eq!(back, img);
            assert_eq!(encode_image(&back, format).unwrap(), encoded);
        }
    }

    #[test]
    fn rejects_out_of_range_intensity() {
        assert!(GrayImage::new(2, 2, vec![0.0, 0.5, 1.5, 0.0]).is_err());
        assert!(GrayImage::new(1, 4, vec![0.0; 4]).is_err());
    }
}
