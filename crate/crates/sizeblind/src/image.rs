//! RGB raster with unit-interval intensities, plus PPM (P6) and PNG file I/O.
//!
//! Intensities live in `[0, 1]` as `f64` so transforms compose without
//! cumulative quantization; bytes appear only at file boundaries
//! (`intensity = byte / 255`, quantized back with `round(i * 255)`).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Row-major H x W x 3 raster. Invariants: `data.len() == width * height * 3`
/// and every intensity lies in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    /// All-black image.
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "empty image");
        ImageBuffer {
            width,
            height,
            data: vec![0.0; width * height * CHANNELS],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage("zero dimension".into()));
        }
        if data.len() != width * height * CHANNELS {
            return Err(Error::InvalidImage(format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                width,
                height,
                CHANNELS
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("intensity {v} outside [0, 1]")));
        }
        Ok(ImageBuffer { width, height, data })
    }

    /// Builds an image from a per-pixel function; outputs are clamped to
    /// `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = ImageBuffer::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                img.set_pixel(x, y, px);
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * CHANNELS
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y) + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = self.idx(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, px: [f64; 3]) {
        let i = self.idx(x, y);
        for c in 0..CHANNELS {
            self.data[i + c] = px[c].clamp(0.0, 1.0);
        }
    }

    /// Per-channel means over the whole image (compensated summation). A
    /// constant channel yields exactly that constant.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0.0f64; 3];
        let mut comps = [0.0f64; 3];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for px in self.data.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                let v = px[c];
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
                let t = sums[c] + v;
                comps[c] += if sums[c].abs() >= v.abs() {
                    (sums[c] - t) + v
                } else {
                    (v - t) + sums[c]
                };
                sums[c] = t;
            }
        }
        let n = (self.width * self.height) as f64;
        let mut out = [0.0; 3];
        for c in 0..CHANNELS {
            out[c] = if lo[c] == hi[c] {
                lo[c]
            } else {
                (sums[c] + comps[c]) / n
            };
        }
        out
    }

    /// Quantized byte view, the exact payload a PPM/PNG write produces.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }
}

/// `[0, 1]` intensity to byte.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round() as u8
}

/// Reads an image; `.png` goes through the PNG codec, everything else is
/// treated as binary PPM (P6, maxval 255).
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    if has_png_extension(path) {
        read_png(path)
    } else {
        read_ppm(path)
    }
}

/// Writes an image; format chosen like [`read_image`]. The write/read round
/// trip is byte-identical for intensities that are exact multiples of 1/255.
pub fn write_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if has_png_extension(path) {
        write_png(img, path)
    } else {
        write_ppm(img, path)
    }
}

fn has_png_extension(path: &Path) -> bool {
    path.extension()
        .map(|e| e.eq_ignore_ascii_case("png"))
        .unwrap_or(false)
}

fn read_ppm(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.token()?;
    if magic != b"P6" {
        return Err(Error::PpmHeader(format!(
            "expected magic P6, found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = cur.unsigned("width")?;
    let height = cur.unsigned("height")?;
    let maxval = cur.unsigned("maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval as u32));
    }
    if width == 0 || height == 0 {
        return Err(Error::PpmHeader("zero dimension".into()));
    }
    // Exactly one whitespace byte separates the header from the payload.
    cur.single_whitespace()?;
    let expected = width * height * CHANNELS;
    let payload = &cur.bytes[cur.pos..];
    if payload.len() < expected {
        return Err(Error::PpmTruncated {
            expected,
            found: payload.len(),
        });
    }
    let data = payload[..expected]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    ImageBuffer::from_raw(width, height, data)
}

fn write_ppm(img: &ImageBuffer, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(32 + img.data.len());
    out.extend_from_slice(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes());
    out.extend(img.data.iter().map(|&v| quantize(v)));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_png(path: &Path) -> Result<ImageBuffer> {
    let dynimg = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    ImageBuffer::from_raw(w, h, data)
}

fn write_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.to_bytes())
        .expect("byte buffer matches dimensions");
    buf.save(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::PpmHeader("unexpected end of header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn unsigned(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| {
                Error::PpmHeader(format!(
                    "invalid {what}: {:?}",
                    String::from_utf8_lossy(tok)
                ))
            })
    }

    fn single_whitespace(&mut self) -> Result<()> {
        if self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::PpmHeader("missing separator before payload".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("sizeblind-image-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn all_black_ppm_decodes_to_zeros() {
        let bytes = b"P6\n2 2\n255\n\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.height(), 2);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ppm_round_trip_is_identity_for_quantized_images() {
        let mut rng = crate::rng::RngState::new(17);
        let data: Vec<f64> = (0..4 * 3 * CHANNELS)
            .map(|_| (rng.next_u64() % 256) as f64 / 255.0)
            .collect();
        let img = ImageBuffer::from_raw(4, 3, data).unwrap();
        let path = tmpfile("roundtrip.ppm");
        write_image(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn ppm_rejects_wide_maxval() {
        let bytes = b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00";
        match decode_ppm(bytes) {
            Err(Error::UnsupportedMaxval(65535)) => {}
            other => panic!("expected UnsupportedMaxval, got {other:?}"),
        }
    }

    #[test]
    fn ppm_rejects_bad_magic() {
        assert!(matches!(
            decode_ppm(b"P5\n1 1\n255\n\x00"),
            Err(Error::PpmHeader(_))
        ));
    }

    #[test]
    fn ppm_rejects_short_payload() {
        let bytes = b"P6\n2 2\n255\n\x00\x00\x00";
        match decode_ppm(bytes) {
            Err(Error::PpmTruncated { expected: 12, found: 3 }) => {}
            other => panic!("expected PpmTruncated, got {other:?}"),
        }
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let bytes = b"P6\n# a comment\n1 1\n255\n\xff\x00\x7f";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 127.0 / 255.0]);
    }

    #[test]
    fn png_round_trip_matches_ppm_round_trip() {
        let img = ImageBuffer::from_fn(5, 4, |x, y| {
            [
                (x as f64 / 4.0 * 255.0).round() / 255.0,
                (y as f64 / 3.0 * 255.0).round() / 255.0,
                ((x + y) as f64 / 7.0 * 255.0).round() / 255.0,
            ]
        });
        let path = tmpfile("roundtrip.png");
        write_image(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn from_raw_validates_range_and_length() {
        assert!(matches!(
            ImageBuffer::from_raw(1, 1, vec![0.0, 0.5, 1.5]),
            Err(Error::InvalidImage(_))
        ));
        assert!(matches!(
            ImageBuffer::from_raw(2, 1, vec![0.0; 3]),
            Err(Error::InvalidImage(_))
        ));
    }
}
