//! Binary PPM (P6, maxval 255) encode/decode, bit-exact at the 8-bit level.

use super::ImageRecord;
use crate::error::{Error, PpmError, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// Refuse absurd dimensions before allocating (decoder runs on untrusted
/// bytes).
const MAX_PIXELS: u64 = 1 << 26;

/// Round-half-away-from-zero quantization of a unit-scale value.
pub fn quantize_u8(x: f32) -> u8 {
    (x * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn dequantize_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_whitespace_and_comments(&mut self) -> Result<()> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<u64> {
        self.skip_whitespace_and_comments()?;
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| b.is_ascii_digit())
        {
            self.pos += 1;
        }
        if self.pos == start || self.pos - start > 10 {
            return Err(PpmError::BadHeader(format!("expected {what}")).into());
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse::<u64>()
            .map_err(|_| PpmError::BadHeader(format!("{what} out of range")).into())
    }
}

/// Decode a P6 PPM byte stream into planar (3, H, W) unit-scale pixels.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(PpmError::BadMagic.into());
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.read_uint("width")?;
    let height = cur.read_uint("height")?;
    let maxval = cur.read_uint("maxval")?;
    if width == 0 || height == 0 {
        return Err(PpmError::BadHeader("zero dimension".into()).into());
    }
    if width * height > MAX_PIXELS {
        return Err(PpmError::BadHeader(format!("{width}x{height} too large")).into());
    }
    if maxval != 255 {
        return Err(PpmError::UnsupportedMaxval(maxval.min(u32::MAX as u64) as u32).into());
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(PpmError::BadHeader("missing payload separator".into()).into()),
    }
    let (w, h) = (width as usize, height as usize);
    let expected = w * h * 3;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(PpmError::Truncated {
            expected,
            got: payload.len(),
        }
        .into());
    }
    if payload.len() > expected {
        return Err(PpmError::TrailingBytes(payload.len() - expected).into());
    }
    let mut data = vec![0.0f32; expected];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * 3;
            for c in 0..3 {
                data[c * h * w + y * w + x] = dequantize_u8(payload[base + c]);
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Encode planar (3, H, W) unit-scale pixels as a canonical P6 stream.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::invalid(format!(
            "PPM encoding expects a (3, H, W) image, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize_u8(data[c * h * w + y * w + x]));
            }
        }
    }
    Ok(out)
}

pub fn load_ppm(path: &Path) -> Result<ImageRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let image = decode_ppm(&bytes)?;
    Ok(ImageRecord {
        image,
        label: None,
        source_path: path.display().to_string(),
    })
}

pub fn save_ppm(record: &ImageRecord, path: &Path) -> Result<()> {
    let bytes = encode_ppm(&record.image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_quantization_is_exact_on_all_code_points() {
        for v in 0..=255u8 {
            assert_eq!(quantize_u8(dequantize_u8(v)), v);
        }
        assert_eq!(quantize_u8(1.0), 255);
        assert_eq!(quantize_u8(0.0), 0);
        assert_eq!(dequantize_u8(128), 128.0 / 255.0);
        assert_eq!(quantize_u8(128.0 / 255.0), 128);
    }

    #[test]
    fn hand_built_two_pixel_file_round_trips() {
        // P6, 2x1, payload (1,2,3) (250,251,252): 17 bytes total.
        let mut file = b"P6\n2 1\n255\n".to_vec();
        file.extend_from_slice(&[1, 2, 3, 250, 251, 252]);
        assert_eq!(file.len(), 17);
        let img = decode_ppm(&file).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        let encoded = encode_ppm(&img).unwrap();
        assert_eq!(encoded, file);
    }

    #[test]
    fn decode_encode_is_idempotent_at_u8_level() {
        let mut payload = Vec::new();
        for i in 0..(4 * 5 * 3) {
            payload.push(((i * 37) % 256) as u8);
        }
        let mut file = b"P6\n# with a comment\n5 4\n255\n".to_vec();
        file.extend_from_slice(&payload);
        let once = decode_ppm(&file).unwrap();
        let reencoded = encode_ppm(&once).unwrap();
        let twice = decode_ppm(&reencoded).unwrap();
        assert_eq!(once.data(), twice.data());
        assert_eq!(encode_ppm(&twice).unwrap(), reencoded);
    }

    #[test]
    fn header_errors_are_structured() {
        assert!(matches!(
            decode_ppm(b"P5\n1 1\n255\nxxx"),
            Err(Error::Ppm(PpmError::BadMagic))
        ));
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n65535\n"),
            Err(Error::Ppm(PpmError::UnsupportedMaxval(65535)))
        ));
        assert!(matches!(
            decode_ppm(b"P6\n2 2\n255\nxx"),
            Err(Error::Ppm(PpmError::Truncated { expected: 12, got: 2 }))
        ));
        assert!(matches!(
            decode_ppm(b"P6\n0 4\n255\n"),
            Err(Error::Ppm(PpmError::BadHeader(_)))
        ));
        let mut long = b"P6\n1 1\n255\n".to_vec();
        long.extend_from_slice(&[0; 5]);
        assert!(matches!(
            decode_ppm(&long),
            Err(Error::Ppm(PpmError::TrailingBytes(2)))
        ));
        assert!(matches!(
            decode_ppm(b"P6\n99999999999 1\n255\n"),
            Err(Error::Ppm(PpmError::BadHeader(_)))
        ));
    }
}
