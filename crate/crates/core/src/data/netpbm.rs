//! Binary PGM (P5) and PPM (P6) codecs, 8-bit, maxval 255. Header comments
//! (`#` to end of line) are accepted anywhere whitespace is.

use crate::error::{Error, Result};

/// Decoded raster. `pixels` is row-major; PPM data stays interleaved RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    fn skip_space_and_comments(&mut self) -> Result<()> {
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

    fn read_int(&mut self) -> Result<u32> {
        self.skip_space_and_comments()?;
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| b.is_ascii_digit())
        {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::PnmMalformed(format!(
                "expected integer at byte {start}"
            )));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("digits are valid utf-8");
        text.parse::<u32>()
            .map_err(|_| Error::PnmMalformed(format!("integer out of range at byte {start}")))
    }
}

/// Decode a binary P5 (grayscale) or P6 (RGB) image.
pub fn decode(bytes: &[u8]) -> Result<PnmImage> {
    if bytes.len() < 2 {
        return Err(Error::PnmMalformed("file shorter than magic".into()));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::PnmBadMagic(
                String::from_utf8_lossy(other).into_owned(),
            ))
        }
    };
    let mut scan = HeaderScanner { bytes, pos: 2 };
    let width = scan.read_int()? as usize;
    let height = scan.read_int()? as usize;
    let maxval = scan.read_int()?;
    if maxval != 255 {
        return Err(Error::PnmBadMaxval(maxval));
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(scan.pos) {
        Some(b) if b.is_ascii_whitespace() => scan.pos += 1,
        _ => {
            return Err(Error::PnmMalformed(
                "missing whitespace after maxval".into(),
            ))
        }
    }
    if width == 0 || height == 0 {
        return Err(Error::PnmMalformed(format!(
            "degenerate dimensions {width}x{height}"
        )));
    }
    let expected = width * height * channels;
    let payload = &bytes[scan.pos..];
    if payload.len() < expected {
        return Err(Error::PnmTruncated {
            expected,
            got: payload.len(),
        });
    }
    Ok(PnmImage {
        channels,
        width,
        height,
        pixels: payload[..expected].to_vec(),
    })
}

fn encode(magic: &str, width: usize, height: usize, channels: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height * channels, "pixel buffer size");
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Encode a grayscale image as binary PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    encode("P5", width, height, 1, pixels)
}

/// Encode an interleaved RGB image as binary PPM.
pub fn encode_ppm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    encode("P6", width, height, 3, pixels)
}

pub fn encode_image(img: &PnmImage) -> Vec<u8> {
    match img.channels {
        1 => encode_pgm(img.width, img.height, &img.pixels),
        3 => encode_ppm(img.width, img.height, &img.pixels),
        n => unreachable!("PnmImage with {n} channels"),
    }
}
