//! Image decoding and channel conversion.
//!
//! Netpbm (P2/P3 ASCII, P5/P6 binary) is the native codec: maxval must be
//! 255 or 65535 and 16-bit binary samples are big-endian. PNG is accepted as
//! a convenience for 8-bit grayscale/RGB and 16-bit grayscale payloads.
//! Decoded values are scaled by the maximum code so a full-scale pixel is
//! exactly 1.0 at either depth.

use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("maxval {0} is not supported (expected 255 or 65535)")]
    UnsupportedMaxval(u32),
    #[error("file is {found}-bit, expected {expected}-bit")]
    DepthMismatch { expected: u8, found: u8 },
    #[error("payload truncated: needed {needed} samples, found {got}")]
    Truncated { needed: usize, got: usize },
    #[error("sample value {value} exceeds maxval {maxval}")]
    SampleOverflow { value: u32, maxval: u32 },
    #[error("unsupported image format: {0}")]
    Unsupported(String),
}

/// Declared sample depth of an image file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn bits(self) -> u8 {
        match self {
            BitDepth::Eight => 8,
            BitDepth::Sixteen => 16,
        }
    }

    fn from_maxval(maxval: u32) -> Result<BitDepth, ImageError> {
        match maxval {
            255 => Ok(BitDepth::Eight),
            65535 => Ok(BitDepth::Sixteen),
            other => Err(ImageError::UnsupportedMaxval(other)),
        }
    }
}

/// Decoded image: planar channel-major values in [0, 1].
#[derive(Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> ImageTensor {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        assert_eq!(data.len(), channels * height * width);
        ImageTensor { channels, height, width, data }
    }

    /// Value at (channel, y, x).
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.height * self.width + y * self.width + x]
    }
}

impl fmt::Debug for ImageTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageTensor({}x{}x{})", self.channels, self.height, self.width)
    }
}

/// Decodes an image and checks it against the expected sample depth.
pub fn decode_image(bytes: &[u8], expected: BitDepth) -> Result<ImageTensor, ImageError> {
    let (img, depth) = decode_image_any(bytes)?;
    if depth != expected {
        return Err(ImageError::DepthMismatch { expected: expected.bits(), found: depth.bits() });
    }
    Ok(img)
}

/// Decodes an image, inferring the depth from the file itself.
pub fn decode_image_any(bytes: &[u8]) -> Result<(ImageTensor, BitDepth), ImageError> {
    match bytes {
        [b'P', b'2'..=b'3' | b'5'..=b'6', ..] => decode_netpbm(bytes),
        [0x89, b'P', b'N', b'G', ..] => decode_png(bytes),
        _ => Err(ImageError::Unsupported(
            "not a netpbm (P2/P3/P5/P6) or PNG payload".into(),
        )),
    }
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    /// Advances past whitespace and `#` comments, then reads one decimal.
    fn next_number(&mut self) -> Result<u32, ImageError> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(ImageError::MalformedHeader("expected a decimal token".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::MalformedHeader("numeric token out of range".into()))
    }
}

fn decode_netpbm(bytes: &[u8]) -> Result<(ImageTensor, BitDepth), ImageError> {
    let magic = bytes[1];
    let (channels, ascii) = match magic {
        b'2' => (1, true),
        b'3' => (3, true),
        b'5' => (1, false),
        b'6' => (3, false),
        _ => unreachable!("dispatched on magic"),
    };
    let mut scan = HeaderScanner { bytes, pos: 2 };
    let width = scan.next_number()? as usize;
    let height = scan.next_number()? as usize;
    let maxval = scan.next_number()?;
    let depth = BitDepth::from_maxval(maxval)?;
    if width == 0 || height == 0 {
        return Err(ImageError::MalformedHeader(format!("empty image {width}x{height}")));
    }
    let needed = width * height * channels;
    // True division, not reciprocal multiplication: 51/255 must round to 0.2
    // and the maximum code must land exactly on 1.0.
    let max = maxval as f32;

    // Samples arrive pixel-interleaved; store planar.
    let mut interleaved = Vec::with_capacity(needed);
    if ascii {
        for i in 0..needed {
            let value = scan.next_number().map_err(|_| ImageError::Truncated {
                needed,
                got: i,
            })?;
            if value > maxval {
                return Err(ImageError::SampleOverflow { value, maxval });
            }
            interleaved.push(value as f32 / max);
        }
    } else {
        // Exactly one whitespace byte separates the header from the payload.
        if scan.pos >= bytes.len() || !bytes[scan.pos].is_ascii_whitespace() {
            return Err(ImageError::MalformedHeader(
                "binary payload must follow a single whitespace byte".into(),
            ));
        }
        let payload = &bytes[scan.pos + 1..];
        match depth {
            BitDepth::Eight => {
                if payload.len() < needed {
                    return Err(ImageError::Truncated { needed, got: payload.len() });
                }
                interleaved.extend(payload[..needed].iter().map(|&b| b as f32 / max));
            }
            BitDepth::Sixteen => {
                if payload.len() < needed * 2 {
                    return Err(ImageError::Truncated { needed: needed * 2, got: payload.len() });
                }
                interleaved.extend(
                    payload[..needed * 2]
                        .chunks_exact(2)
                        .map(|pair| u16::from_be_bytes([pair[0], pair[1]]) as f32 / max),
                );
            }
        }
    }

    let mut data = vec![0f32; needed];
    let plane = height * width;
    for pixel in 0..plane {
        for c in 0..channels {
            data[c * plane + pixel] = interleaved[pixel * channels + c];
        }
    }
    Ok((ImageTensor::new(channels, height, width, data), depth))
}

fn decode_png(bytes: &[u8]) -> Result<(ImageTensor, BitDepth), ImageError> {
    let decoded = ::image::load_from_memory_with_format(bytes, ::image::ImageFormat::Png)
        .map_err(|e| ImageError::MalformedHeader(e.to_string()))?;
    match decoded {
        ::image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            let data = img.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Ok((ImageTensor::new(1, h as usize, w as usize, data), BitDepth::Eight))
        }
        ::image::DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            let data = img.into_raw().iter().map(|&v| v as f32 / 65535.0).collect();
            Ok((ImageTensor::new(1, h as usize, w as usize, data), BitDepth::Sixteen))
        }
        ::image::DynamicImage::ImageRgb8(img) => {
            let (w, h) = img.dimensions();
            let (wu, hu) = (w as usize, h as usize);
            let raw = img.into_raw();
            let plane = wu * hu;
            let mut data = vec![0f32; 3 * plane];
            for pixel in 0..plane {
                for c in 0..3 {
                    data[c * plane + pixel] = raw[pixel * 3 + c] as f32 / 255.0;
                }
            }
            Ok((ImageTensor::new(3, hu, wu, data), BitDepth::Eight))
        }
        other => Err(ImageError::Unsupported(format!(
            "PNG color type {:?} (supported: 8-bit gray, 8-bit RGB, 16-bit gray)",
            other.color()
        ))),
    }
}

/// Converts between 1 and 3 channels. Replication widens grayscale; BT.601
/// luma weights (0.299, 0.587, 0.114) narrow color. Pixels with three equal
/// channels pass through unchanged, so grayscale survives a 1→3→1 round
/// trip bit-exactly.
pub fn convert_channels(img: &ImageTensor, target: usize) -> ImageTensor {
    assert!(target == 1 || target == 3, "target channels must be 1 or 3");
    if img.channels == target {
        return img.clone();
    }
    let plane = img.height * img.width;
    if target == 3 {
        let mut data = Vec::with_capacity(3 * plane);
        for _ in 0..3 {
            data.extend_from_slice(&img.data[..plane]);
        }
        ImageTensor::new(3, img.height, img.width, data)
    } else {
        let (r, rest) = img.data.split_at(plane);
        let (g, b) = rest.split_at(plane);
        let data = (0..plane)
            .map(|i| {
                if r[i] == g[i] && g[i] == b[i] {
                    r[i]
                } else {
                    0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]
                }
            })
            .collect();
        ImageTensor::new(1, img.height, img.width, data)
    }
}
