use std::io::{Cursor, Write};
use std::path::Path;

use crate::compute::{Real, Tensor};

use super::DataError;

/// RGB image with channel values in `[0, 1]`, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// Single-channel image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, DataError> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(DataError::format(
                "<memory>",
                format!("{width}x{height} RGB image cannot hold {} values", data.len()),
            ));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::format("<memory>", "pixel value outside [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, data).expect("valid fill")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[H, W, 3]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::lit(v as f64)).collect();
        Tensor::new([self.height, self.width, 3], data).expect("consistent image")
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                data.extend_from_slice(&self.pixel(sx, sy));
            }
        }
        Self::new(width, height, data).expect("resized image")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self, DataError> {
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(width, height, data)
    }

    /// Decodes a PPM (P6) or PNG file, chosen by content.
    pub fn read(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
        if bytes.starts_with(b"P6") {
            Self::decode_ppm(&bytes).map_err(|m| DataError::format(path, m))
        } else if bytes.starts_with(b"\x89PNG") {
            Self::decode_png(bytes).map_err(|m| DataError::format(path, m))
        } else {
            Err(DataError::format(path, "not a P6 PPM or PNG image"))
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), DataError> {
        write_ppm_bytes(path, self.width, self.height, &self.to_bytes())
    }

    fn decode_ppm(bytes: &[u8]) -> Result<Self, String> {
        let (header, offset) = pnm_header(bytes, b"P6")?;
        let [w, h, maxval] = header;
        let len = w * h * 3;
        let body = bytes
            .get(offset..offset + len)
            .ok_or_else(|| format!("truncated pixel data: need {len} bytes"))?;
        let scale = maxval as f32;
        let data = body.iter().map(|&b| b as f32 / scale).collect();
        Self::new(w, h, data).map_err(|e| e.to_string())
    }

    fn decode_png(bytes: Vec<u8>) -> Result<Self, String> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
        let size = reader
            .output_buffer_size()
            .ok_or("PNG dimensions overflow")?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
        let (w, h) = (info.width as usize, info.height as usize);
        let stride = info.line_size;
        let channels = info.color_type.samples();
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            let row = &buf[y * stride..y * stride + w * channels];
            for px in row.chunks(channels) {
                let rgb = match channels {
                    1 | 2 => [px[0]; 3],
                    _ => [px[0], px[1], px[2]],
                };
                data.extend(rgb.iter().map(|&b| b as f32 / 255.0));
            }
        }
        Self::new(w, h, data).map_err(|e| e.to_string())
    }
}

/// Parses `magic width height maxval` with `#` comments; returns the header
/// and the offset of the first pixel byte.
fn pnm_header(bytes: &[u8], magic: &[u8]) -> Result<([usize; 3], usize), String> {
    if !bytes.starts_with(magic) {
        return Err("bad magic number".into());
    }
    let mut pos = magic.len();
    let mut values = [0usize; 3];
    for v in values.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *v = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header field")?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    if values[0] == 0 || values[1] == 0 {
        return Err("zero image extent".into());
    }
    if values[2] == 0 || values[2] > 255 {
        return Err(format!("unsupported maxval {}", values[2]));
    }
    Ok((values, pos + 1))
}

pub fn write_ppm_bytes(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), DataError> {
    assert_eq!(rgb.len(), width * height * 3, "PPM payload size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    write_file(path, &out)
}

/// Reads a P5 grayscale map scaled to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<GrayImage, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    let ([w, h, maxval], offset) = pnm_header(&bytes, b"P5").map_err(|m| DataError::format(path, m))?;
    let body = bytes
        .get(offset..offset + w * h)
        .ok_or_else(|| DataError::format(path, "truncated pixel data"))?;
    Ok(GrayImage {
        width: w,
        height: h,
        data: body.iter().map(|&b| b as f32 / maxval as f32).collect(),
    })
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<(), DataError> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    write_file(path, &out)
}

impl GrayImage {
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                data.push(self.data[sy * self.width + x * self.width / width]);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let mut f = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(bytes).map_err(|e| DataError::io(path, e))
}
