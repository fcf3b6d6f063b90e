//! 8-bit image files: PNG (1 or 3 channels) and binary PGM (`P5`, 1 channel).

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ByteTensor, Tensor};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Pgm,
}

impl ImageFormat {
    /// `.pgm` selects PGM, anything else PNG.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("pgm") => Self::Pgm,
            _ => Self::Png,
        }
    }
}

/// Reads a `[C, H, W]` u8 image. The format is sniffed from the content.
pub fn load_image(path: &Path) -> Result<ByteTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn decode_image(bytes: &[u8]) -> Result<ByteTensor> {
    if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else {
        Err(Error::format(0, "not a PNG or binary PGM file"))
    }
}

pub fn save_image(path: &Path, img: &ByteTensor) -> Result<()> {
    let bytes = encode_image(img, ImageFormat::from_path(path))?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Clamps to `[0, 1]`, quantizes and saves.
pub fn save_float_image(path: &Path, img: &Tensor) -> Result<()> {
    save_image(path, &super::quantize(img))
}

pub fn encode_image(img: &ByteTensor, format: ImageFormat) -> Result<Vec<u8>> {
    let (c, h, w) = img.chw()?;
    match format {
        ImageFormat::Pgm => {
            if c != 1 {
                return Err(Error::dim(format!("PGM holds one channel, image has {c}")));
            }
            let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
            out.extend_from_slice(img.data());
            Ok(out)
        }
        ImageFormat::Png => {
            let color = match c {
                1 => png::ColorType::Grayscale,
                3 => png::ColorType::Rgb,
                _ => return Err(Error::dim(format!("PNG export supports 1 or 3 channels, image has {c}"))),
            };
            let mut out = Vec::new();
            {
                let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
                enc.set_color(color);
                enc.set_depth(png::BitDepth::Eight);
                let mut writer = enc.write_header().map_err(|e| Error::format(0, e.to_string()))?;
                writer
                    .write_image_data(&planar_to_interleaved(img))
                    .map_err(|e| Error::format(0, e.to_string()))?;
            }
            Ok(out)
        }
    }
}

fn planar_to_interleaved(img: &ByteTensor) -> Vec<u8> {
    let (c, h, w) = img.chw().expect("rank checked by caller");
    let plane = h * w;
    let mut out = vec![0u8; c * plane];
    for ch in 0..c {
        for i in 0..plane {
            out[i * c + ch] = img.data()[ch * plane + i];
        }
    }
    out
}

fn decode_png(bytes: &[u8]) -> Result<ByteTensor> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::format(PNG_SIGNATURE.len() as u64, format!("bad PNG header: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(PNG_SIGNATURE.len() as u64, "PNG too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(PNG_SIGNATURE.len() as u64, format!("bad PNG data: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::format(PNG_SIGNATURE.len() as u64, "unexpanded palette PNG")),
    };
    let mut data = vec![0u8; keep * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            for ch in 0..keep {
                data[ch * h * w + y * w + x] = row[x * stride + ch];
            }
        }
    }
    ByteTensor::new(&[keep, h, w], data)
}

fn decode_pgm(bytes: &[u8]) -> Result<ByteTensor> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(pos as u64, "truncated PGM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, "expected a decimal number in PGM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format(start as u64, "PGM header number out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(pos as u64, format!("only 8-bit PGM (maxval 255) is supported, got {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(pos as u64, "missing whitespace after PGM header"));
    }
    pos += 1;
    let need = w * h;
    let have = bytes.len() - pos;
    if have < need {
        return Err(Error::format(bytes.len() as u64, format!("PGM raster truncated: {have} of {need} bytes")));
    }
    if have > need {
        return Err(Error::format((pos + need) as u64, "trailing bytes after PGM raster"));
    }
    ByteTensor::new(&[1, h, w], bytes[pos..].to_vec())
}
