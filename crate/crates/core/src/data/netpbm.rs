//! Binary PGM (`P5`) and PPM (`P6`) with maxval 255.

use std::fs;
use std::path::Path;

use super::ImageRecord;
use crate::error::{Error, Result};

struct Header {
    channels: u8,
    width: usize,
    height: usize,
    payload_offset: usize,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(parse_err(0, "file too short for magic number"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(parse_err(
                0,
                format!("unsupported magic {:?}", String::from_utf8_lossy(other)),
            ))
        }
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before every field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(parse_err(pos, "unexpected end of header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(start, "expected a decimal number"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ASCII");
        *field = text
            .parse()
            .map_err(|_| parse_err(start, format!("number {text} out of range")))?;
        if *field == 0 {
            let name = ["width", "height", "maxval"][i];
            return Err(parse_err(start, format!("{name} must be positive")));
        }
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(parse_err(pos, format!("unsupported maxval {maxval}, expected 255")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(parse_err(pos, "missing whitespace after maxval")),
    }
    Ok(Header {
        channels,
        width,
        height,
        payload_offset: pos,
    })
}

/// Decodes a netpbm byte buffer; `id` becomes the record id.
pub fn decode(id: &str, bytes: &[u8]) -> Result<ImageRecord> {
    let header = parse_header(bytes)?;
    let expected = header.width * header.height * header.channels as usize;
    let available = bytes.len() - header.payload_offset;
    if available < expected {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: header promises {expected} bytes, file has {available}"),
        ));
    }
    if available > expected {
        return Err(parse_err(
            header.payload_offset + expected,
            format!("{} trailing bytes after payload", available - expected),
        ));
    }
    Ok(ImageRecord {
        id: id.to_string(),
        width: header.width,
        height: header.height,
        channels: header.channels,
        pixels: bytes[header.payload_offset..].to_vec(),
        mask: None,
        num_classes: None,
    })
}

/// Encodes pixels as `P5` (1 channel) or `P6` (3 channels).
pub fn encode(width: usize, height: usize, channels: u8, pixels: &[u8]) -> Result<Vec<u8>> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::InvalidArgument(format!("cannot encode {c} channels"))),
    };
    if pixels.len() != width * height * channels as usize {
        return Err(Error::InvalidArgument(format!(
            "pixel buffer of {} bytes does not match {width}x{height}x{channels}",
            pixels.len()
        )));
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Reads a PGM/PPM file. The id is the file stem.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRecord> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode(&id, &bytes)
}

/// Writes the pixel payload of `image` as PGM/PPM.
pub fn save_image(path: impl AsRef<Path>, image: &ImageRecord) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(image.width, image.height, image.channels, &image.pixels)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the class-index mask of `image` as PGM.
pub fn save_mask(path: impl AsRef<Path>, image: &ImageRecord) -> Result<()> {
    let path = path.as_ref();
    let mask = image
        .mask
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("image {} has no mask", image.id)))?;
    let bytes = encode(image.width, image.height, 1, mask)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a class-index PGM.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let record = load_image(path.as_ref())?;
    if record.channels != 1 {
        return Err(parse_err(0, "mask must be a single-channel PGM"));
    }
    Ok(record.pixels)
}
