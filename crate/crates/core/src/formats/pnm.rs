use std::path::Path;

use super::write_atomic;
use crate::evalkit::Heatmap;
use crate::image::Image;
use crate::{Error, Result};

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6 for 3-channel images.
pub fn encode_ppm(image: &Image) -> Result<Vec<u8>> {
    if image.channels != 3 {
        return Err(Error::Shape(format!("PPM needs 3 channels, got {}", image.channels)));
    }
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    let n = image.height * image.width;
    for i in 0..n {
        for c in 0..3 {
            out.push(quantize(image.data[c * n + i]));
        }
    }
    Ok(out)
}

/// Binary P5 for single-channel images.
pub fn encode_pgm(image: &Image) -> Result<Vec<u8>> {
    if image.channels != 1 {
        return Err(Error::Shape(format!("PGM needs 1 channel, got {}", image.channels)));
    }
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn encode_pgm_bytes(heatmap: &Heatmap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", heatmap.width, heatmap.height).into_bytes();
    out.extend_from_slice(&heatmap.pixels);
    out
}

/// Parses P5 or P6 with an 8-bit maxval; `#` comments are allowed in the header.
pub fn decode_pnm(bytes: &[u8], context: &str) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(context, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace byte before the raster
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format(context, format!("unsupported magic {other:?}"))),
    };
    let num = |s: &str, what: &str| -> Result<usize> { s.parse().map_err(|_| Error::format(context, format!("bad {what} {s:?}"))) };
    let (width, height, maxval) = (num(&fields[1], "width")?, num(&fields[2], "height")?, num(&fields[3], "maxval")?);
    if maxval != 255 {
        return Err(Error::format(context, format!("maxval {maxval} (only 255 is supported)")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(context, "zero-sized image"));
    }
    let n = width * height;
    let raster = bytes.get(pos..pos + n * channels).ok_or_else(|| Error::format(context, format!("expected {} raster bytes", n * channels)))?;
    if bytes.len() != pos + n * channels {
        return Err(Error::format(context, "trailing bytes after raster"));
    }
    let mut data = vec![0.0f32; n * channels];
    for i in 0..n {
        for c in 0..channels {
            data[c * n + i] = raster[i * channels + c] as f32 / 255.0;
        }
    }
    Image::from_data(channels, height, width, data)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    decode_pnm(&bytes, &path.display().to_string())
}

/// PPM for RGB, PGM for single-channel images.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let bytes = if image.channels == 1 { encode_pgm(image)? } else { encode_ppm(image)? };
    write_atomic(path, &bytes)
}
