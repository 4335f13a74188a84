//! Binary PPM (P6), 8-bit, 32x32.

use super::{Image, IMAGE_SIDE};

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", IMAGE_SIDE, IMAGE_SIDE).into_bytes();
    out.extend_from_slice(image.rgb());
    out
}

/// Parses a P6 file; header tokens may be separated by any whitespace and
/// interleaved with `#` comments.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image, String> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P6" {
        return Err(format!("magic {:?}, expected P6", tokens[0]));
    }
    let num = |t: &str| t.parse::<usize>().map_err(|_| format!("bad header number {:?}", t));
    let (w, h, max) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if w != IMAGE_SIDE || h != IMAGE_SIDE {
        return Err(format!("size {}x{}, expected {}x{}", w, h, IMAGE_SIDE, IMAGE_SIDE));
    }
    if max != 255 {
        return Err(format!("maxval {}, expected 255", max));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing raster".into());
    }
    let raster = &bytes[pos + 1..];
    if raster.len() != w * h * 3 {
        return Err(format!("raster has {} bytes, expected {}", raster.len(), w * h * 3));
    }
    Image::from_rgb(raster.to_vec()).map_err(|e| e.to_string())
}
