//! Binary greyscale PGM (`P5`), 8-bit only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a P5 image into `[h, w, 1]` with values divided by `maxval`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    if bytes.get(..2) != Some(b"P5") {
        return Err(Error::dataset(path, "not a binary PGM (missing P5 magic)"));
    }
    pos += 2;
    for field in &mut fields {
        skip_space_and_comments(bytes, &mut pos);
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::dataset(path, format!("malformed PGM header at byte {start}")))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::dataset(path, "malformed PGM header"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::dataset(
            path,
            format!("unsupported PGM depth (maxval {maxval}); only 8-bit images are read"),
        ));
    }
    if w == 0 || h == 0 {
        return Err(Error::dataset(path, "zero-sized PGM"));
    }
    let raster = &bytes[pos..];
    if raster.len() != w * h {
        return Err(Error::dataset(
            path,
            format!("expected {} pixel bytes, found {}", w * h, raster.len()),
        ));
    }
    let scale = maxval as f32;
    let data = raster.iter().map(|&p| (p as f32 / scale).min(1.0)).collect();
    Ok(Tensor::from_parts(vec![h, w, 1], data))
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::dataset(path, e.to_string()))?;
    decode_pgm(&bytes, path)
}

/// Encodes a `[h, w, 1]` image with values in `[0, 1]` as an 8-bit P5 file.
pub fn encode_pgm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[h, w, 1] = image.shape() else {
        return Err(Error::Shape(format!(
            "PGM needs a [h, w, 1] image, got {:?}",
            image.shape()
        )));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let img = decode_pgm(bytes, Path::new("t.pgm")).unwrap();
        assert_eq!(img.shape(), &[1, 2, 1]);
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_is_rejected() {
        let err = decode_pgm(b"P5 1 1 65535\n\x00\x00", Path::new("deep.pgm")).unwrap_err();
        assert!(err.to_string().contains("depth"), "{err}");
        assert!(decode_pgm(b"P2 1 1 255\n0", Path::new("ascii.pgm")).is_err());
    }

    #[test]
    fn encode_decode_recovers_bytes() {
        let px: Vec<f32> = (0..=255u8).map(|p| p as f32 / 255.0).collect();
        let img = Tensor::new([16, 16, 1], px).unwrap();
        let back = decode_pgm(&encode_pgm(&img).unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, img);
    }
}
