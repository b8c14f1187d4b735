//! Binary 8-bit PGM (P5) and PPM (P6) files holding CHW images in [-1, 1].

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `v / 127.5 - 1`.
pub fn decode_byte(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Nearest 8-bit level of a value in [-1, 1] (clamped).
pub fn encode_value(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Serializes a (1,H,W) image as P5 or a (3,H,W) image as P6.
pub fn encode(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    let (magic, c) = match s {
        [1, _, _] => ("P5", 1),
        [3, _, _] => ("P6", 3),
        _ => {
            return Err(Error::InvalidShape {
                op: "pnm",
                msg: format!("expected (1|3, H, W), got {s:?}"),
            })
        }
    };
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * plane);
    let data = img.data();
    for i in 0..plane {
        for ch in 0..c {
            out.push(encode_value(data[ch * plane + i]));
        }
    }
    Ok(out)
}

pub fn write(path: &Path, img: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode(img)?).map_err(|e| Error::io(path, e))
}

/// Parses P5 or P6 bytes into a CHW tensor; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |msg: &str| Error::format(path, msg);
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic `{m}` (expected P5 or P6)"))),
    };
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad {what} `{s}`")));
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} unsupported (expected 255)")));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero-sized image"));
    }
    let plane = w * h;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != channels * plane {
        return Err(bad(&format!("expected {} raster bytes, found {}", channels * plane, raster.len())));
    }
    let mut data = vec![0f32; channels * plane];
    for (i, px) in raster.chunks_exact(channels).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * plane + i] = decode_byte(v);
        }
    }
    Tensor::new([channels, h, w], data)
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_mapping_endpoints() {
        assert_eq!(decode_byte(0), -1.0);
        assert_eq!(decode_byte(255), 1.0);
        assert_eq!(encode_value(-1.0), 0);
        assert_eq!(encode_value(1.0), 255);
        assert_eq!(encode_value(7.0), 255);
        for v in 0..=255u8 {
            assert_eq!(encode_value(decode_byte(v)), v);
        }
    }

    #[test]
    fn header_with_comment_and_interleaving() {
        let bytes = b"P6\n# note\n2 1\n255\n\x00\xff\x80\xff\x00\x00";
        let t = decode(bytes, Path::new("x.ppm")).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[-1.0, 1.0, 1.0, -1.0, decode_byte(0x80), -1.0]);
    }

    #[test]
    fn malformed_files_name_the_path() {
        for bytes in [&b"P3\n1 1\n255\n\x00"[..], b"P5\n1 1\n65535\n\x00\x00", b"P5\n2 2\n255\n\x00", b"P5\n2"] {
            let err = decode(bytes, Path::new("bad/1.b.pgm")).unwrap_err().to_string();
            assert!(err.contains("bad/1.b.pgm"), "{err}");
        }
    }

    proptest! {
        #[test]
        fn round_trip_within_quantization(h in 1usize..6, w in 1usize..6, color in any::<bool>(), seed in any::<u64>()) {
            let c = if color { 3 } else { 1 };
            let mut init = crate::nn::Init::new(seed);
            let img: Tensor<f32> = init.uniform(&[c, h, w], 1.0);
            let back = decode(&encode(&img).unwrap(), Path::new("p")).unwrap();
            prop_assert_eq!(back.shape(), img.shape());
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 127.5);
            }
            // re-encoding a decoded image is lossless
            prop_assert_eq!(encode(&back).unwrap(), encode(&img).unwrap());
        }
    }
}
