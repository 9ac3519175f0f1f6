//! IVIT tensor files and 8-bit binary PGM/PPM images.
//!
//! IVIT layout (all integers little-endian):
//!
//! ```text
//! "IVIT" | version: u8 = 1 | rank: u32 | dims: rank x u32 | payload: f32 x prod(dims)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tensor::{Image, Shape, Tensor};

pub const IVIT_MAGIC: [u8; 4] = *b"IVIT";
pub const IVIT_VERSION: u8 = 1;

pub fn encode_ivit(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(&IVIT_MAGIC);
    out.push(IVIT_VERSION);
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode_ivit(bytes: &[u8]) -> std::result::Result<Tensor, FormatError> {
    if bytes.len() < 9 {
        if bytes.len() >= 4 && bytes[..4] != IVIT_MAGIC {
            return Err(FormatError::BadMagic {
                found: bytes[..4].try_into().expect("4 bytes"),
            });
        }
        return Err(FormatError::Truncated {
            expected: 9,
            actual: bytes.len(),
        });
    }
    if bytes[..4] != IVIT_MAGIC {
        return Err(FormatError::BadMagic {
            found: bytes[..4].try_into().expect("4 bytes"),
        });
    }
    if bytes[4] != IVIT_VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4]));
    }
    let rank = u32_at(bytes, 5);
    if rank == 0 {
        return Err(FormatError::ZeroRank(rank));
    }
    let header = 9 + 4 * rank as usize;
    if bytes.len() < header {
        return Err(FormatError::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..rank as usize).map(|i| u32_at(bytes, 9 + 4 * i) as usize).collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FormatError::Header(format!("dims {dims:?} overflow")))?;
    let expected = header + 4 * count;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes {
            expected,
            actual: bytes.len() - expected,
        });
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Tensor { dims, data })
}

pub fn write_ivit(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_ivit(t)).map_err(|e| Error::io(path, e))
}

pub fn read_ivit(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_ivit(&bytes)?)
}

pub fn write_image_ivit(path: &Path, img: &Image) -> Result<()> {
    write_ivit(path, &Tensor::from(img))
}

pub fn read_image_ivit(path: &Path) -> Result<Image> {
    read_ivit(path)?.into_image()
}

/// [-1, 1] to a byte: `(v + 1) / 2 * 255`, rounded half away from zero.
pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

/// P5 for one channel, P6 for three (interleaved RGB).
pub fn encode_pnm(img: &Image) -> Result<Vec<u8>> {
    let s = img.shape();
    let magic = match s.channels {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::shape("1 or 3 channels", s)),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.width, s.height).into_bytes();
    let plane = s.plane();
    for p in 0..plane {
        for c in 0..s.channels {
            out.push(to_byte(img.data()[c * plane + p]));
        }
    }
    Ok(out)
}

pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Image, FormatError> {
    let bad = |m: &str| FormatError::Header(m.to_string());
    let mut pos = 0usize;
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
            return Err(bad("header ends early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic `{other}`"))),
    };
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad {what} `{s}`")));
    let width = parse(fields[1], "width")?;
    let height = parse(fields[2], "height")?;
    if parse(fields[3], "maxval")? != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    let plane = width * height;
    let expected = pos + plane * channels;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes {
            expected,
            actual: bytes.len() - expected,
        });
    }
    let mut data = vec![0.0; plane * channels];
    for p in 0..plane {
        for c in 0..channels {
            data[c * plane + p] = from_byte(bytes[pos + p * channels + c]);
        }
    }
    Ok(Image::from_vec(Shape::new(channels, height, width), data).expect("sized buffer"))
}

pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_pnm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_pnm(&bytes)?)
}

/// Read an image by extension: `.ivit` as a tensor, `.pgm`/`.ppm` as PNM.
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") | Some("ppm") | Some("pnm") => read_pnm(path),
        _ => read_image_ivit(path),
    }
}

/// Read a single-channel sketch in [0, 1]. PGM files hold sketches through the
/// usual [-1, 1] byte map, as the dataset previews do.
pub fn read_sketch(path: &Path) -> Result<Image> {
    let img = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") | Some("ppm") | Some("pnm") => read_pnm(path)?.map(|v| (v + 1.0) * 0.5),
        _ => read_image_ivit(path)?,
    };
    if img.channels() != 1 {
        return Err(Error::shape("single-channel sketch", img.shape()));
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_map_endpoints() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.0), 128);
        assert_eq!(from_byte(0), -1.0);
        assert_eq!(from_byte(255), 1.0);
    }

    #[test]
    fn ivit_layout_is_exact() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let b = encode_ivit(&t);
        let mut want = b"IVIT".to_vec();
        want.push(1);
        want.extend_from_slice(&[1, 0, 0, 0, 2, 0, 0, 0]);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(b, want);
        assert_eq!(decode_ivit(&b).unwrap(), t);
    }

    #[test]
    fn ivit_errors_are_distinct() {
        let t = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap();
        let b = encode_ivit(&t);
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_ivit(&bad), Err(FormatError::BadMagic { .. })));
        let mut bad = b.clone();
        bad[4] = 2;
        assert_eq!(decode_ivit(&bad), Err(FormatError::UnsupportedVersion(2)));
        assert_eq!(
            decode_ivit(&b[..b.len() - 3]),
            Err(FormatError::Truncated {
                expected: b.len(),
                actual: b.len() - 3
            })
        );
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(
            decode_ivit(&long),
            Err(FormatError::TrailingBytes { actual: 1, .. })
        ));
        let mut zero = b"IVIT".to_vec();
        zero.push(1);
        zero.extend_from_slice(&0u32.to_le_bytes());
        assert_eq!(decode_ivit(&zero), Err(FormatError::ZeroRank(0)));
    }

    #[test]
    fn pnm_headers_and_round_trip() {
        let img = Image::from_vec(Shape::new(3, 2, 3), (0..18).map(|i| i as f64 / 9.0 - 1.0).collect()).unwrap();
        let b = encode_pnm(&img).unwrap();
        assert!(b.starts_with(b"P6\n3 2\n255\n"));
        let back = decode_pnm(&b).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, c) in img.data().iter().zip(back.data()) {
            assert!((a - c).abs() <= 1.0 / 255.0 + 1e-12);
        }
        let g = Image::filled(Shape::new(1, 2, 2), 0.0);
        assert!(encode_pnm(&g).unwrap().starts_with(b"P5\n2 2\n255\n"));
        assert!(encode_pnm(&Image::zeros(Shape::new(2, 2, 2))).is_err());
        assert!(matches!(decode_pnm(b"P3\n1 1\n255\n\0"), Err(FormatError::Header(_))));
        assert!(matches!(
            decode_pnm(b"P5\n2 2\n255\n\0"),
            Err(FormatError::Truncated { .. })
        ));
        assert!(decode_pnm(b"P5 # c\n1 1\n255\n\x80").is_ok());
    }
}
