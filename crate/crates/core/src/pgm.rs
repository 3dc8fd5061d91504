//! Binary PGM I/O and resampling.
//!
//! Images travel as 16-bit graymaps (maxval 65535, most significant byte
//! first, row-major) with intensities mapped linearly to [0,1]; label masks
//! as 8-bit graymaps with values {0,1,2,3}. Mask round-trips are lossless;
//! image round-trips are exact to one quantization step (1/65535).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::{Precision, Tensor};

const IMAGE_MAXVAL: u32 = 65535;
const MASK_MAXVAL: u32 = 3;

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Save a 2D image with values in [0,1] as a 16-bit binary PGM.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 2 {
        return Err(Error::shape(
            "save_image",
            format!("expected (H,W) tensor, got {:?}", s),
        ));
    }
    let (h, w) = (s[0], s[1]);
    let mut bytes = Vec::with_capacity(32 + 2 * h * w);
    write!(&mut bytes, "P5\n{} {}\n{}\n", w, h, IMAGE_MAXVAL)?;
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) * IMAGE_MAXVAL as f64).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Load a 16-bit PGM written by [`save_image`] back into [0,1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (w, h, maxval, payload) = parse_header(path, &bytes)?;
    if maxval != IMAGE_MAXVAL {
        return Err(format_err(
            path,
            format!("expected maxval {}, got {}", IMAGE_MAXVAL, maxval),
        ));
    }
    if payload.len() != 2 * w * h {
        return Err(format_err(
            path,
            format!("expected {} payload bytes, got {}", 2 * w * h, payload.len()),
        ));
    }
    let mut data = Vec::with_capacity(w * h);
    for px in payload.chunks_exact(2) {
        let q = u16::from_be_bytes([px[0], px[1]]);
        data.push(q as f64 / IMAGE_MAXVAL as f64);
    }
    Ok(Tensor::from_parts(vec![h, w], data, Precision::Single))
}

/// Save a single-slice label mask as an 8-bit binary PGM.
pub fn save_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let (n, h, w) = mask.dims();
    if n != 1 {
        return Err(Error::shape(
            "save_mask",
            format!("expected a single slice, got {} slices", n),
        ));
    }
    let mut bytes = Vec::with_capacity(32 + h * w);
    write!(&mut bytes, "P5\n{} {}\n{}\n", w, h, MASK_MAXVAL)?;
    bytes.extend_from_slice(mask.data());
    fs::write(path, bytes)?;
    Ok(())
}

/// Load a label mask written by [`save_mask`].
pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let bytes = fs::read(path)?;
    let (w, h, maxval, payload) = parse_header(path, &bytes)?;
    if maxval != MASK_MAXVAL {
        return Err(format_err(
            path,
            format!("expected maxval {}, got {}", MASK_MAXVAL, maxval),
        ));
    }
    if payload.len() != w * h {
        return Err(format_err(
            path,
            format!("expected {} payload bytes, got {}", w * h, payload.len()),
        ));
    }
    LabelMask::new(1, h, w, payload.to_vec())
}

/// Parse a binary PGM header, returning (width, height, maxval, payload).
fn parse_header<'a>(path: &Path, bytes: &'a [u8]) -> Result<(usize, usize, u32, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(format_err(path, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comment lines
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "malformed header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| format_err(path, "non-utf8 header"))?;
        *field = text
            .parse()
            .map_err(|_| format_err(path, "unparsable header field"))?;
    }
    // exactly one whitespace byte separates header from payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, "missing header terminator"));
    }
    pos += 1;
    let (w, h, maxval) = (fields[0] as usize, fields[1] as usize, fields[2]);
    if w == 0 || h == 0 {
        return Err(format_err(path, "zero extent"));
    }
    Ok((w, h, maxval, &bytes[pos..]))
}

/// Bilinear resize of a 2D image to the target extents.
pub fn resize_to(x: &Tensor, size: (usize, usize)) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::shape(
            "resize_to",
            format!("expected (H,W) tensor, got {:?}", s),
        ));
    }
    let (h_in, w_in) = (s[0], s[1]);
    let (h_out, w_out) = size;
    if h_out == 0 || w_out == 0 {
        return Err(Error::InvalidArgument("target extents must be positive".into()));
    }
    if (h_in, w_in) == (h_out, w_out) {
        return Ok(x.clone());
    }
    let rows = resize_taps(h_in, h_out);
    let cols = resize_taps(w_in, w_out);
    let src = x.data();
    let mut out = Vec::with_capacity(h_out * w_out);
    for &(i0, i1, fi) in &rows {
        for &(j0, j1, fj) in &cols {
            let v = src[i0 * w_in + j0] * (1.0 - fi) * (1.0 - fj)
                + src[i0 * w_in + j1] * (1.0 - fi) * fj
                + src[i1 * w_in + j0] * fi * (1.0 - fj)
                + src[i1 * w_in + j1] * fi * fj;
            out.push(v);
        }
    }
    Ok(Tensor::from_parts(vec![h_out, w_out], out, x.precision()))
}

/// Nearest-neighbor resize for label masks; labels are never interpolated.
pub fn resize_mask_to(mask: &LabelMask, size: (usize, usize)) -> Result<LabelMask> {
    let (n, h_in, w_in) = mask.dims();
    let (h_out, w_out) = size;
    if h_out == 0 || w_out == 0 {
        return Err(Error::InvalidArgument("target extents must be positive".into()));
    }
    if (h_in, w_in) == (h_out, w_out) {
        return Ok(mask.clone());
    }
    let pick = |o: usize, n_out: usize, n_in: usize| -> usize {
        let scale = n_in as f64 / n_out as f64;
        (((o as f64 + 0.5) * scale) as usize).min(n_in - 1)
    };
    let mut out = LabelMask::zeros(n, h_out, w_out);
    for ni in 0..n {
        for i in 0..h_out {
            let si = pick(i, h_out, h_in);
            for j in 0..w_out {
                let sj = pick(j, w_out, w_in);
                out.set(ni, i, j, mask.get(ni, si, sj));
            }
        }
    }
    Ok(out)
}

fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            if src <= 0.0 {
                return (0, 0, 0.0);
            }
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - src.floor())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use tempfile::tempdir;

    #[test]
    fn mask_round_trip_is_lossless() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let data: Vec<u8> = (0..64).map(|_| rng.gen_range(0..4)).collect();
        let m = LabelMask::new(1, 8, 8, data).unwrap();
        let path = dir.path().join("m.pgm");
        save_mask(&path, &m).unwrap();
        let back = load_mask(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn image_round_trip_within_quantization() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Tensor::new(vec![8, 8], data, Precision::Single).unwrap();
        let path = dir.path().join("i.pgm");
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        let bound = 0.5 / 65535.0 + 1e-9;
        assert!(back.max_abs_diff(&img) <= bound);
    }

    #[test]
    fn header_matches_format_definition() {
        let dir = tempdir().unwrap();
        let img = Tensor::zeros(&[64, 64], Precision::Single);
        let path = dir.path().join("h.pgm");
        save_image(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header: Vec<&str> = std::str::from_utf8(&bytes[..15])
            .unwrap()
            .split_ascii_whitespace()
            .collect();
        assert_eq!(header, vec!["P5", "64", "64", "65535"]);
    }

    #[test]
    fn malformed_header_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P6\n2 2\n255\n\0\0\0\0").unwrap();
        assert!(load_image(&path).is_err());
        std::fs::write(&path, b"P5\n2 x\n255\n").unwrap();
        assert!(load_image(&path).is_err());
    }

    #[test]
    fn unexpected_maxval_is_an_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m8.pgm");
        std::fs::write(&path, b"P5\n2 2\n255\n\0\0\0\0").unwrap();
        assert!(load_image(&path).is_err());
        assert!(load_mask(&path).is_err());
    }

    #[test]
    fn resize_same_size_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..36).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Tensor::new(vec![6, 6], data, Precision::Single).unwrap();
        let out = resize_to(&img, (6, 6)).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn upscaling_a_constant_stays_constant() {
        let img = Tensor::full(&[4, 4], 0.37, Precision::Double);
        let out = resize_to(&img, (8, 8)).unwrap();
        for &v in out.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_resize_preserves_label_set() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let data: Vec<u8> = (0..100).map(|_| rng.gen_range(0..4)).collect();
        let m = LabelMask::new(1, 10, 10, data).unwrap();
        for target in [(7, 13), (20, 20), (3, 3)] {
            let out = resize_mask_to(&m, target).unwrap();
            assert!(out.data().iter().all(|&v| v < 4));
        }
    }
}
