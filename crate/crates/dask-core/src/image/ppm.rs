//! Binary PPM (P6, maxval 255) import/export. Stored value v maps to the real
//! v/255; export clips to [0,1] and rounds to nearest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", img.width(), img.height())?;
    let (h, w) = (img.height(), img.width());
    let mut buf = Vec::with_capacity(h * w * CHANNELS);
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let v = img.get(c, y, x).clamp(0.0, 1.0);
                buf.push((v * 255.0).round() as u8);
            }
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let mut data = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut data)?;
    let mut pos = 0usize;

    let magic = next_token(&data, &mut pos)?;
    if magic != b"P6" {
        return Err(Error::DataFormat(format!(
            "not a binary PPM: magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let width: usize = parse_number(&data, &mut pos)?;
    let height: usize = parse_number(&data, &mut pos)?;
    let maxval: usize = parse_number(&data, &mut pos)?;
    if maxval != 255 {
        return Err(Error::DataFormat(format!("unsupported maxval {maxval}")));
    }
    // A single whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * CHANNELS;
    if data.len() < pos + need {
        return Err(Error::DataFormat(format!(
            "raster truncated: need {need} bytes, have {}",
            data.len().saturating_sub(pos)
        )));
    }
    let mut pixels = vec![0.0; need];
    let hw = height * width;
    for y in 0..height {
        for x in 0..width {
            for c in 0..CHANNELS {
                let byte = data[pos + (y * width + x) * CHANNELS + c];
                pixels[c * hw + y * width + x] = byte as f64 / 255.0;
            }
        }
    }
    Image::new(height, width, pixels)
}

fn next_token(data: &[u8], pos: &mut usize) -> Result<Vec<u8>> {
    while *pos < data.len() && data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    // PPM comments run from '#' to end of line.
    while *pos < data.len() && data[*pos] == b'#' {
        while *pos < data.len() && data[*pos] != b'\n' {
            *pos += 1;
        }
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::DataFormat("unexpected end of PPM header".into()));
    }
    Ok(data[start..*pos].to_vec())
}

fn parse_number(data: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = next_token(data, pos)?;
    std::str::from_utf8(&tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::DataFormat("bad number in PPM header".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn round_trip_preserves_quantized_values() {
        let mut rng = crate::rng::stream(31, "ppm", 0);
        let img = Image::new(
            5,
            4,
            (0..5 * 4 * CHANNELS)
                .map(|_| (rng.random::<f64>() * 255.0).round() / 255.0)
                .collect(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.height(), 5);
        assert_eq!(back.width(), 4);
        for (a, b) in back.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn export_clips_out_of_range_values() {
        let img = Image::new(1, 2, vec![-0.5, 1.5, 0.25, 0.5, 0.0, 1.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.ppm");
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.get(0, 0, 0), 0.0);
        assert_eq!(back.get(0, 0, 1), 1.0);
    }

    #[test]
    fn rejects_non_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P5\n2 2\n255\n0000").unwrap();
        assert!(matches!(read_ppm(&path), Err(Error::DataFormat(_))));
    }
}
