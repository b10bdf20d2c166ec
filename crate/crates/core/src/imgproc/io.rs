//! PNG (8-bit grayscale) and lossless raw image files.
//!
//! Raw layout: width and height as `u32` little-endian, then `width*height`
//! `f64` little-endian intensities in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Image;
use crate::{Error, Result};

pub fn encode_raw(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * img.data().len());
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 8 {
        return Err(Error::Format("raw image header truncated".into()));
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 8 * width * height {
        return Err(Error::Format(format!(
            "raw image body has {} bytes, expected {}",
            body.len(),
            8 * width * height
        )));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Image::new(width, height, data)
}

pub fn write_raw(img: &Image, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode_raw(img))?;
    f.flush()?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_raw(&bytes)
}

/// Stores `round(i * 255)` per pixel.
pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    let bytes: Vec<u8> = img.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    writer.write_image_data(&bytes).map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    let dec = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = dec.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Format("png too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("expected 8-bit grayscale, got {:?}/{:?}", info.color_type, info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size) {
        data.extend(row[..w].iter().map(|&b| b as f64 / 255.0));
    }
    Image::new(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let img = Image::from_fn(5, 3, |r, c| (r as f64 * 0.1 + c as f64 * 0.013).sin().abs());
        assert_eq!(decode_raw(&encode_raw(&img)).unwrap(), img);
    }

    #[test]
    fn raw_rejects_truncation() {
        let img = Image::filled(4, 4, 0.5);
        let bytes = encode_raw(&img);
        assert!(decode_raw(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::from_fn(7, 5, |r, c| ((r * 7 + c) % 9) as f64 / 8.0);
        write_png(&img, &p).unwrap();
        let back = read_png(&p).unwrap();
        assert!(back.same_dims(&img));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
