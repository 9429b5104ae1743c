//! 8-bit RGB image files: PNG and binary PPM (`P6`).
//!
//! Images load as `1x3xHxW` tensors with values `u8 / 255`. Saving clamps to
//! `[0, 1]` and rounds half up to the nearest 8-bit level.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{ensure_arg, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Codec {
    Png,
    Ppm,
}

fn codec_for(path: &Path) -> Result<Codec> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(Codec::Png),
        "ppm" => Ok(Codec::Ppm),
        _ => Err(Error::format(
            path,
            "unsupported image extension (expected .png or .ppm)",
        )),
    }
}

/// Reads an 8-bit RGB image. Grayscale, palette and alpha variants of PNG
/// are converted to RGB; 16-bit PNGs are rejected.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let (w, h, rgb) = match codec_for(path)? {
        Codec::Png => read_png(path)?,
        Codec::Ppm => read_ppm(path)?,
    };
    Ok(from_rgb8(w, h, &rgb))
}

/// Writes the first image of a `Nx3xHxW` tensor.
pub fn save_image<T: Real>(image: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = image.shape();
    ensure_arg!(
        s.c() == 3 && s.n() >= 1,
        "save_image expects a 3-channel image, got {s}"
    );
    let codec = codec_for(path)?;
    let rgb = to_rgb8(image);
    let (w, h) = (s.w(), s.h());
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    match codec {
        Codec::Png => {
            write_png(&mut out, w, h, &rgb).map_err(|e| Error::format(path, e.to_string()))?
        }
        Codec::Ppm => {
            write!(out, "P6\n{w} {h}\n255\n").map_err(|e| Error::io(path, e))?;
            out.write_all(&rgb).map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Quantizes one value in the way [`save_image`] does.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn from_rgb8(w: usize, h: usize, rgb: &[u8]) -> Tensor<f32> {
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        rgb[(y * w + x) * 3 + c] as f32 / 255.0
    })
}

/// Interleaved RGB bytes of the first image in the batch.
pub(crate) fn to_rgb8<T: Real>(image: &Tensor<T>) -> Vec<u8> {
    let s = image.shape();
    let mut rgb = Vec::with_capacity(s.plane() * 3);
    for y in 0..s.h() {
        for x in 0..s.w() {
            for c in 0..3 {
                rgb.push(quantize(image.at(0, c, y, x).as_f64()));
            }
        }
    }
    rgb
}

pub(crate) fn write_png<W: Write>(
    out: W,
    w: usize,
    h: usize,
    rgb: &[u8],
) -> Result<(), png::EncodingError> {
    let mut enc = png::Encoder::new(out, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(rgb)?;
    writer.finish()
}

fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(Error::format(
            path,
            "unsupported format: 16-bit PNG (only 8-bit images are supported)",
        ));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format(path, "palette was not expanded")),
    };
    let stride = info.line_size;
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * stride..];
        for x in 0..w {
            let px = &row[x * channels..(x + 1) * channels];
            match channels {
                1 | 2 => rgb.extend([px[0]; 3]),
                _ => rgb.extend_from_slice(&px[..3]),
            }
        }
    }
    Ok((w, h, rgb))
}

fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::format(path, format!("malformed PPM: {why}"));

    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token().ok_or_else(|| bad("empty file"))?;
    if magic != "P6" {
        return Err(bad("only binary P6 images are supported"));
    }
    let mut number = |what: &str| -> Result<usize> {
        token()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("bad {what}")))
    };
    let w = number("width")?;
    let h = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            path,
            format!("unsupported format: PPM maxval {maxval} (only 8-bit images are supported)"),
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let need = w * h * 3;
    if bytes.len() < start + need {
        return Err(bad("truncated raster"));
    }
    Ok((w, h, bytes[start..start + need].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(128.0 / 255.0), 128);
    }

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::<f32>::from_fn([1, 3, 5, 7], |_, c, y, x| {
            ((c * 50 + y * 30 + x * 9) % 256) as f32 / 255.0
        });
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back.to_vec(), img.to_vec(), "{name}");
        }
    }

    #[test]
    fn unknown_extension_is_format_error() {
        let err = load_image("x.bmp").unwrap_err();
        assert!(err.is_io());
    }

    #[test]
    fn ppm_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        std::fs::write(&p, b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff").unwrap();
        let t = load_image(&p).unwrap();
        assert_eq!(t.to_vec(), vec![0.0, 128.0 / 255.0, 1.0]);
    }
}
