//! 8-bit PNG reading and writing for `[3, h, w]` images in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use mdr_core::Tensor;

use crate::error::{read, write, Error, Result};

/// Quantizes one value to 8 bits.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest 8-bit level.
pub fn quantize(img: &Tensor<f64>) -> Tensor<f64> {
    img.map(|v| to_u8(v) as f64 / 255.0)
}

/// Planar `[3, h, w]` to interleaved RGB bytes.
pub fn to_rgb8(img: &Tensor<f64>) -> Result<(usize, usize, Vec<u8>)> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Invalid(format!("expected a [3, h, w] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push(to_u8(d[c * h * w + i]));
        }
    }
    Ok((h, w, out))
}

/// Interleaved RGB bytes to planar `[3, h, w]` in `[0, 1]`.
pub fn from_rgb8(h: usize, w: usize, rgb: &[u8]) -> Tensor<f64> {
    let mut out = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            out[c * h * w + i] = rgb[3 * i + c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], out)
}

/// PNG bytes of an image; identical input gives identical bytes.
pub fn encode_png(img: &Tensor<f64>) -> Result<Vec<u8>> {
    let (h, w, rgb) = to_rgb8(img)?;
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let fail = |e: png::EncodingError| Error::Invalid(format!("png encoding: {e}"));
        let mut wr = enc.write_header().map_err(fail)?;
        wr.write_image_data(&rgb).map_err(fail)?;
        wr.finish().map_err(fail)?;
    }
    Ok(buf)
}

/// Decodes PNG bytes of any 8- or 16-bit gray/RGB(A) layout into `[3, h, w]`.
pub fn decode_png(bytes: &[u8], path: &Path) -> Result<Tensor<f64>> {
    let fail = |msg: String| Error::Image { path: path.to_path_buf(), msg };
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| fail(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| fail("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| fail(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(fail(format!("unsupported color type {other:?}"))),
    };
    let line = info.line_size;
    let mut rgb = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        let row = &buf[y * line..y * line + w * channels];
        for px in row.chunks(channels) {
            if channels < 3 {
                rgb.extend_from_slice(&[px[0]; 3]);
            } else {
                rgb.extend_from_slice(&px[..3]);
            }
        }
    }
    Ok(from_rgb8(h, w, &rgb))
}

pub fn read_png(path: &Path) -> Result<Tensor<f64>> {
    decode_png(&read(path)?, path)
}

pub fn write_png(path: &Path, img: &Tensor<f64>) -> Result<()> {
    write(path, encode_png(img)?)
}

/// Center square crop followed by area resampling to `size x size`.
pub fn fit_square(img: &Tensor<f64>, size: usize) -> Result<Tensor<f64>> {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let side = h.min(w);
    if side < size {
        return Err(Error::Invalid(format!("image {h}x{w} smaller than {size}x{size}")));
    }
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let scale = side as f64 / size as f64;
    // overlap of source pixel [i, i+1) with target cell [a, b)
    let weights = |o: usize| -> Vec<(usize, f64)> {
        let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
        (a.floor() as usize..(b.ceil() as usize).min(side))
            .map(|i| (i, ((i + 1) as f64).min(b) - (i as f64).max(a)))
            .filter(|(_, wt)| *wt > 0.0)
            .collect()
    };
    let taps: Vec<Vec<(usize, f64)>> = (0..size).map(weights).collect();
    let d = img.data();
    let mut out = vec![0.0; 3 * size * size];
    for c in 0..3 {
        for (oy, ty) in taps.iter().enumerate() {
            for (ox, tx) in taps.iter().enumerate() {
                let mut acc = 0.0;
                for &(iy, wy) in ty {
                    for &(ix, wx) in tx {
                        acc += wy * wx * d[(c * h + y0 + iy) * w + x0 + ix];
                    }
                }
                out[(c * size + oy) * size + ox] = acc / (scale * scale);
            }
        }
    }
    Ok(Tensor::from_vec(&[3, size, size], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_levels() {
        let img = quantize(&Tensor::from_fn(&[3, 5, 7], |i| (i % 11) as f64 / 10.0));
        let bytes = encode_png(&img).unwrap();
        assert_eq!(encode_png(&img).unwrap(), bytes);
        let back = decode_png(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn fit_square_averages_blocks() {
        let img = Tensor::from_fn(&[3, 4, 6], |i| (i % 6) as f64);
        let out = fit_square(&img, 2).unwrap();
        // center 4x4 of each row 0..6 is columns 1..5; halves average to 1.5 and 3.5
        assert_eq!(&out.data()[..4], &[1.5, 3.5, 1.5, 3.5]);
        assert!(fit_square(&img, 5).is_err());
    }
}
