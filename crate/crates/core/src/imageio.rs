//! PNG encoding of RGB images, grayscale masks and heatmaps, plus grid
//! layout for galleries.

use std::io::Cursor;

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(bytes).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

/// Encodes a `3 × H × W` image with values in `[0, 1]` as 8-bit RGB PNG.
pub fn rgb_png(image: &Tensor3) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::InvalidInput(format!(
            "expected 3 channels, got {}",
            image.channels()
        )));
    }
    let n = image.plane_len();
    let mut bytes = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            bytes.push(to_u8(image.channel(c)[i]));
        }
    }
    encode(image.width(), image.height(), png::ColorType::Rgb, &bytes)
}

/// Encodes a plane of values in `[0, 1]` as 8-bit grayscale PNG.
pub fn gray_png(values: &[f32], width: usize, height: usize) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = values.iter().map(|v| to_u8(*v)).collect();
    encode(width, height, png::ColorType::Grayscale, &bytes)
}

pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    Ok((info.width as usize, info.height as usize, channels, buf))
}

/// Blue→red colour ramp for heatmaps.
fn heat(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 1.0 - (2.0 * v - 1.0).abs(), 1.0 - v]
}

/// Blends a normalised heatmap over an image (`alpha` weight on the heatmap).
pub fn overlay_heatmap(image: &Tensor3, heatmap: &[f32], alpha: f32) -> Tensor3 {
    let mut out = image.clone();
    let n = image.plane_len();
    for i in 0..n {
        let h = heat(heatmap[i]);
        for (c, hc) in h.iter().enumerate() {
            let v = &mut out.channel_mut(c)[i];
            *v = (1.0 - alpha) * *v + alpha * hc;
        }
    }
    out
}

/// Tiles equally sized images into a grid with `cols` columns and a 1px
/// white gutter.
pub fn grid(images: &[Tensor3], cols: usize) -> Tensor3 {
    if images.is_empty() {
        return Tensor3::zeros(3, 1, 1);
    }
    let (h, w) = (images[0].height(), images[0].width());
    let cols = cols.max(1).min(images.len());
    let rows = images.len().div_ceil(cols);
    let gh = rows * (h + 1) + 1;
    let gw = cols * (w + 1) + 1;
    let mut out = Tensor3::zeros(3, gh, gw);
    out.data_mut().fill(1.0);
    for (k, img) in images.iter().enumerate() {
        let (oy, ox) = ((k / cols) * (h + 1) + 1, (k % cols) * (w + 1) + 1);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.channel_mut(c)[(oy + y) * gw + ox + x] = img.channel(c)[y * w + x];
                }
            }
        }
    }
    out
}

/// Decodes an 8-bit RGB or RGBA PNG into a `3 × H × W` image in `[0, 1]`.
pub fn png_to_image(bytes: &[u8]) -> Result<Tensor3> {
    let (w, h, ch, buf) = decode_png(bytes)?;
    if ch < 3 || buf.len() != w * h * ch {
        return Err(Error::Png(format!("expected 8-bit RGB, got {ch} samples per pixel")));
    }
    let mut img = Tensor3::zeros(3, h, w);
    for i in 0..w * h {
        for c in 0..3 {
            img.channel_mut(c)[i] = buf[i * ch + c] as f32 / 255.0;
        }
    }
    Ok(img)
}
