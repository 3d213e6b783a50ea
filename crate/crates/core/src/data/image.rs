//! PNG I/O and resampling on `[C, H, W]` images in `[-1, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{input_err, Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), message: e.to_string() }
}

/// `p / 127.5 - 1`
pub fn byte_to_unit(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

pub fn unit_to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Load an 8-bit grayscale or RGB(A) PNG as `[channels, H, W]`. RGB is
/// converted to luma when one channel is requested; gray is replicated when
/// three are.
pub fn load_png(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    if channels != 1 && channels != 3 {
        return Err(input_err!("only 1- or 3-channel images are supported, got {channels}"));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(image_err(path, format!("unsupported color type {other:?}"))),
    };
    let line = info.line_size;
    let px = |y: usize, x: usize, c: usize| buf[y * line + x * stride + c];
    let rgb = stride >= 3;
    Ok(Tensor::from_fn(&[channels, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let v = match (rgb, channels) {
            (false, _) => px(y, x, 0) as f32,
            (true, 3) => px(y, x, c) as f32,
            (true, _) => 0.299 * px(y, x, 0) as f32 + 0.587 * px(y, x, 1) as f32 + 0.114 * px(y, x, 2) as f32,
        };
        v / 127.5 - 1.0
    }))
}

/// Write a `[C, H, W]` (C = 1 or 3) or `[H, W]` image in `[-1, 1]` as 8-bit PNG.
pub fn save_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = match *image.shape() {
        [h, w] => (1, h, w),
        [c, h, w] if c == 1 || c == 3 => (c, h, w),
        ref s => return Err(input_err!("cannot write image of shape {s:?}")),
    };
    let mut bytes = vec![0u8; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes[(y * w + x) * c + ch] = unit_to_byte(image.data()[ch * h * w + y * w + x]);
            }
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if c == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

/// Bilinear sample of one plane with border replication.
pub(crate) fn sample_bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear resize of `[C, H, W]` with pixel-centre alignment.
pub fn resize(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = *image.shape() else {
        return Err(input_err!("resize expects [C, H, W], got {:?}", image.shape()));
    };
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    Ok(Tensor::from_fn(&[c, out_h, out_w], |i| {
        let (ch, y, x) = (i / (out_h * out_w), (i / out_w) % out_h, i % out_w);
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        sample_bilinear(plane, h, w, (y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5)
    }))
}
