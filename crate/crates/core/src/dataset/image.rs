use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

type Plane = ImageBuffer<Luma<f32>, Vec<f32>>;

/// Decodes a PNG or JPEG file into `[channels, size, size]` values in `[0, 1]`.
pub fn decode_image(path: impl AsRef<Path>, channels: usize, size: usize) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image_bytes(&bytes, channels, size, &path.display().to_string())
}

/// As [`decode_image`], from an in-memory encoded buffer. `origin` names the
/// source in error messages.
///
/// Grayscale uses `0.299 R + 0.587 G + 0.114 B`; transparent pixels are
/// composited over white. Resizing is bilinear.
pub fn decode_image_bytes(
    bytes: &[u8],
    channels: usize,
    size: usize,
    origin: &str,
) -> Result<Tensor> {
    if channels != 1 && channels != 3 {
        return Err(Error::invalid(
            "decode_image",
            format!("channels must be 1 or 3, got {channels}"),
        ));
    }
    if size == 0 {
        return Err(Error::invalid("decode_image", "size must be positive"));
    }
    let img = image::load_from_memory(bytes).map_err(|e| Error::ImageDecode {
        origin: origin.to_string(),
        msg: e.to_string(),
    })?;
    let planes = to_planes(&img, channels);
    let mut data = Vec::with_capacity(channels * size * size);
    for plane in planes {
        let resized = if plane.width() as usize == size && plane.height() as usize == size {
            plane
        } else {
            imageops::resize(&plane, size as u32, size as u32, FilterType::Triangle)
        };
        data.extend(resized.into_raw().into_iter().map(snap));
    }
    Tensor::new(vec![channels, size, size], data)
}

/// Clamps to `[0, 1]` and removes filter round-off at the endpoints, so
/// flat white and black stay exactly 1 and 0.
fn snap(v: f32) -> f32 {
    const TOL: f32 = 1e-5;
    if v >= 1.0 - TOL {
        1.0
    } else if v <= TOL {
        0.0
    } else {
        v
    }
}

fn to_planes(img: &DynamicImage, channels: usize) -> Vec<Plane> {
    let rgba = img.to_rgba8();
    let (w, h) = rgba.dimensions();
    let mut planes: Vec<Plane> = (0..channels).map(|_| ImageBuffer::new(w, h)).collect();
    for (x, y, px) in rgba.enumerate_pixels() {
        let [r, g, b, a] = px.0.map(|v| v as f64 / 255.0);
        // over a white background
        let over = |c: f64| c * a + (1.0 - a);
        let (r, g, b) = (over(r), over(g), over(b));
        if channels == 1 {
            let luma = 0.299 * r + 0.587 * g + 0.114 * b;
            planes[0].put_pixel(x, y, Luma([luma as f32]));
        } else {
            for (p, v) in planes.iter_mut().zip([r, g, b]) {
                p.put_pixel(x, y, Luma([v as f32]));
            }
        }
    }
    planes
}

/// Encodes a `[1, S, S]` (or `[S, S]`) tensor of `[0, 1]` values as an 8-bit
/// grayscale PNG.
pub fn encode_gray_png(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match t.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        other => {
            return Err(Error::invalid(
                "encode_png",
                format!("expected [1,H,W], got {other:?}"),
            ))
        }
    };
    let raw: Vec<u8> = t
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized from shape");
    let mut out = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| Error::ImageDecode {
            origin: "png encoder".into(),
            msg: e.to_string(),
        })?;
    Ok(out)
}
