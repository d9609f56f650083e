//! Image loading: toy specs are rendered, paths are decoded from disk.

use std::path::Path;

use rwkv_clip_core::data::{render_toy, ImageSource, PairedRecord};
use rwkv_clip_core::Tensor;

use crate::error::{Error, Result};

/// `[size, size, 3]` in `[0, 1]`. Relative paths resolve against `base`.
/// Files must already be `size × size`; nothing is resized.
pub fn load_record_image(rec: &PairedRecord, base: &Path, size: usize) -> Result<Tensor> {
    match &rec.image_source {
        ImageSource::Toy(spec) => {
            if spec.size != size {
                return Err(Error::Image {
                    path: rec.id.clone().into(),
                    message: format!("toy spec is {}px but the model expects {size}px", spec.size),
                });
            }
            Ok(render_toy(spec)?)
        }
        ImageSource::Path(p) => load_png(&base.join(p), size),
    }
}

pub fn load_png(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            message: e.to_string(),
        })?
        .to_rgb8();
    if img.width() as usize != size || img.height() as usize != size {
        return Err(Error::Image {
            path: path.into(),
            message: format!("expected {size}x{size}, found {}x{}", img.width(), img.height()),
        });
    }
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Ok(Tensor::new([size, size, 3], data)?)
}

/// Writes a `[H, W, 3]` tensor in `[0, 1]` as 8-bit RGB.
pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    let &[h, w, 3] = t.shape() else {
        return Err(Error::Image {
            path: path.into(),
            message: format!("expected [H, W, 3], got {:?}", t.shape()),
        });
    };
    let bytes: Vec<u8> = t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ColorType::Rgb8).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })
}

/// Stacks per-record images into `[B, S, S, 3]`.
pub fn batch(images: &[&Tensor]) -> Result<Tensor> {
    let owned: Vec<Tensor> = images.iter().map(|t| (*t).clone()).collect();
    Ok(Tensor::stack(&owned)?)
}
