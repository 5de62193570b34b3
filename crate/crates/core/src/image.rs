//! Image aliases and small helpers.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Single-channel grayscale image, row-major.
pub type Image = Array2<f64>;

/// All channels must share dimensions.
pub fn check_same_dims(channels: &[Image]) -> Result<()> {
    if channels.is_empty() {
        return Err(Error::Shape("image has no channels".into()));
    }
    let dim = channels[0].dim();
    for (i, ch) in channels.iter().enumerate() {
        if ch.dim() != dim {
            return Err(Error::Shape(format!(
                "channel {i} has shape {:?}, expected {:?}",
                ch.dim(),
                dim
            )));
        }
    }
    Ok(())
}

/// Center crop to (h, w); returns an error if the image is smaller.
pub fn center_crop(img: &Image, h: usize, w: usize) -> Result<Image> {
    let (ih, iw) = img.dim();
    if ih < h || iw < w {
        return Err(Error::Geometry(format!(
            "cannot crop {ih}x{iw} image to {h}x{w}"
        )));
    }
    let r0 = (ih - h) / 2;
    let c0 = (iw - w) / 2;
    Ok(img.slice(ndarray::s![r0..r0 + h, c0..c0 + w]).to_owned())
}

/// Largest center crop with both dimensions divisible by 2^levels.
pub fn crop_to_multiple(img: &Image, levels: usize) -> Result<Image> {
    let step = 1usize << levels;
    let (ih, iw) = img.dim();
    let h = (ih / step) * step;
    let w = (iw / step) * step;
    if h == 0 || w == 0 {
        return Err(Error::Geometry(format!
            ("image {ih}x{iw} too small for {levels} pyramid levels")));
    }
    center_crop(img, h, w)
}
