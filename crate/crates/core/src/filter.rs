//! Pixel-wise filtering: every output pixel is the dot product of its own
//! predicted `k×k` kernel with the `k×k` neighbourhood of the input pixel.
//!
//! ```text
//! out(i, j, c) = Σ_{u,v} K(i, j)[u, v] · I_pad(i + u − k/2, j + v − k/2, c)
//! ```
//!
//! The operation is bilinear in the image and the kernels, so both gradients
//! are exact and cheap; see [`filter_gradients`].

use crate::error::{arg_err, shape_err, Result};
use crate::imaging::{Image, KernelField, PaddingPolicy};

/// Source coordinate for an offset position, or `None` if it falls in a zero
/// pad.
#[inline]
fn source(pos: isize, len: usize, padding: PaddingPolicy) -> Option<usize> {
    if pos >= 0 && (pos as usize) < len {
        return Some(pos as usize);
    }
    match padding {
        PaddingPolicy::Replicate => Some(pos.clamp(0, len as isize - 1) as usize),
        PaddingPolicy::Zero => None,
    }
}

fn check(image: &Image, kernels: &KernelField) -> Result<()> {
    if kernels.k() % 2 == 0 {
        return Err(arg_err!("kernel side must be odd, got {}", kernels.k()));
    }
    if image.height() != kernels.height() || image.width() != kernels.width() {
        return Err(shape_err!(
            "image is {}x{} but kernel field is {}x{}",
            image.height(),
            image.width(),
            kernels.height(),
            kernels.width()
        ));
    }
    if kernels.groups() != 1 && kernels.groups() != image.channels() {
        return Err(shape_err!(
            "kernel field has {} groups; expected 1 or {} (image channels)",
            kernels.groups(),
            image.channels()
        ));
    }
    Ok(())
}

/// Offsets table: for tap `t` and position `p`, the clamped source position.
fn offset_table(len: usize, k: usize, padding: PaddingPolicy) -> Vec<Option<usize>> {
    let r = (k / 2) as isize;
    let mut table = Vec::with_capacity(k * len);
    for t in 0..k as isize {
        for p in 0..len as isize {
            table.push(source(p + t - r, len, padding));
        }
    }
    table
}

/// Applies the per-pixel kernels to `image`. The result is not clamped.
pub fn apply_pixelwise_filter(
    image: &Image,
    kernels: &KernelField,
    padding: PaddingPolicy,
) -> Result<Image> {
    check(image, kernels)?;
    let (h, w, ch) = image.dims();
    let k = kernels.k();
    let rows = offset_table(h, k, padding);
    let cols = offset_table(w, k, padding);
    let src = image.data();
    let mut out = vec![0.0; h * w * ch];

    for u in 0..k {
        for v in 0..k {
            for y in 0..h {
                let Some(sy) = rows[u * h + y] else { continue };
                for x in 0..w {
                    let Some(sx) = cols[v * w + x] else { continue };
                    let s = (sy * w + sx) * ch;
                    let o = (y * w + x) * ch;
                    if kernels.groups() == 1 {
                        let tap = kernels.tap(0, u, v, y, x);
                        for c in 0..ch {
                            out[o + c] += tap * src[s + c];
                        }
                    } else {
                        for c in 0..ch {
                            out[o + c] += kernels.tap(c, u, v, y, x) * src[s + c];
                        }
                    }
                }
            }
        }
    }
    Ok(Image::from_raw(h, w, ch, out))
}

/// Gradients of `⟨upstream, apply_pixelwise_filter(image, kernels)⟩` with
/// respect to the image and the kernels.
pub fn filter_gradients(
    image: &Image,
    kernels: &KernelField,
    upstream: &Image,
    padding: PaddingPolicy,
) -> Result<(Image, KernelField)> {
    check(image, kernels)?;
    image.ensure_same_shape(upstream, "upstream gradient")?;
    let (h, w, ch) = image.dims();
    let k = kernels.k();
    let groups = kernels.groups();
    let rows = offset_table(h, k, padding);
    let cols = offset_table(w, k, padding);
    let src = image.data();
    let up = upstream.data();
    let mut grad_image = vec![0.0; h * w * ch];
    let mut grad_kernels = KernelField::zeros(k, groups, h, w)?;

    for u in 0..k {
        for v in 0..k {
            for y in 0..h {
                let Some(sy) = rows[u * h + y] else { continue };
                for x in 0..w {
                    let Some(sx) = cols[v * w + x] else { continue };
                    let s = (sy * w + sx) * ch;
                    let o = (y * w + x) * ch;
                    if groups == 1 {
                        let tap = kernels.tap(0, u, v, y, x);
                        let mut acc = 0.0;
                        for c in 0..ch {
                            acc += up[o + c] * src[s + c];
                            grad_image[s + c] += tap * up[o + c];
                        }
                        let gi = grad_kernels.index(0, u, v, y, x);
                        grad_kernels.data_mut()[gi] += acc;
                    } else {
                        for c in 0..ch {
                            let gi = grad_kernels.index(c, u, v, y, x);
                            grad_kernels.data_mut()[gi] += up[o + c] * src[s + c];
                            grad_image[s + c] += kernels.tap(c, u, v, y, x) * up[o + c];
                        }
                    }
                }
            }
        }
    }
    Ok((Image::from_raw(h, w, ch, grad_image), grad_kernels))
}
