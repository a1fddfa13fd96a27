use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Splits an `H×W×C` image into `p×p×C` patches in raster order.
/// Row `i` of the result is patch `i` flattened row-major (`y`, `x`, channel).
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let (h, w, c) = image_dims(image)?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                let y = gy * p + py;
                let start = (y * w + gx * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, p * p * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, h: usize, w: usize, c: usize, p: usize) -> Result<Tensor> {
    let (rows, cols) = patches.dims2()?;
    if p == 0 || h % p != 0 || w % p != 0 || rows != (h / p) * (w / p) || cols != p * p * c {
        return Err(Error::shape("unpatchify", patches.shape(), &[h, w, c]));
    }
    let gw = w / p;
    let mut out = vec![0.0; h * w * c];
    for (i, patch) in patches.data().chunks_exact(cols).enumerate() {
        let (gy, gx) = (i / gw, i % gw);
        for py in 0..p {
            let y = gy * p + py;
            let start = (y * w + gx * p) * c;
            out[start..start + p * c].copy_from_slice(&patch[py * p * c..(py + 1) * p * c]);
        }
    }
    Tensor::new(&[h, w, c], out)
}

pub(crate) fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[h, w, c] => Ok((h, w, c)),
        other => Err(Error::Contract(format!(
            "expected an HxWxC image, got shape {other:?}"
        ))),
    }
}
