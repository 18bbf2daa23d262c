//! Data model for images, fixation data, and saliency (density) maps, plus
//! the resize-and-pad preprocessing and its exact inverse.

pub mod codec;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected \"TSAL\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported tensor container version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("payload contains non-finite values")]
    NonFinitePayload,
    #[error("invalid tensor header: {0}")]
    BadTensorHeader(String),
    #[error("malformed {kind} header: {msg}")]
    BadHeader { kind: &'static str, msg: String },
    #[error("fixation csv line {line}: {msg}")]
    BadFixationRow { line: usize, msg: String },
    #[error("empty fixation set")]
    EmptyFixationSet,
    #[error("expected a {expected} tensor, got shape {shape:?}")]
    WrongShape {
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("fixation map values must be exactly 0 or 1, found {0}")]
    NotBinary(f64),
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("density map has negative values")]
    NegativeDensity,
    #[error("density map sums to zero, cannot normalize")]
    ZeroDensity,
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One recorded eye fixation in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
    pub observer: u32,
}

/// All fixations recorded for one image.
#[derive(Debug, Clone, Default)]
pub struct FixationSet {
    pub points: Vec<Fixation>,
}

impl FixationSet {
    pub fn new(points: Vec<Fixation>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Clamps every point into [0, width) x [0, height).
    pub fn clamped(&self, width: usize, height: usize) -> Self {
        let max_x = (width - 1) as f64;
        let max_y = (height - 1) as f64;
        Self {
            points: self
                .points
                .iter()
                .map(|p| Fixation {
                    x: p.x.clamp(0.0, max_x),
                    y: p.y.clamp(0.0, max_y),
                    observer: p.observer,
                })
                .collect(),
        }
    }
}

/// Binary grid marking fixated pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FixationMap {
    pub width: usize,
    pub height: usize,
    hits: Vec<u8>,
}

impl FixationMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            hits: vec![0; width * height],
        }
    }

    pub fn is_hit(&self, row: usize, col: usize) -> bool {
        self.hits[row * self.width + col] == 1
    }

    pub fn set_hit(&mut self, row: usize, col: usize) {
        self.hits[row * self.width + col] = 1;
    }

    pub fn hits(&self) -> &[u8] {
        &self.hits
    }

    pub fn count(&self) -> usize {
        self.hits.iter().filter(|&&h| h == 1).count()
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    /// Flat indices of all fixated pixels, row-major.
    pub fn hit_indices(&self) -> Vec<usize> {
        self.hits
            .iter()
            .enumerate()
            .filter_map(|(i, &h)| (h == 1).then_some(i))
            .collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.height, self.width], |i| self.hits[i] as f64)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(DataError::WrongShape {
                expected: "rank-2 fixation map",
                shape: t.shape().to_vec(),
            });
        }
        let mut hits = Vec::with_capacity(t.len());
        for &v in t.data() {
            if v == 0.0 {
                hits.push(0);
            } else if v == 1.0 {
                hits.push(1);
            } else {
                return Err(DataError::NotBinary(v));
            }
        }
        Ok(Self {
            width: t.shape()[1],
            height: t.shape()[0],
            hits,
        })
    }
}

/// Continuous fixation-density map; nonnegative, normalized to sum 1 for
/// ground-truth use.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    density: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, density: Vec<f64>) -> Result<Self> {
        if density.len() != width * height {
            return Err(DataError::WrongShape {
                expected: "width*height density",
                shape: vec![density.len()],
            });
        }
        if density.iter().any(|&v| v < 0.0) {
            return Err(DataError::NegativeDensity);
        }
        Ok(Self {
            width,
            height,
            density,
        })
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.density[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.density.iter().sum()
    }

    /// Rescales so the map sums to exactly 1.
    pub fn normalized(&self) -> Result<Self> {
        let s = self.sum();
        if s <= 0.0 {
            return Err(DataError::ZeroDensity);
        }
        Ok(Self {
            width: self.width,
            height: self.height,
            density: self.density.iter().map(|v| v / s).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.density.clone()).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(DataError::WrongShape {
                expected: "rank-2 saliency map",
                shape: t.shape().to_vec(),
            });
        }
        Self::new(t.shape()[1], t.shape()[0], t.data().to_vec())
    }
}

/// RGB image as a 3 x H x W tensor with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    tensor: Tensor,
}

impl ImageTensor {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 3 || tensor.shape()[0] != 3 {
            return Err(DataError::WrongShape {
                expected: "3 x H x W image",
                shape: tensor.shape().to_vec(),
            });
        }
        Ok(Self { tensor })
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }
}

/// How an image was scaled and padded, so predictions can be mapped back to
/// the original geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PadRecord {
    pub orig_w: usize,
    pub orig_h: usize,
    pub scaled_w: usize,
    pub scaled_h: usize,
    pub pad_left: usize,
    pub pad_top: usize,
    pub scale: f64,
}

/// Sum of isotropic Gaussians centered at each fixation, truncated at 4 sigma
/// and renormalized to sum 1.
pub fn density_from_fixations(
    fx: &FixationSet,
    width: usize,
    height: usize,
    sigma: f64,
) -> Result<SaliencyMap> {
    if fx.is_empty() {
        return Err(DataError::EmptyFixationSet);
    }
    if sigma <= 0.0 {
        return Err(DataError::BadSigma(sigma));
    }
    let fx = fx.clamped(width, height);
    let cutoff_sq = (4.0 * sigma) * (4.0 * sigma);
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let mut density = vec![0.0; width * height];
    for p in &fx.points {
        // Only the truncation window can contribute.
        let x_lo = (p.x - 4.0 * sigma).floor().max(0.0) as usize;
        let x_hi = ((p.x + 4.0 * sigma).ceil() as usize).min(width - 1);
        let y_lo = (p.y - 4.0 * sigma).floor().max(0.0) as usize;
        let y_hi = ((p.y + 4.0 * sigma).ceil() as usize).min(height - 1);
        for row in y_lo..=y_hi {
            for col in x_lo..=x_hi {
                let dx = col as f64 - p.x;
                let dy = row as f64 - p.y;
                let d_sq = dx * dx + dy * dy;
                if d_sq <= cutoff_sq {
                    density[row * width + col] += (-d_sq * inv_two_sigma_sq).exp();
                }
            }
        }
    }
    SaliencyMap::new(width, height, density)?.normalized()
}

/// Rounds each fixation to the nearest pixel (half away from zero) and marks
/// it; duplicate hits collapse.
pub fn fixation_map_from_set(fx: &FixationSet, width: usize, height: usize) -> Result<FixationMap> {
    if fx.is_empty() {
        return Err(DataError::EmptyFixationSet);
    }
    let fx = fx.clamped(width, height);
    let mut map = FixationMap::empty(width, height);
    for p in &fx.points {
        let col = (p.x.round() as usize).min(width - 1);
        let row = (p.y.round() as usize).min(height - 1);
        map.set_hit(row, col);
    }
    Ok(map)
}

/// Bilinear resample of a [C x H x W] tensor with half-pixel centers.
pub fn bilinear_resize(src: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        for i in 0..out_h {
            let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for j in 0..out_w {
                let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let v = (1.0 - wy) * ((1.0 - wx) * src.at3(ch, y0, x0) + wx * src.at3(ch, y0, x1))
                    + wy * ((1.0 - wx) * src.at3(ch, y1, x0) + wx * src.at3(ch, y1, x1));
                out.set3(ch, i, j, v);
            }
        }
    }
    out
}

/// Scales the image by the single factor that makes it touch the target box
/// while preserving aspect ratio, then zero-pads symmetrically.
pub fn resize_pad(img: &ImageTensor, target_w: usize, target_h: usize) -> (ImageTensor, PadRecord) {
    let (w, h) = (img.width(), img.height());
    let scale = f64::min(target_w as f64 / w as f64, target_h as f64 / h as f64);
    let scaled_w = ((w as f64 * scale).round() as usize).clamp(1, target_w);
    let scaled_h = ((h as f64 * scale).round() as usize).clamp(1, target_h);
    let resized = bilinear_resize(img.tensor(), scaled_h, scaled_w);
    let pad_left = (target_w - scaled_w) / 2;
    let pad_top = (target_h - scaled_h) / 2;
    let mut out = Tensor::zeros(&[3, target_h, target_w]);
    for c in 0..3 {
        for i in 0..scaled_h {
            for j in 0..scaled_w {
                out.set3(c, i + pad_top, j + pad_left, resized.at3(c, i, j));
            }
        }
    }
    (
        ImageTensor::new(out).expect("padded image is 3xHxW"),
        PadRecord {
            orig_w: w,
            orig_h: h,
            scaled_w,
            scaled_h,
            pad_left,
            pad_top,
            scale,
        },
    )
}

/// Crops the padded region out of a model-space [H x W] map and resizes it
/// back to the original geometry recorded in `rec`.
pub fn unpad_resize_map(map: &Tensor, rec: &PadRecord) -> Tensor {
    let w = map.shape()[1];
    let mut cropped = Tensor::zeros(&[1, rec.scaled_h, rec.scaled_w]);
    for i in 0..rec.scaled_h {
        for j in 0..rec.scaled_w {
            let v = map.data()[(i + rec.pad_top) * w + j + rec.pad_left];
            cropped.set3(0, i, j, v);
        }
    }
    let resized = bilinear_resize(&cropped, rec.orig_h, rec.orig_w);
    resized
        .reshaped(&[rec.orig_h, rec.orig_w])
        .expect("single-channel map")
}

/// Applies the same scale-and-pad transform to a ground-truth density map,
/// renormalizing so it still sums to 1.
pub fn resize_pad_density(
    map: &SaliencyMap,
    rec: &PadRecord,
    target_w: usize,
    target_h: usize,
) -> Result<SaliencyMap> {
    let src = map
        .to_tensor()
        .reshaped(&[1, map.height, map.width])
        .unwrap();
    let resized = bilinear_resize(&src, rec.scaled_h, rec.scaled_w);
    let mut out = vec![0.0; target_w * target_h];
    for i in 0..rec.scaled_h {
        for j in 0..rec.scaled_w {
            out[(i + rec.pad_top) * target_w + j + rec.pad_left] = resized.at3(0, i, j).max(0.0);
        }
    }
    SaliencyMap::new(target_w, target_h, out)?.normalized()
}

/// Maps fixation coordinates into the scaled-and-padded geometry.
pub fn resize_pad_fixations(fx: &FixationSet, rec: &PadRecord) -> FixationSet {
    FixationSet::new(
        fx.points
            .iter()
            .map(|p| Fixation {
                x: p.x * rec.scale + rec.pad_left as f64,
                y: p.y * rec.scale + rec.pad_top as f64,
                observer: p.observer,
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests;
