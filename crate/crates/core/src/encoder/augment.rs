use nalgebra::{SMatrix, SVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Random crop plus perspective jitter applied to renders before
/// embedding. With `crop = perspective = 0` every view is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Number of views averaged inside the semantic loss.
    pub views: usize,
    /// Largest fraction of each side that a crop may remove.
    pub crop: f64,
    /// Largest corner displacement, as a fraction of the side.
    pub perspective: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { views: 1, crop: 0.0, perspective: 0.0 }
    }
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        self.crop == 0.0 && self.perspective == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::Config("augmentation needs at least one view".into()));
        }
        if !(0.0..0.5).contains(&self.crop) || !(0.0..0.25).contains(&self.perspective) {
            return Err(Error::Config("augmentation crop must be in [0, 0.5) and perspective in [0, 0.25)".into()));
        }
        Ok(())
    }

    pub fn sample(&self, width: usize, height: usize, rng: &mut impl Rng) -> Warp {
        if self.is_identity() {
            return Warp::identity(width, height);
        }
        let (w, h) = (width as f64, height as f64);
        let cw = w * (1.0 - self.crop * rng.random::<f64>());
        let ch = h * (1.0 - self.crop * rng.random::<f64>());
        let ox = (w - cw) * rng.random::<f64>();
        let oy = (h - ch) * rng.random::<f64>();
        let mut jitter = |s: f64| self.perspective * s * (2.0 * rng.random::<f64>() - 1.0);
        let src = [
            [ox + jitter(w), oy + jitter(h)],
            [ox + cw + jitter(w), oy + jitter(h)],
            [ox + cw + jitter(w), oy + ch + jitter(h)],
            [ox + jitter(w), oy + ch + jitter(h)],
        ];
        let dst = [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
        match homography(&dst, &src) {
            Some(hm) => Warp::from_homography(width, height, &hm),
            None => Warp::identity(width, height),
        }
    }
}

/// Solves for `H` with `H·dst_i ∝ src_i` (eight unknowns, `h₃₃ = 1`).
fn homography(dst: &[[f64; 2]; 4], src: &[[f64; 2]; 4]) -> Option<[f64; 9]> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let [x, y] = dst[i];
        let [u, v] = src[i];
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    Some([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0])
}

/// A fixed resampling of an image onto itself: each output pixel is a
/// bilinear blend of up to four source pixels (clamped at the border).
/// Linear in the pixels, so the adjoint is the transpose.
#[derive(Clone, Debug)]
pub struct Warp {
    width: usize,
    height: usize,
    /// `None` for the identity.
    taps: Option<Vec<[(u32, f64); 4]>>,
}

impl Warp {
    pub fn identity(width: usize, height: usize) -> Self {
        Self { width, height, taps: None }
    }

    fn from_homography(width: usize, height: usize, hm: &[f64; 9]) -> Self {
        let mut taps = Vec::with_capacity(width * height);
        let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        for py in 0..height {
            for px in 0..width {
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                let d = hm[6] * x + hm[7] * y + hm[8];
                let u = (hm[0] * x + hm[1] * y + hm[2]) / d - 0.5;
                let v = (hm[3] * x + hm[4] * y + hm[5]) / d - 0.5;
                let (fx, fy) = (u.floor(), v.floor());
                let (tx, ty) = (u - fx, v - fy);
                let (x0, y0) = (fx as isize, fy as isize);
                let idx = |xx: isize, yy: isize| (clampi(yy, height) * width + clampi(xx, width)) as u32;
                taps.push([
                    (idx(x0, y0), (1.0 - tx) * (1.0 - ty)),
                    (idx(x0 + 1, y0), tx * (1.0 - ty)),
                    (idx(x0, y0 + 1), (1.0 - tx) * ty),
                    (idx(x0 + 1, y0 + 1), tx * ty),
                ]);
            }
        }
        Self { width, height, taps: Some(taps) }
    }

    pub fn is_identity(&self) -> bool {
        self.taps.is_none()
    }

    pub fn apply(&self, image: &RasterImage) -> RasterImage {
        let Some(taps) = &self.taps else { return image.clone() };
        let src = image.pixels();
        let mut out = vec![0.0; src.len()];
        for (o, tap) in taps.iter().enumerate() {
            for &(i, w) in tap {
                for c in 0..3 {
                    out[3 * o + c] += w * src[3 * i as usize + c];
                }
            }
        }
        RasterImage::new(self.width, self.height, out).expect("warp preserves shape")
    }

    /// Adjoint of [`Warp::apply`].
    pub fn transpose(&self, grad: &[f64]) -> Vec<f64> {
        let Some(taps) = &self.taps else { return grad.to_vec() };
        let mut out = vec![0.0; grad.len()];
        for (o, tap) in taps.iter().enumerate() {
            for &(i, w) in tap {
                for c in 0..3 {
                    out[3 * i as usize + c] += w * grad[3 * o + c];
                }
            }
        }
        out
    }
}
