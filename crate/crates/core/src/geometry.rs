//! Affine transforms shared by the image warp and the position targets.
//!
//! Points are `(x, y)` in normalized image coordinates with `x` along rows and
//! `y` along columns, matching the patch grid. Pixel `(r, c)` of an `H x W`
//! image has its center at `((r + 0.5) / H, (c + 0.5) / W)`, so the image
//! center is `(0.5, 0.5)` and a horizontal flip maps `y` to `1 - y`.

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{DipError, Result};
use crate::implicit_position::ImplicitPosition;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fractional sample offsets closer than this to a pixel center snap onto it.
const SNAP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineConfig {
    /// Translation bound per axis as a fraction of the side length.
    pub translate: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub hflip_prob: f64,
}

impl Default for AffineConfig {
    fn default() -> Self {
        AffineConfig { translate: 0.12, scale_min: 0.9, scale_max: 1.1, hflip_prob: 0.5 }
    }
}

impl AffineConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.translate >= 0.0
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && (0.0..=1.0).contains(&self.hflip_prob);
        if ok {
            Ok(())
        } else {
            Err(DipError::Config(format!("invalid affine config {self:?}")))
        }
    }
}

/// Homogeneous 3x3 matrix with last row `(0, 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub k: [[f64; 3]; 3],
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform { k: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    /// Linear part `[[a, b], [d, e]]` and offset `(c, f)`.
    pub fn from_parts(a: f64, b: f64, c: f64, d: f64, e: f64, f: f64) -> Self {
        AffineTransform { k: [[a, b, c], [d, e, f], [0.0, 0.0, 1.0]] }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_parts(1.0, 0.0, tx, 0.0, 1.0, ty)
    }

    /// Isotropic scaling about the image center.
    pub fn scaling(s: f64) -> Self {
        let o = 0.5 * (1.0 - s);
        Self::from_parts(s, 0.0, o, 0.0, s, o)
    }

    /// Mirror across the vertical center line: `y -> 1 - y`.
    pub fn hflip() -> Self {
        Self::from_parts(1.0, 0.0, 0.0, 0.0, -1.0, 1.0)
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &AffineTransform) -> Self {
        let mut k = [[0.0; 3]; 3];
        for (r, row) in k.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|i| self.k[r][i] * other.k[i][c]).sum();
            }
        }
        AffineTransform { k }
    }

    pub fn determinant(&self) -> f64 {
        self.k[0][0] * self.k[1][1] - self.k[0][1] * self.k[1][0]
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(DipError::SingularTransform);
        }
        let [[a, b, c], [d, e, f], _] = self.k;
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Ok(Self::from_parts(ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)))
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let k = &self.k;
        (k[0][0] * x + k[0][1] * y + k[0][2], k[1][0] * x + k[1][1] * y + k[1][2])
    }
}

/// `flip * scale * translate`, each factor drawn independently.
pub fn sample_affine<R: Rng + ?Sized>(rng: &mut R, config: &AffineConfig) -> AffineTransform {
    let t = config.translate;
    let (tx, ty) = if t > 0.0 { (rng.random_range(-t..=t), rng.random_range(-t..=t)) } else { (0.0, 0.0) };
    let s = if config.scale_max > config.scale_min {
        rng.random_range(config.scale_min..=config.scale_max)
    } else {
        config.scale_min
    };
    let flip = rng.random_bool(config.hflip_prob);
    let k = AffineTransform::scaling(s).compose(&AffineTransform::translation(tx, ty));
    if flip {
        AffineTransform::hflip().compose(&k)
    } else {
        k
    }
}

/// `[p'; 1] = K [p; 1]`.
pub fn transform_position(p: ImplicitPosition, k: &AffineTransform) -> ImplicitPosition {
    let (x, y) = k.apply(p.x, p.y);
    ImplicitPosition { x, y }
}

/// Applies `K` to every row of a `[.., 2]` position tensor.
pub fn transform_positions<T: Scalar>(p: &Tensor<T>, k: &AffineTransform) -> Tensor<T> {
    let mut out = p.clone();
    for pair in out.data_mut().chunks_mut(2) {
        let (x, y) = k.apply(pair[0].as_f64(), pair[1].as_f64());
        pair[0] = T::of(x);
        pair[1] = T::of(y);
    }
    out
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Inverse-warps an `[H, W, C]` image through `K` with bilinear sampling and zero fill.
pub fn transform_image<T: Scalar>(image: &Tensor<T>, k: &AffineTransform) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(DipError::shape("transform_image", format!("image {s:?} is not [H, W, C]")));
    }
    let (h, w, ch) = (s[0], s[1], s[2]);
    let inv = k.inverse()?;
    let src = image.data();
    let mut out = vec![T::zero(); image.len()];
    let pixel = |r: isize, c: isize, z: usize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            src[(r as usize * w + c as usize) * ch + z].as_f64()
        }
    };
    for r in 0..h {
        for c in 0..w {
            let (u, v) = inv.apply((r as f64 + 0.5) / h as f64, (c as f64 + 0.5) / w as f64);
            let sr = snap(u * h as f64 - 0.5);
            let sc = snap(v * w as f64 - 0.5);
            let (r0, c0) = (sr.floor(), sc.floor());
            let (fr, fc) = (sr - r0, sc - c0);
            let (r0, c0) = (r0 as isize, c0 as isize);
            for z in 0..ch {
                let mut acc = (1.0 - fr) * (1.0 - fc) * pixel(r0, c0, z);
                if fc > 0.0 {
                    acc += (1.0 - fr) * fc * pixel(r0, c0 + 1, z);
                }
                if fr > 0.0 {
                    acc += fr * (1.0 - fc) * pixel(r0 + 1, c0, z);
                    if fc > 0.0 {
                        acc += fr * fc * pixel(r0 + 1, c0 + 1, z);
                    }
                }
                out[(r * w + c) * ch + z] = T::of(acc);
            }
        }
    }
    Tensor::new(s, out)
}
