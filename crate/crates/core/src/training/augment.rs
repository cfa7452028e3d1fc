//! Random erasing on normalized `[H, W, C]` images.

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{DipError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::data::Rect;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EraseConfig {
    pub prob: f64,
    pub area_min: f64,
    pub area_max: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
}

impl Default for EraseConfig {
    fn default() -> Self {
        EraseConfig { prob: 0.5, area_min: 0.02, area_max: 0.33, aspect_min: 0.3, aspect_max: 3.3 }
    }
}

/// Placement attempts before giving up on an erase.
const ATTEMPTS: usize = 100;

/// With probability `cfg.prob`, fills one random rectangle with uniform values in
/// `[-1, 1]` and returns it.
pub fn random_erase<T: Scalar, R: Rng + ?Sized>(image: &mut Tensor<T>, rng: &mut R, cfg: &EraseConfig) -> Result<Option<Rect>> {
    let s = image.shape().to_vec();
    if s.len() != 3 {
        return Err(DipError::shape("random_erase", format!("image {s:?} is not [H, W, C]")));
    }
    if cfg.prob <= 0.0 || !rng.random_bool(cfg.prob.min(1.0)) {
        return Ok(None);
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let area = (h * w) as f64;
    for _ in 0..ATTEMPTS {
        let target = area * rng.random_range(cfg.area_min..=cfg.area_max);
        let log_aspect = rng.random_range(cfg.aspect_min.ln()..=cfg.aspect_max.ln());
        let aspect = log_aspect.exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        let data = image.data_mut();
        for r in top..top + eh {
            for col in left..left + ew {
                for z in 0..c {
                    data[(r * w + col) * c + z] = T::of(rng.random_range(-1.0..=1.0));
                }
            }
        }
        return Ok(Some(Rect { top, left, height: eh, width: ew }));
    }
    Ok(None)
}
