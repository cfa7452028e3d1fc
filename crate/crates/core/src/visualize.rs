//! File export of implicit positions, score maps and weightings.
//!
//! Per image: `<name>_dip<k>.pgm` holds the weight matrix `W_k` at patch-grid
//! resolution (16-bit, scaled so the largest entry is 65535), `<name>.csv`
//! lists `k, p_x, p_y, p̂_x, p̂_y, w`, and `<name>_marked.ppm` is the input with
//! each predicted position drawn as a small cross.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{DipError, Result};
use crate::implicit_position::{implicit_positions, PatchGrid, CORRELATION_EPS};
use crate::model::DipModel;
use crate::scalar::Scalar;
use crate::training::data::{Dataset, Image};

const PGM_MAX: f64 = 65535.0;
const INFER_CHUNK: usize = 64;

/// One marker color per DiP, cycled.
pub const MARK_COLORS: [[u8; 3]; 8] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
    [255, 255, 255],
    [0, 0, 0],
];

#[derive(Clone, Debug, PartialEq)]
pub struct DipRow {
    pub k: usize,
    /// Implicit position from the score map.
    pub implicit: [f64; 2],
    /// Head prediction.
    pub predicted: [f64; 2],
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageVisual {
    pub name: String,
    pub grid: PatchGrid,
    /// `W_k` per DiP in row-major grid order.
    pub score_maps: Vec<Vec<f64>>,
    pub rows: Vec<DipRow>,
}

/// Pixel holding a normalized position, rounded and clamped to the image.
pub fn position_to_pixel(p: [f64; 2], height: usize, width: usize) -> (usize, usize) {
    let to = |v: f64, n: usize| ((v * n as f64 - 0.5).round().max(0.0) as usize).min(n - 1);
    (to(p[0], height), to(p[1], width))
}

pub fn analyze<T: Scalar>(model: &DipModel<T>, data: &Dataset) -> Result<Vec<ImageVisual>> {
    let cfg = model.patch_config();
    if cfg.dips == 0 {
        return Err(DipError::Config("the model has no DiP tokens to visualize".into()));
    }
    let (h, w) = data.extents()?;
    if (h, w) != (cfg.height, cfg.width) {
        return Err(DipError::ConfigMismatch(format!("images are {h}x{w}, the model expects {}x{}", cfg.height, cfg.width)));
    }
    let grid = PatchGrid::new(cfg.grid_h(), cfg.grid_w());
    let inf = model.infer(&data.all_tensor()?, INFER_CHUNK)?;
    let (dips, predicted) = match (&inf.dips, &inf.positions) {
        (Some(d), Some(p)) => (d, p),
        _ => return Err(DipError::Config("inference returned no DiP outputs".into())),
    };
    let (weights, implicit) = implicit_positions(dips, &inf.patches, &grid, CORRELATION_EPS)?;
    let (m, n) = (cfg.dips, grid.len());
    Ok(data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let score_maps =
                (0..m).map(|k| weights.data()[(i * m + k) * n..(i * m + k + 1) * n].iter().map(|v| v.as_f64()).collect()).collect();
            let rows = (0..m)
                .map(|k| {
                    let at = |t: &crate::tensor::Tensor<T>| {
                        let o = (i * m + k) * 2;
                        [t.data()[o].as_f64(), t.data()[o + 1].as_f64()]
                    };
                    DipRow { k, implicit: at(&implicit), predicted: at(predicted), weight: inf.weights.data()[i * m + k].as_f64() }
                })
                .collect();
            ImageVisual { name: s.name.clone(), grid, score_maps, rows }
        })
        .collect())
}

/// 16-bit binary PGM.
pub fn encode_pgm(values: &[f64], rows: usize, cols: usize) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{cols} {rows}\n{}\n", PGM_MAX as u32).into_bytes();
    for &v in values {
        let q = if max > 0.0 { (v / max * PGM_MAX).round() as u16 } else { 0 };
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

/// Pixel values of a 16-bit PGM produced by [`encode_pgm`].
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let bad = |d: &str| DipError::parse("pgm", d);
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(bad("expected a 16-bit P5 image"));
    }
    let cols: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let rows: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let body = &bytes[pos + 1..];
    if body.len() != rows * cols * 2 {
        return Err(bad("pixel data length"));
    }
    Ok((rows, cols, body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}

pub fn csv(visual: &ImageVisual) -> String {
    let mut out = String::from("k,p_x,p_y,p_hat_x,p_hat_y,w\n");
    for r in &visual.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.k, r.implicit[0], r.implicit[1], r.predicted[0], r.predicted[1], r.weight
        );
    }
    out
}

/// Copy of `image` with a 3x3 cross at each predicted position.
pub fn mark(image: &Image, visual: &ImageVisual) -> Image {
    let mut out = image.clone();
    let (h, w) = (image.height as isize, image.width as isize);
    for r in &visual.rows {
        let (pr, pc) = position_to_pixel(r.predicted, image.height, image.width);
        let color = MARK_COLORS[r.k % MARK_COLORS.len()];
        for (dr, dc) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (y, x) = (pr as isize + dr, pc as isize + dc);
            if (0..h).contains(&y) && (0..w).contains(&x) {
                out.set_pixel(y as usize, x as usize, color);
            }
        }
    }
    out
}

/// Writes every artifact for `data` into `dir`; returns the files written.
pub fn export<T: Scalar>(model: &DipModel<T>, data: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let visuals = analyze(model, data)?;
    let mut written = Vec::new();
    for (v, s) in visuals.iter().zip(&data.samples) {
        for (k, map) in v.score_maps.iter().enumerate() {
            let path = dir.join(format!("{}_dip{k}.pgm", v.name));
            fs::write(&path, encode_pgm(map, v.grid.rows, v.grid.cols))?;
            written.push(path);
        }
        let path = dir.join(format!("{}.csv", v.name));
        fs::write(&path, csv(v))?;
        written.push(path);
        let path = dir.join(format!("{}_marked.ppm", v.name));
        mark(&s.image, v).write_ppm(&path)?;
        written.push(path);
    }
    Ok(written)
}
