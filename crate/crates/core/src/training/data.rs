//! Procedural person-like figures with identity-level appearance and
//! per-render nuisance, plus the on-disk PPM/CSV layout.
//!
//! An identity fixes shirt and pants colors, skin tone, a shirt pattern, an
//! accessory (hat, bag, scarf or colored shoes) and body proportions. Each
//! render draws its own background clutter, illumination, camera tint,
//! placement jitter, mirroring and pixel noise.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DipError, Result};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SHIRTS: [[f64; 3]; 6] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.65, 0.2],
    [0.15, 0.3, 0.85],
    [0.9, 0.8, 0.15],
    [0.6, 0.2, 0.7],
    [0.95, 0.5, 0.1],
];
const PANTS: [[f64; 3]; 5] = [
    [0.1, 0.1, 0.12],
    [0.85, 0.85, 0.8],
    [0.45, 0.3, 0.15],
    [0.2, 0.7, 0.75],
    [0.5, 0.5, 0.55],
];
const ACCESSORY_COLORS: [[f64; 3]; 4] = [[1.0, 0.35, 0.7], [0.05, 0.9, 0.5], [1.0, 1.0, 0.3], [0.3, 0.5, 1.0]];
const SKIN: [[f64; 3]; 3] = [[0.95, 0.8, 0.65], [0.75, 0.55, 0.4], [0.45, 0.3, 0.2]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Accessory {
    Hat,
    Bag,
    Scarf,
    Shoes,
}

const ACCESSORIES: [Accessory; 4] = [Accessory::Hat, Accessory::Bag, Accessory::Scarf, Accessory::Shoes];

/// Appearance fixed for one identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub shirt: usize,
    pub pants: usize,
    pub skin: usize,
    pub striped: bool,
    pub accessory: Accessory,
    pub accessory_color: usize,
    /// Torso height as a fraction of the figure height.
    pub torso: f64,
    /// Half-width of the torso as a fraction of the figure height.
    pub girth: f64,
}

impl IdentityParams {
    fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        IdentityParams {
            shirt: rng.random_range(0..SHIRTS.len()),
            pants: rng.random_range(0..PANTS.len()),
            skin: rng.random_range(0..SKIN.len()),
            striped: rng.random_bool(0.5),
            accessory: ACCESSORIES[rng.random_range(0..ACCESSORIES.len())],
            accessory_color: rng.random_range(0..ACCESSORY_COLORS.len()),
            torso: rng.random_range(0.3..0.4),
            girth: rng.random_range(0.11..0.15),
        }
    }

    /// Number of region-level cues (shirt, pants, accessory) on which two identities differ.
    fn cue_differences(&self, other: &IdentityParams) -> usize {
        usize::from(self.shirt != other.shirt)
            + usize::from(self.pants != other.pants)
            + usize::from(self.accessory != other.accessory || self.accessory_color != other.accessory_color)
    }
}

/// Identity parameters for `count` identities; any two differ in at least two
/// of shirt, pants and accessory whenever the palettes allow it.
pub fn identity_params(count: usize, seed: u64) -> Vec<IdentityParams> {
    let mut rng = stream(seed, &[0x1d]);
    let mut out: Vec<IdentityParams> = Vec::with_capacity(count);
    while out.len() < count {
        let mut best: Option<(usize, IdentityParams)> = None;
        for _ in 0..200 {
            let cand = IdentityParams::sample(&mut rng);
            let score = out.iter().map(|o| o.cue_differences(&cand)).min().unwrap_or(3);
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, cand));
            }
            if score >= 2 {
                break;
            }
        }
        out.push(best.expect("at least one candidate").1);
    }
    out
}

/// Row-major 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image { height, width, pixels: vec![0; height * width * 3] }
    }

    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let i = (r * self.width + c) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [u8; 3]) {
        let i = (r * self.width + c) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[H, W, 3]` with values mapped to `[-1, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.pixels.iter().map(|&v| T::of(normalize(v))).collect();
        Tensor::new(&[self.height, self.width, 3], data).expect("image shape")
    }

    /// Inverse of [`Image::to_tensor`], rounding and clamping.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Image> {
        let s = t.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(DipError::shape("Image::from_tensor", format!("{s:?} is not [H, W, 3]")));
        }
        let pixels = t.data().iter().map(|v| quantize((v.as_f64() * 0.5) + 0.5)).collect();
        Ok(Image { height: s[0], width: s[1], pixels })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path)?;
        parse_ppm(&bytes).map_err(|detail| DipError::parse("PPM", format!("{}: {detail}", path.display())))
    }
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(format!("magic {:?} is not P6", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    let (width, height, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format!("max value {max} is not 255"));
    }
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() != width * height * 3 {
        return Err(format!("{} pixel bytes for {width}x{height}", data.len()));
    }
    Ok(Image { height, width, pixels: data.to_vec() })
}

pub fn normalize(v: u8) -> f64 {
    (v as f64 / 255.0 - 0.5) / 0.5
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub identity: usize,
    pub camera: usize,
    pub image: Image,
    /// Occluder drawn over the figure, when any.
    pub occluder: Option<Rect>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    pub fn cameras(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.camera).collect()
    }

    /// One past the largest identity label.
    pub fn num_identities(&self) -> usize {
        self.samples.iter().map(|s| s.identity + 1).max().unwrap_or(0)
    }

    /// Image extents, or an error when the set is empty or mixed.
    pub fn extents(&self) -> Result<(usize, usize)> {
        let first = self.samples.first().ok_or_else(|| DipError::InsufficientData("empty dataset".into()))?;
        let ext = (first.image.height, first.image.width);
        if self.samples.iter().any(|s| (s.image.height, s.image.width) != ext) {
            return Err(DipError::InsufficientData("images of mixed size".into()));
        }
        Ok(ext)
    }

    /// `[B, H, W, 3]` tensor of the selected samples.
    pub fn batch_tensor<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let (h, w) = self.extents()?;
        let mut data = Vec::with_capacity(indices.len() * h * w * 3);
        for &i in indices {
            data.extend(self.samples[i].image.pixels.iter().map(|&v| T::of(normalize(v))));
        }
        Tensor::new(&[indices.len(), h, w, 3], data)
    }

    pub fn all_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch_tensor(&idx)
    }

    /// Writes `images/<name>` files and `labels.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images)?;
        let mut csv = String::from("filename,identity,camera\n");
        for s in &self.samples {
            s.image.write_ppm(&images.join(&s.name))?;
            csv.push_str(&format!("{},{},{}\n", s.name, s.identity, s.camera));
        }
        fs::write(dir.join("labels.csv"), csv)?;
        Ok(())
    }

    /// Reads a directory written by [`Dataset::save`]; occluders are not persisted.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let csv = fs::read_to_string(dir.join("labels.csv"))?;
        let mut samples = Vec::new();
        for (n, line) in csv.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || DipError::parse("labels.csv", format!("line {}: {line:?}", n + 1));
            if cols.len() != 3 {
                return Err(bad());
            }
            let identity = cols[1].parse().map_err(|_| bad())?;
            let camera = cols[2].parse().map_err(|_| bad())?;
            let image = Image::read_ppm(&dir.join("images").join(cols[0]))?;
            samples.push(Sample { name: cols[0].to_string(), identity, camera, image, occluder: None });
        }
        let ds = Dataset { samples };
        ds.extents()?;
        Ok(ds)
    }
}

/// Generation settings for one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub identities: usize,
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    /// Probability that a render carries an occluder.
    pub occlusion_rate: f64,
    /// Pixel noise standard deviation on the `[0, 1]` scale.
    pub noise: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { identities: 16, images_per_identity: 8, height: 64, width: 32, occlusion_rate: 0.0, noise: 0.03 }
    }
}

/// Renders `spec` with identity appearance drawn from `seed`.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Dataset {
    generate_split(spec, seed, 0, |idx| idx % 2, None)
}

/// Renders one split; `split` separates nuisance streams of splits that share
/// identities, `camera` assigns a camera per image index and `forced_occlusion`
/// overrides the occlusion rate.
pub fn generate_split(
    spec: &DatasetSpec,
    seed: u64,
    split: u64,
    camera: impl Fn(usize) -> usize,
    forced_occlusion: Option<bool>,
) -> Dataset {
    let ids = identity_params(spec.identities, seed);
    let mut samples = Vec::with_capacity(spec.identities * spec.images_per_identity);
    for (id, params) in ids.iter().enumerate() {
        for idx in 0..spec.images_per_identity {
            let cam = camera(idx);
            let mut rng = stream(seed, &[split, id as u64, idx as u64]);
            let mut occ_rng = stream(seed, &[split, id as u64, idx as u64, 0x0cc]);
            let occlude = forced_occlusion.unwrap_or_else(|| occ_rng.random_bool(spec.occlusion_rate));
            let (image, occluder) = render(params, spec, cam, &mut rng, occlude.then_some(&mut occ_rng));
            samples.push(Sample { name: format!("{id:03}_{idx:03}.ppm"), identity: id, camera: cam, image, occluder });
        }
    }
    Dataset { samples }
}

/// Held-out evaluation layout over the same identities as the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub base: DatasetSpec,
    pub train_per_identity: usize,
    pub query_per_identity: usize,
    pub gallery_per_identity: usize,
    pub train_occlusion: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            base: DatasetSpec::default(),
            train_per_identity: 16,
            query_per_identity: 2,
            gallery_per_identity: 4,
            train_occlusion: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySplits {
    pub train: Dataset,
    pub query: Dataset,
    pub gallery: Dataset,
    /// The query renders with an occluder over each figure.
    pub query_occluded: Dataset,
}

pub const SPLIT_NAMES: [&str; 4] = ["train", "query", "gallery", "query_occluded"];

impl ToySplits {
    pub fn generate(spec: &ToySpec, seed: u64) -> ToySplits {
        let with = |n: usize, occ: f64| DatasetSpec { images_per_identity: n, occlusion_rate: occ, ..spec.base.clone() };
        let train = generate_split(&with(spec.train_per_identity, spec.train_occlusion), seed, 1, |i| i % 2, None);
        let query = generate_split(&with(spec.query_per_identity, 0.0), seed, 2, |_| 0, Some(false));
        let gallery = generate_split(&with(spec.gallery_per_identity, 0.0), seed, 3, |i| i % 2, Some(false));
        let query_occluded = generate_split(&with(spec.query_per_identity, 0.0), seed, 2, |_| 0, Some(true));
        ToySplits { train, query, gallery, query_occluded }
    }

    pub fn split(&self, name: &str) -> Option<&Dataset> {
        match name {
            "train" => Some(&self.train),
            "query" => Some(&self.query),
            "gallery" => Some(&self.gallery),
            "query_occluded" => Some(&self.query_occluded),
            _ => None,
        }
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        for name in SPLIT_NAMES {
            self.split(name).expect("known split").save(&root.join(name))?;
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<ToySplits> {
        if !root.is_dir() {
            return Err(DipError::InsufficientData(format!("dataset directory {} not found", root.display())));
        }
        let load = |name: &str| {
            let dir = root.join(name);
            if !dir.join("labels.csv").is_file() {
                return Err(DipError::InsufficientData(format!("missing split {}", dir.display())));
            }
            Dataset::load(&dir)
        };
        Ok(ToySplits {
            train: load("train")?,
            query: load("query")?,
            gallery: load("gallery")?,
            query_occluded: load("query_occluded")?,
        })
    }
}

/// Float RGB canvas in `[0, 1]`.
struct Canvas {
    h: usize,
    w: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn fill_rect(&mut self, top: f64, left: f64, bottom: f64, right: f64, color: [f64; 3]) {
        self.fill_with(top, left, bottom, right, |_, _| color);
    }

    /// Fills pixels whose centers fall inside `[top, bottom) x [left, right)`.
    fn fill_with(&mut self, top: f64, left: f64, bottom: f64, right: f64, mut f: impl FnMut(usize, usize) -> [f64; 3]) {
        let r0 = (top - 0.5).ceil().max(0.0) as usize;
        let c0 = (left - 0.5).ceil().max(0.0) as usize;
        let r1 = ((bottom - 0.5).ceil().max(0.0) as usize).min(self.h);
        let c1 = ((right - 0.5).ceil().max(0.0) as usize).min(self.w);
        for r in r0..r1 {
            for c in c0..c1 {
                self.px[r * self.w + c] = f(r, c);
            }
        }
    }

    fn fill_disc(&mut self, cy: f64, cx: f64, radius: f64, color: [f64; 3]) {
        for r in 0..self.h {
            for c in 0..self.w {
                let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                if dy * dy + dx * dx <= radius * radius {
                    self.px[r * self.w + c] = color;
                }
            }
        }
    }
}

fn shade(color: [f64; 3], k: f64) -> [f64; 3] {
    color.map(|v| (v * k).min(1.0))
}

fn random_color<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn render<R: Rng + ?Sized>(
    p: &IdentityParams,
    spec: &DatasetSpec,
    camera: usize,
    rng: &mut R,
    occlusion: Option<&mut R>,
) -> (Image, Option<Rect>) {
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut cv = Canvas { h, w, px: vec![[0.0; 3]; h * w] };

    // background: base color, floor band and clutter rectangles
    let base = random_color(rng, 0.15, 0.85);
    let floor = random_color(rng, 0.15, 0.7);
    let horizon = hf * rng.random_range(0.75..0.9);
    cv.fill_rect(0.0, 0.0, horizon, wf, base);
    cv.fill_rect(horizon, 0.0, hf, wf, floor);
    for _ in 0..rng.random_range(3..7) {
        let (rh, rw) = (rng.random_range(0.1..0.4) * hf, rng.random_range(0.15..0.6) * wf);
        let (t, l) = (rng.random_range(-0.1..0.9) * hf, rng.random_range(-0.2..0.9) * wf);
        let c = random_color(rng, 0.05, 0.95);
        cv.fill_rect(t, l, t + rh, l + rw, c);
    }

    // figure placement
    let scale = rng.random_range(0.88..1.0);
    let fh = 0.9 * hf * scale;
    let top = (hf - fh) / 2.0 + rng.random_range(-0.04..0.04) * hf;
    let cx = wf / 2.0 + rng.random_range(-0.08..0.08) * wf;
    let mirror = rng.random_bool(0.5);
    let side = if mirror { -1.0 } else { 1.0 };
    let y = |f: f64| top + f * fh;
    let hw = p.girth * fh;
    let arm = 0.045 * fh;

    let skin = SKIN[p.skin];
    let shirt = SHIRTS[p.shirt];
    let pants = PANTS[p.pants];
    let acc = ACCESSORY_COLORS[p.accessory_color];
    let torso_top = y(0.17);
    let torso_bottom = y(0.17 + p.torso);

    // head and neck
    cv.fill_disc(y(0.085), cx, 0.075 * fh, skin);
    cv.fill_rect(y(0.15), cx - 0.03 * fh, torso_top, cx + 0.03 * fh, skin);
    // arms, torso with optional stripes
    cv.fill_rect(torso_top + 0.01 * fh, cx - hw - arm, torso_bottom - 0.02 * fh, cx - hw, shade(shirt, 0.8));
    cv.fill_rect(torso_top + 0.01 * fh, cx + hw, torso_bottom - 0.02 * fh, cx + hw + arm, shade(shirt, 0.8));
    cv.fill_disc(torso_bottom - 0.01 * fh, cx - hw - arm / 2.0, arm * 0.7, skin);
    cv.fill_disc(torso_bottom - 0.01 * fh, cx + hw + arm / 2.0, arm * 0.7, skin);
    let stripe = shade(shirt, 0.45);
    let striped = p.striped;
    cv.fill_with(torso_top, cx - hw, torso_bottom, cx + hw, |r, _| {
        if striped && ((r as f64 - torso_top) / (0.05 * fh)).floor() as i64 % 2 == 1 {
            stripe
        } else {
            shirt
        }
    });
    // legs and shoes
    let shoe_top = y(0.95);
    let gap = 0.02 * fh;
    cv.fill_rect(torso_bottom, cx - hw * 0.85, shoe_top, cx - gap, pants);
    cv.fill_rect(torso_bottom, cx + gap, shoe_top, cx + hw * 0.85, pants);
    let shoes = if p.accessory == Accessory::Shoes { acc } else { [0.12, 0.1, 0.1] };
    cv.fill_rect(shoe_top, cx - hw * 0.95, y(1.0), cx - gap, shoes);
    cv.fill_rect(shoe_top, cx + gap, y(1.0), cx + hw * 0.95, shoes);
    match p.accessory {
        Accessory::Hat => {
            cv.fill_rect(y(0.0), cx - 0.09 * fh, y(0.06), cx + 0.09 * fh, acc);
        }
        Accessory::Bag => {
            let (near, far) = (cx + side * (hw + arm), cx + side * (hw + arm + 0.11 * fh));
            let (l, r) = if near < far { (near, far) } else { (far, near) };
            cv.fill_rect(torso_bottom - 0.14 * fh, l, torso_bottom + 0.04 * fh, r, acc);
        }
        Accessory::Scarf => {
            cv.fill_rect(y(0.15), cx - hw * 0.9, y(0.22), cx + hw * 0.9, acc);
        }
        Accessory::Shoes => {}
    }

    let figure = Rect {
        top: top.max(0.0) as usize,
        left: (cx - hw - arm - 0.12 * fh).max(0.0) as usize,
        height: (fh as usize).min(h.saturating_sub(top.max(0.0) as usize)),
        width: 0,
    };
    let right = ((cx + hw + arm + 0.12 * fh).min(wf)) as usize;
    let figure = Rect { width: right.saturating_sub(figure.left), ..figure };

    let occluder = occlusion.map(|orng| {
        let frac = orng.random_range(0.2..=0.5);
        let color = random_color(orng, 0.05, 0.95);
        let texture = orng.random_range(0.0..0.15);
        let rect = if orng.random_bool(0.7) {
            let band = ((figure.height as f64 * frac).round() as usize).max(1);
            let t = figure.top + orng.random_range(0..=figure.height - band);
            Rect { top: t, left: figure.left, height: band, width: figure.width }
        } else {
            let block = ((figure.width as f64 * frac).round() as usize).max(1);
            let l = if orng.random_bool(0.5) { figure.left } else { figure.left + figure.width - block };
            Rect { top: figure.top, left: l, height: figure.height, width: block }
        };
        cv.fill_with(rect.top as f64, rect.left as f64, (rect.top + rect.height) as f64, (rect.left + rect.width) as f64, |r, c| {
            let k = 1.0 + texture * if (r / 2 + c / 2) % 2 == 0 { 1.0 } else { -1.0 };
            shade(color, k)
        });
        rect
    });

    // illumination, camera tint, noise
    let brightness = rng.random_range(0.7..1.25);
    let tint = if camera % 2 == 0 { [1.0, 1.0, 1.0] } else { [1.08, 1.0, 0.85] };
    let mut img = Image::new(h, w);
    for r in 0..h {
        for c in 0..w {
            let src = if mirror { cv.px[r * w + (w - 1 - c)] } else { cv.px[r * w + c] };
            let mut rgb = [0u8; 3];
            for z in 0..3 {
                let n: f64 = StandardNormal.sample(rng);
                rgb[z] = quantize(src[z] * brightness * tint[z] + spec.noise * n);
            }
            img.set_pixel(r, c, rgb);
        }
    }
    let occluder = occluder.map(|o| if mirror { Rect { left: w - o.left - o.width, ..o } } else { o });
    (img, occluder)
}
