//! Labeled image sets: CIFAR-10 binary batches, class-per-directory PNG
//! trees, and a synthetic "sprites" generator with exact ground-truth boxes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::eval::BBox;
use crate::image::Image;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// Images with class labels and, optionally, ground-truth boxes per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub boxes: Option<Vec<Vec<BBox>>>,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Common `(H, W)` of all images.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.images.first().map(Image::dims)
    }

    /// Checks every structural invariant of the set.
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(contract(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        let k = self.num_classes();
        if let Some(bad) = self.labels.iter().find(|&&l| l >= k) {
            return Err(contract(format!("label {bad} outside [0, {k})")));
        }
        if let Some((h, w)) = self.image_size() {
            if self.images.iter().any(|im| im.dims() != (h, w)) {
                return Err(contract("images do not share one size"));
            }
            if let Some(boxes) = &self.boxes {
                if boxes.len() != self.images.len() {
                    return Err(contract("box list length differs from image count"));
                }
                for b in boxes.iter().flatten() {
                    b.validate(h, w)?;
                }
            }
        }
        Ok(())
    }

    /// Selects the given indices (in order) into a new set.
    pub fn subset(&self, indices: &[usize]) -> LabeledImageSet {
        LabeledImageSet {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            boxes: self.boxes.as_ref().map(|b| indices.iter().map(|&i| b[i].clone()).collect()),
        }
    }

    /// Splits into the first `n` records and the rest.
    pub fn split_at(&self, n: usize) -> (LabeledImageSet, LabeledImageSet) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches

/// Decodes a CIFAR-10 binary batch held in memory.
pub fn decode_cifar10(bytes: &[u8]) -> Result<LabeledImageSet> {
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::Format(format!(
            "CIFAR batch length {} is not a multiple of {CIFAR_RECORD_LEN}",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD_LEN);
    let mut labels = Vec::with_capacity(images.capacity());
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR10_CLASSES.len() {
            return Err(Error::Format(format!("record {i}: label byte {label} >= 10")));
        }
        let data = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
        images.push(Image::new(CIFAR_SIDE, CIFAR_SIDE, data)?);
        labels.push(label);
    }
    Ok(LabeledImageSet {
        images,
        labels,
        class_names: CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
        boxes: None,
    })
}

pub fn load_cifar10_batch(path: &Path) -> Result<LabeledImageSet> {
    let bytes = fs::read(path)?;
    decode_cifar10(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Inverse of the decoder for one record.
pub fn encode_cifar10_record(image: &Image, label: usize) -> Result<Vec<u8>> {
    if image.dims() != (CIFAR_SIDE, CIFAR_SIDE) {
        return Err(contract("CIFAR records are 32x32"));
    }
    if label >= CIFAR10_CLASSES.len() {
        return Err(contract(format!("label {label} >= 10")));
    }
    let mut out = Vec::with_capacity(CIFAR_RECORD_LEN);
    out.push(label as u8);
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Directory layout: root/<class>/<image>.png, optional root/boxes.csv

pub const BOXES_FILE: &str = "boxes.csv";

/// One parsed `boxes.csv` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoxRecord {
    pub filename: String,
    pub class_index: usize,
    pub bbox: BBox,
}

pub fn parse_box_line(line: &str) -> Result<BoxRecord> {
    let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
    if fields.len() != 6 {
        return Err(Error::Format(format!("box line needs 6 fields: {line:?}")));
    }
    let num = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Format(format!("bad integer {s:?} in box line {line:?}")))
    };
    let bbox = BBox::new(num(fields[2])?, num(fields[3])?, num(fields[4])?, num(fields[5])?)?;
    Ok(BoxRecord { filename: fields[0].to_string(), class_index: num(fields[1])?, bbox })
}

fn read_boxes_file(path: &Path) -> Result<Vec<BoxRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .filter(|l| !l.starts_with("filename,"))
        .map(parse_box_line)
        .collect()
}

/// Maps an inclusive box from one image size to another.
fn rescale_box(b: &BBox, from: (usize, usize), to: (usize, usize)) -> BBox {
    if from == to {
        return *b;
    }
    let sy = to.0 as f64 / from.0 as f64;
    let sx = to.1 as f64 / from.1 as f64;
    let lo = |v: usize, s: f64| (v as f64 * s).floor() as usize;
    let hi = |v: usize, s: f64, n: usize| {
        (((v + 1) as f64 * s).ceil() as usize).saturating_sub(1).min(n - 1)
    };
    let x0 = lo(b.x0, sx).min(to.1 - 1);
    let y0 = lo(b.y0, sy).min(to.0 - 1);
    BBox { x0, y0, x1: hi(b.x1, sx, to.1).max(x0), y1: hi(b.y1, sy, to.0).max(y0) }
}

/// Loads `root/<class>/<image>` with classes in lexicographic order, resizing
/// every image to `size` with bilinear interpolation. Unreadable files are
/// skipped with a warning.
pub fn load_image_directory(root: &Path, size: (usize, usize)) -> Result<LabeledImageSet> {
    let mut class_dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Format(format!("{} has no class subdirectories", root.display())));
    }

    let sidecar = root.join(BOXES_FILE);
    let box_records = if sidecar.exists() { Some(read_boxes_file(&sidecar)?) } else { None };
    let mut box_index: BTreeMap<(usize, String), Vec<BBox>> = BTreeMap::new();
    for rec in box_records.iter().flatten() {
        box_index.entry((rec.class_index, rec.filename.clone())).or_default().push(rec.bbox);
    }

    let mut set = LabeledImageSet {
        images: Vec::new(),
        labels: Vec::new(),
        class_names: class_dirs.clone(),
        boxes: box_records.as_ref().map(|_| Vec::new()),
    };
    let mut skipped = 0usize;
    for (label, class) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(root.join(class))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for path in files {
            let img = match Image::open(&path) {
                Ok(img) => img,
                Err(err) => {
                    tracing::warn!("skipping {}: {err}", path.display());
                    skipped += 1;
                    continue;
                }
            };
            let orig = img.dims();
            if let Some(boxes) = set.boxes.as_mut() {
                let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
                let found = box_index.get(&(label, name)).cloned().unwrap_or_default();
                for b in &found {
                    b.validate(orig.0, orig.1)?;
                }
                boxes.push(found.iter().map(|b| rescale_box(b, orig, size)).collect());
            }
            set.images.push(img.resize(size.0, size.1));
            set.labels.push(label);
        }
    }
    if set.images.is_empty() {
        return Err(Error::Format(format!(
            "no readable images under {} ({skipped} skipped)",
            root.display()
        )));
    }
    set.validate()?;
    Ok(set)
}

/// Writes the set in the directory layout understood by [`load_image_directory`].
pub fn save_image_directory(set: &LabeledImageSet, root: &Path) -> Result<()> {
    set.validate()?;
    for name in &set.class_names {
        fs::create_dir_all(root.join(name))?;
    }
    let mut csv = String::from("filename,class_index,x0,y0,x1,y1\n");
    for (i, (img, &label)) in set.images.iter().zip(&set.labels).enumerate() {
        let filename = format!("{i:06}.png");
        img.save_png(&root.join(&set.class_names[label]).join(&filename))?;
        if let Some(boxes) = &set.boxes {
            for b in &boxes[i] {
                csv.push_str(&format!("{filename},{label},{},{},{},{}\n", b.x0, b.y0, b.x1, b.y1));
            }
        }
    }
    if set.boxes.is_some() {
        fs::write(root.join(BOXES_FILE), csv)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic sprites

/// Per-pixel noise used for backgrounds (and lightly over sprites).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Range of the per-image gray base level.
    pub base_range: (f32, f32),
    /// Std-dev of luminance noise shared by the three channels.
    pub luma_sigma: f32,
    /// Std-dev of independent per-channel noise.
    pub chroma_sigma: f32,
    /// Fraction of images whose base is a uniformly random RGB color
    /// instead of gray.
    #[serde(default)]
    pub colored_fraction: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { base_range: (0.3, 0.7), luma_sigma: 0.12, chroma_sigma: 0.03, colored_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub sprites_per_class: usize,
    /// Range of the sprite's bounding-box area as a fraction of the image.
    pub sprite_area_range: (f64, f64),
    pub background: NoiseSpec,
    pub seed: u64,
}

impl Default for SpriteConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_classes: 10,
            sprites_per_class: 100,
            sprite_area_range: (0.1, 0.4),
            background: NoiseSpec::default(),
            seed: 0,
        }
    }
}

impl SpriteConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sprite_area_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "sprite_area_range must satisfy 0 < min <= max < 1, got ({lo}, {hi})"
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("sprites need at least 2 classes".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config("sprite images must be at least 4x4".into()));
        }
        let n = self.image_size as f64;
        let widest = (hi * n * n * MAX_ASPECT.exp()).sqrt().round();
        if widest > n {
            return Err(Error::Config(format!(
                "sprites up to {hi} of the image can be {widest} pixels wide, larger than {n}"
            )));
        }
        let (b0, b1) = self.background.base_range;
        if !(0.0..=1.0).contains(&b0) || !(b0..=1.0).contains(&b1) {
            return Err(Error::Config("background base_range must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.background.colored_fraction) {
            return Err(Error::Config("background colored_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Largest log aspect ratio of a sprite box.
const MAX_ASPECT: f64 = 0.35;

/// Shapes cycle across classes; hue is unique per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpriteShape {
    Rectangle,
    Ellipse,
    Diamond,
    Triangle,
    Cross,
    Ring,
}

const SHAPES: [SpriteShape; 6] = [
    SpriteShape::Rectangle,
    SpriteShape::Ellipse,
    SpriteShape::Diamond,
    SpriteShape::Triangle,
    SpriteShape::Cross,
    SpriteShape::Ring,
];

impl SpriteShape {
    pub fn for_class(class: usize) -> SpriteShape {
        SHAPES[class % SHAPES.len()]
    }

    fn name(self) -> &'static str {
        match self {
            SpriteShape::Rectangle => "rectangle",
            SpriteShape::Ellipse => "ellipse",
            SpriteShape::Diamond => "diamond",
            SpriteShape::Triangle => "triangle",
            SpriteShape::Cross => "cross",
            SpriteShape::Ring => "ring",
        }
    }

    /// Whether the pixel centered at `(u, v)`, in box-normalized coordinates
    /// `[0, 1]^2`, belongs to the shape. `pw`/`ph` are half-pixel margins.
    fn covers(self, u: f64, v: f64, pw: f64, ph: f64) -> bool {
        let (dx, dy) = ((u - 0.5).abs() * 2.0, (v - 0.5).abs() * 2.0);
        let slack = 2.0 * pw.max(ph);
        match self {
            SpriteShape::Rectangle => true,
            SpriteShape::Ellipse => dx * dx + dy * dy <= 1.0 + slack,
            SpriteShape::Diamond => dx + dy <= 1.0 + slack,
            SpriteShape::Triangle => dx <= v + slack,
            SpriteShape::Cross => dx <= 0.34 || dy <= 0.34,
            SpriteShape::Ring => {
                let r = dx * dx + dy * dy;
                r <= 1.0 + slack && r >= 0.3
            }
        }
    }
}

pub fn sprite_class_name(class: usize, num_classes: usize) -> String {
    let hue = (360.0 * class as f64 / num_classes as f64).round() as u32;
    format!("hue{hue:03}_{}", SpriteShape::for_class(class).name())
}

/// Fully saturated class color, hue evenly spaced around the color wheel.
pub fn sprite_color(class: usize, num_classes: usize) -> [f32; 3] {
    hsv_to_rgb(class as f64 / num_classes as f64, 0.9, 0.95)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Paints one sprite; returns the tight box of the painted pixels and the painted flags.
fn paint_sprite(
    img: &mut Image,
    class: usize,
    num_classes: usize,
    area_frac: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(BBox, Vec<bool>)> {
    let (h, w) = img.dims();
    let target = area_frac * (h * w) as f64;
    let aspect: f64 = (rng.random_range(-MAX_ASPECT..MAX_ASPECT)).exp();
    let bw = ((target * aspect).sqrt().round() as usize).max(2);
    let bh = ((target / bw as f64).round() as usize).max(2);
    if bw > w || bh > h {
        return Err(Error::Config(format!(
            "sprite of {bw}x{bh} pixels does not fit a {w}x{h} image"
        )));
    }
    let x0 = rng.random_range(0..=w - bw);
    let y0 = rng.random_range(0..=h - bh);
    let shape = SpriteShape::for_class(class);
    let color = sprite_color(class, num_classes);
    let (pw, ph) = (0.5 / bw as f64, 0.5 / bh as f64);
    let mut painted = vec![false; h * w];
    let (mut tx0, mut ty0, mut tx1, mut ty1) = (usize::MAX, usize::MAX, 0, 0);
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            let u = (x - x0) as f64 / bw as f64 + pw;
            let v = (y - y0) as f64 / bh as f64 + ph;
            if shape.covers(u, v, pw, ph) {
                for (c, &col) in color.iter().enumerate() {
                    img.set(c, y, x, col);
                }
                painted[y * w + x] = true;
                tx0 = tx0.min(x);
                ty0 = ty0.min(y);
                tx1 = tx1.max(x);
                ty1 = ty1.max(y);
            }
        }
    }
    if tx0 == usize::MAX {
        return Err(Error::Config("sprite painted no pixels".into()));
    }
    Ok((BBox { x0: tx0, y0: ty0, x1: tx1, y1: ty1 }, painted))
}

/// Generates `num_classes * sprites_per_class` images, interleaved by class,
/// each holding one class-identifying sprite on a noise background.
pub fn generate_sprites(config: &SpriteConfig) -> Result<LabeledImageSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.image_size;
    let k = config.num_classes;
    let noise = config.background;
    let luma = Normal::new(0.0, noise.luma_sigma as f64).map_err(|e| Error::Config(e.to_string()))?;
    let chroma =
        Normal::new(0.0, noise.chroma_sigma as f64).map_err(|e| Error::Config(e.to_string()))?;

    let total = k * config.sprites_per_class;
    let mut images = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut boxes = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % k;
        let base = if noise.colored_fraction > 0.0 && rng.random_bool(noise.colored_fraction) {
            [rng.random(), rng.random(), rng.random()]
        } else {
            [rng.random_range(noise.base_range.0..=noise.base_range.1); 3]
        };
        let mut img = Image::filled(n, n, base);
        let (lo, hi) = config.sprite_area_range;
        let area = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let (bbox, _) = paint_sprite(&mut img, class, k, area, &mut rng)?;
        for y in 0..n {
            for x in 0..n {
                let l = luma.sample(&mut rng) as f32;
                for c in 0..3 {
                    let v = img.get(c, y, x) + l + chroma.sample(&mut rng) as f32;
                    img.set(c, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
        images.push(img);
        labels.push(class);
        boxes.push(vec![bbox]);
    }
    let set = LabeledImageSet {
        images,
        labels,
        class_names: (0..k).map(|c| sprite_class_name(c, k)).collect(),
        boxes: Some(boxes),
    };
    set.validate()?;
    Ok(set)
}
