//! Deterministic synthetic source/target segmentation datasets.
//!
//! Every image is a flat background (class 0) with 2-5 geometric shapes, one
//! class per shape kind. Source images are rendered clean; target images get
//! a per-image hue rotation, box blur and additive Gaussian noise. Rare classes
//! appear in an exact fraction of the images of every split.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::color::{hsv_to_rgb, rgb_to_hsv};
use crate::error::{Error, IoContext, Result};
use crate::tensor::{Image, LabelMap, Shape, IGNORE};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPEC_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    /// Mean hue rotation in degrees.
    pub hue_offset: f64,
    /// Standard deviation of additive noise in 8-bit intensity units.
    pub noise_sigma: f64,
    /// Box-blur radius in pixels.
    pub blur_radius: usize,
}

impl DomainShift {
    pub fn is_identity(&self) -> bool {
        self.hue_offset == 0.0 && self.noise_sigma == 0.0 && self.blur_radius == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub num_classes: usize,
    pub source_count: usize,
    pub target_count: usize,
    pub target_val_count: usize,
    pub rare_class_ids: Vec<u8>,
    pub rare_fraction: f64,
    pub shift: DomainShift,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            image_height: 64,
            image_width: 64,
            num_classes: 6,
            source_count: 200,
            target_count: 200,
            target_val_count: 50,
            rare_class_ids: vec![5],
            rare_fraction: 0.1,
            shift: DomainShift {
                hue_offset: 10.0,
                noise_sigma: 5.0,
                blur_radius: 1,
            },
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > IGNORE as usize {
            return Err(Error::validation("num_classes must lie in [2, 255)"));
        }
        if self.image_height < 8 || self.image_width < 8 {
            return Err(Error::validation("images must be at least 8x8"));
        }
        if let Some(r) = self.rare_class_ids.iter().find(|&&r| r as usize >= self.num_classes || r == 0) {
            return Err(Error::validation(format!(
                "rare class id {r} must be a foreground class in [1, {})",
                self.num_classes
            )));
        }
        if self.common_classes().is_empty() {
            return Err(Error::validation("at least one non-rare foreground class is required"));
        }
        if !(0.0..=1.0).contains(&self.rare_fraction) {
            return Err(Error::validation("rare_fraction must lie in [0, 1]"));
        }
        if !(self.shift.noise_sigma >= 0.0 && self.shift.hue_offset.is_finite()) {
            return Err(Error::validation("shift parameters must be finite and noise_sigma >= 0"));
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.image_height, self.image_width)
    }

    /// Foreground classes that may appear in every image.
    pub fn common_classes(&self) -> Vec<u8> {
        (1..self.num_classes as u8)
            .filter(|c| !self.rare_class_ids.contains(c))
            .collect()
    }

    /// Number of images out of `count` that receive a rare class.
    pub fn rare_image_count(&self, count: usize) -> usize {
        if self.rare_class_ids.is_empty() {
            0
        } else {
            (self.rare_fraction * count as f64).round() as usize
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    /// Relative to the manifest's directory.
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub domain: Domain,
    pub split: Split,
}

/// Shape kinds, assigned to foreground classes cyclically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Disc,
    Rectangle,
    Triangle,
    Stripe,
    Cross,
}

fn kind_of(class: u8) -> Kind {
    match (class - 1) % 5 {
        0 => Kind::Disc,
        1 => Kind::Rectangle,
        2 => Kind::Triangle,
        3 => Kind::Stripe,
        _ => Kind::Cross,
    }
}

fn class_hue(class: u8, num_classes: usize) -> f64 {
    360.0 * class as f64 / num_classes as f64
}

/// Rasterizes one shape of `class`, painting `color` and the label in place.
fn draw_shape(rng: &mut ChaCha8Rng, image: &mut Image, label: &mut LabelMap, class: u8, color: [f32; 3]) {
    let Shape { height: h, width: w } = image.shape;
    let scale = h.min(w) as f64 / 64.0;
    let cy = rng.random_range(0.1..0.9) * h as f64;
    let cx = rng.random_range(0.1..0.9) * w as f64;
    let inside: Box<dyn Fn(f64, f64) -> bool> = match kind_of(class) {
        Kind::Disc => {
            let r = rng.random_range(5.0..11.0) * scale;
            Box::new(move |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r * r)
        }
        Kind::Rectangle => {
            let hh = rng.random_range(4.0..10.0) * scale;
            let hw = rng.random_range(4.0..10.0) * scale;
            Box::new(move |y, x| (y - cy).abs() <= hh && (x - cx).abs() <= hw)
        }
        Kind::Triangle => {
            let s = rng.random_range(7.0..13.0) * scale;
            let flip = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            // Isosceles, apex up or down.
            Box::new(move |y, x| {
                let t = (y - cy) * flip + s * 0.5;
                t >= 0.0 && t <= s && (x - cx).abs() <= t * 0.6
            })
        }
        Kind::Stripe => {
            let half_len = rng.random_range(12.0..26.0) * scale;
            let half_thick = rng.random_range(1.5..3.0) * scale;
            let vertical = rng.random_bool(0.5);
            Box::new(move |y, x| {
                let (along, across) = if vertical { (y - cy, x - cx) } else { (x - cx, y - cy) };
                along.abs() <= half_len && across.abs() <= half_thick
            })
        }
        Kind::Cross => {
            let arm = rng.random_range(6.0..11.0) * scale;
            let half_thick = rng.random_range(1.5..2.8) * scale;
            Box::new(move |y, x| {
                let (dy, dx) = ((y - cy).abs(), (x - cx).abs());
                (dy <= arm && dx <= half_thick) || (dx <= arm && dy <= half_thick)
            })
        }
    };
    for y in 0..h {
        for x in 0..w {
            if inside(y as f64 + 0.5, x as f64 + 0.5) {
                for (c, &v) in color.iter().enumerate() {
                    image.set(c, y, x, v);
                }
                label.set(y, x, class);
            }
        }
    }
}

fn shape_color(rng: &mut ChaCha8Rng, class: u8, num_classes: usize) -> [f32; 3] {
    let hue = class_hue(class, num_classes) + rng.random_range(-8.0..8.0);
    let (r, g, b) = hsv_to_rgb(hue, rng.random_range(0.55..0.9), rng.random_range(0.55..0.95));
    [r as f32, g as f32, b as f32]
}

/// Renders a clean scene. `rare` forces one rare-class shape, drawn last so it stays visible.
pub fn render_scene(spec: &DatasetSpec, rng: &mut ChaCha8Rng, rare: Option<u8>) -> (Image, LabelMap) {
    let shape = spec.shape();
    let mut image = Image::zeros(shape);
    let mut label = LabelMap::filled(shape, 0);

    let bg_hue = class_hue(0, spec.num_classes) + rng.random_range(-20.0..20.0);
    let bg_sat = rng.random_range(0.1..0.3);
    let bg_val = rng.random_range(0.3..0.55);
    let grad = rng.random_range(-0.12..0.12);
    for y in 0..shape.height {
        let v = (bg_val + grad * (y as f64 / shape.height as f64 - 0.5)).clamp(0.0, 1.0);
        let (r, g, b) = hsv_to_rgb(bg_hue, bg_sat, v);
        for x in 0..shape.width {
            image.set(0, y, x, r as f32);
            image.set(1, y, x, g as f32);
            image.set(2, y, x, b as f32);
        }
    }

    let common = spec.common_classes();
    let n_shapes = rng.random_range(2..=5usize);
    let n_common = if rare.is_some() { n_shapes - 1 } else { n_shapes };
    for _ in 0..n_common {
        let class = common[rng.random_range(0..common.len())];
        let color = shape_color(rng, class, spec.num_classes);
        draw_shape(rng, &mut image, &mut label, class, color);
    }
    if let Some(class) = rare {
        let color = shape_color(rng, class, spec.num_classes);
        draw_shape(rng, &mut image, &mut label, class, color);
    }
    (image, label)
}

/// Target-domain appearance: hue rotation, box blur, then additive Gaussian noise.
pub fn apply_shift(image: &Image, shift: &DomainShift, rng: &mut ChaCha8Rng) -> Image {
    let mut out = image.clone();
    let n = image.shape.pixels();
    let rot = if shift.hue_offset != 0.0 {
        shift.hue_offset + rng.random_range(-10.0..10.0)
    } else {
        0.0
    };
    if rot != 0.0 {
        for i in 0..n {
            let (h, s, v) = rgb_to_hsv(image.data[i] as f64, image.data[n + i] as f64, image.data[2 * n + i] as f64);
            let (r, g, b) = hsv_to_rgb(h + rot, s, v);
            out.data[i] = r as f32;
            out.data[n + i] = g as f32;
            out.data[2 * n + i] = b as f32;
        }
    }
    if shift.blur_radius > 0 {
        out = box_blur(&out, shift.blur_radius);
    }
    if shift.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, shift.noise_sigma / 255.0).expect("valid sigma");
        for v in &mut out.data {
            *v = (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Separable mean filter with clamped borders.
pub fn box_blur(image: &Image, radius: usize) -> Image {
    let Shape { height: h, width: w } = image.shape;
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f32;
    let mut tmp = image.clone();
    let mut out = image.clone();
    for c in 0..3 {
        let src = image.plane(c);
        let dst = tmp.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -r..=r {
                    let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                    s += src[y * w + xx];
                }
                dst[y * w + x] = s * norm;
            }
        }
        let src = tmp.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -r..=r {
                    let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                    s += src[yy * w + x];
                }
                dst[y * w + x] = s * norm;
            }
        }
    }
    out
}

fn sample_rng(seed: u64, domain: Domain, split: Split, index: usize) -> ChaCha8Rng {
    let stream = match (domain, split) {
        (Domain::Source, _) => 1u64,
        (Domain::Target, Split::Train) => 2,
        (Domain::Target, Split::Val) => 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * (1 << 20));
    rng
}

/// Which images (by index) of a `count`-sized split carry a rare class.
fn rare_assignment(spec: &DatasetSpec, domain: Domain, split: Split, count: usize) -> Vec<Option<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5241_5245);
    rng.set_stream(match (domain, split) {
        (Domain::Target, Split::Train) => 10,
        (Domain::Target, _) => 11,
        (Domain::Source, _) => 12,
    });
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut rng);
    let mut out = vec![None; count];
    for &i in idx.iter().take(spec.rare_image_count(count)) {
        out[i] = Some(spec.rare_class_ids[rng.random_range(0..spec.rare_class_ids.len())]);
    }
    out
}

/// One fully rendered sample, before it touches the disk.
pub struct GeneratedSample {
    pub record: SampleRecord,
    pub image: Image,
    pub label: LabelMap,
}

/// Renders the whole dataset in memory.
pub fn render_dataset(spec: &DatasetSpec) -> Result<Vec<GeneratedSample>> {
    spec.validate()?;
    let mut out = Vec::new();
    let groups = [
        (Domain::Source, Split::Train, spec.source_count, "s"),
        (Domain::Target, Split::Train, spec.target_count, "t"),
        (Domain::Target, Split::Val, spec.target_val_count, "v"),
    ];
    for (domain, split, count, prefix) in groups {
        for (i, rare) in rare_assignment(spec, domain, split, count).into_iter().enumerate() {
            let id = format!("{prefix}{i:04}");
            let mut rng = sample_rng(spec.seed, domain, split, i);
            let (clean, label) = render_scene(spec, &mut rng, rare);
            let image = match domain {
                Domain::Source => clean,
                Domain::Target => apply_shift(&clean, &spec.shift, &mut rng),
            };
            out.push(GeneratedSample {
                record: SampleRecord {
                    image_path: PathBuf::from("images").join(format!("{id}.png")),
                    label_path: PathBuf::from("labels").join(format!("{id}.png")),
                    sample_id: id,
                    domain,
                    split,
                },
                image,
                label,
            });
        }
    }
    Ok(out)
}

/// Writes images, labels, `dataset.json` and `manifest.json` under `out_dir`.
pub fn generate(spec: &DatasetSpec, out_dir: &Path) -> Result<Vec<SampleRecord>> {
    let samples = render_dataset(spec)?;
    fs::create_dir_all(out_dir.join("images")).at(out_dir)?;
    fs::create_dir_all(out_dir.join("labels")).at(out_dir)?;
    for s in &samples {
        save_image(&out_dir.join(&s.record.image_path), &s.image)?;
        save_label(&out_dir.join(&s.record.label_path), &s.label)?;
    }
    let records: Vec<SampleRecord> = samples.into_iter().map(|s| s.record).collect();
    let spec_path = out_dir.join(SPEC_FILE);
    fs::write(&spec_path, serde_json::to_string_pretty(spec).expect("spec serializes") + "\n").at(&spec_path)?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&records).expect("records serialize") + "\n",
    )
    .at(&manifest_path)?;
    Ok(records)
}

/// Parses a manifest and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).at(path)?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let records: Vec<SampleRecord> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: Some(e.line()),
        msg: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = std::collections::HashSet::new();
    for r in &records {
        if !seen.insert(r.sample_id.as_str()) {
            return Err(Error::validation(format!("duplicate sample_id `{}` in manifest", r.sample_id)));
        }
        for (what, p) in [("image", &r.image_path), ("label", &r.label_path)] {
            if !base.join(p).is_file() {
                return Err(Error::validation(format!(
                    "sample `{}` references missing {what} file {}",
                    r.sample_id,
                    base.join(p).display()
                )));
            }
        }
    }
    Ok(records)
}

pub fn load_spec(dir: &Path) -> Result<DatasetSpec> {
    let path = dir.join(SPEC_FILE);
    let text = fs::read_to_string(&path).at(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        line: Some(e.line()),
        msg: e.to_string(),
    })
}

pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    let buf = image::RgbImage::from_raw(image.shape.width as u32, image.shape.height as u32, image.to_rgb8())
        .expect("buffer sized from shape");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

pub fn save_label(path: &Path, label: &LabelMap) -> Result<()> {
    let buf = image::GrayImage::from_raw(label.shape.width as u32, label.shape.height as u32, label.data.clone())
        .expect("buffer sized from shape");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let shape = Shape::new(img.height() as usize, img.width() as usize);
    Image::from_rgb8(shape, img.as_raw())
}

pub fn load_label(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: None,
                msg: format!("label PNG must be 8-bit single-channel, found {:?}", other.color()),
            })
        }
    };
    let shape = Shape::new(gray.height() as usize, gray.width() as usize);
    LabelMap::from_data(shape, gray.into_raw())
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: None,
            msg: other.to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            image_height: 32,
            image_width: 32,
            source_count: 6,
            target_count: 10,
            target_val_count: 4,
            rare_fraction: 0.3,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn validation() {
        assert!(DatasetSpec { num_classes: 1, ..small_spec() }.validate().is_err());
        assert!(DatasetSpec { rare_class_ids: vec![9], ..small_spec() }.validate().is_err());
        assert!(DatasetSpec { rare_fraction: 1.5, ..small_spec() }.validate().is_err());
        assert!(DatasetSpec { num_classes: 2, rare_class_ids: vec![1], ..small_spec() }.validate().is_err());
        small_spec().validate().unwrap();
    }

    #[test]
    fn generated_labels_in_range_and_rare_fraction_per_split() {
        let spec = small_spec();
        let samples = render_dataset(&spec).unwrap();
        assert!(samples.iter().all(|s| s.label.data.iter().all(|&v| (v as usize) < spec.num_classes)));
        let rare = |d: Domain, sp: Split| {
            samples
                .iter()
                .filter(|s| s.record.domain == d && s.record.split == sp && s.label.contains(5))
                .count()
        };
        assert_eq!(rare(Domain::Target, Split::Train), 3);
        assert_eq!(rare(Domain::Source, Split::Train), spec.rare_image_count(spec.source_count));
    }

    #[test]
    fn shift_changes_intensities() {
        let spec = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (clean, _) = render_scene(&spec, &mut rng, None);
        let shifted = apply_shift(&clean, &spec.shift, &mut rng);
        let diff: f64 = clean
            .data
            .iter()
            .zip(&shifted.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / clean.data.len() as f64;
        assert!(diff > 0.0);
        let none = DomainShift { hue_offset: 0.0, noise_sigma: 0.0, blur_radius: 0 };
        assert!(none.is_identity());
        assert_eq!(apply_shift(&clean, &none, &mut rng), clean);
    }

    #[test]
    fn empty_and_malformed_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
        fs::write(&p, "[\n  {\"sample_id\": \"a\",\n  oops }\n]").unwrap();
        match load_manifest(&p) {
            Err(Error::Parse { line: Some(3), .. }) => {}
            other => panic!("expected parse error at line 3, got {other:?}"),
        }
    }
}
