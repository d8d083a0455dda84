//! Weak (geometric), strong (photometric) and CutMix perturbations.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::color::{hsv_to_rgb, luma, rgb_to_hsv};
use crate::error::{Error, Result};
use crate::tensor::{Image, LabelMap, Shape};

/// Random resize, crop and horizontal flip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakSpec {
    pub scale_min: f64,
    pub scale_max: f64,
    pub crop_height: usize,
    pub crop_width: usize,
    pub flip_prob: f64,
}

impl WeakSpec {
    pub fn for_shape(shape: Shape) -> Self {
        WeakSpec {
            scale_min: 1.0,
            scale_max: 1.5,
            crop_height: shape.height,
            crop_width: shape.width,
            flip_prob: 0.5,
        }
    }

    pub fn identity(shape: Shape) -> Self {
        WeakSpec {
            scale_min: 1.0,
            scale_max: 1.0,
            flip_prob: 0.0,
            ..Self::for_shape(shape)
        }
    }

    pub fn validate(&self, shape: Shape) -> Result<()> {
        if !(self.scale_min >= 1.0 && self.scale_max >= self.scale_min && self.scale_max.is_finite()) {
            return Err(Error::validation("weak scale range must satisfy 1 <= min <= max"));
        }
        if self.crop_height == 0 || self.crop_width == 0 || self.crop_height > shape.height || self.crop_width > shape.width {
            return Err(Error::validation(format!(
                "crop {}x{} must be non-empty and fit the {}x{} image",
                self.crop_height, self.crop_width, shape.height, shape.width
            )));
        }
        check_prob("flip_prob", self.flip_prob)
    }
}

/// Color jitter, random grayscale and Gaussian blur.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongSpec {
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Maximum hue shift in degrees.
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
}

impl Default for StrongSpec {
    fn default() -> Self {
        StrongSpec {
            jitter_prob: 0.8,
            brightness: 0.5,
            contrast: 0.5,
            saturation: 0.5,
            hue: 90.0,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 1.0,
        }
    }
}

impl StrongSpec {
    pub fn identity() -> Self {
        StrongSpec {
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma_min: 0.0,
            blur_sigma_max: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_prob("jitter_prob", self.jitter_prob)?;
        check_prob("grayscale_prob", self.grayscale_prob)?;
        check_prob("blur_prob", self.blur_prob)?;
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!("{name} strength must be finite and >= 0")));
            }
        }
        if !(self.blur_sigma_min >= 0.0 && self.blur_sigma_max >= self.blur_sigma_min && self.blur_sigma_max.is_finite()) {
            return Err(Error::validation("blur sigma range must satisfy 0 <= min <= max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutMixSpec {
    pub prob: f64,
    pub area_min: f64,
    pub area_max: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
}

impl Default for CutMixSpec {
    fn default() -> Self {
        CutMixSpec {
            prob: 0.5,
            area_min: 0.1,
            area_max: 0.5,
            aspect_min: 0.5,
            aspect_max: 2.0,
        }
    }
}

impl CutMixSpec {
    pub fn validate(&self) -> Result<()> {
        check_prob("cutmix prob", self.prob)?;
        if !(0.0 <= self.area_min && self.area_min <= self.area_max && self.area_max <= 1.0) {
            return Err(Error::validation("cutmix area range must lie in [0, 1]"));
        }
        if !(self.aspect_min > 0.0 && self.aspect_max >= self.aspect_min && self.aspect_max.is_finite()) {
            return Err(Error::validation("cutmix aspect range must be positive"));
        }
        Ok(())
    }
}

/// All perturbation parameters of the consistency branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub weak: WeakSpec,
    pub strong: StrongSpec,
    pub cutmix: CutMixSpec,
}

impl PerturbationSpec {
    pub fn for_shape(shape: Shape) -> Self {
        PerturbationSpec {
            weak: WeakSpec::for_shape(shape),
            strong: StrongSpec::default(),
            cutmix: CutMixSpec::default(),
        }
    }

    pub fn validate(&self, shape: Shape) -> Result<()> {
        self.weak.validate(shape)?;
        self.strong.validate()?;
        self.cutmix.validate()
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::validation(format!("{name} = {p} must lie in [0, 1]")));
    }
    Ok(())
}

/// A sampled weak transform, replayable on any tensor of the source shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub input: Shape,
    pub resized: Shape,
    pub offset_y: usize,
    pub offset_x: usize,
    pub crop: Shape,
    pub flip: bool,
}

impl Geometry {
    pub fn sample<R: Rng + ?Sized>(input: Shape, spec: &WeakSpec, rng: &mut R) -> Self {
        let s = if spec.scale_max > spec.scale_min {
            rng.random_range(spec.scale_min..=spec.scale_max)
        } else {
            spec.scale_min
        };
        let resized = Shape::new(
            ((input.height as f64 * s).round() as usize).max(spec.crop_height),
            ((input.width as f64 * s).round() as usize).max(spec.crop_width),
        );
        let offset_y = rng.random_range(0..=resized.height - spec.crop_height);
        let offset_x = rng.random_range(0..=resized.width - spec.crop_width);
        let flip = rng.random_bool(spec.flip_prob);
        Geometry {
            input,
            resized,
            offset_y,
            offset_x,
            crop: Shape::new(spec.crop_height, spec.crop_width),
            flip,
        }
    }

    /// Output column `x` maps to this column of the resized image.
    fn resized_col(&self, x: usize) -> usize {
        let x = if self.flip { self.crop.width - 1 - x } else { x };
        x + self.offset_x
    }

    fn check(&self, shape: Shape) -> Result<()> {
        if shape != self.input {
            return Err(Error::contract(format!(
                "geometry sampled for {:?} applied to {:?}",
                self.input, shape
            )));
        }
        Ok(())
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn apply_image(&self, image: &Image) -> Result<Image> {
        self.check(image.shape)?;
        let Shape { height: ih, width: iw } = self.input;
        let sy = ih as f64 / self.resized.height as f64;
        let sx = iw as f64 / self.resized.width as f64;
        let mut out = Image::zeros(self.crop);
        for y in 0..self.crop.height {
            let fy = ((y + self.offset_y) as f64 + 0.5) * sy - 0.5;
            let (y0, y1, ty) = lerp_index(fy, ih);
            for x in 0..self.crop.width {
                let fx = (self.resized_col(x) as f64 + 0.5) * sx - 0.5;
                let (x0, x1, tx) = lerp_index(fx, iw);
                for c in 0..Image::CHANNELS {
                    let p = image.plane(c);
                    let top = p[y0 * iw + x0] as f64 * (1.0 - tx) + p[y0 * iw + x1] as f64 * tx;
                    let bot = p[y1 * iw + x0] as f64 * (1.0 - tx) + p[y1 * iw + x1] as f64 * tx;
                    out.set(c, y, x, (top * (1.0 - ty) + bot * ty) as f32);
                }
            }
        }
        Ok(out)
    }

    /// Nearest-neighbour resampling.
    pub fn apply_label(&self, label: &LabelMap) -> Result<LabelMap> {
        self.check(label.shape)?;
        let Shape { height: ih, width: iw } = self.input;
        let mut out = LabelMap::filled(self.crop, 0);
        for y in 0..self.crop.height {
            let sy = nearest_index(y + self.offset_y, self.resized.height, ih);
            for x in 0..self.crop.width {
                let sx = nearest_index(self.resized_col(x), self.resized.width, iw);
                out.set(y, x, label.get(sy, sx));
            }
        }
        Ok(out)
    }
}

fn lerp_index(f: f64, n: usize) -> (usize, usize, f64) {
    let f = f.clamp(0.0, (n - 1) as f64);
    let i0 = f.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, f - i0 as f64)
}

fn nearest_index(dst: usize, out_len: usize, in_len: usize) -> usize {
    (((dst as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
}

pub fn apply_weak<R: Rng + ?Sized>(
    image: &Image,
    label: Option<&LabelMap>,
    spec: &WeakSpec,
    rng: &mut R,
) -> Result<(Image, Option<LabelMap>, Geometry)> {
    let g = Geometry::sample(image.shape, spec, rng);
    let img = g.apply_image(image)?;
    let lab = label.map(|l| g.apply_label(l)).transpose()?;
    Ok((img, lab, g))
}

pub fn apply_strong<R: Rng + ?Sized>(image: &Image, spec: &StrongSpec, rng: &mut R) -> Image {
    let mut out = image.clone();
    if rng.random_bool(spec.jitter_prob) {
        color_jitter(&mut out, spec, rng);
    }
    if rng.random_bool(spec.grayscale_prob) {
        grayscale(&mut out);
    }
    if rng.random_bool(spec.blur_prob) {
        let sigma = rng.random_range(spec.blur_sigma_min..=spec.blur_sigma_max);
        out = gaussian_blur(&out, sigma);
    }
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

fn jitter_factor<R: Rng + ?Sized>(strength: f64, rng: &mut R) -> f64 {
    if strength > 0.0 {
        rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength)
    } else {
        1.0
    }
}

/// Brightness, contrast, saturation, hue, each with its own random factor.
fn color_jitter<R: Rng + ?Sized>(image: &mut Image, spec: &StrongSpec, rng: &mut R) {
    let b = jitter_factor(spec.brightness, rng);
    let c = jitter_factor(spec.contrast, rng);
    let s = jitter_factor(spec.saturation, rng);
    let h = if spec.hue > 0.0 { rng.random_range(-spec.hue..=spec.hue) } else { 0.0 };
    let n = image.shape.pixels();

    for v in &mut image.data {
        *v = (*v as f64 * b).clamp(0.0, 1.0) as f32;
    }
    let mean = (0..n)
        .map(|i| luma(image.data[i], image.data[n + i], image.data[2 * n + i]) as f64)
        .sum::<f64>()
        / n as f64;
    for v in &mut image.data {
        *v = (mean + (*v as f64 - mean) * c).clamp(0.0, 1.0) as f32;
    }
    for i in 0..n {
        let (r, g, bl) = (image.data[i], image.data[n + i], image.data[2 * n + i]);
        let l = luma(r, g, bl) as f64;
        let mut px = [r as f64, g as f64, bl as f64];
        for v in &mut px {
            *v = (l + (*v - l) * s).clamp(0.0, 1.0);
        }
        if h != 0.0 {
            let (hh, ss, vv) = rgb_to_hsv(px[0], px[1], px[2]);
            let (r2, g2, b2) = hsv_to_rgb(hh + h, ss, vv);
            px = [r2, g2, b2];
        }
        for (k, v) in px.into_iter().enumerate() {
            image.data[k * n + i] = v as f32;
        }
    }
}

fn grayscale(image: &mut Image) {
    let n = image.shape.pixels();
    for i in 0..n {
        let l = luma(image.data[i], image.data[n + i], image.data[2 * n + i]);
        for k in 0..3 {
            image.data[k * n + i] = l;
        }
    }
}

/// Separable Gaussian blur with clamped borders; `sigma <= 0` is the identity.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return image.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);

    let Shape { height: h, width: w } = image.shape;
    let mut tmp = image.clone();
    let mut out = image.clone();
    for c in 0..3 {
        let src = image.plane(c);
        let dst = tmp.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, d) in kernel.iter().zip(-r..=r) {
                    let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                    s += k * src[y * w + xx] as f64;
                }
                dst[y * w + x] = s as f32;
            }
        }
        let src = tmp.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, d) in kernel.iter().zip(-r..=r) {
                    let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                    s += k * src[yy * w + x] as f64;
                }
                dst[y * w + x] = s as f32;
            }
        }
    }
    out
}

/// Axis-aligned mixing box, `[y0, y0 + height) x [x0, x0 + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutBox {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl CutBox {
    pub fn empty() -> Self {
        CutBox { y0: 0, x0: 0, height: 0, width: 0 }
    }

    pub fn full(shape: Shape) -> Self {
        CutBox { y0: 0, x0: 0, height: shape.height, width: shape.width }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.height && x >= self.x0 && x < self.x0 + self.width
    }

    /// Box covering roughly `area` of the image with height/width ratio `aspect`.
    pub fn from_fractions(shape: Shape, area: f64, aspect: f64, fy: f64, fx: f64) -> Self {
        let a = area * shape.pixels() as f64;
        let height = ((a * aspect).sqrt().round() as usize).min(shape.height);
        let width = ((a / aspect).sqrt().round() as usize).min(shape.width);
        let y0 = ((shape.height - height) as f64 * fy).round() as usize;
        let x0 = ((shape.width - width) as f64 * fx).round() as usize;
        CutBox { y0, x0, height, width }
    }

    /// `None` when the mixing coin flip fails.
    pub fn sample<R: Rng + ?Sized>(shape: Shape, spec: &CutMixSpec, rng: &mut R) -> Option<Self> {
        if !rng.random_bool(spec.prob) {
            return None;
        }
        let area = Uniform::new_inclusive(spec.area_min, spec.area_max).expect("validated range").sample(rng);
        let aspect = Uniform::new_inclusive(spec.aspect_min, spec.aspect_max)
            .expect("validated range")
            .sample(rng);
        let fy = rng.random::<f64>();
        let fx = rng.random::<f64>();
        Some(Self::from_fractions(shape, area, aspect, fy, fx))
    }

    pub fn mask(&self, shape: Shape) -> Vec<bool> {
        (0..shape.height)
            .flat_map(|y| (0..shape.width).map(move |x| (y, x)))
            .map(|(y, x)| self.contains(y, x))
            .collect()
    }
}

/// Pastes `b` into `a` inside the box; returns the mixed image, label and mask.
pub fn cutmix(
    image_a: &Image,
    image_b: &Image,
    pseudo_a: &LabelMap,
    pseudo_b: &LabelMap,
    cut: &CutBox,
) -> Result<(Image, LabelMap, Vec<bool>)> {
    let shape = image_a.shape;
    if image_b.shape != shape || pseudo_a.shape != shape || pseudo_b.shape != shape {
        return Err(Error::contract("cutmix inputs must share one shape"));
    }
    let mask = cut.mask(shape);
    let n = shape.pixels();
    let mut img = image_a.clone();
    let mut lab = pseudo_a.clone();
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..Image::CHANNELS {
            img.data[c * n + i] = image_b.data[c * n + i];
        }
        lab.data[i] = pseudo_b.data[i];
    }
    Ok((img, lab, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::IGNORE;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(shape: Shape, rng: &mut ChaCha8Rng) -> Image {
        Image::from_data(shape, (0..3 * shape.pixels()).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn random_label(shape: Shape, rng: &mut ChaCha8Rng) -> LabelMap {
        let v = (0..shape.pixels())
            .map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..5) })
            .collect();
        LabelMap::from_data(shape, v).unwrap()
    }

    #[test]
    fn weak_identity() {
        let shape = Shape::new(12, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random_image(shape, &mut rng);
        let lab = random_label(shape, &mut rng);
        let (i2, l2, g) = apply_weak(&img, Some(&lab), &WeakSpec::identity(shape), &mut rng).unwrap();
        assert_eq!(i2, img);
        assert_eq!(l2.unwrap(), lab);
        assert!(!g.flip);
    }

    #[test]
    fn flip_is_involution() {
        let shape = Shape::new(8, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(shape, &mut rng);
        let lab = random_label(shape, &mut rng);
        let spec = WeakSpec { flip_prob: 1.0, ..WeakSpec::identity(shape) };
        let g = Geometry::sample(shape, &spec, &mut rng);
        assert!(g.flip);
        assert_eq!(g.apply_image(&g.apply_image(&img).unwrap()).unwrap(), img);
        assert_eq!(g.apply_label(&g.apply_label(&lab).unwrap()).unwrap(), lab);
        assert_eq!(g.apply_label(&lab).unwrap().get(2, 0), lab.get(2, 8));
    }

    #[test]
    fn geometry_shape_contract() {
        let shape = Shape::new(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Geometry::sample(shape, &WeakSpec::for_shape(shape), &mut rng);
        assert!(g.apply_image(&Image::zeros(Shape::new(4, 4))).is_err());
        assert!(WeakSpec { crop_height: 9, ..WeakSpec::for_shape(shape) }.validate(shape).is_err());
    }

    #[test]
    fn upscaled_label_classes_come_from_crop_window() {
        let shape = Shape::new(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = WeakSpec::for_shape(shape);
        for _ in 0..20 {
            let lab = random_label(shape, &mut rng);
            let g = Geometry::sample(shape, &spec, &mut rng);
            let out = g.apply_label(&lab).unwrap();
            // every output pixel equals the nearest-neighbour source pixel
            for y in 0..16 {
                for x in 0..16 {
                    let xr = if g.flip { 15 - x } else { x } + g.offset_x;
                    let sy = ((y + g.offset_y) as f64 + 0.5) * 16.0 / g.resized.height as f64;
                    let sx = (xr as f64 + 0.5) * 16.0 / g.resized.width as f64;
                    assert_eq!(out.get(y, x), lab.get(sy as usize, sx as usize));
                }
            }
            let before = lab.histogram(5);
            let after = out.histogram(5);
            for c in 0..5 {
                if before[c] == 0 {
                    assert_eq!(after[c], 0);
                }
            }
        }
    }

    #[test]
    fn strong_identity_grayscale_determinism() {
        let shape = Shape::new(6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(shape, &mut rng);
        assert_eq!(apply_strong(&img, &StrongSpec::identity(), &mut rng), img);
        let gray = StrongSpec { grayscale_prob: 1.0, ..StrongSpec::identity() };
        let g = apply_strong(&img, &gray, &mut rng);
        assert_eq!(g.plane(0), g.plane(1));
        assert_eq!(g.plane(1), g.plane(2));
        let a = apply_strong(&img, &StrongSpec::default(), &mut ChaCha8Rng::seed_from_u64(9));
        let b = apply_strong(&img, &StrongSpec::default(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn cutmix_degenerate_boxes() {
        let shape = Shape::new(5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (random_image(shape, &mut rng), random_image(shape, &mut rng));
        let (pa, pb) = (random_label(shape, &mut rng), random_label(shape, &mut rng));
        let (i, l, m) = cutmix(&a, &b, &pa, &pb, &CutBox::from_fractions(shape, 0.0, 1.0, 0.5, 0.5)).unwrap();
        assert!(m.iter().all(|&v| !v));
        assert_eq!((i, l), (a.clone(), pa.clone()));
        let (i, l, _) = cutmix(&a, &b, &pa, &pb, &CutBox::full(shape)).unwrap();
        assert_eq!((i, l), (b, pb));
    }

    proptest! {
        #[test]
        fn cutmix_label_is_masked_select(seed in 0u64..10_000) {
            let shape = Shape::new(9, 11);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random_image(shape, &mut rng), random_image(shape, &mut rng));
            let (pa, pb) = (random_label(shape, &mut rng), random_label(shape, &mut rng));
            let spec = CutMixSpec { prob: 1.0, ..CutMixSpec::default() };
            let cut = CutBox::sample(shape, &spec, &mut rng).unwrap();
            let (img, lab, mask) = cutmix(&a, &b, &pa, &pb, &cut).unwrap();
            for y in 0..9 {
                for x in 0..11 {
                    let i = y * 11 + x;
                    let inside = mask[i];
                    prop_assert_eq!(inside, y >= cut.y0 && y < cut.y0 + cut.height && x >= cut.x0 && x < cut.x0 + cut.width);
                    prop_assert_eq!(lab.data[i], if inside { pb.data[i] } else { pa.data[i] });
                    for c in 0..3 {
                        let src = if inside { &b } else { &a };
                        prop_assert_eq!(img.get(c, y, x), src.get(c, y, x));
                    }
                }
            }
        }

        #[test]
        fn perturbed_intensities_stay_in_range(seed in 0u64..10_000) {
            let shape = Shape::new(10, 10);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(shape, &mut rng);
            let strong = StrongSpec { jitter_prob: 1.0, blur_prob: 1.0, ..StrongSpec::default() };
            let s = apply_strong(&img, &strong, &mut rng);
            let (w, _, _) = apply_weak(&img, None, &WeakSpec::for_shape(shape), &mut rng).unwrap();
            prop_assert!(s.data.iter().chain(&w.data).all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
