//! Image, label-map and probability-map containers shared by every module.
//!
//! All buffers are stored channel-major (`C x H x W`, row-major within a plane).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value for pixels that carry no supervision.
pub const IGNORE: u8 = 255;

/// Spatial extent of an image or map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize) -> Self {
        Shape { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// RGB image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn zeros(shape: Shape) -> Self {
        Image {
            shape,
            data: vec![0.0; Self::CHANNELS * shape.pixels()],
        }
    }

    pub fn from_data(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * shape.pixels() {
            return Err(Error::contract(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                Self::CHANNELS * shape.pixels()
            )));
        }
        Ok(Image { shape, data })
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.shape.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.shape.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let w = self.shape.width;
        let h = self.shape.height;
        self.data[(c * h + y) * w + x] = v;
    }

    /// Interleaved 8-bit RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.shape.pixels();
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                let v = self.data[c * n + i].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_rgb8(shape: Shape, rgb: &[u8]) -> Result<Self> {
        let n = shape.pixels();
        if rgb.len() != 3 * n {
            return Err(Error::contract(format!(
                "rgb buffer has {} bytes, expected {}",
                rgb.len(),
                3 * n
            )));
        }
        let mut data = vec![0.0f32; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[c * n + i] = rgb[3 * i + c] as f32 / 255.0;
            }
        }
        Ok(Image { shape, data })
    }
}

/// Per-pixel class ids, `IGNORE` marks unsupervised pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub shape: Shape,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(shape: Shape, value: u8) -> Self {
        LabelMap {
            shape,
            data: vec![value; shape.pixels()],
        }
    }

    pub fn from_data(shape: Shape, data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.pixels() {
            return Err(Error::contract(format!(
                "label buffer has {} values, expected {}",
                data.len(),
                shape.pixels()
            )));
        }
        Ok(LabelMap { shape, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.shape.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        let w = self.shape.width;
        self.data[y * w + x] = v;
    }

    /// Pixel counts per class, ignoring `IGNORE` and ids `>= num_classes`.
    pub fn histogram(&self, num_classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; num_classes];
        for &v in &self.data {
            if (v as usize) < num_classes {
                h[v as usize] += 1;
            }
        }
        h
    }

    pub fn contains(&self, class: u8) -> bool {
        self.data.contains(&class)
    }
}

/// Softmax output for one image: `C x H x W`, every pixel's column sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub num_classes: usize,
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn from_data(num_classes: usize, shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != num_classes * shape.pixels() {
            return Err(Error::contract(format!(
                "probability buffer has {} values, expected {}",
                data.len(),
                num_classes * shape.pixels()
            )));
        }
        Ok(ProbabilityMap {
            num_classes,
            shape,
            data,
        })
    }

    /// Softmax over the channel axis of a `C x H x W` logit buffer.
    pub fn from_logits<T: Into<f64> + Copy>(num_classes: usize, shape: Shape, logits: &[T]) -> Self {
        let n = shape.pixels();
        assert_eq!(logits.len(), num_classes * n);
        let mut data: Vec<f64> = logits.iter().map(|&v| v.into()).collect();
        let mut max = vec![f64::NEG_INFINITY; n];
        for plane in data.chunks(n) {
            for (m, &v) in max.iter_mut().zip(plane) {
                *m = m.max(v);
            }
        }
        let mut sum = vec![0.0f64; n];
        for plane in data.chunks_mut(n) {
            for ((v, &m), s) in plane.iter_mut().zip(&max).zip(sum.iter_mut()) {
                *v = (*v - m).exp();
                *s += *v;
            }
        }
        for s in sum.iter_mut() {
            *s = 1.0 / *s;
        }
        for plane in data.chunks_mut(n) {
            for (v, &s) in plane.iter_mut().zip(&sum) {
                *v *= s;
            }
        }
        ProbabilityMap {
            num_classes,
            shape,
            data,
        }
    }

    pub fn uniform(num_classes: usize, shape: Shape) -> Self {
        ProbabilityMap {
            num_classes,
            shape,
            data: vec![1.0 / num_classes as f64; num_classes * shape.pixels()],
        }
    }

    #[inline]
    pub fn prob(&self, class: usize, pixel: usize) -> f64 {
        self.data[class * self.shape.pixels() + pixel]
    }

    /// `(argmax class, max probability)` for one pixel; ties resolve to the lowest class id.
    pub fn max_at(&self, pixel: usize) -> (usize, f64) {
        let n = self.shape.pixels();
        let mut best = (0, self.data[pixel]);
        for c in 1..self.num_classes {
            let p = self.data[c * n + pixel];
            if p > best.1 {
                best = (c, p);
            }
        }
        best
    }

    pub fn argmax(&self) -> LabelMap {
        let data = (0..self.shape.pixels())
            .map(|i| self.max_at(i).0 as u8)
            .collect();
        LabelMap {
            shape: self.shape,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip() {
        let shape = Shape::new(2, 3);
        let rgb: Vec<u8> = (0..18).map(|v| (v * 13) as u8).collect();
        let img = Image::from_rgb8(shape, &rgb).unwrap();
        assert_eq!(img.to_rgb8(), rgb);
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let shape = Shape::new(2, 2);
        let logits: Vec<f32> = vec![1.0, -2.0, 30.0, 0.0, 0.5, 0.5, -30.0, 0.0, 2.0, 1.0, 0.0, 0.0];
        let p = ProbabilityMap::from_logits(3, shape, &logits);
        for i in 0..4 {
            let s: f64 = (0..3).map(|c| p.prob(c, i)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.argmax().data, vec![2, 2, 0, 0]);
    }

    #[test]
    fn histogram_skips_ignore() {
        let l = LabelMap::from_data(Shape::new(1, 4), vec![0, 1, IGNORE, 1]).unwrap();
        assert_eq!(l.histogram(3), vec![1, 2, 0]);
    }
}
