use rand::Rng;

use super::{matmul, matmul_acc_bt, matmul_at, Real};

/// 3x3 convolution, stride 2, zero padding 1.
#[derive(Debug, Clone, Copy)]
pub struct Conv3x3S2 {
    pub cin: usize,
    pub cout: usize,
}

impl Conv3x3S2 {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * 9
    }

    pub fn out_dims(h: usize, w: usize) -> (usize, usize) {
        ((h + 1) / 2, (w + 1) / 2)
    }

    fn im2col<T: Real>(&self, input: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (ho, wo) = Self::out_dims(h, w);
        let n = ho * wo;
        for ci in 0..self.cin {
            let plane = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (2 * oy + ky) as isize - 1;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (2 * ox + kx) as isize - 1;
                            *d = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], h: usize, w: usize, dinput: &mut [T]) {
        let (ho, wo) = Self::out_dims(h, w);
        let n = ho * wo;
        for ci in 0..self.cin {
            let plane = &mut dinput[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Returns `(output, im2col buffer)`; the buffer is needed by `backward`.
    pub fn forward<T: Real>(
        &self,
        weight: &[T],
        bias: &[T],
        input: &[T],
        h: usize,
        w: usize,
    ) -> (Vec<T>, Vec<T>) {
        let (ho, wo) = Self::out_dims(h, w);
        let n = ho * wo;
        let k = self.cin * 9;
        let mut cols = vec![T::zero(); k * n];
        self.im2col(input, h, w, &mut cols);
        let mut out = vec![T::zero(); self.cout * n];
        matmul(self.cout, k, n, weight, &cols, &mut out);
        for (co, row) in out.chunks_mut(n).enumerate() {
            let b = bias[co];
            row.iter_mut().for_each(|v| *v += b);
        }
        (out, cols)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        weight: &[T],
        cols: &[T],
        dout: &[T],
        h: usize,
        w: usize,
        dweight: &mut [T],
        dbias: &mut [T],
        need_input_grad: bool,
    ) -> Option<Vec<T>> {
        let (ho, wo) = Self::out_dims(h, w);
        let n = ho * wo;
        let k = self.cin * 9;
        matmul_acc_bt(self.cout, n, k, dout, cols, dweight);
        for (co, row) in dout.chunks(n).enumerate() {
            let mut s = T::zero();
            for &v in row {
                s += v;
            }
            dbias[co] += s;
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); k * n];
        matmul_at(k, self.cout, n, weight, dout, &mut dcols);
        let mut dinput = vec![T::zero(); self.cin * h * w];
        self.col2im(&dcols, h, w, &mut dinput);
        Some(dinput)
    }
}

/// 2x2 transposed convolution, stride 2 (each input pixel expands to a 2x2 block).
///
/// Weight layout is `(cout * 4) x cin`, row `co * 4 + dy * 2 + dx`.
#[derive(Debug, Clone, Copy)]
pub struct ConvT2x2 {
    pub cin: usize,
    pub cout: usize,
}

impl ConvT2x2 {
    pub fn weight_len(&self) -> usize {
        self.cout * 4 * self.cin
    }

    pub fn forward<T: Real>(&self, weight: &[T], bias: &[T], input: &[T], h: usize, w: usize) -> Vec<T> {
        let n = h * w;
        let mut y = vec![T::zero(); self.cout * 4 * n];
        matmul(self.cout * 4, self.cin, n, weight, input, &mut y);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); self.cout * h2 * w2];
        for co in 0..self.cout {
            let b = bias[co];
            let plane = &mut out[co * h2 * w2..(co + 1) * h2 * w2];
            for d in 0..4 {
                let (dy, dx) = (d / 2, d % 2);
                let src = &y[(co * 4 + d) * n..][..n];
                for i in 0..h {
                    let dst = &mut plane[(2 * i + dy) * w2..][..w2];
                    for j in 0..w {
                        dst[2 * j + dx] = src[i * w + j] + b;
                    }
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        weight: &[T],
        input: &[T],
        dout: &[T],
        h: usize,
        w: usize,
        dweight: &mut [T],
        dbias: &mut [T],
    ) -> Vec<T> {
        let n = h * w;
        let (h2, w2) = (2 * h, 2 * w);
        let mut dy = vec![T::zero(); self.cout * 4 * n];
        for co in 0..self.cout {
            let plane = &dout[co * h2 * w2..(co + 1) * h2 * w2];
            let mut s = T::zero();
            for &v in plane {
                s += v;
            }
            dbias[co] += s;
            for d in 0..4 {
                let (oy, ox) = (d / 2, d % 2);
                let dst = &mut dy[(co * 4 + d) * n..][..n];
                for i in 0..h {
                    let src = &plane[(2 * i + oy) * w2..][..w2];
                    for j in 0..w {
                        dst[i * w + j] = src[2 * j + ox];
                    }
                }
            }
        }
        matmul_acc_bt(self.cout * 4, n, self.cin, &dy, input, dweight);
        let mut dinput = vec![T::zero(); self.cin * n];
        matmul_at(self.cin, self.cout * 4, n, weight, &dy, &mut dinput);
        dinput
    }
}

/// 1x1 convolution (per-pixel linear map).
#[derive(Debug, Clone, Copy)]
pub struct Pointwise {
    pub cin: usize,
    pub cout: usize,
}

impl Pointwise {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin
    }

    pub fn forward<T: Real>(&self, weight: &[T], bias: &[T], input: &[T], n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.cout * n];
        matmul(self.cout, self.cin, n, weight, input, &mut out);
        for (co, row) in out.chunks_mut(n).enumerate() {
            let b = bias[co];
            row.iter_mut().for_each(|v| *v += b);
        }
        out
    }

    pub fn backward<T: Real>(
        &self,
        weight: &[T],
        input: &[T],
        dout: &[T],
        n: usize,
        dweight: &mut [T],
        dbias: &mut [T],
    ) -> Vec<T> {
        matmul_acc_bt(self.cout, n, self.cin, dout, input, dweight);
        for (co, row) in dout.chunks(n).enumerate() {
            let mut s = T::zero();
            for &v in row {
                s += v;
            }
            dbias[co] += s;
        }
        let mut dinput = vec![T::zero(); self.cin * n];
        matmul_at(self.cin, self.cout, n, weight, dout, &mut dinput);
        dinput
    }
}

/// Whole-channel dropout with inverted scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDropout<T> {
    /// Multiplier per channel: `0` or `1 / (1 - rate)`.
    pub scale: Vec<T>,
}

impl<T: Real> ChannelDropout<T> {
    pub fn sample<R: Rng + ?Sized>(channels: usize, rate: f64, rng: &mut R) -> Self {
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let scale = (0..channels)
            .map(|_| {
                if rate > 0.0 && rng.random::<f64>() < rate {
                    T::zero()
                } else if rate > 0.0 {
                    keep
                } else {
                    T::one()
                }
            })
            .collect();
        ChannelDropout { scale }
    }

    pub fn identity(channels: usize) -> Self {
        ChannelDropout {
            scale: vec![T::one(); channels],
        }
    }

    /// Applies the mask in place; also used for the backward pass.
    pub fn apply(&self, data: &mut [T]) {
        let n = data.len() / self.scale.len();
        for (c, plane) in data.chunks_mut(n).enumerate() {
            let s = self.scale[c];
            if s != T::one() {
                plane.iter_mut().for_each(|v| *v = *v * s);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_naive(cin: usize, cout: usize, w: &[f64], b: &[f64], x: &[f64], h: usize, wd: usize) -> Vec<f64> {
        let (ho, wo) = Conv3x3S2::out_dims(h, wd);
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += w[((co * cin + ci) * 3 + ky) * 3 + kx]
                                        * x[(ci * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let layer = Conv3x3S2 { cin: 2, cout: 3 };
        let w: Vec<f64> = (0..layer.weight_len()).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
        let b = vec![0.1, -0.2, 0.3];
        let (h, wd) = (5, 6);
        let x: Vec<f64> = (0..2 * h * wd).map(|i| (i as f64 * 0.37).cos()).collect();
        let (got, _) = layer.forward(&w, &b, &x, h, wd);
        let want = conv_naive(2, 3, &w, &b, &x, h, wd);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn convt_places_blocks() {
        let layer = ConvT2x2 { cin: 1, cout: 1 };
        let w = vec![1.0, 2.0, 3.0, 4.0];
        let out = layer.forward(&w, &[0.5], &[1.0f64, 10.0], 1, 2);
        assert_eq!(out, vec![1.5, 2.5, 10.5, 20.5, 3.5, 4.5, 30.5, 40.5]);
    }

    #[test]
    fn zero_rate_dropout_is_identity() {
        let mut rng = rand::rng();
        let d = ChannelDropout::<f32>::sample(8, 0.0, &mut rng);
        assert_eq!(d, ChannelDropout::identity(8));
    }
}
