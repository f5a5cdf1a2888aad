//! Single-image kernels: 3×3 "same" convolution, ReLU and 2×2 max pooling.
//!
//! Planes are `channels × height × width`, row-major. Inner loops run along
//! image rows so they vectorize.

use crate::Scalar;

/// 3×3 convolution with zero padding 1 and stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out × in × 3 × 3`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[inline]
fn span(offset: isize, len: usize) -> (usize, usize) {
    // Output coordinates y with 0 <= y + offset < len.
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).min(len as isize).max(0) as usize;
    (lo, hi)
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![T::zero(); out_channels * in_channels * 9],
            bias: vec![T::zero(); out_channels],
        }
    }

    #[inline]
    fn widx(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.in_channels + ci) * 3 + ky) * 3 + kx
    }

    /// Writes `out_channels × h × w` into `out`.
    pub fn forward(&self, input: &[T], h: usize, w: usize, out: &mut [T]) {
        let hw = h * w;
        debug_assert_eq!(input.len(), self.in_channels * hw);
        debug_assert_eq!(out.len(), self.out_channels * hw);
        for co in 0..self.out_channels {
            let plane = &mut out[co * hw..(co + 1) * hw];
            plane.iter_mut().for_each(|v| *v = self.bias[co]);
            for ci in 0..self.in_channels {
                let src = &input[ci * hw..(ci + 1) * hw];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(dy, h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(dx, w);
                        let wv = self.weight[self.widx(co, ci, ky, kx)];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let dst = &mut plane[y * w + x0..y * w + x1];
                            let s = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            for (d, &v) in dst.iter_mut().zip(s) {
                                *d += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates parameter gradients, and input gradients when `dinput` is given.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        input: &[T],
        h: usize,
        w: usize,
        dout: &[T],
        dweight: &mut [T],
        dbias: &mut [T],
        mut dinput: Option<&mut [T]>,
    ) {
        let hw = h * w;
        for co in 0..self.out_channels {
            let g = &dout[co * hw..(co + 1) * hw];
            dbias[co] += g.iter().copied().sum::<T>();
            for ci in 0..self.in_channels {
                let src = &input[ci * hw..(ci + 1) * hw];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(dy, h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(dx, w);
                        let wi = self.widx(co, ci, ky, kx);
                        let wv = self.weight[wi];
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let gr = &g[y * w + x0..y * w + x1];
                            let s = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            for (&a, &b) in gr.iter().zip(s) {
                                acc += a * b;
                            }
                            if let Some(di) = dinput.as_deref_mut() {
                                let d = &mut di
                                    [ci * hw + sy * w + sx0..ci * hw + sy * w + sx0 + (x1 - x0)];
                                for (dv, &a) in d.iter_mut().zip(gr) {
                                    *dv += wv * a;
                                }
                            }
                        }
                        dweight[wi] += acc;
                    }
                }
            }
        }
    }
}

/// Fully connected layer, `weight` is `out × in` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![T::zero(); in_features * out_features],
            bias: vec![T::zero(); out_features],
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        (0..self.out_features)
            .map(|o| {
                let mut acc = self.bias[o];
                for (&wv, &xv) in self.weight[o * self.in_features..(o + 1) * self.in_features]
                    .iter()
                    .zip(x)
                {
                    acc += wv * xv;
                }
                acc
            })
            .collect()
    }

    /// Column `j` of the weight matrix (the weights reading input feature `j`).
    pub fn input_weights(&self, j: usize) -> Vec<T> {
        (0..self.out_features)
            .map(|o| self.weight[o * self.in_features + j])
            .collect()
    }
}

pub fn relu_in_place<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradients where the forward ReLU output was zero.
pub fn relu_backward_in_place<T: Scalar>(activated: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 max pooling, stride 2. Returns pooled planes and the flat argmax of each window.
pub fn maxpool2<T: Scalar>(input: &[T], channels: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut idx = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * y + dy) * w + 2 * x + dx;
                    // Strict comparison: ties resolve to the first window position.
                    if input[cand] > input[best] {
                        best = cand;
                    }
                }
                out.push(input[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward<T: Scalar>(dout: &[T], argmax: &[u32], dinput: &mut [T]) {
    for (&g, &i) in dout.iter().zip(argmax) {
        dinput[i as usize] += g;
    }
}
