//! Small 2-D grids for activation maps and binary masks.

use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> Grid<T> {
    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Self {
            height,
            width,
            values: vec![v; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<T>) -> Self {
        assert_eq!(values.len(), height * width, "grid size");
        Self {
            height,
            width,
            values,
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.values[i * self.width + j]
    }

    pub fn min_max(&self) -> (T, T) {
        self.values
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BitGrid {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.width + j] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Downsamples by `factor`, marking a cell when any covered pixel is set
    /// (what max pooling propagates).
    pub fn downsample_any(&self, factor: usize) -> BitGrid {
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = BitGrid::empty(h, w);
        for i in 0..h {
            for j in 0..w {
                let hit = (0..factor)
                    .any(|di| (0..factor).any(|dj| self.get(i * factor + di, j * factor + dj)));
                out.set(i, j, hit);
            }
        }
        out
    }

    /// Nearest-neighbour upsampling by `factor`.
    pub fn upsample(&self, factor: usize) -> BitGrid {
        let mut out = BitGrid::empty(self.height * factor, self.width * factor);
        for i in 0..out.height {
            for j in 0..out.width {
                out.set(i, j, self.get(i / factor, j / factor));
            }
        }
        out
    }

    /// Intersection over union; two empty grids count as a perfect match.
    pub fn iou(&self, other: &BitGrid) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}
