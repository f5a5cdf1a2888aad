//! Rank-4 activation blocks (`batch × channels × height × width`).

use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("shape mismatch: expected {expected:?}, got {actual:?}")]
pub struct ShapeError {
    pub expected: Vec<usize>,
    pub actual: Vec<usize>,
}

/// Contiguous NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor<T> {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureTensor<T> {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
            data: vec![T::zero(); batch * channels * height * width],
        }
    }

    pub fn from_vec(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
    ) -> Result<Self, ShapeError> {
        if data.len() != batch * channels * height * width {
            return Err(ShapeError {
                expected: vec![batch * channels * height * width],
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
            data,
        })
    }

    /// Stacks equally shaped single-image maps into a batch.
    pub fn stack(images: &[FeatureMap<'_, T>]) -> Result<Self, ShapeError> {
        let Some(first) = images.first() else {
            return Ok(Self::zeros(0, 0, 0, 0));
        };
        let (c, h, w) = first.dims();
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.dims() != (c, h, w) {
                return Err(ShapeError {
                    expected: vec![c, h, w],
                    actual: vec![img.channels, img.height, img.width],
                });
            }
            data.extend_from_slice(img.data);
        }
        Ok(Self {
            batch: images.len(),
            channels: c,
            height: h,
            width: w,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, i: usize, j: usize) -> usize {
        ((b * self.channels + c) * self.height + i) * self.width + j
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, i: usize, j: usize) -> T {
        self.data[self.offset(b, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, i: usize, j: usize, v: T) {
        let o = self.offset(b, c, i, j);
        self.data[o] = v;
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Borrowed view of one image.
    pub fn image(&self, b: usize) -> FeatureMap<'_, T> {
        let len = self.image_len();
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: &self.data[b * len..(b + 1) * len],
        }
    }

    pub fn image_mut(&mut self, b: usize) -> &mut [T] {
        let len = self.image_len();
        &mut self.data[b * len..(b + 1) * len]
    }

    /// Gathers the listed images (in order) into a new batch.
    pub fn select(&self, indices: &[usize]) -> Self {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &b in indices {
            data.extend_from_slice(&self.data[b * len..(b + 1) * len]);
        }
        Self {
            batch: indices.len(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Borrowed `channels × height × width` map for a single image.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap<'a, T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: &'a [T],
}

impl<'a, T: Scalar> FeatureMap<'a, T> {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: &'a [T],
    ) -> Result<Self, ShapeError> {
        if data.len() != channels * height * width {
            return Err(ShapeError {
                expected: vec![channels, height, width],
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &'a [T] {
        let hw = self.spatial();
        &self.data[c * hw..(c + 1) * hw]
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> T {
        self.data[(c * self.height + i) * self.width + j]
    }
}
