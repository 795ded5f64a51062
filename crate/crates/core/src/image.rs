//! Planar (channel-major) float images in `[-1, 1]`.

use crate::error::{invalid, Result};

/// An `h × w × c` image stored channel-major (`c`, then rows, then columns),
/// so a batch tensor `[n, c, h, w]` slices into images without copying.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(invalid!(
                "image buffer has {} values, expected {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(invalid!("non-finite pixel value {bad}"));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    data.push(f(c, i, j));
                }
            }
        }
        Image {
            channels,
            height,
            width,
            data,
        }
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

    /// `(h, w, c)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.height + i) * self.width + j
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        let k = self.index(c, i, j);
        self.data[k] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(invalid!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            ))
        }
    }

    /// 8-bit interleaved RGB (or gray) bytes, `round((v + 1) * 127.5)`.
    pub fn to_u8_interleaved(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..self.height {
            for j in 0..self.width {
                for c in 0..self.channels {
                    out.push(quantize(self.get(c, i, j)));
                }
            }
        }
        out
    }

    pub fn from_u8_interleaved(
        channels: usize,
        height: usize,
        width: usize,
        bytes: &[u8],
    ) -> Result<Self> {
        if bytes.len() != channels * height * width {
            return Err(invalid!(
                "byte buffer has {} values, expected {}",
                bytes.len(),
                channels * height * width
            ));
        }
        Ok(Image::from_fn(channels, height, width, |c, i, j| {
            dequantize(bytes[(i * width + j) * channels + c])
        }))
    }

    /// Snap every value onto the 8-bit grid used by the on-disk format.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| dequantize(quantize(v))).collect();
        Image { data, ..*self }
    }
}

pub fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}
